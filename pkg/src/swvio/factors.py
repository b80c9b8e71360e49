"""Residuals and Jacobians for visual and IMU factors.

Visual Jacobians are computed in three levels so intermediate results are
reused exactly once per entity: keyframe level (rotation matrices, one per
keyframe), feature level (anchor-ray point and world point, one per
feature), observation level (two phases: feature-coordinate terms, then
rotation application producing the final blocks).  The loop nest is
features-outer / observations-inner, so feature reuse is maximized;
counters make the reuse accounting checkable.

IMU Jacobians are block-sparse: of the 50 3x3 blocks of the 15x30
Jacobian, only 14 are dense; 4 are signed identities and 32 are zero and
are never stored.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import (quat_conj, quat_exp, quat_left, quat_mul, quat_right,
                       quat_to_rot, skew, so3_right_jacobian)
from .model import KF_DIM, WindowProblem

Z_MIN = 1e-6

# (row group, column group) keys of the dense IMU blocks; columns are
# p_i,th_i,v_i,ba_i,bg_i,p_j,th_j,v_j,ba_j,bg_j
IMU_ROW_GROUPS = ("p", "th", "v", "ba", "bg")
IMU_COL_GROUPS = ("p_i", "th_i", "v_i", "ba_i", "bg_i",
                  "p_j", "th_j", "v_j", "ba_j", "bg_j")
IMU_DENSE_KEYS = (
    ("p", "p_i"), ("p", "th_i"), ("p", "v_i"), ("p", "ba_i"), ("p", "bg_i"), ("p", "p_j"),
    ("th", "th_i"), ("th", "bg_i"), ("th", "th_j"),
    ("v", "th_i"), ("v", "v_i"), ("v", "ba_i"), ("v", "bg_i"), ("v", "v_j"),
)
IMU_IDENTITY_KEYS = (("ba", "ba_i", -1.0), ("ba", "ba_j", 1.0),
                     ("bg", "bg_i", -1.0), ("bg", "bg_j", 1.0))


class CheiralityError(Exception):
    """Transformed point is behind or on the camera plane (z <= z_min)."""

    def __init__(self, feature_id, kf_id, z):
        super().__init__(f"feature {feature_id} at kf {kf_id}: z={z:.3g} <= z_min")
        self.feature_id = feature_id
        self.kf_id = kf_id
        self.z = z


@dataclass
class ObservationBlocks:
    feature_id: int
    kf_id: int
    anchor_kf: int
    J_pose_anchor: np.ndarray   # 2x6
    J_pose_obs: np.ndarray      # 2x6
    J_invdepth: np.ndarray      # 2x1
    residual: np.ndarray        # 2


@dataclass
class VisualJacobianBlocks:
    blocks: list
    skipped: list               # (feature_id, kf_id, z) cheirality diagnostics
    n_keyframe_level_evals: int = 0
    n_feature_level_evals: int = 0
    n_observation_level_evals: int = 0


def _project(P):
    return np.array([P[0] / P[2], P[1] / P[2]])


def _proj_jacobian(P):
    x, y, z = P
    return np.array([[1.0 / z, 0.0, -x / (z * z)],
                     [0.0, 1.0 / z, -y / (z * z)]])


def visual_residual(window: WindowProblem, obs, z_min: float = Z_MIN) -> np.ndarray:
    """Whitened 2-vector reprojection error of one observation.

    r = (project(R_j^T (R_i * m/lambda + p_i - p_j)) - uv_j) / sigma with
    m the anchor ray [u,v,1].  Raises CheiralityError when the point lands
    at z <= z_min in the observing camera.
    """
    feat = window.feature_by_id(obs.feature_id)
    kf_i = window.keyframe_by_id(feat.anchor_kf)
    kf_j = window.keyframe_by_id(obs.kf_id)
    m = np.array([feat.anchor_uv[0], feat.anchor_uv[1], 1.0])
    P_a = m / feat.inv_depth
    P_w = quat_to_rot(kf_i.q) @ P_a + kf_i.p
    P_c = quat_to_rot(kf_j.q).T @ (P_w - kf_j.p)
    if P_c[2] <= z_min:
        raise CheiralityError(obs.feature_id, obs.kf_id, P_c[2])
    return (_project(P_c) - obs.uv) / obs.sigma


def visual_jacobians(window: WindowProblem, z_min: float = Z_MIN) -> VisualJacobianBlocks:
    """All visual residuals and Jacobian blocks, three-level dataflow.

    Degenerate observations (cheirality) are skipped and recorded in the
    diagnostics list rather than aborting the evaluation.
    """
    # keyframe level: rotation matrix of every keyframe, once each
    R = {}
    for kf in window.keyframes:
        R[kf.id] = quat_to_rot(kf.q)
    n_kf_evals = len(window.keyframes)

    obs_by_feature = {f.id: [] for f in window.features}
    for obs in window.observations:
        obs_by_feature[obs.feature_id].append(obs)

    blocks = []
    skipped = []
    n_feat_evals = 0
    n_obs_evals = 0
    # features outer, observations inner: feature-level terms are reused
    # across all observations of the feature
    for feat in window.features:
        kf_a = window.keyframe_by_id(feat.anchor_kf)
        R_a = R[feat.anchor_kf]
        m = np.array([feat.anchor_uv[0], feat.anchor_uv[1], 1.0])
        P_a = m / feat.inv_depth            # anchor-camera point
        P_w = R_a @ P_a + kf_a.p            # world point
        dPa_dlam = -m / (feat.inv_depth ** 2)
        n_feat_evals += 1

        for obs in obs_by_feature[feat.id]:
            kf_j = window.keyframe_by_id(obs.kf_id)
            R_j = R[obs.kf_id]
            # phase 1: feature-coordinate terms
            P_c = R_j.T @ (P_w - kf_j.p)
            if P_c[2] <= z_min:
                skipped.append((feat.id, obs.kf_id, float(P_c[2])))
                continue
            Jp = _proj_jacobian(P_c) / obs.sigma
            res = (_project(P_c) - obs.uv) / obs.sigma
            # phase 2: rotation application -> final blocks
            JRjT = Jp @ R_j.T
            J_pose_anchor = np.hstack([JRjT, -JRjT @ R_a @ skew(P_a)])
            J_pose_obs = np.hstack([-JRjT, Jp @ skew(P_c)])
            J_invdepth = (JRjT @ R_a @ dPa_dlam).reshape(2, 1)
            blocks.append(ObservationBlocks(
                feature_id=feat.id, kf_id=obs.kf_id, anchor_kf=feat.anchor_kf,
                J_pose_anchor=J_pose_anchor, J_pose_obs=J_pose_obs,
                J_invdepth=J_invdepth, residual=res))
            n_obs_evals += 1

    return VisualJacobianBlocks(
        blocks=blocks, skipped=skipped,
        n_keyframe_level_evals=n_kf_evals,
        n_feature_level_evals=n_feat_evals,
        n_observation_level_evals=n_obs_evals)


# ---------------------------------------------------------------------------
# IMU factor


def _corrected_deltas(factor, ba_i, bg_i):
    dba = ba_i - factor.lin_ba
    dbg = bg_i - factor.lin_bg
    bj = factor.bias_jacobians
    dp = factor.dp_hat + bj["dp_dba"] @ dba + bj["dp_dbg"] @ dbg
    dv = factor.dv_hat + bj["dv_dba"] @ dba + bj["dv_dbg"] @ dbg
    theta = bj["dq_dbg"] @ dbg
    dq = quat_mul(factor.dq_hat, quat_exp(theta))
    return dp, dv, dq, theta


def imu_residual(factor, state_i, state_j, gravity) -> np.ndarray:
    """Whitened 15-vector preintegration error [r_p, r_th, r_v, r_ba, r_bg].

    Preintegrated deltas get a first-order bias correction through the
    factor's stored bias Jacobians before differencing.
    """
    dp, dv, dq, _ = _corrected_deltas(factor, state_i.ba, state_i.bg)
    R_iT = quat_to_rot(state_i.q).T
    dt = factor.dt
    g = gravity
    r_p = R_iT @ (state_j.p - state_i.p - state_i.v * dt - 0.5 * g * dt * dt) - dp
    q_err = quat_mul(quat_conj(dq), quat_mul(quat_conj(state_i.q), state_j.q))
    r_th = 2.0 * q_err[1:]
    r_v = R_iT @ (state_j.v - state_i.v - g * dt) - dv
    r_ba = state_j.ba - state_i.ba
    r_bg = state_j.bg - state_i.bg
    r = np.concatenate([r_p, r_th, r_v, r_ba, r_bg])
    return factor.sqrt_info @ r


@dataclass
class ImuJacobianSparse:
    """Block-sparse 15x30 IMU Jacobian: 14 dense 3x3 blocks stored, 4
    signed identities and 32 zero blocks implicit.  Blocks and residual
    are unwhitened; whitening (sqrt_info) is applied at assembly."""
    kf_i: int
    kf_j: int
    dense: dict                 # (row_group, col_group) -> 3x3
    residual: np.ndarray        # 15, unwhitened
    sqrt_info: np.ndarray = field(repr=False, default=None)

    STORED_BLOCKS = len(IMU_DENSE_KEYS)            # 14
    IDENTITY_BLOCKS = len(IMU_IDENTITY_KEYS)       # 4
    TOTAL_BLOCKS = len(IMU_ROW_GROUPS) * len(IMU_COL_GROUPS)  # 50

    def densify(self) -> np.ndarray:
        J = np.zeros((KF_DIM, 2 * KF_DIM))
        row = {g: 3 * i for i, g in enumerate(IMU_ROW_GROUPS)}
        col = {g: 3 * i for i, g in enumerate(IMU_COL_GROUPS)}
        for (rg, cg), B in self.dense.items():
            J[row[rg]:row[rg] + 3, col[cg]:col[cg] + 3] = B
        for rg, cg, sign in IMU_IDENTITY_KEYS:
            J[row[rg]:row[rg] + 3, col[cg]:col[cg] + 3] = sign * np.eye(3)
        return J

    def whitened(self):
        """(sqrt_info @ J_dense, sqrt_info @ residual)."""
        return self.sqrt_info @ self.densify(), self.sqrt_info @ self.residual

    @staticmethod
    def stored_word_fraction() -> float:
        """Stored words over dense words: 14*9 / (15*30)."""
        return (ImuJacobianSparse.STORED_BLOCKS * 9) / (KF_DIM * 2 * KF_DIM)


def imu_jacobian(factor, state_i, state_j, gravity) -> ImuJacobianSparse:
    """Dense blocks of the IMU Jacobian plus the unwhitened residual.

    Stage 1 evaluates the three parallel row groups (position, rotation,
    velocity); stage 2 evaluates the residual.  Bias rows are pure state
    differences, so their blocks are the implicit signed identities.
    """
    dp, dv, dq, theta = _corrected_deltas(factor, state_i.ba, state_i.bg)
    R_i = quat_to_rot(state_i.q)
    R_iT = R_i.T
    dt = factor.dt
    g = gravity
    bj = factor.bias_jacobians

    u_p = state_j.p - state_i.p - state_i.v * dt - 0.5 * g * dt * dt
    u_v = state_j.v - state_i.v - g * dt

    dense = {}
    # position rows
    dense[("p", "p_i")] = -R_iT
    dense[("p", "th_i")] = skew(R_iT @ u_p)
    dense[("p", "v_i")] = -R_iT * dt
    dense[("p", "ba_i")] = -bj["dp_dba"]
    dense[("p", "bg_i")] = -bj["dp_dbg"]
    dense[("p", "p_j")] = R_iT

    # rotation rows: r_th = 2 vec(dq^-1 * q_i^-1 * q_j)
    q_ij = quat_mul(quat_conj(state_i.q), state_j.q)
    dense[("th", "th_i")] = -(quat_left(quat_conj(dq)) @ quat_right(q_ij))[1:, 1:]
    dense[("th", "th_j")] = quat_left(quat_mul(quat_conj(dq), q_ij))[1:, 1:]
    # exact through the right Jacobian of the exponential at the
    # first-order bias correction point
    Jr = so3_right_jacobian(theta)
    dense[("th", "bg_i")] = -(quat_right(quat_mul(quat_conj(dq), q_ij))[1:, 1:]
                              @ Jr @ bj["dq_dbg"])

    # velocity rows
    dense[("v", "th_i")] = skew(R_iT @ u_v)
    dense[("v", "v_i")] = -R_iT
    dense[("v", "ba_i")] = -bj["dv_dba"]
    dense[("v", "bg_i")] = -bj["dv_dbg"]
    dense[("v", "v_j")] = R_iT

    q_err = quat_mul(quat_conj(dq), q_ij)
    residual = np.concatenate([
        R_iT @ u_p - dp,
        2.0 * q_err[1:],
        R_iT @ u_v - dv,
        state_j.ba - state_i.ba,
        state_j.bg - state_i.bg,
    ])
    return ImuJacobianSparse(kf_i=factor.kf_i, kf_j=factor.kf_j, dense=dense,
                             residual=residual, sqrt_info=factor.sqrt_info)
