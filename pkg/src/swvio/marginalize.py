"""Sliding-window prior generation and compressed storage for S.

The drop set is the departing (oldest) keyframe plus the features
anchored there.  Features anchored elsewhere are eliminated first with
the standard Schur kernel, so their information lands in the A and Z
blocks rather than the drop set; the remaining system is partitioned as

    [ M11  M12 ] [dx_drop]   [b_drop]      M11: anchored features (diag)
    [ M21  M22 ] [       ] = [      ]      M22: departing keyframe 15x15
    [    Z     ] [dx_ret ]   [b_ret ]

and the prior is H = A - Z M^-1 Z^T, b' = b_ret - Z M^-1 b_drop, computed
in two stages that reuse the solver kernels: the diagonal M11 eliminated
by schur_eliminate_blocks, the 15x15 M22 by cholesky plus triangular
solves.

StructuredS stores the camera and IMU+prior contributions to S
separately: IMU+prior in 15x15 block-tridiagonal form (lower half of the
diagonal blocks, 120 words each; dense sub-diagonal blocks, 225 words),
camera in 6x6 pose sub-blocks (21-word symmetric halves on the diagonal,
36-word dense blocks for co-observing pairs inside the span).  Symmetric
upper halves are never stored.
"""

from dataclasses import dataclass, field

import numpy as np

from . import linsolve
from .model import KF_DIM, POSE_DIM, PriorFactor, WindowProblem

PATTERN_TOL = 1e-12


class PatternViolation(Exception):
    """A tagged contribution falls outside its declared structure."""


class ConditioningError(Exception):
    """H_prior has eigenvalues below the clamping tolerance."""


@dataclass
class MarginalizationPartition:
    drop_features: list         # feature ids anchored at the departing kf
    drop_state: int             # departing keyframe id
    retained_ids: list          # retained keyframe ids, in order
    M11: np.ndarray             # diagonal of the anchored-feature block
    M12: np.ndarray             # d_f x 15 coupling to the departing state
    M22: np.ndarray             # 15x15 departing-state block
    Z: np.ndarray               # n_r x (d_f + 15); transpose implicit
    A: np.ndarray               # n_r x n_r retained block
    b_drop: np.ndarray
    b_retain: np.ndarray
    retained_lin_states: tuple
    keep_counters: linsolve.SchurCounters = None
    stage1_counters: linsolve.SchurCounters = None

    def M_dense(self) -> np.ndarray:
        d = self.M11.shape[0]
        M = np.zeros((d + KF_DIM, d + KF_DIM))
        M[:d, :d] = np.diag(self.M11)
        M[:d, d:] = self.M12
        M[d:, :d] = self.M12.T
        M[d:, d:] = self.M22
        return M


def build_partition(window: WindowProblem, departing_kf: int,
                    damping: float = 0.0) -> MarginalizationPartition:
    """Assemble the window's normal equations and partition them around
    the departing keyframe.  Features anchored elsewhere are eliminated
    here (shared Schur kernel) and contribute through A and Z."""
    kf_ids = sorted(kf.id for kf in window.keyframes)
    if departing_kf not in kf_ids:
        raise ValueError(f"departing keyframe {departing_kf} not in window")

    jac = linsolve.evaluate_jacobians(window)
    blocks = linsolve.assemble(window, jac, damping)
    order = blocks.ordering

    drop_feat = sorted(f.id for f in window.features
                       if f.anchor_kf == departing_kf)
    keep_feat = [fid for fid in order.feat_ids if fid not in set(drop_feat)]
    drop_cols = [order.feat_col(f) for f in drop_feat]
    keep_cols = [order.feat_col(f) for f in keep_feat]

    S_keep, b_keep, keep_counters = linsolve.schur_eliminate_blocks(
        blocks.U[keep_cols] if keep_cols else np.zeros(0),
        blocks.W[:, keep_cols] if keep_cols else np.zeros((order.n_s, 0)),
        blocks.V, blocks.b_s,
        blocks.b_f[keep_cols] if keep_cols else np.zeros(0))

    drop_slice = order.kf_state_slice(departing_kf)
    retained_ids = [k for k in kf_ids if k != departing_kf]
    ret_idx = np.concatenate([np.arange(order.kf_state_slice(k).start,
                                        order.kf_state_slice(k).stop)
                              for k in retained_ids])

    W_drop = blocks.W[:, drop_cols] if drop_cols else np.zeros((order.n_s, 0))
    M11 = blocks.U[drop_cols] if drop_cols else np.zeros(0)
    M12 = W_drop[drop_slice, :].T
    M22 = S_keep[drop_slice, drop_slice]
    Z = np.hstack([W_drop[ret_idx, :], S_keep[np.ix_(ret_idx, np.arange(
        drop_slice.start, drop_slice.stop))]])
    A = S_keep[np.ix_(ret_idx, ret_idx)]
    b_drop = np.concatenate([
        blocks.b_f[drop_cols] if drop_cols else np.zeros(0),
        b_keep[drop_slice]])
    b_retain = b_keep[ret_idx]

    return MarginalizationPartition(
        drop_features=drop_feat, drop_state=departing_kf,
        retained_ids=retained_ids, M11=M11, M12=M12, M22=M22, Z=Z, A=A,
        b_drop=b_drop, b_retain=b_retain,
        retained_lin_states=tuple(window.keyframe_by_id(k)
                                  for k in retained_ids),
        keep_counters=keep_counters)


def marginalize(partition: MarginalizationPartition,
                eig_tol: float = 1e-9) -> PriorFactor:
    """Two-stage elimination of the drop set; returns the prior factor on
    the retained keyframes.

    Stage 1 eliminates the anchored-feature diagonal with the same
    routine as schur_eliminate; stage 2 eliminates the 15x15 departing
    block via cholesky and triangular solves.  H is symmetrized and
    eigenvalue-floored at zero (negatives above -eig_tol*trace clamp to
    zero, anything lower raises ConditioningError).
    """
    p = partition
    d_f = p.M11.shape[0]
    n_r = p.A.shape[0]

    Z_f = p.Z[:, :d_f]
    Z_kf = p.Z[:, d_f:]
    W1 = np.vstack([p.M12.T, Z_f])                      # (15+n_r) x d_f
    V1 = np.zeros((KF_DIM + n_r, KF_DIM + n_r))
    V1[:KF_DIM, :KF_DIM] = p.M22
    V1[:KF_DIM, KF_DIM:] = Z_kf.T
    V1[KF_DIM:, :KF_DIM] = Z_kf
    V1[KF_DIM:, KF_DIM:] = p.A
    b1 = np.concatenate([p.b_drop[d_f:], p.b_retain])

    S1, b1p, c1 = linsolve.schur_eliminate_blocks(
        p.M11, W1, V1, b1, p.b_drop[:d_f])
    partition.stage1_counters = c1

    D = S1[:KF_DIM, :KF_DIM]
    C = S1[:KF_DIM, KF_DIM:]
    Arr = S1[KF_DIM:, KF_DIM:]
    chol = linsolve.cholesky(D)
    X = linsolve.forward_substitution_matrix(chol.L, C)
    y = linsolve.forward_substitution(chol.L, b1p[:KF_DIM])
    H = Arr - X.T @ X
    b_prior = b1p[KF_DIM:] - X.T @ y

    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    tol = eig_tol * max(float(np.trace(H)), 1.0)
    if w[0] < -tol:
        raise ConditioningError(
            f"H_prior eigenvalue {w[0]:.3g} below -{tol:.3g}")
    if w[0] < 0.0:
        w = np.clip(w, 0.0, None)
        H = V @ np.diag(w) @ V.T
        H = 0.5 * (H + H.T)

    return PriorFactor(H_prior=H, b_prior=b_prior,
                       state_ids=tuple(p.retained_ids),
                       lin_states=p.retained_lin_states)


# ---------------------------------------------------------------------------
# structured storage for S


@dataclass
class CompressionMeta:
    """Per-class contribution matrices of S plus structure metadata.

    Mirrors the accelerator's storage discipline: the two contributions
    are accumulated separately and S is their read-time sum, so the sum
    of the parts reproduces the stored S bit-for-bit.
    """
    kf_ids: list
    co_obs_span: int
    camera_part: np.ndarray
    imu_prior_part: np.ndarray


def contribution_split(blocks: linsolve.SchurBlocks, S: np.ndarray,
                       co_obs_span: int):
    """(meta, S_storable) for compress().

    The camera contribution is the damped visual pose block minus the
    Schur fill, S - (V - V_camera); the IMU+prior contribution is
    V - V_camera.  S_storable = camera + imu_prior is the form the
    storage pipeline carries; it agrees with the numeric S to within one
    rounding of the contribution sum.
    """
    imu = blocks.V - blocks.V_camera
    cam = S - imu
    meta = CompressionMeta(kf_ids=list(blocks.ordering.kf_ids),
                           co_obs_span=co_obs_span, camera_part=cam,
                           imu_prior_part=imu)
    return meta, cam + imu


@dataclass
class StructuredS:
    """Compressed symmetric storage of S, contributions kept per class.

    Layout (one 8-byte word per float):
      imu_diag:  K packed lower halves of 15x15 blocks, 120 words each
      imu_sub:   K-1 dense 15x15 sub-diagonal blocks, 225 words each
      cam_diag:  K packed lower halves of 6x6 pose blocks, 21 words each
      cam_off:   one dense 6x6 block (36 words) per pair in pair_list
    """
    kf_ids: list
    co_obs_span: int
    imu_diag: list
    imu_sub: list
    cam_diag: list
    pair_list: list
    cam_off: list

    def word_counts(self) -> dict:
        K = len(self.kf_ids)
        return {
            "imu_diag": 120 * K,
            "imu_sub": 225 * (K - 1),
            "cam_diag": 21 * K,
            "cam_off": 36 * len(self.pair_list),
            "total": 120 * K + 225 * (K - 1) + 21 * K + 36 * len(self.pair_list),
        }


def _pack_lower(B):
    return B[np.tril_indices(B.shape[0])].copy()


def _unpack_lower(v, n):
    B = np.zeros((n, n))
    B[np.tril_indices(n)] = v
    return B + np.tril(B, -1).T


def compress(S_dense: np.ndarray, meta: CompressionMeta) -> StructuredS:
    """Store S in the declared structures, contributions kept separate.

    S_dense must be the sum of the tagged contribution matrices (the
    storable form from contribution_split); PatternViolation is raised
    when a contribution has significant mass outside its pattern.
    """
    kf_ids = list(meta.kf_ids)
    K = len(kf_ids)
    if S_dense.shape != (KF_DIM * K, KF_DIM * K):
        raise ValueError("S dimension does not match keyframe count")
    cam = meta.camera_part
    imu = meta.imu_prior_part
    if np.any(cam + imu != S_dense):
        raise ValueError("S is not the sum of its tagged contributions; "
                         "compress the storable form from contribution_split")
    tol = PATTERN_TOL * max(1.0, float(np.max(np.abs(S_dense))))

    def blk(M, a, b, dim=KF_DIM):
        return M[dim * a:dim * (a + 1), dim * b:dim * (b + 1)]

    imu_diag = []
    imu_sub = []
    covered_imu = np.zeros_like(imu, dtype=bool)
    for a in range(K):
        imu_diag.append(_pack_lower(blk(imu, a, a)))
        covered_imu[KF_DIM * a:KF_DIM * (a + 1), KF_DIM * a:KF_DIM * (a + 1)] = True
    for a in range(K - 1):
        imu_sub.append(blk(imu, a + 1, a).copy())
        covered_imu[KF_DIM * (a + 1):KF_DIM * (a + 2), KF_DIM * a:KF_DIM * (a + 1)] = True
        covered_imu[KF_DIM * a:KF_DIM * (a + 1), KF_DIM * (a + 1):KF_DIM * (a + 2)] = True
    stray = np.max(np.abs(imu[~covered_imu])) if (~covered_imu).any() else 0.0
    if stray > tol:
        raise PatternViolation(
            f"IMU/prior contribution of magnitude {stray:.3g} outside the "
            "block-tridiagonal structure")

    def cam_blk(a, b):
        return cam[KF_DIM * a:KF_DIM * a + POSE_DIM,
                   KF_DIM * b:KF_DIM * b + POSE_DIM]

    covered_cam = np.zeros_like(cam, dtype=bool)
    cam_diag = []
    for a in range(K):
        cam_diag.append(_pack_lower(cam_blk(a, a)))
        covered_cam[KF_DIM * a:KF_DIM * a + POSE_DIM,
                    KF_DIM * a:KF_DIM * a + POSE_DIM] = True
    pair_list = []
    cam_off = []
    for a in range(K):
        for b in range(a + 1, min(a + meta.co_obs_span + 1, K)):
            B = cam_blk(b, a)
            covered_cam[KF_DIM * b:KF_DIM * b + POSE_DIM,
                        KF_DIM * a:KF_DIM * a + POSE_DIM] = True
            covered_cam[KF_DIM * a:KF_DIM * a + POSE_DIM,
                        KF_DIM * b:KF_DIM * b + POSE_DIM] = True
            if np.max(np.abs(B)) > 0.0:
                pair_list.append((kf_ids[a], kf_ids[b]))
                cam_off.append(B.copy())
    stray = np.max(np.abs(cam[~covered_cam])) if (~covered_cam).any() else 0.0
    if stray > tol:
        raise PatternViolation(
            f"camera contribution of magnitude {stray:.3g} outside the "
            "6x6 pose sub-blocks within the co-observation span")

    return StructuredS(kf_ids=kf_ids, co_obs_span=meta.co_obs_span,
                       imu_diag=imu_diag, imu_sub=imu_sub, cam_diag=cam_diag,
                       pair_list=pair_list, cam_off=cam_off)


def decompress(s: StructuredS) -> np.ndarray:
    """Dense S from the structured storage (sum of both contributions)."""
    K = len(s.kf_ids)
    n = KF_DIM * K
    S = np.zeros((n, n))
    for a in range(K):
        S[KF_DIM * a:KF_DIM * (a + 1),
          KF_DIM * a:KF_DIM * (a + 1)] += _unpack_lower(s.imu_diag[a], KF_DIM)
    for a in range(K - 1):
        B = s.imu_sub[a]
        S[KF_DIM * (a + 1):KF_DIM * (a + 2), KF_DIM * a:KF_DIM * (a + 1)] += B
        S[KF_DIM * a:KF_DIM * (a + 1), KF_DIM * (a + 1):KF_DIM * (a + 2)] += B.T
    index = {kid: i for i, kid in enumerate(s.kf_ids)}
    for a in range(K):
        S[KF_DIM * a:KF_DIM * a + POSE_DIM,
          KF_DIM * a:KF_DIM * a + POSE_DIM] += _unpack_lower(s.cam_diag[a], POSE_DIM)
    for (ka, kb), B in zip(s.pair_list, s.cam_off):
        a, b = index[ka], index[kb]
        S[KF_DIM * b:KF_DIM * b + POSE_DIM,
          KF_DIM * a:KF_DIM * a + POSE_DIM] += B
        S[KF_DIM * a:KF_DIM * a + POSE_DIM,
          KF_DIM * b:KF_DIM * b + POSE_DIM] += B.T
    return S
