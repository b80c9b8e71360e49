"""Domain types for the sliding-window estimation problem.

A window holds keyframe states, inverse-depth features anchored at their
first observing keyframe, visual observations on the normalized image
plane (intrinsics pre-applied, camera frame == body frame), preintegrated
IMU factors between adjacent keyframes, and an optional prior factor on a
subset of keyframe states.

State ordering is explicit: each keyframe contributes a 15-dim error state
[dp, dtheta, dv, dba, dbg]; features contribute one inverse-depth scalar
each.  For assembly features come after all keyframe states, for
marginalization they come first (see `Ordering`).

The window-stream file format is JSON: top level
``{"gravity": [...], "windows": [...]}`` with quaternions stored [w,x,y,z]
and matrices as row-major flat arrays with explicit "rows"/"cols".  All
floats are printed with 17 significant digits so round-trips are exact.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import quat_log, quat_mul, quat_conj

LAMBDA_MIN = 1e-4
KF_DIM = 15
POSE_DIM = 6


@dataclass(frozen=True)
class KeyframeState:
    """Pose, velocity and IMU biases of one keyframe.

    q is the world-from-body unit quaternion [w,x,y,z]; the error state is
    15-dim [dp, dtheta, dv, dba, dbg] with the rotation error applied on
    the right: q_new = q * exp(dtheta).
    """
    id: int
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray

    def error_from(self, ref: "KeyframeState") -> np.ndarray:
        """15-dim error of self relative to ref (right perturbation)."""
        return np.concatenate([
            self.p - ref.p,
            quat_log(quat_mul(quat_conj(ref.q), self.q)),
            self.v - ref.v,
            self.ba - ref.ba,
            self.bg - ref.bg,
        ])


@dataclass(frozen=True)
class Feature:
    """Inverse-depth feature anchored at its first observing keyframe."""
    id: int
    anchor_kf: int
    anchor_uv: np.ndarray      # normalized image coordinates at the anchor
    inv_depth: float           # 1/meters along the anchor ray


@dataclass(frozen=True)
class VisualObservation:
    """Non-anchor measurement of a feature on the normalized plane."""
    feature_id: int
    kf_id: int
    uv: np.ndarray
    sigma: float               # pixel-noise std, normalized-plane units


@dataclass(frozen=True)
class ImuFactor:
    """Preintegrated IMU constraint between adjacent keyframes kf_i, kf_j.

    bias_jacobians holds the five 3x3 sensitivities of the preintegrated
    deltas to the linearization-point biases: dp_dba, dp_dbg, dq_dbg,
    dv_dba, dv_dbg.  sqrt_info is the 15x15 upper-triangular square-root
    information whitening the residual.
    """
    kf_i: int
    kf_j: int
    dt: float
    dp_hat: np.ndarray
    dv_hat: np.ndarray
    dq_hat: np.ndarray
    bias_jacobians: dict
    sqrt_info: np.ndarray
    lin_ba: np.ndarray
    lin_bg: np.ndarray


@dataclass(frozen=True)
class PriorFactor:
    """Quadratic prior on an ordered subset of keyframe states.

    H_prior/b_prior are expressed in the error state around lin_states
    (the states at linearization time, ordered like state_ids).  The prior
    contributes H to the normal equations and b - H*delta to the rhs,
    where delta stacks the 15-dim errors of the current states w.r.t.
    lin_states.
    """
    H_prior: np.ndarray
    b_prior: np.ndarray
    state_ids: tuple
    lin_states: tuple          # KeyframeState per state_id

    def sqrt_form(self, eig_floor: float = 1e-12):
        """(J, r0) with J^T J == H (eigenvalues <= floor dropped) and
        residual J @ delta - r0; cost is exactly 0 at the prior mean."""
        H = 0.5 * (self.H_prior + self.H_prior.T)
        w, V = np.linalg.eigh(H)
        scale = max(float(np.max(np.abs(w))), 1.0)
        keep = w > eig_floor * scale
        sqrt_w = np.sqrt(w[keep])
        J = (V[:, keep] * sqrt_w).T
        r0 = (V[:, keep] / sqrt_w).T @ self.b_prior
        return J, r0


@dataclass(frozen=True)
class WindowProblem:
    keyframes: tuple
    features: tuple
    observations: tuple
    imu_factors: tuple
    prior: Optional[PriorFactor] = None
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def keyframe_by_id(self, kf_id: int) -> KeyframeState:
        return self._kf_index()[kf_id]

    def feature_by_id(self, fid: int) -> Feature:
        return self._feat_index()[fid]

    def _kf_index(self):
        return {kf.id: kf for kf in self.keyframes}

    def _feat_index(self):
        return {f.id: f for f in self.features}


class Ordering:
    """Explicit index maps between entities and error-state columns.

    Keyframes are ordered by id, each spanning 15 columns; features are
    ordered by id, one column each.  `features_first` selects the
    marginalization layout [features | keyframe states], otherwise the
    assembly layout [keyframe states | features] is used.
    """

    def __init__(self, window: WindowProblem, features_first: bool = False):
        self.kf_ids = sorted(kf.id for kf in window.keyframes)
        self.feat_ids = sorted(f.id for f in window.features)
        self.n_s = KF_DIM * len(self.kf_ids)
        self.n_f = len(self.feat_ids)
        self.features_first = features_first
        kf_base = self.n_f if features_first else 0
        feat_base = 0 if features_first else self.n_s
        self._kf_off = {kid: kf_base + KF_DIM * i for i, kid in enumerate(self.kf_ids)}
        self._feat_off = {fid: feat_base + i for i, fid in enumerate(self.feat_ids)}
        self._feat_col = {fid: i for i, fid in enumerate(self.feat_ids)}

    @property
    def dim(self) -> int:
        return self.n_s + self.n_f

    def kf_slice(self, kf_id: int) -> slice:
        off = self._kf_off[kf_id]
        return slice(off, off + KF_DIM)

    def pose_slice(self, kf_id: int) -> slice:
        off = self._kf_off[kf_id]
        return slice(off, off + POSE_DIM)

    def feat_index(self, fid: int) -> int:
        return self._feat_off[fid]

    def feat_col(self, fid: int) -> int:
        """0-based column of the feature inside the feature block."""
        return self._feat_col[fid]

    def kf_state_slice(self, kf_id: int) -> slice:
        """Slice into the keyframe-only state vector (length n_s)."""
        i = self.kf_ids.index(kf_id)
        return slice(KF_DIM * i, KF_DIM * (i + 1))


def state_dim(window: WindowProblem) -> int:
    """Error-state dimension of the keyframe block: 15 per keyframe."""
    return KF_DIM * len(window.keyframes)


def feature_dim(window: WindowProblem) -> int:
    """One inverse-depth scalar per feature."""
    return len(window.features)


def validate(window: WindowProblem, lambda_min: float = LAMBDA_MIN) -> list:
    """Check every type invariant; returns a list of violation strings.

    An empty list means the window is well formed.  Violations are data,
    not failures: callers decide whether to reject.
    """
    out = []
    kf_ids = [kf.id for kf in window.keyframes]
    kf_set = set(kf_ids)
    if kf_ids != sorted(kf_ids):
        out.append("window: keyframes not ordered by id")
    for kf in window.keyframes:
        n = np.linalg.norm(kf.q)
        if abs(n - 1.0) > 1e-9:
            out.append(f"keyframe {kf.id}: quaternion norm deviates from 1 by {abs(n-1.0):.3g}")

    feats = {}
    for f in window.features:
        feats[f.id] = f
        if f.inv_depth < lambda_min:
            out.append(f"feature {f.id}: inv_depth below lambda_min")
        if f.anchor_kf not in kf_set:
            out.append(f"feature {f.id}: anchor_kf {f.anchor_kf} not in window")

    non_anchor = {f.id: 0 for f in window.features}
    for i, obs in enumerate(window.observations):
        if obs.kf_id not in kf_set:
            out.append(f"observation {i}: kf {obs.kf_id} not in window")
        f = feats.get(obs.feature_id)
        if f is None:
            out.append(f"observation {i}: unknown feature {obs.feature_id}")
            continue
        if obs.kf_id == f.anchor_kf:
            out.append(f"observation {i}: duplicates the anchor of feature {f.id}")
        else:
            non_anchor[f.id] += 1
    for fid, count in non_anchor.items():
        if count < 1:
            out.append(f"feature {fid}: no non-anchor observation")

    pairs = set()
    for i, fac in enumerate(window.imu_factors):
        if fac.kf_j != fac.kf_i + 1:
            out.append(f"imu_factor {i}: keyframes not adjacent")
        if fac.kf_i not in kf_set or fac.kf_j not in kf_set:
            out.append(f"imu_factor {i}: keyframe outside window")
        if (fac.kf_i, fac.kf_j) in pairs:
            out.append(f"imu_factor {i}: duplicate pair ({fac.kf_i},{fac.kf_j})")
        pairs.add((fac.kf_i, fac.kf_j))
        if np.any(np.tril(fac.sqrt_info, -1) != 0.0):
            out.append(f"imu_factor {i}: sqrt_info not upper-triangular")
        elif np.any(np.diag(fac.sqrt_info) <= 0.0):
            out.append(f"imu_factor {i}: sqrt_info diagonal not positive")
        if abs(np.linalg.norm(fac.dq_hat) - 1.0) > 1e-9:
            out.append(f"imu_factor {i}: dq_hat not unit")
    for a, b in zip(kf_ids[:-1], kf_ids[1:]):
        if (a, b) not in pairs:
            out.append(f"window: missing imu factor between kf {a} and kf {b}")

    if window.prior is not None:
        pr = window.prior
        if np.max(np.abs(pr.H_prior - pr.H_prior.T)) > 1e-12:
            out.append("prior: H not symmetric")
        else:
            eig = np.linalg.eigvalsh(0.5 * (pr.H_prior + pr.H_prior.T))
            tr = max(float(np.trace(pr.H_prior)), 0.0)
            if eig[0] < -1e-9 * max(tr, 1.0):
                out.append("prior: H not positive semidefinite")
        if any(sid not in kf_set for sid in pr.state_ids):
            out.append("prior: state id outside window")
    return out


# ---------------------------------------------------------------------------
# JSON window-stream format


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        v = float(x)
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError("non-finite float in JSON document")
        return format(v, ".17g")
    raise TypeError(f"unsupported scalar {type(x)}")


def dumps(obj, indent: int = 0) -> str:
    """Deterministic JSON with floats at 17 significant digits.

    Dict insertion order is preserved; identical objects serialize to
    identical bytes, which makes output hashing reproducible.
    """
    pad = " " * indent
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  {json.dumps(str(k))}: {dumps(v, indent + 2)}'
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if len(obj) == 0:
            return "[]"
        parts = [dumps(v, indent) for v in obj]
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(parts) + "]"
        items = [f"{pad}  {dumps(v, indent + 2)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    return _fmt(obj)


def _vec(a) -> list:
    return [float(x) for x in np.asarray(a).ravel()]


def _mat(a) -> dict:
    a = np.asarray(a)
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": _vec(a)}


def _unmat(d) -> np.ndarray:
    return np.array(d["data"], dtype=float).reshape(d["rows"], d["cols"])


def keyframe_to_json(kf: KeyframeState) -> dict:
    return {"id": kf.id, "p": _vec(kf.p), "q": _vec(kf.q), "v": _vec(kf.v),
            "ba": _vec(kf.ba), "bg": _vec(kf.bg)}


def keyframe_from_json(d) -> KeyframeState:
    return KeyframeState(id=int(d["id"]), p=np.array(d["p"]), q=np.array(d["q"]),
                         v=np.array(d["v"]), ba=np.array(d["ba"]), bg=np.array(d["bg"]))


def window_to_json(w: WindowProblem) -> dict:
    prior = None
    if w.prior is not None:
        prior = {
            "H": _mat(w.prior.H_prior),
            "b": _vec(w.prior.b_prior),
            "state_ids": [int(i) for i in w.prior.state_ids],
            "lin_states": [keyframe_to_json(s) for s in w.prior.lin_states],
        }
    return {
        "keyframes": [keyframe_to_json(kf) for kf in w.keyframes],
        "features": [
            {"id": f.id, "anchor_kf": f.anchor_kf, "anchor_uv": _vec(f.anchor_uv),
             "inv_depth": float(f.inv_depth)} for f in w.features
        ],
        "observations": [
            {"feature_id": o.feature_id, "kf_id": o.kf_id, "uv": _vec(o.uv),
             "sigma": float(o.sigma)} for o in w.observations
        ],
        "imu_factors": [
            {"kf_i": fac.kf_i, "kf_j": fac.kf_j, "dt": float(fac.dt),
             "dp_hat": _vec(fac.dp_hat), "dv_hat": _vec(fac.dv_hat),
             "dq_hat": _vec(fac.dq_hat),
             "bias_jacobians": {k: _mat(v) for k, v in fac.bias_jacobians.items()},
             "sqrt_info": _mat(fac.sqrt_info),
             "lin_ba": _vec(fac.lin_ba), "lin_bg": _vec(fac.lin_bg)}
            for fac in w.imu_factors
        ],
        "prior": prior,
    }


def window_from_json(d, gravity=None) -> WindowProblem:
    prior = None
    if d.get("prior") is not None:
        p = d["prior"]
        prior = PriorFactor(
            H_prior=_unmat(p["H"]), b_prior=np.array(p["b"], dtype=float),
            state_ids=tuple(int(i) for i in p["state_ids"]),
            lin_states=tuple(keyframe_from_json(s) for s in p["lin_states"]),
        )
    return WindowProblem(
        keyframes=tuple(keyframe_from_json(k) for k in d["keyframes"]),
        features=tuple(Feature(id=int(f["id"]), anchor_kf=int(f["anchor_kf"]),
                               anchor_uv=np.array(f["anchor_uv"]),
                               inv_depth=float(f["inv_depth"]))
                       for f in d["features"]),
        observations=tuple(VisualObservation(feature_id=int(o["feature_id"]),
                                             kf_id=int(o["kf_id"]),
                                             uv=np.array(o["uv"]),
                                             sigma=float(o["sigma"]))
                           for o in d["observations"]),
        imu_factors=tuple(ImuFactor(kf_i=int(f["kf_i"]), kf_j=int(f["kf_j"]),
                                    dt=float(f["dt"]),
                                    dp_hat=np.array(f["dp_hat"]),
                                    dv_hat=np.array(f["dv_hat"]),
                                    dq_hat=np.array(f["dq_hat"]),
                                    bias_jacobians={k: _unmat(v) for k, v in
                                                    f["bias_jacobians"].items()},
                                    sqrt_info=_unmat(f["sqrt_info"]),
                                    lin_ba=np.array(f["lin_ba"]),
                                    lin_bg=np.array(f["lin_bg"]))
                          for f in d["imu_factors"]),
        prior=prior,
        gravity=np.array(gravity) if gravity is not None else np.array([0.0, 0.0, -9.81]),
    )


def stream_to_json(windows, gravity, meta=None) -> dict:
    doc = {"gravity": _vec(gravity),
           "windows": [window_to_json(w) for w in windows]}
    if meta is not None:
        doc["meta"] = meta
    return doc


def stream_from_json(doc) -> list:
    g = doc["gravity"]
    return [window_from_json(w, gravity=g) for w in doc["windows"]]


def save_stream(path, windows, gravity, meta=None) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(stream_to_json(windows, gravity, meta)))
        fh.write("\n")


def load_stream(path) -> list:
    with open(path) as fh:
        return stream_from_json(json.load(fh))
