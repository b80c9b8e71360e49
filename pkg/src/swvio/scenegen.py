"""Deterministic synthetic scenes with known ground truth.

The generator samples an ideal IMU stream (100 Hz by default) from an
analytic trajectory, then *defines* ground truth as the midpoint
integration of those samples: keyframe states are propagated through the
same preintegration routine that fills the IMU factors, so at zero noise
every residual at ground truth vanishes to machine precision.  Landmarks
are sampled along anchor-camera rays and observations are reprojected
through the exact code path the visual residual uses.

Noise is applied in measurement space only (IMU samples, pixel
coordinates); ground truth is never perturbed by generation.  All
randomness comes from numpy's PCG64 generator seeded from the config; the
algorithm name and seed are recorded in the stream header so streams are
reproducible.

Every window carries a pose prior on its first keyframe: that anchor
fixes the global datum (gauge), which is what makes trajectory error
comparable without alignment.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import (quat_conj, quat_exp, quat_log, quat_mul,
                       quat_normalize, quat_to_rot, rot_to_quat)
from .model import (Feature, ImuFactor, KeyframeState, PriorFactor,
                    VisualObservation, WindowProblem, keyframe_from_json,
                    keyframe_to_json, _vec)

RNG_ALGORITHM = "numpy-pcg64"

# whitening floors keep sqrt_info finite at zero configured noise while
# leaving machine-precision ground-truth residuals below 1e-10 whitened
ACCEL_SIGMA_FLOOR = 2e-3
GYRO_SIGMA_FLOOR = 3e-4
BIAS_RW_FLOOR = 1e-4
PIXEL_SIGMA_FLOOR = 1e-4

UV_LIMIT = 1.5
Z_NEAR = 0.2
Z_FAR = 60.0


class GenerationError(Exception):
    """Configuration cannot produce a consistent scene."""


@dataclass
class SceneConfig:
    n_keyframes: int = 11
    n_features: int = 110
    trajectory: dict = field(default_factory=lambda: {
        "type": "circle", "radius": 5.0, "rate": 0.15,
        "z_amp": 0.3, "wobble": 0.1})
    landmark_box: list = field(default_factory=lambda: [
        [-16.0, 16.0], [-16.0, 16.0], [-5.0, 5.0]])
    pixel_noise_sigma: float = 1e-3
    imu_noise: dict = field(default_factory=lambda: {
        "accel_sigma": 2e-2, "gyro_sigma": 2e-3, "bias_rw_sigma": 1e-4})
    co_obs_span: int = 4
    seed: int = 1
    n_windows: int = 1
    kf_dt: float = 0.5
    imu_rate: float = 100.0
    gauge_pos_sigma: float = 1e-5
    gauge_rot_sigma: float = 1e-5
    init_vel_sigma: float = 0.02
    init_ba_sigma: float = 0.02
    init_bg_sigma: float = 2e-3

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "SceneConfig":
        return SceneConfig(**d)


def validate_config(cfg: SceneConfig) -> list:
    out = []
    if cfg.n_keyframes < 2:
        out.append("n_keyframes: need at least 2")
    if cfg.n_features < cfg.n_keyframes:
        out.append("n_features: must be >= n_keyframes")
    if cfg.co_obs_span < 1:
        out.append("co_obs_span: must be >= 1")
    if cfg.n_windows < 1:
        out.append("n_windows: must be >= 1")
    if cfg.kf_dt <= 0:
        out.append("kf_dt: must be positive")
    if cfg.trajectory.get("type") not in ("circle", "random_walk"):
        out.append("trajectory.type: must be 'circle' or 'random_walk'")
    return out


@dataclass
class GroundTruth:
    """True states and landmarks; consistent with zero-noise measurements."""
    keyframes: dict             # kf id -> KeyframeState
    landmarks: dict             # feature id -> 3-vector world position
    inv_depths: dict            # feature id -> true inverse depth

    def positions(self) -> dict:
        return {kid: kf.p for kid, kf in self.keyframes.items()}

    def to_json(self) -> dict:
        return {
            "keyframes": [keyframe_to_json(self.keyframes[k])
                          for k in sorted(self.keyframes)],
            "landmarks": [{"feature_id": int(f), "position": _vec(self.landmarks[f]),
                           "inv_depth": float(self.inv_depths[f])}
                          for f in sorted(self.landmarks)],
        }

    @staticmethod
    def from_json(d: dict) -> "GroundTruth":
        kfs = {int(k["id"]): keyframe_from_json(k) for k in d["keyframes"]}
        lms = {int(e["feature_id"]): np.array(e["position"]) for e in d["landmarks"]}
        inv = {int(e["feature_id"]): float(e["inv_depth"]) for e in d["landmarks"]}
        return GroundTruth(keyframes=kfs, landmarks=lms, inv_depths=inv)


# ---------------------------------------------------------------------------
# analytic trajectories


class _Circle:
    """Circle in the xy plane, camera optical axis (body z) radially out."""

    def __init__(self, params):
        self.r = float(params.get("radius", 5.0))
        self.w = float(params.get("rate", 0.15))
        self.z_amp = float(params.get("z_amp", 0.3))
        self.wobble = float(params.get("wobble", 0.1))

    def p(self, t):
        a = self.w * t
        return np.array([self.r * np.cos(a), self.r * np.sin(a),
                         self.z_amp * np.sin(0.7 * t)])

    def pdd(self, t):
        a = self.w * t
        return np.array([-self.r * self.w ** 2 * np.cos(a),
                         -self.r * self.w ** 2 * np.sin(a),
                         -self.z_amp * 0.49 * np.sin(0.7 * t)])

    def q(self, t):
        a = self.w * t
        tangent = np.array([-np.sin(a), np.cos(a), 0.0])
        radial = np.array([np.cos(a), np.sin(a), 0.0])
        R = np.column_stack([tangent, np.array([0.0, 0.0, 1.0]), radial])
        base = rot_to_quat(R)
        wob = self.wobble * np.array([np.sin(0.9 * t), np.sin(0.7 * t + 1.0),
                                      np.sin(1.1 * t + 2.0)])
        return quat_mul(base, quat_exp(wob))


class _RandomWalk:
    """Smooth random walk: sum of seeded sinusoids per axis."""

    def __init__(self, params, rng):
        self.n_modes = int(params.get("n_modes", 3))
        scale = float(params.get("scale", 2.0))
        self.amp = scale * rng.uniform(0.3, 1.0, size=(self.n_modes, 3)) \
            / np.arange(1, self.n_modes + 1)[:, None]
        self.freq = rng.uniform(0.15, 0.6, size=(self.n_modes, 3)) \
            * np.arange(1, self.n_modes + 1)[:, None]
        self.phase = rng.uniform(0, 2 * np.pi, size=(self.n_modes, 3))
        self.rot_amp = rng.uniform(0.05, 0.2, size=3)
        self.rot_freq = rng.uniform(0.3, 0.8, size=3)
        self.rot_phase = rng.uniform(0, 2 * np.pi, size=3)

    def p(self, t):
        return np.sum(self.amp * np.sin(self.freq * t + self.phase), axis=0)

    def pdd(self, t):
        return np.sum(-self.amp * self.freq ** 2
                      * np.sin(self.freq * t + self.phase), axis=0)

    def q(self, t):
        rv = self.rot_amp * np.sin(self.rot_freq * t + self.rot_phase)
        return quat_exp(rv)


def _make_trajectory(cfg: SceneConfig, rng):
    if cfg.trajectory["type"] == "circle":
        return _Circle(cfg.trajectory)
    return _RandomWalk(cfg.trajectory, rng)


def _body_rates(traj, t, eps=1e-6):
    dq = quat_mul(quat_conj(traj.q(t - eps)), traj.q(t + eps))
    return quat_log(dq) / (2.0 * eps)


# ---------------------------------------------------------------------------
# preintegration (midpoint rule)


def preintegrate(gyro, accel, h, ba, bg):
    """Midpoint preintegration of an IMU sample run (n+1 samples).

    Returns (dp, dv, dq) in the frame of the first sample.
    """
    dq = np.array([1.0, 0.0, 0.0, 0.0])
    dp = np.zeros(3)
    dv = np.zeros(3)
    n = len(gyro) - 1
    for s in range(n):
        w_mid = 0.5 * (gyro[s] + gyro[s + 1]) - bg
        dq_next = quat_normalize(quat_mul(dq, quat_exp(w_mid * h)))
        a0 = quat_to_rot(dq) @ (accel[s] - ba)
        a1 = quat_to_rot(dq_next) @ (accel[s + 1] - ba)
        a_mid = 0.5 * (a0 + a1)
        dp = dp + dv * h + 0.5 * a_mid * h * h
        dv = dv + a_mid * h
        dq = dq_next
    return dp, dv, dq


def bias_jacobians_fd(gyro, accel, h, ba, bg, eps=1e-6):
    """Five 3x3 sensitivities of the preintegrated deltas to the
    linearization biases, by central differences."""
    dp_dba = np.zeros((3, 3))
    dp_dbg = np.zeros((3, 3))
    dq_dbg = np.zeros((3, 3))
    dv_dba = np.zeros((3, 3))
    dv_dbg = np.zeros((3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        dp_p, dv_p, _ = preintegrate(gyro, accel, h, ba + e, bg)
        dp_m, dv_m, _ = preintegrate(gyro, accel, h, ba - e, bg)
        dp_dba[:, k] = (dp_p - dp_m) / (2 * eps)
        dv_dba[:, k] = (dv_p - dv_m) / (2 * eps)
        dp_p, dv_p, dq_p = preintegrate(gyro, accel, h, ba, bg + e)
        dp_m, dv_m, dq_m = preintegrate(gyro, accel, h, ba, bg - e)
        dp_dbg[:, k] = (dp_p - dp_m) / (2 * eps)
        dv_dbg[:, k] = (dv_p - dv_m) / (2 * eps)
        dq_dbg[:, k] = quat_log(quat_mul(quat_conj(dq_m), dq_p)) / (2 * eps)
    return {"dp_dba": dp_dba, "dp_dbg": dp_dbg, "dq_dbg": dq_dbg,
            "dv_dba": dv_dba, "dv_dbg": dv_dbg}


def _sqrt_info(cfg: SceneConfig, h, dt):
    accel = max(cfg.imu_noise.get("accel_sigma", 0.0), ACCEL_SIGMA_FLOOR)
    gyro = max(cfg.imu_noise.get("gyro_sigma", 0.0), GYRO_SIGMA_FLOOR)
    brw = max(cfg.imu_noise.get("bias_rw_sigma", 0.0), BIAS_RW_FLOOR)
    s_dv = accel * np.sqrt(h * dt)
    s_dp = s_dv * dt / np.sqrt(3.0)
    s_dth = gyro * np.sqrt(h * dt)
    s_b = brw * np.sqrt(dt)
    d = np.concatenate([np.full(3, 1.0 / s_dp), np.full(3, 1.0 / s_dth),
                        np.full(3, 1.0 / s_dv), np.full(6, 1.0 / s_b)])
    return np.diag(d)


# ---------------------------------------------------------------------------
# generation


def _project(P):
    return np.array([P[0] / P[2], P[1] / P[2]])


def generate(cfg: SceneConfig):
    """Build (windows, ground_truth) for the configured scene.

    Deterministic for a fixed config+seed.  Raises GenerationError when
    the configuration is invalid or landmarks cannot be placed visibly.
    """
    problems = validate_config(cfg)
    if problems:
        raise GenerationError("; ".join(problems))
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    traj = _make_trajectory(cfg, rng)
    gravity = np.array([0.0, 0.0, -9.81])

    K = cfg.n_keyframes
    total_kfs = K + cfg.n_windows - 1
    dt = cfg.kf_dt
    n_sub = max(2, int(round(dt * cfg.imu_rate)))
    h = dt / n_sub

    ba_true = rng.normal(0.0, 0.02, size=3)
    bg_true = rng.normal(0.0, 0.002, size=3)
    accel_sigma = cfg.imu_noise.get("accel_sigma", 0.0)
    gyro_sigma = cfg.imu_noise.get("gyro_sigma", 0.0)

    # ground truth is the discrete integration of the clean sample stream
    states = {0: KeyframeState(id=0, p=traj.p(0.0), q=quat_normalize(traj.q(0.0)),
                               v=(traj.p(1e-6) - traj.p(-1e-6)) / 2e-6,
                               ba=ba_true, bg=bg_true)}
    factors_by_pair = {}
    for k in range(total_kfs - 1):
        t0 = k * dt
        ts = t0 + h * np.arange(n_sub + 1)
        gyro_clean = np.stack([_body_rates(traj, t) + bg_true for t in ts])
        accel_clean = np.stack([
            quat_to_rot(traj.q(t)).T @ (traj.pdd(t) - gravity) + ba_true
            for t in ts])
        gyro_meas = gyro_clean + rng.normal(0.0, gyro_sigma, size=gyro_clean.shape)
        accel_meas = accel_clean + rng.normal(0.0, accel_sigma, size=accel_clean.shape)

        dp_c, dv_c, dq_c = preintegrate(gyro_clean, accel_clean, h, ba_true, bg_true)
        prev = states[k]
        R_prev = quat_to_rot(prev.q)
        states[k + 1] = KeyframeState(
            id=k + 1,
            p=prev.p + prev.v * dt + 0.5 * gravity * dt * dt + R_prev @ dp_c,
            q=quat_normalize(quat_mul(prev.q, dq_c)),
            v=prev.v + gravity * dt + R_prev @ dv_c,
            ba=ba_true, bg=bg_true)

        dp_m, dv_m, dq_m = preintegrate(gyro_meas, accel_meas, h, ba_true, bg_true)
        factors_by_pair[(k, k + 1)] = ImuFactor(
            kf_i=k, kf_j=k + 1, dt=dt, dp_hat=dp_m, dv_hat=dv_m, dq_hat=dq_m,
            bias_jacobians=bias_jacobians_fd(gyro_meas, accel_meas, h,
                                             ba_true, bg_true),
            sqrt_info=_sqrt_info(cfg, h, dt), lin_ba=ba_true.copy(),
            lin_bg=bg_true.copy())

    pixel_sigma = cfg.pixel_noise_sigma
    sigma_used = max(pixel_sigma, PIXEL_SIGMA_FLOOR)
    box = np.array(cfg.landmark_box, dtype=float)
    run_len = max(2, cfg.co_obs_span)

    windows = []
    landmarks = {}
    inv_depths = {}
    for w in range(cfg.n_windows):
        kf_ids = list(range(w, w + K))
        R_by_kf = {kid: quat_to_rot(states[kid].q) for kid in kf_ids}
        feats = []
        obs = []
        for f in range(cfg.n_features):
            fid = w * cfg.n_features + f
            anchor = kf_ids[f % (K - 1)]
            run = [kid for kid in range(anchor, min(anchor + run_len, w + K))]
            feat, ob_list, lm = _place_feature(
                fid, anchor, run, states, R_by_kf, rng, box, sigma_used,
                pixel_sigma)
            feats.append(feat)
            obs.extend(ob_list)
            landmarks[fid] = lm
            inv_depths[fid] = feat.inv_depth

        # the prior fixes the global datum (gauge) through the pose rows
        # and anchors the initialization through velocity/bias rows
        anchor_kf = states[kf_ids[0]]
        H = np.zeros((15, 15))
        H[0:3, 0:3] = np.eye(3) / cfg.gauge_pos_sigma ** 2
        H[3:6, 3:6] = np.eye(3) / cfg.gauge_rot_sigma ** 2
        H[6:9, 6:9] = np.eye(3) / cfg.init_vel_sigma ** 2
        H[9:12, 9:12] = np.eye(3) / cfg.init_ba_sigma ** 2
        H[12:15, 12:15] = np.eye(3) / cfg.init_bg_sigma ** 2
        prior = PriorFactor(H_prior=H, b_prior=np.zeros(15),
                            state_ids=(kf_ids[0],), lin_states=(anchor_kf,))
        windows.append(WindowProblem(
            keyframes=tuple(states[kid] for kid in kf_ids),
            features=tuple(feats), observations=tuple(obs),
            imu_factors=tuple(factors_by_pair[(a, a + 1)]
                              for a in kf_ids[:-1]),
            prior=prior, gravity=gravity))

    gt = GroundTruth(keyframes=dict(states), landmarks=landmarks,
                     inv_depths=inv_depths)
    return windows, gt


def _place_feature(fid, anchor, run, states, R_by_kf, rng, box, sigma_used,
                   pixel_sigma, max_tries=500):
    """Sample a landmark along an anchor ray visible from the whole run."""
    kf_a = states[anchor]
    R_a = R_by_kf[anchor]
    for _ in range(max_tries):
        uv_a = rng.uniform(-0.5, 0.5, size=2)
        depth = rng.uniform(4.0, 9.0)
        lam = 1.0 / depth
        m = np.array([uv_a[0], uv_a[1], 1.0])
        # reproject through the residual's exact arithmetic so zero-noise
        # residuals cancel bit-for-bit
        P_a = m / lam
        P_w = R_a @ P_a + kf_a.p
        if np.any(P_w < box[:, 0]) or np.any(P_w > box[:, 1]):
            continue
        uvs = {}
        ok = True
        for kid in run:
            if kid == anchor:
                continue
            P_c = R_by_kf[kid].T @ (P_w - states[kid].p)
            if not (Z_NEAR < P_c[2] < Z_FAR):
                ok = False
                break
            uv = _project(P_c)
            if np.max(np.abs(uv)) > UV_LIMIT:
                ok = False
                break
            uvs[kid] = uv
        if not ok:
            continue
        feat = Feature(id=fid, anchor_kf=anchor, anchor_uv=uv_a.copy(),
                       inv_depth=lam)
        obs = []
        for kid in run:
            if kid == anchor:
                continue
            noise = rng.normal(0.0, pixel_sigma, size=2) if pixel_sigma > 0 \
                else np.zeros(2)
            obs.append(VisualObservation(feature_id=fid, kf_id=kid,
                                         uv=uvs[kid] + noise, sigma=sigma_used))
        return feat, obs, P_w
    raise GenerationError(
        f"feature {fid}: trajectory exits the landmark visibility region "
        f"(no placement with >= 2 observations after {max_tries} tries)")


@dataclass
class PerturbMagnitudes:
    position: float = 0.0
    rotation: float = 0.0
    velocity: float = 0.0
    bias: float = 0.0
    inv_depth: float = 0.0


def perturb(window: WindowProblem, gt: GroundTruth, mags: PerturbMagnitudes,
            seed: int = 0) -> WindowProblem:
    """Window with initial states moved off ground truth by the given
    magnitudes (seeded random directions).  Measurements and the prior are
    untouched, so the optimum stays where it was."""
    rng = np.random.default_rng(np.random.PCG64(seed))

    def unit(n=3):
        v = rng.normal(size=n)
        return v / np.linalg.norm(v)

    new_kfs = []
    for kf in window.keyframes:
        true = gt.keyframes[kf.id]
        if mags.rotation != 0.0:
            q = quat_normalize(quat_mul(true.q, quat_exp(mags.rotation * unit())))
        else:
            q = true.q
        new_kfs.append(KeyframeState(
            id=kf.id,
            p=true.p + mags.position * unit(),
            q=q,
            v=true.v + mags.velocity * unit(),
            ba=true.ba + mags.bias * unit(),
            bg=true.bg + mags.bias * unit(),
        ))
    new_feats = []
    for f in window.features:
        lam = gt.inv_depths[f.id] + mags.inv_depth * float(rng.standard_normal())
        lam = max(lam, 1e-3)
        new_feats.append(Feature(id=f.id, anchor_kf=f.anchor_kf,
                                 anchor_uv=f.anchor_uv, inv_depth=lam))
    return WindowProblem(keyframes=tuple(new_kfs), features=tuple(new_feats),
                         observations=window.observations,
                         imu_factors=window.imu_factors,
                         prior=window.prior, gravity=window.gravity)


def stream_meta(cfg: SceneConfig) -> dict:
    return {"generator": RNG_ALGORITHM, "seed": int(cfg.seed),
            "config": cfg.to_json()}


def max_residual_at_ground_truth(window: WindowProblem, gt: GroundTruth) -> float:
    """Largest whitened residual magnitude with states at ground truth."""
    from .factors import imu_residual, visual_residual

    truth = WindowProblem(
        keyframes=tuple(gt.keyframes[kf.id] for kf in window.keyframes),
        features=tuple(Feature(id=f.id, anchor_kf=f.anchor_kf,
                               anchor_uv=f.anchor_uv,
                               inv_depth=gt.inv_depths[f.id])
                       for f in window.features),
        observations=window.observations,
        imu_factors=window.imu_factors,
        prior=None, gravity=window.gravity)
    worst = 0.0
    for obs in truth.observations:
        r = visual_residual(truth, obs)
        worst = max(worst, float(np.max(np.abs(r))))
    for fac in truth.imu_factors:
        r = imu_residual(fac, truth.keyframe_by_id(fac.kf_i),
                         truth.keyframe_by_id(fac.kf_j), truth.gravity)
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


def save_ground_truth(path, gt: GroundTruth) -> None:
    from .model import dumps
    with open(path, "w") as fh:
        fh.write(dumps(gt.to_json()))
        fh.write("\n")


def load_ground_truth(path) -> GroundTruth:
    with open(path) as fh:
        return GroundTruth.from_json(json.load(fh))
