import numpy as np
import pytest

from swvio.geometry import quat_exp, quat_mul, quat_normalize
from swvio.model import (Feature, ImuFactor, KeyframeState, VisualObservation,
                         WindowProblem)
from swvio.scenegen import SceneConfig, generate

ZERO_NOISE = {"accel_sigma": 0.0, "gyro_sigma": 0.0, "bias_rw_sigma": 0.0}
QUIET_NOISE = {"accel_sigma": 5e-3, "gyro_sigma": 5e-4, "bias_rw_sigma": 1e-4}


def random_state(rng, i=0):
    return KeyframeState(
        id=i, p=rng.normal(0, 1, 3), q=quat_normalize(rng.normal(0, 1, 4)),
        v=rng.normal(0, 1, 3), ba=rng.normal(0, 0.1, 3), bg=rng.normal(0, 0.05, 3))


def nearby_state(rng, base, i):
    """Second camera close to the first so shared features stay in view."""
    return KeyframeState(
        id=i, p=base.p + rng.normal(0, 0.2, 3),
        q=quat_normalize(quat_mul(base.q, quat_exp(rng.normal(0, 0.05, 3)))),
        v=rng.normal(0, 1, 3), ba=rng.normal(0, 0.1, 3), bg=rng.normal(0, 0.05, 3))


def random_imu_factor(rng, kf_i=0, kf_j=1, dt=0.5):
    sqrt_info = np.triu(rng.normal(0, 0.3, (15, 15))) + np.eye(15) * rng.uniform(1, 2)
    return ImuFactor(
        kf_i=kf_i, kf_j=kf_j, dt=dt,
        dp_hat=rng.normal(0, 1, 3), dv_hat=rng.normal(0, 1, 3),
        dq_hat=quat_normalize(rng.normal(0, 1, 4)),
        bias_jacobians={k: rng.normal(0, 0.3, (3, 3)) for k in
                        ("dp_dba", "dp_dbg", "dq_dbg", "dv_dba", "dv_dbg")},
        sqrt_info=sqrt_info,
        lin_ba=rng.normal(0, 0.1, 3), lin_bg=rng.normal(0, 0.05, 3))


def two_view_window(rng):
    """Random two-keyframe, one-feature window with a valid observation."""
    k0 = random_state(rng, 0)
    k1 = nearby_state(rng, k0, 1)
    feat = Feature(id=0, anchor_kf=0, anchor_uv=rng.uniform(-0.3, 0.3, 2),
                   inv_depth=1.0 / rng.uniform(3, 8))
    obs = VisualObservation(feature_id=0, kf_id=1,
                            uv=rng.uniform(-0.3, 0.3, 2), sigma=0.01)
    return WindowProblem(keyframes=(k0, k1), features=(feat,),
                         observations=(obs,), imu_factors=())


@pytest.fixture(scope="session")
def zero_noise_scene():
    cfg = SceneConfig(n_keyframes=5, n_features=50, pixel_noise_sigma=0.0,
                      imu_noise=dict(ZERO_NOISE), seed=3)
    windows, gt = generate(cfg)
    return cfg, windows, gt


@pytest.fixture(scope="session")
def default_scene():
    cfg = SceneConfig(seed=2)
    windows, gt = generate(cfg)
    return cfg, windows, gt
