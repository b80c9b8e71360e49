import json

import numpy as np
import pytest

from conftest import random_imu_factor, random_state

from swvio.model import (Feature, ImuFactor, KeyframeState, Ordering,
                         PriorFactor, VisualObservation, WindowProblem, dumps,
                         feature_dim, state_dim, stream_from_json,
                         stream_to_json, validate, window_from_json,
                         window_to_json)
from swvio.scenegen import SceneConfig, generate


def test_validate_well_formed(zero_noise_scene):
    _, windows, _ = zero_noise_scene
    assert validate(windows[0]) == []


def test_validate_nonadjacent_imu(zero_noise_scene):
    _, windows, _ = zero_noise_scene
    w = windows[0]
    bad = ImuFactor(kf_i=0, kf_j=2, dt=w.imu_factors[0].dt,
                    dp_hat=w.imu_factors[0].dp_hat,
                    dv_hat=w.imu_factors[0].dv_hat,
                    dq_hat=w.imu_factors[0].dq_hat,
                    bias_jacobians=w.imu_factors[0].bias_jacobians,
                    sqrt_info=w.imu_factors[0].sqrt_info,
                    lin_ba=w.imu_factors[0].lin_ba,
                    lin_bg=w.imu_factors[0].lin_bg)
    broken = WindowProblem(keyframes=w.keyframes, features=w.features,
                           observations=w.observations,
                           imu_factors=(bad,) + w.imu_factors[1:],
                           prior=w.prior, gravity=w.gravity)
    problems = validate(broken)
    assert "imu_factor 0: keyframes not adjacent" in problems


def test_validate_negative_inv_depth(zero_noise_scene):
    _, windows, _ = zero_noise_scene
    w = windows[0]
    f0 = w.features[0]
    bad = Feature(id=f0.id, anchor_kf=f0.anchor_kf, anchor_uv=f0.anchor_uv,
                  inv_depth=-0.1)
    broken = WindowProblem(keyframes=w.keyframes,
                           features=(bad,) + w.features[1:],
                           observations=w.observations,
                           imu_factors=w.imu_factors,
                           prior=w.prior, gravity=w.gravity)
    assert f"feature {f0.id}: inv_depth below lambda_min" in validate(broken)


def test_validate_idempotent_and_pure(zero_noise_scene):
    _, windows, _ = zero_noise_scene
    w = windows[0]
    before = dumps(window_to_json(w))
    assert validate(w) == validate(w)
    assert dumps(window_to_json(w)) == before


def test_state_dim():
    rng = np.random.default_rng(0)

    def window_with(n_kf, n_feat):
        kfs = tuple(random_state(rng, i) for i in range(n_kf))
        feats = tuple(Feature(id=i, anchor_kf=0, anchor_uv=np.zeros(2),
                              inv_depth=0.2) for i in range(n_feat))
        return WindowProblem(keyframes=kfs, features=feats, observations=(),
                             imu_factors=())

    assert state_dim(window_with(11, 0)) == 165
    assert state_dim(window_with(1, 0)) == 15
    w = window_with(4, 30)
    assert state_dim(w) == 60
    assert feature_dim(w) == 30


def test_error_state_dimension_is_15(zero_noise_scene):
    _, windows, _ = zero_noise_scene
    kf = windows[0].keyframes[0]
    assert kf.error_from(kf).shape == (15,)


def test_serialization_roundtrip(zero_noise_scene):
    cfg, windows, _ = zero_noise_scene
    doc = stream_to_json(windows, windows[0].gravity)
    text = dumps(doc)
    back = stream_from_json(json.loads(text))
    for w0, w1 in zip(windows, back):
        for a, b in zip(w0.keyframes, w1.keyframes):
            assert a.id == b.id
            for fa, fb in (("p", "p"), ("q", "q"), ("v", "v"),
                           ("ba", "ba"), ("bg", "bg")):
                assert np.array_equal(getattr(a, fa), getattr(b, fb))
        for a, b in zip(w0.features, w1.features):
            assert a.id == b.id and a.anchor_kf == b.anchor_kf
            assert a.inv_depth == b.inv_depth
            assert np.array_equal(a.anchor_uv, b.anchor_uv)
        for a, b in zip(w0.imu_factors, w1.imu_factors):
            assert np.array_equal(a.sqrt_info, b.sqrt_info)
            assert np.array_equal(a.dq_hat, b.dq_hat)
            for k in a.bias_jacobians:
                assert np.array_equal(a.bias_jacobians[k], b.bias_jacobians[k])
        assert (w0.prior is None) == (w1.prior is None)
        if w0.prior is not None:
            assert np.array_equal(w0.prior.H_prior, w1.prior.H_prior)
            assert np.array_equal(w0.prior.b_prior, w1.prior.b_prior)


def test_dumps_deterministic(zero_noise_scene):
    _, windows, _ = zero_noise_scene
    doc = stream_to_json(windows, windows[0].gravity)
    assert dumps(doc) == dumps(doc)


def test_dumps_17_digit_roundtrip():
    rng = np.random.default_rng(7)
    values = list(rng.normal(0, 1, 50)) + [1e-300, 1e300, 0.1, 2.0 ** -52]
    text = dumps({"x": values})
    back = json.loads(text)["x"]
    assert all(a == b for a, b in zip(values, back))


def test_dumps_rejects_non_finite():
    with pytest.raises(ValueError):
        dumps({"x": float("nan")})


def test_ordering_layouts():
    rng = np.random.default_rng(1)
    kfs = tuple(random_state(rng, i) for i in range(3))
    feats = tuple(Feature(id=i, anchor_kf=0, anchor_uv=np.zeros(2),
                          inv_depth=0.2) for i in range(4))
    w = WindowProblem(keyframes=kfs, features=feats, observations=(),
                      imu_factors=())
    assembly = Ordering(w)
    assert assembly.kf_slice(0) == slice(0, 15)
    assert assembly.feat_index(0) == 45
    marg = Ordering(w, features_first=True)
    assert marg.feat_index(0) == 0
    assert marg.kf_slice(0) == slice(4, 19)
    assert assembly.dim == marg.dim == 49


def test_prior_sqrt_form_reproduces_h():
    rng = np.random.default_rng(5)
    A = rng.normal(0, 1, (15, 15))
    H = A @ A.T
    b = rng.normal(0, 1, 15)
    state = random_state(rng, 0)
    prior = PriorFactor(H_prior=H, b_prior=b, state_ids=(0,),
                        lin_states=(state,))
    J, r0 = prior.sqrt_form()
    assert np.allclose(J.T @ J, H, atol=1e-10 * np.max(np.abs(H)))
    assert np.allclose(J.T @ r0, b, atol=1e-10 * max(1, np.max(np.abs(b))))
