import numpy as np

from swvio.geometry import (quat_conj, quat_exp, quat_left, quat_log, quat_mul,
                            quat_normalize, quat_right, quat_to_rot,
                            rot_to_quat, skew, so3_right_jacobian)


def test_exp_log_roundtrip():
    # log returns the canonical representative, so stay inside |theta| < pi
    rng = np.random.default_rng(0)
    for _ in range(100):
        theta = rng.normal(0, 1, 3)
        theta = theta / np.linalg.norm(theta) * rng.uniform(0, np.pi * 0.99)
        assert np.allclose(quat_log(quat_exp(theta)), theta, atol=1e-12)


def test_exp_small_angle_smooth():
    q = quat_exp(np.array([1e-14, 0, 0]))
    assert abs(np.linalg.norm(q) - 1) < 1e-15
    assert np.allclose(quat_log(q), [1e-14, 0, 0], atol=1e-20)


def test_rotation_matrix_consistency():
    rng = np.random.default_rng(1)
    for _ in range(50):
        q = quat_normalize(rng.normal(0, 1, 4))
        R = quat_to_rot(q)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1) < 1e-12
        q2 = rot_to_quat(R)
        # double cover: q and -q are the same rotation
        assert np.allclose(quat_to_rot(q2), R, atol=1e-12)


def test_mul_matches_left_right_matrices():
    rng = np.random.default_rng(2)
    a = quat_normalize(rng.normal(0, 1, 4))
    b = quat_normalize(rng.normal(0, 1, 4))
    assert np.allclose(quat_mul(a, b), quat_left(a) @ b, atol=1e-14)
    assert np.allclose(quat_mul(a, b), quat_right(b) @ a, atol=1e-14)
    assert np.allclose(quat_mul(a, quat_conj(a)), [1, 0, 0, 0], atol=1e-14)


def test_skew_is_cross_product():
    rng = np.random.default_rng(3)
    v, u = rng.normal(0, 1, 3), rng.normal(0, 1, 3)
    assert np.allclose(skew(v) @ u, np.cross(v, u), atol=1e-14)


def test_right_jacobian_first_order():
    rng = np.random.default_rng(4)
    for _ in range(20):
        theta = rng.normal(0, 0.8, 3)
        d = rng.normal(0, 1, 3) * 1e-6
        lhs = quat_exp(theta + d)
        rhs = quat_mul(quat_exp(theta), quat_exp(so3_right_jacobian(theta) @ d))
        assert np.linalg.norm(lhs - rhs) < 1e-11
