"""Quaternion and rotation helpers.

Quaternions are numpy arrays [w, x, y, z] (Hamilton convention, scalar first).
Rotation error is the right local perturbation: q_new = q * quat_exp(dtheta),
dtheta in R^3 (rotation-vector of the body-frame increment).
"""

import numpy as np


def skew(v):
    """3x3 cross-product matrix: skew(v) @ u == cross(v, u)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q):
    return q / np.linalg.norm(q)


def quat_to_rot(q):
    """Rotation matrix of a unit quaternion (world-from-body for keyframes)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_exp(theta):
    """Unit quaternion of a rotation vector theta (exact exponential map)."""
    angle = np.linalg.norm(theta)
    if angle < 1e-12:
        # second-order series keeps the map smooth through zero
        q = np.array([1.0 - angle * angle / 8.0,
                      0.5 * theta[0], 0.5 * theta[1], 0.5 * theta[2]])
        return quat_normalize(q)
    axis = theta / angle
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def quat_log(q):
    """Rotation vector of a unit quaternion (inverse of quat_exp)."""
    qn = q if q[0] >= 0.0 else -q
    vnorm = np.linalg.norm(qn[1:])
    if vnorm < 1e-12:
        return 2.0 * qn[1:]
    angle = 2.0 * np.arctan2(vnorm, qn[0])
    return angle * qn[1:] / vnorm


def quat_left(q):
    """4x4 matrix L with quat_mul(q, p) == L @ p."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def quat_right(q):
    """4x4 matrix R with quat_mul(p, q) == R @ p."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


def so3_right_jacobian(theta):
    """Right Jacobian of SO(3): Exp(theta + d) ~= Exp(theta) Exp(Jr(theta) d)."""
    angle = np.linalg.norm(theta)
    S = skew(theta)
    if angle < 1e-8:
        return np.eye(3) - 0.5 * S + S @ S / 6.0
    a2 = angle * angle
    return (np.eye(3)
            - (1.0 - np.cos(angle)) / a2 * S
            + (angle - np.sin(angle)) / (a2 * angle) * (S @ S))


def rot_to_quat(R):
    """Unit quaternion [w,x,y,z] of a rotation matrix (Shepperd's method)."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def rotate(q, v):
    """Apply the rotation of unit quaternion q to vector v."""
    return quat_to_rot(q) @ v
