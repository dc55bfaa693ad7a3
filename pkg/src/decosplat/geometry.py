"""Rotation helpers: quaternions (w, x, y, z), yaw rotations, skew matrices."""

import numpy as np


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrices for (..., 4) unit quaternions."""
    q = normalize_quat(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_multiply(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_exp(rotvec):
    """Unit quaternion of a rotation vector (axis * angle)."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(half)/angle, series below 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(angle > 1e-8, np.sin(half) / np.where(angle > 0, angle, 1.0), 0.5 - angle ** 2 / 48.0)
    return np.concatenate([np.cos(half), k * rotvec], axis=-1)


def retract_quat(q, delta):
    """Right-perturb ``q`` by the tangent rotation vector ``delta`` and renormalize."""
    return normalize_quat(quat_multiply(q, quat_exp(delta)))


def yaw_quat(theta):
    theta = np.asarray(theta, dtype=np.float64)
    zero = np.zeros_like(theta)
    return np.stack([np.cos(theta / 2), zero, zero, np.sin(theta / 2)], axis=-1)


def yaw_matrix(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_matrix_deriv(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


def rotmat_grad_to_tangent(R, dR):
    """Map dL/dR to dL/d(delta) for the right perturbation R(I + [delta]x).

    With A = R^T dL/dR, the k-th component is sum_ij A_ij [e_k]x_ij.
    """
    A = np.einsum("...ji,...jk->...ik", R, dR)
    return np.stack([
        A[..., 2, 1] - A[..., 1, 2],
        A[..., 0, 2] - A[..., 2, 0],
        A[..., 1, 0] - A[..., 0, 1],
    ], axis=-1)
