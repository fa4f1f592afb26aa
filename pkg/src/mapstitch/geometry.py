"""Rotation and rigid-transform helpers.

Quaternions are Hamilton, stored (w, x, y, z). Tangent vectors are ordered
(rotation, translation). A pose is perturbed on the right:

    T [+] (phi, rho) = (R Exp(phi), t + R rho)

which is left-invariant, so optimizers built on it are equivariant under a
global rigid change of frame.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial.transform import Rotation

_NORM_TOL = 1e-12


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def skew_batch(v):
    """(n, 3) -> (n, 3, 3) cross-product matrices."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_multiply_batch(a, b):
    """Hamilton product of stacked quaternions, (..., 4)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_to_matrix_batch(q):
    q = np.asarray(q, dtype=float)
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


def matrix_to_quat(R):
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    q = np.array([xyzw[3], xyzw[0], xyzw[1], xyzw[2]])
    return q if q[0] >= 0 else -q


def quat_exp(phi):
    """Rotation vector -> unit quaternion."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    half = 0.5 * theta
    if theta < 1e-8:
        # second-order series keeps the norm at 1 to machine precision
        return _normalized(np.concatenate([[1.0 - theta * theta / 8.0], 0.5 * phi]))
    return np.concatenate([[np.cos(half)], np.sin(half) / theta * phi])


def quat_exp_batch(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-8
    ts = np.where(small, 1.0, theta)
    w = np.where(small, 1.0 - theta**2 / 8.0, np.cos(0.5 * ts))
    k = np.where(small, 0.5, np.sin(0.5 * ts) / ts)
    q = np.concatenate([w[..., None], k[..., None] * phi], axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1 - np.cos(theta)) / theta**2 * K @ K)


def so3_exp_batch(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    K = skew_batch(phi)
    KK = K @ K
    small = theta < 1e-8
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1 - np.cos(ts)) / ts**2)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * KK


def so3_log(R):
    """Rotation matrix -> rotation vector with angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * w * (1.0 + theta**2 / 6.0)
    if np.pi - theta > 1e-4:
        return theta / (2 * np.sin(theta)) * w
    # near pi the antisymmetric part vanishes; fall back to the quaternion path
    return Rotation.from_matrix(R).as_rotvec()


def so3_log_batch(R):
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                  R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    small = theta < 1e-6
    st = np.where(small, 1.0, np.sin(theta))
    scale = np.where(small, 0.5 * (1.0 + theta**2 / 6.0), theta / (2 * st))
    out = scale[..., None] * w
    near_pi = np.pi - theta <= 1e-4
    if np.any(near_pi):
        out[near_pi] = Rotation.from_matrix(R[near_pi]).as_rotvec()
    return out


def so3_right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    c = 1.0 / theta**2 - (1 + np.cos(theta)) / (2 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + c * K @ K


def so3_right_jacobian_inv_batch(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    K = skew_batch(phi)
    small = theta < 1e-6
    ts = np.where(small, 1.0, theta)
    c = np.where(small, 1.0 / 12.0,
                 1.0 / ts**2 - (1 + np.cos(ts)) / (2 * ts * np.sin(ts)))
    return np.eye(3) + 0.5 * K + c[..., None, None] * (K @ K)


def rotation_angle(R):
    return float(np.arccos(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)))


def _normalized(q):
    return q / np.linalg.norm(q)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.array(self.rotation, dtype=float).reshape(4)
        t = np.array(self.translation, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if n == 0 or not np.all(np.isfinite(q)) or not np.all(np.isfinite(t)):
            raise ValueError("invalid rigid transform")
        if abs(n - 1.0) > _NORM_TOL:
            q = q / n
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_Rt(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls.from_Rt(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, phi, t=(0.0, 0.0, 0.0)):
        return cls(quat_exp(phi), t)

    @cached_property
    def R(self):
        return quat_to_matrix(self.rotation)

    @property
    def t(self):
        return self.translation

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return RigidTransform(quat_multiply(self.rotation, other.rotation),
                                  self.R @ other.translation + self.translation)
        return self.apply(other)

    def inverse(self):
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidTransform(q, -(self.R.T @ self.translation))

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def oplus(self, delta):
        delta = np.asarray(delta, dtype=float)
        q = quat_multiply(self.rotation, quat_exp(delta[:3]))
        return RigidTransform(q, self.translation + self.R @ delta[3:])

    def ominus(self, other):
        """Tangent vector d with other [+] d == self (first order exact in R)."""
        E = other.inverse() @ self
        return np.concatenate([so3_log(E.R), E.translation])

    def angle(self):
        return rotation_angle(self.R)

    def distance_to(self, other):
        """(rotation angle rad, translation m) between two transforms."""
        E = self.inverse() @ other
        return E.angle(), float(np.linalg.norm(self.translation - other.translation))

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"RigidTransform(q=[{q}], t=[{t}])"


def se3_adjoint(T: RigidTransform):
    """Adjoint for (rotation, translation) ordered tangents."""
    A = np.zeros((6, 6))
    A[:3, :3] = T.R
    A[3:, 3:] = T.R
    A[3:, :3] = skew(T.translation) @ T.R
    return A


def rigid_fit(src, dst, weights=None):
    """Least-squares rigid motion mapping ``src`` onto ``dst`` (no scale).

    Returns T with dst ~= T.apply(src).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if weights is None:
        w = np.full(len(src), 1.0 / len(src))
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    cov = (dst - mu_d).T @ ((src - mu_s) * w[:, None])
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return RigidTransform.from_Rt(R, mu_d - R @ mu_s)


def rigid_fit_batch(src, dst):
    """Vectorized unweighted fit over a stack of (m, n, 3) point sets."""
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    cov = np.einsum("mni,mnj->mij", dst - mu_d, src - mu_s)
    U, _, Vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    d[d == 0] = 1.0
    U = U.copy()
    U[:, :, 2] *= d[:, None]
    R = U @ Vt
    t = mu_d[:, 0] - np.einsum("mij,mj->mi", R, mu_s[:, 0])
    return R, t


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0, max_angle)


def random_transform(rng, max_angle=np.pi, max_translation=10.0):
    return RigidTransform.from_rotvec(random_rotation(rng, max_angle),
                                      rng.uniform(-max_translation, max_translation, 3))
