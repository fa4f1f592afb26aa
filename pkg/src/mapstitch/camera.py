"""Pinhole camera and the batched reprojection model used by every estimator."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, skew_batch

MIN_DEPTH = 1e-6


@dataclass(eq=False)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    T_body_camera: RigidTransform = field(default_factory=RigidTransform.identity)
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, p_cam):
        p_cam = np.asarray(p_cam, dtype=float)
        z = p_cam[..., 2]
        return np.stack([self.fx * p_cam[..., 0] / z + self.cx,
                         self.fy * p_cam[..., 1] / z + self.cy], axis=-1)

    def bearing(self, uv):
        """Unit rays in the camera frame for pixel coordinates."""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        rays = np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy,
                         np.ones(len(uv))], axis=1)
        return rays / np.linalg.norm(rays, axis=1, keepdims=True)

    def in_image(self, uv):
        uv = np.asarray(uv)
        return ((uv[..., 0] >= 0) & (uv[..., 0] < self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] < self.height))

    def __eq__(self, other):
        if not isinstance(other, PinholeCamera):
            return NotImplemented
        return (self.fx == other.fx and self.fy == other.fy and self.cx == other.cx
                and self.cy == other.cy and self.width == other.width
                and self.height == other.height and self.T_body_camera == other.T_body_camera)


def projection_jacobian(fx, fy, p_cam):
    """d(u, v)/d(p_cam) for a stack of camera-frame points, shape (n, 2, 3)."""
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    J = np.zeros((len(p_cam), 2, 3))
    iz = 1.0 / z
    J[:, 0, 0] = fx * iz
    J[:, 0, 2] = -fx * x * iz * iz
    J[:, 1, 1] = fy * iz
    J[:, 1, 2] = -fy * y * iz * iz
    return J


def reprojection_batch(p_global, R_mb, t_mb, R_gm, t_gm, R_bc, t_bc, intrinsics,
                       observed, sigma, jacobians=True):
    """Whitened reprojection residuals for n observations.

    All pose arrays are stacked per observation: rotations (n, 3, 3), translations
    (n, 3). ``intrinsics`` is (n, 4) rows of (fx, fy, cx, cy). Returns a dict with
    ``residual`` (n, 2), ``depth`` (n,), ``pixel`` (n, 2) and, when requested,
    ``J_pose``/``J_base`` (n, 2, 6) and ``J_landmark`` (n, 2, 3). Pose Jacobians are
    with respect to right perturbations (phi, rho).
    """
    q = np.einsum("nji,nj->ni", R_gm, p_global - t_gm)
    p_b = np.einsum("nji,nj->ni", R_mb, q - t_mb)
    p_c = np.einsum("nji,nj->ni", R_bc, p_b - t_bc)
    fx, fy, cx, cy = intrinsics.T
    z = p_c[:, 2]
    zs = np.where(np.abs(z) < MIN_DEPTH, MIN_DEPTH, z)
    pix = np.stack([fx * p_c[:, 0] / zs + cx, fy * p_c[:, 1] / zs + cy], axis=1)
    inv_sigma = 1.0 / np.asarray(sigma, dtype=float)
    out = {"residual": (pix - observed) * inv_sigma[:, None], "depth": z, "pixel": pix}
    if not jacobians:
        return out
    J_proj = projection_jacobian(fx, fy, np.column_stack([p_c[:, :2], zs]))
    J_proj *= inv_sigma[:, None, None]
    A = J_proj @ np.transpose(R_bc, (0, 2, 1))          # d r / d p_b
    R_mb_T = np.transpose(R_mb, (0, 2, 1))
    J_pose = np.empty((len(z), 2, 6))
    J_pose[:, :, :3] = A @ skew_batch(p_b)
    J_pose[:, :, 3:] = -A
    AR = A @ R_mb_T
    J_base = np.empty((len(z), 2, 6))
    J_base[:, :, :3] = AR @ skew_batch(q)
    J_base[:, :, 3:] = -AR
    out["J_pose"] = J_pose
    out["J_base"] = J_base
    out["J_landmark"] = AR @ np.transpose(R_gm, (0, 2, 1))
    return out
