"""6-DoF localization of query frames against the map: 2D-3D matching and PnP RANSAC."""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass

import numpy as np

from .camera import PinholeCamera, projection_jacobian
from .core import Map
from .errors import DegenerateConfiguration, IndexNotBuilt
from .geometry import RigidTransform, rigid_fit_batch, skew_batch
from .loop_engine import LoopConfig, query_frame_matches


class Status(enum.Enum):
    LOCALIZED = "Localized"
    NOT_LOCALIZED = "NotLocalized"


@dataclass
class LocalizationConfig:
    knn: int = 2
    probe_cells: int = 8
    match_threshold: float = 1.0
    min_cluster_size: int = 5
    inlier_px: float = 3.0
    min_inliers: int = 12
    max_iterations: int = 1000
    success_probability: float = 0.99
    refine_iterations: int = 10
    seed: int = 0

    def matching(self):
        return LoopConfig(knn=self.knn, probe_cells=self.probe_cells,
                          match_threshold=self.match_threshold,
                          min_cluster_size=self.min_cluster_size)


@dataclass
class LocalizationResult:
    pose: RigidTransform | None     # global <- body
    inlier_count: int
    total_matches: int
    status: Status
    inliers: np.ndarray | None = None
    query_time: float = 0.0         # seconds, localize_frame only

    @property
    def localized(self):
        return self.status is Status.LOCALIZED


# -- minimal solver ------------------------------------------------------------------

def _grunert_coefficients(cos_a, cos_b, cos_g, a2, b2, c2):
    """Quartic in v = s3 / s1, highest power first, one row per sample."""
    r_ac = (a2 - c2) / b2
    r_apc = (a2 + c2) / b2
    ca2, cb2, cg2 = cos_a ** 2, cos_b ** 2, cos_g ** 2
    A4 = (r_ac - 1) ** 2 - 4 * c2 / b2 * ca2
    A3 = 4 * (r_ac * (1 - r_ac) * cos_b - (1 - r_apc) * cos_a * cos_g + 2 * c2 / b2 * ca2 * cos_b)
    A2 = 2 * (r_ac ** 2 - 1 + 2 * r_ac ** 2 * cb2 + 2 * (b2 - c2) / b2 * ca2
              - 4 * r_apc * cos_a * cos_b * cos_g + 2 * (b2 - a2) / b2 * cg2)
    A1 = 4 * (-r_ac * (1 + r_ac) * cos_b + 2 * a2 / b2 * cg2 * cos_b - (1 - r_apc) * cos_a * cos_g)
    A0 = (1 + r_ac) ** 2 - 4 * a2 / b2 * cg2
    return np.stack([A4, A3, A2, A1, A0], axis=-1), r_ac


def _quartic_roots(C):
    """Complex roots (n, 4) of each row of C; NaN fills missing roots."""
    C = C / np.abs(C).max(axis=1, keepdims=True)
    out = np.full((len(C), 4), np.nan, dtype=complex)
    full = np.abs(C[:, 0]) > 1e-10
    if np.any(full):
        comp = np.zeros((int(full.sum()), 4, 4))
        comp[:, 0, :] = -C[full, 1:] / C[full, :1]
        comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
        out[full] = np.linalg.eigvals(comp)
    for i in np.flatnonzero(~full):
        r = np.roots(np.trim_zeros(C[i], "f"))
        out[i, :len(r)] = r
    return out


def p3p_batch(bearings, points):
    """Grunert's three-point resection for a stack of samples.

    ``bearings`` and ``points`` are (n, 3, 3). Returns (sample index, R, t) of
    every candidate camera pose (world <- camera) meeting its three bearings
    within 1e-9 rad; degenerate samples yield nothing.
    """
    f = np.asarray(bearings, dtype=float).reshape(-1, 3, 3)
    f = f / np.linalg.norm(f, axis=2, keepdims=True)
    P = np.asarray(points, dtype=float).reshape(-1, 3, 3)
    a2 = ((P[:, 1] - P[:, 2]) ** 2).sum(1)
    b2 = ((P[:, 0] - P[:, 2]) ** 2).sum(1)
    c2 = ((P[:, 0] - P[:, 1]) ** 2).sum(1)
    scale = np.maximum(np.maximum(a2, b2), c2)
    area = np.linalg.norm(np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]), axis=1)
    cos_a = (f[:, 1] * f[:, 2]).sum(1)
    cos_b = (f[:, 0] * f[:, 2]).sum(1)
    cos_g = (f[:, 0] * f[:, 1]).sum(1)
    ok = ((scale > 0) & (area >= 1e-9 * scale)
          & (np.maximum(np.maximum(cos_a, cos_b), cos_g) <= 1 - 1e-12))
    empty = (np.zeros(0, np.int64), np.zeros((0, 3, 3)), np.zeros((0, 3)))
    if not np.any(ok):
        return empty
    idx = np.flatnonzero(ok)
    f, P, a2, b2, c2 = f[idx], P[idx], a2[idx], b2[idx], c2[idx]
    cos_a, cos_b, cos_g = cos_a[idx], cos_b[idx], cos_g[idx]
    C, r_ac = _grunert_coefficients(cos_a, cos_b, cos_g, a2, b2, c2)
    V = _quartic_roots(C)

    # one row per (sample, real root)
    rows = np.repeat(np.arange(len(idx)), 4)
    v = V.ravel()
    real = np.isfinite(v) & (np.abs(v.imag) <= 1e-6 * np.maximum(1.0, np.abs(v.real)))
    rows, v = rows[real], v[real].real
    ca, cb, cg = cos_a[rows], cos_b[rows], cos_g[rows]
    lc, r_ac = c2[rows], r_ac[rows]
    den = 2 * (cg - v * ca)
    direct = np.abs(den) >= 1e-6
    u = ((r_ac - 1) * v * v - 2 * r_ac * cb * v + 1 + r_ac) / np.where(direct, den, 1.0)
    q = 1 + u * u - 2 * u * cg
    good = direct & (q > 0)
    s1 = np.sqrt(lc / np.where(good, q, 1.0))
    S = np.column_stack([s1, u * s1, v * s1])
    if not np.all(direct):
        # u = s2 / s1 is 0/0 here (symmetric configurations); take s1 from the
        # (s1, s3) equation and both branches of the (s1, s2) quadratic
        k = np.flatnonzero(~direct)
        kr, kv = rows[k], v[k]
        qb = 1 + kv * kv - 2 * kv * cos_b[kr]
        t1 = np.sqrt(b2[kr] / np.where(qb > 0, qb, 1.0))
        disc = c2[kr] - t1 * t1 * (1 - cos_g[kr] ** 2)
        ok_b = (qb > 0) & (disc > -1e-9 * c2[kr])
        root = np.sqrt(np.maximum(disc, 0.0))
        extra = np.vstack([np.column_stack([t1, t1 * cos_g[kr] + sg * root, kv * t1])
                           for sg in (1.0, -1.0)])
        rows = np.concatenate([rows, kr, kr])
        S = np.vstack([S, extra])
        good = np.concatenate([good, ok_b, ok_b])
    ca, cb, cg = cos_a[rows], cos_b[rows], cos_g[rows]
    la, lb, lc = a2[rows], b2[rows], c2[rows]

    # Newton polish on the three law-of-cosines equations
    J = np.zeros((len(S), 3, 3))
    for _ in range(8):
        x, y, z = S.T
        F = np.column_stack([y * y + z * z - 2 * y * z * ca - la,
                             x * x + z * z - 2 * x * z * cb - lb,
                             x * x + y * y - 2 * x * y * cg - lc])
        J[:, 0, 1] = 2 * y - 2 * z * ca
        J[:, 0, 2] = 2 * z - 2 * y * ca
        J[:, 1, 0] = 2 * x - 2 * z * cb
        J[:, 1, 2] = 2 * z - 2 * x * cb
        J[:, 2, 0] = 2 * x - 2 * y * cg
        J[:, 2, 1] = 2 * y - 2 * x * cg
        solvable = np.abs(np.linalg.det(J)) > 1e-12 * np.maximum(1.0, lc) ** 1.5
        if np.any(solvable):
            S[solvable] -= np.linalg.solve(J[solvable], F[solvable][..., None])[..., 0]
    good &= np.all(np.isfinite(S), axis=1) & np.all(S > 0, axis=1)
    if not np.any(good):
        return empty
    rows, S = rows[good], S[good]
    R, t = rigid_fit_batch(P[rows], S[:, :, None] * f[rows])      # camera <- world
    p_c = np.einsum("mij,mnj->mni", R, P[rows]) + t[:, None, :]
    p_c /= np.linalg.norm(p_c, axis=2, keepdims=True)
    fb = f[rows]
    err = np.arctan2(np.linalg.norm(np.cross(p_c, fb), axis=2), (p_c * fb).sum(2)).max(1)
    keep = err <= 1e-9
    R_wc = np.swapaxes(R[keep], 1, 2)
    return idx[rows[keep]], R_wc, -np.einsum("mij,mj->mi", R_wc, t[keep])


def p3p_minimal(bearings, points):
    """Camera poses (world <- camera) consistent with three bearing/point pairs.

    Grunert's quartic in the distance ratio, each root polished by Newton steps;
    the pose follows from a rigid fit of the recovered camera-frame points.
    Returns at most four distinct candidates.
    """
    P = np.asarray(points, dtype=float).reshape(3, 3)
    f = np.asarray(bearings, dtype=float).reshape(3, 3)
    scale = max(((P[i] - P[j]) ** 2).sum() for i, j in ((1, 2), (0, 2), (0, 1)))
    if scale == 0 or np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0])) < 1e-9 * scale:
        raise DegenerateConfiguration("world points are collinear or coincident")
    fn = f / np.linalg.norm(f, axis=1, keepdims=True)
    if max(fn[1] @ fn[2], fn[0] @ fn[2], fn[0] @ fn[1]) > 1 - 1e-12:
        raise DegenerateConfiguration("bearings coincide")
    out = []
    for R, t in zip(*p3p_batch(f[None], P[None])[1:]):
        T = RigidTransform.from_Rt(R, t)
        if not any(max(T.distance_to(c)) < 1e-9 for c in out):
            out.append(T)
    return out[:4]


def bearing_errors(T_world_camera: RigidTransform, bearings, points):
    """Angle (rad) between each bearing and the direction to its point."""
    p_c = T_world_camera.inverse().apply(np.asarray(points, dtype=float))
    p_c /= np.linalg.norm(p_c, axis=1, keepdims=True)
    b = np.asarray(bearings, dtype=float)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    cross = np.linalg.norm(np.cross(p_c, b), axis=1)
    return np.arctan2(cross, np.einsum("ij,ij->i", p_c, b))


# -- robust estimation ---------------------------------------------------------------

def reprojection_errors(T_world_camera: RigidTransform, camera: PinholeCamera, uv, points):
    """Pixel error per point; points behind the camera get +inf."""
    p_c = (points - T_world_camera.t) @ T_world_camera.R
    z = p_c[:, 2]
    err = np.full(len(points), np.inf)
    ok = z > 1e-9
    pix = camera.project(p_c[ok])
    err[ok] = np.linalg.norm(pix - uv[ok], axis=1)
    return err


def refine_pose(T_world_camera: RigidTransform, camera: PinholeCamera, uv, points, iterations=10):
    """Levenberg-Marquardt on squared pixel error over the camera pose."""
    T = T_world_camera
    lam = 1e-4

    def cost_of(T):
        p_c = (points - T.t) @ T.R
        if np.any(p_c[:, 2] <= 1e-9):
            return np.inf, None, None
        r = (camera.project(p_c) - uv).ravel()
        return r @ r, r, p_c

    cost, r, p_c = cost_of(T)
    for _ in range(iterations):
        if r is None:
            break
        Jp = projection_jacobian(camera.fx, camera.fy, p_c)
        J = np.concatenate([Jp @ skew_batch(p_c), -Jp], axis=2).reshape(-1, 6)
        H = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(10):
            delta = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            T_new = T.oplus(delta)
            c_new, r_new, p_new = cost_of(T_new)
            if c_new < cost:
                T, cost, r, p_c = T_new, c_new, r_new, p_new
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or np.abs(delta).max() < 1e-14:
            break
    return T


def _distinct(keys, mask):
    return len(np.unique(keys[mask])) if keys is not None else int(mask.sum())


def _inlier_masks(R_wc, t_wc, camera, uv, points, inlier_px):
    """(m, n) inlier masks of m camera hypotheses."""
    p_c = np.einsum("mnj,mji->mni", points[None] - t_wc[:, None, :], R_wc)
    z = p_c[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    du = camera.fx * p_c[..., 0] / zs + camera.cx - uv[:, 0]
    dv = camera.fy * p_c[..., 1] / zs + camera.cy - uv[:, 1]
    return front & (du * du + dv * dv < inlier_px * inlier_px)


def solve_pnp_ransac(uv, points, camera: PinholeCamera, config: LocalizationConfig | None = None,
                     keys=None, chunk=64):
    """Seeded RANSAC over P3P hypotheses; returns (T_world_camera or None, inlier mask).

    ``keys`` optionally identifies the keypoint of each correspondence so several
    candidate landmarks for one keypoint count as a single inlier. Samples are
    drawn and scored ``chunk`` at a time; the adaptive iteration bound is
    updated between chunks.
    """
    config = config or LocalizationConfig()
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(uv)
    keys = None if keys is None else np.asarray(keys)
    empty = np.zeros(n, dtype=bool)
    if n < 3:
        return None, empty
    key_ids = np.arange(n) if keys is None else np.unique(keys, return_inverse=True)[1]
    n_keys = int(key_ids.max()) + 1
    rng = np.random.default_rng(config.seed)
    bearings = camera.bearing(uv)
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)
    best_T, best_mask, best_score = None, empty, 0
    needed = config.max_iterations
    it = 0
    while it < min(needed, config.max_iterations):
        size = min(chunk, min(needed, config.max_iterations) - it)
        it += size
        sample = np.argpartition(rng.random((size, n)), 2, axis=1)[:, :3]
        distinct = ((key_ids[sample[:, 0]] != key_ids[sample[:, 1]])
                    & (key_ids[sample[:, 0]] != key_ids[sample[:, 2]])
                    & (key_ids[sample[:, 1]] != key_ids[sample[:, 2]]))
        sample = sample[distinct]
        if len(sample) == 0:
            continue
        _, R_wc, t_wc = p3p_batch(bearings[sample], points[sample])
        if len(R_wc) == 0:
            continue
        masks = _inlier_masks(R_wc, t_wc, camera, uv, points, config.inlier_px)
        hit = np.zeros((len(masks), n_keys), dtype=bool)
        r, c = np.nonzero(masks)
        hit[r, key_ids[c]] = True
        scores = hit.sum(axis=1)
        k = int(np.argmax(scores))
        if scores[k] > best_score:
            best_T = RigidTransform.from_Rt(R_wc[k], t_wc[k])
            best_mask, best_score = masks[k], int(scores[k])
            w = best_score / n_keys
            if w >= 1:
                needed = it
            else:
                needed = math.ceil(math.log(1 - config.success_probability)
                                   / math.log(1 - w ** 3))
    if best_T is None or best_score < 3:
        return None, empty
    T, mask = best_T, best_mask
    for _ in range(3):
        T = refine_pose(T, camera, uv[mask], points[mask], config.refine_iterations)
        new = reprojection_errors(T, camera, uv, points) < config.inlier_px
        if _distinct(keys, new) < 3 or np.array_equal(new, mask):
            break
        mask = new
    return T, mask


def pnp_ransac(matches, keypoints, camera: PinholeCamera, m: Map,
               config: LocalizationConfig | None = None) -> LocalizationResult:
    """Pose of the body from 2D-3D matches; ``keypoints`` are the frame's pixels."""
    config = config or LocalizationConfig()
    n = len(matches)
    if n == 0:
        return LocalizationResult(None, 0, 0, Status.NOT_LOCALIZED, np.zeros(0, bool))
    kp = np.array([mt.keypoint_idx for mt in matches])
    uv = np.asarray(keypoints, dtype=float)[kp]
    pts = m.landmark_positions_global([mt.landmark_id for mt in matches])
    if len(np.unique(kp)) < max(3, config.min_inliers):
        return LocalizationResult(None, 0, n, Status.NOT_LOCALIZED, np.zeros(n, bool))
    T_wc, mask = solve_pnp_ransac(uv, pts, camera, config, keys=kp)
    count = _distinct(kp, mask)
    if T_wc is None or count < config.min_inliers:
        return LocalizationResult(None, count, n, Status.NOT_LOCALIZED, mask)
    pose = T_wc @ camera.T_body_camera.inverse()
    return LocalizationResult(pose, count, n, Status.LOCALIZED, mask)


def localize_frame(frame, camera: PinholeCamera, m: Map, index=None, projection=None,
                   config: LocalizationConfig | None = None) -> LocalizationResult:
    """Match a query frame against the indexed map and estimate its global body pose.

    ``frame`` needs ``keypoints`` (n, 2) and bit-packed ``descriptors``. The wall
    time of the whole query is stored in ``query_time``.
    """
    config = config or LocalizationConfig()
    index = index if index is not None else m.index
    if index is None:
        raise IndexNotBuilt("build the landmark index before localizing")
    if projection is not None and projection is not index.projection:
        index = type(index)(projection, index.imi)
    t0 = time.perf_counter()
    matches = query_frame_matches(frame, index, m, config.matching())
    res = pnp_ransac(matches, frame.keypoints, camera, m, config)
    res.query_time = time.perf_counter() - t0
    return res
