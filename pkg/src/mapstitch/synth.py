"""Synthetic multi-session worlds with exact ground truth, plus evaluation oracles.

Sessions drive a planar robot (body x forward, z up) with a forward-looking
camera along a smooth path lined with landmarks. Each session's log is written
in its own mission frame, whose origin is the session's first true pose.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from .camera import PinholeCamera
from .errors import CountMismatch, InvalidConfig
from .geometry import RigidTransform, rigid_fit
from .sessionlog import LogKeypoint, SessionLog, session_log_text

# camera z forward, x right, y down, mounted looking along body x
R_BODY_CAMERA = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass
class WorldConfig:
    landmark_count: int = 5000
    session_count: int = 3
    trajectory_length: float = 500.0        # per session, m
    keyframe_spacing: float = 1.0           # m between logged vertices
    overlap: str = "shared"                 # "shared" loop or "chain" of partial overlaps
    chain_overlap: float = 0.3              # fraction shared by consecutive sessions (chain)
    area_extent: float | None = None        # loop width, m; derived from the length if None
    odometry_sigma_rot: float = 0.002       # rad per edge
    odometry_sigma_trans: float = 0.01      # m per edge
    pixel_sigma: float = 0.5                # px
    descriptor_bits: int = 512
    descriptor_clusters: int = 32
    descriptor_flip_rate: float = 0.25      # landmark descriptor vs its cluster center
    observation_flip_rate: float = 0.02     # each observation vs its landmark descriptor
    lateral_range: tuple = (3.0, 12.0)      # landmark distance from the path, m
    height_range: tuple = (-1.5, 4.0)
    path_jitter: float = 0.5                # per-session lateral deviation, m
    min_range: float = 1.0
    max_range: float = 30.0
    clutter_per_frame: int = 0              # untracked keypoints with random descriptors
    track_gap: int = 3                      # keyframes unseen before a revisit starts a new track
    include_landmark_positions: bool = False
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    seed: int = 0

    def validate(self):
        if self.landmark_count < 0 or self.session_count < 1:
            raise InvalidConfig("need at least one session and a non-negative landmark count")
        if self.trajectory_length <= 0 or self.keyframe_spacing <= 0:
            raise InvalidConfig("trajectory length and keyframe spacing must be positive")
        if min(self.odometry_sigma_rot, self.odometry_sigma_trans, self.pixel_sigma) < 0:
            raise InvalidConfig("noise sigmas must be non-negative")
        if self.overlap not in ("shared", "chain"):
            raise InvalidConfig(f"unknown overlap mode {self.overlap!r}")
        if not 0 <= self.chain_overlap < 1:
            raise InvalidConfig("chain_overlap must lie in [0, 1)")
        if self.descriptor_bits % 8 or self.descriptor_bits <= 0:
            raise InvalidConfig("descriptor_bits must be a positive multiple of 8")
        if not (0 <= self.descriptor_flip_rate <= 1 and 0 <= self.observation_flip_rate <= 1):
            raise InvalidConfig("flip rates must lie in [0, 1]")
        if self.descriptor_clusters < 1:
            raise InvalidConfig("need at least one descriptor cluster")

    def camera(self):
        return PinholeCamera(self.fx, self.fy, self.cx, self.cy,
                             RigidTransform.from_Rt(R_BODY_CAMERA, np.zeros(3)),
                             self.width, self.height)

    @classmethod
    def from_file(cls, path):
        """Read ``key value`` lines; unknown keys raise InvalidConfig."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        with open(path) as fh:
            for raw in fh:
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, value = line.replace("=", " ", 1).partition(" ")
                key = key.strip().replace("-", "_")
                value = value.strip()
                if key not in known:
                    raise InvalidConfig(f"unknown config key {key!r}")
                default = getattr(cls(), key)
                if isinstance(default, bool):
                    kwargs[key] = value.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kwargs[key] = int(value)
                elif isinstance(default, tuple):
                    kwargs[key] = tuple(float(v) for v in value.replace(",", " ").split())
                elif isinstance(default, str):
                    kwargs[key] = value
                else:
                    kwargs[key] = None if value == "none" else float(value)
        return cls(**kwargs)


@dataclass
class GroundTruth:
    timestamps: list = field(default_factory=list)        # per session (n,) arrays
    poses: list = field(default_factory=list)             # per session: world <- body
    landmarks: np.ndarray = None                          # (N, 3) world positions
    landmark_descriptors: np.ndarray = None               # (N, bytes) noise-free descriptors
    observed: list = field(default_factory=list)          # per session: sorted landmark ids
    mission_transforms: list = field(default_factory=list)  # world <- mission

    def position_by_timestamp(self):
        out = {}
        for ts, poses in zip(self.timestamps, self.poses):
            for t, T in zip(ts, poses):
                out[float(t)] = T.translation
        return out

    def true_landmark_id(self, log_id):
        """World landmark behind a session-log landmark id (track ids wrap modulo N)."""
        return np.asarray(log_id) % len(self.landmarks)

    def correspondences(self, a, b):
        """Landmark ids observed by both sessions."""
        return np.intersect1d(self.observed[a], self.observed[b])


class _Path:
    """Arc-length parameterized planar curve."""

    def __init__(self, pts, closed):
        if closed:
            pts = np.vstack([pts, pts[:1]])
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.pts = pts
        self.length = self.s[-1]
        self.closed = closed

    def _wrap(self, s):
        return np.mod(s, self.length) if self.closed else np.clip(s, 0, self.length)

    def point(self, s):
        s = self._wrap(np.asarray(s, dtype=float))
        return np.stack([np.interp(s, self.s, self.pts[:, 0]),
                         np.interp(s, self.s, self.pts[:, 1])], axis=-1)

    def tangent(self, s, h=0.25):
        s = np.asarray(s, dtype=float)
        lo = s - h if self.closed else np.clip(s - h, 0, self.length - 2 * h)
        d = self.point(lo + 2 * h) - self.point(lo)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _loop_path(length, extent=None):
    t = np.linspace(0, 2 * np.pi, 4000, endpoint=False)
    p = 4.0
    x = np.sign(np.cos(t)) * np.abs(np.cos(t)) ** (2 / p)
    y = 0.5 * np.sign(np.sin(t)) * np.abs(np.sin(t)) ** (2 / p)
    pts = np.column_stack([x, y])
    raw = _Path(pts, closed=True).length
    scale = length / raw
    if extent is not None:
        scale = extent / 2.0
    return _Path(pts * scale, closed=True)


def _chain_path(length):
    s = np.linspace(0, length, int(length * 4) + 2)
    pts = np.column_stack([s, 20.0 * np.sin(2 * np.pi * s / 300.0)])
    path = _Path(pts, closed=False)
    # resample so arc length matches the nominal length
    return path


def _yaw_pose(xy, tangent, z=0.0):
    c, s = tangent
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform.from_Rt(R, [xy[0], xy[1], z])


def _noise_transform(rng, sigma_rot, sigma_trans):
    return RigidTransform.identity().oplus(
        np.concatenate([rng.normal(0, sigma_rot, 3), rng.normal(0, sigma_trans, 3)]))


def _session_spans(cfg, path):
    L = cfg.trajectory_length
    if cfg.overlap == "shared":
        return [(i * path.length / cfg.session_count, L) for i in range(cfg.session_count)]
    step = L * (1 - cfg.chain_overlap)
    return [(i * step, L) for i in range(cfg.session_count)]


def generate_world(cfg: WorldConfig):
    """Return (list of SessionLog, GroundTruth); deterministic under ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if cfg.overlap == "shared":
        path = _loop_path(cfg.trajectory_length, cfg.area_extent)
    else:
        total = cfg.trajectory_length * (1 + (cfg.session_count - 1) * (1 - cfg.chain_overlap))
        path = _chain_path(total)
    cam = cfg.camera()
    nbytes = cfg.descriptor_bits // 8

    # landmarks along the path
    n = cfg.landmark_count
    s_l = rng.uniform(0, path.length, n)
    side = rng.choice([-1.0, 1.0], n)
    lat = rng.uniform(*cfg.lateral_range, n)
    h = rng.uniform(*cfg.height_range, n)
    tan = path.tangent(s_l)
    normal = np.column_stack([-tan[:, 1], tan[:, 0]])
    xy = path.point(s_l) + (side * lat)[:, None] * normal
    landmarks = np.column_stack([xy, h])

    centers = rng.random((cfg.descriptor_clusters, cfg.descriptor_bits)) < 0.5
    cluster = rng.integers(cfg.descriptor_clusters, size=n)
    lm_bits = centers[cluster] ^ (rng.random((n, cfg.descriptor_bits)) < cfg.descriptor_flip_rate)
    truth = GroundTruth(landmarks=landmarks, landmark_descriptors=np.packbits(lm_bits, axis=1))

    sig_r = cfg.odometry_sigma_rot
    sig_t = cfg.odometry_sigma_trans
    cov = np.diag([max(sig_r, 1e-3) ** 2] * 3 + [max(sig_t, 1e-2) ** 2] * 3)
    kp_sigma = cfg.pixel_sigma if cfg.pixel_sigma > 0 else 1.0
    logs = []
    for i, (s0, L) in enumerate(_session_spans(cfg, path)):
        count = int(np.floor(L / cfg.keyframe_spacing + 1e-9)) + 1
        s = s0 + np.arange(count) * cfg.keyframe_spacing
        phase = rng.uniform(0, 2 * np.pi)
        offset = cfg.path_jitter * np.sin(2 * np.pi * s / 50.0 + phase)
        tang = path.tangent(s)
        nrm = np.column_stack([-tang[:, 1], tang[:, 0]])
        pos = path.point(s) + offset[:, None] * nrm
        # heading follows the actual (offset) path
        d = np.gradient(pos, axis=0)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        true_poses = [_yaw_pose(pos[k], d[k]) for k in range(count)]
        T_world_mission = true_poses[0]
        ts = 10000.0 * i + np.arange(count) * cfg.keyframe_spacing

        slog = SessionLog(cameras={0: cam})
        est = RigidTransform.identity()
        for k in range(count):
            if k > 0:
                rel = true_poses[k - 1].inverse() @ true_poses[k]
                if sig_r > 0 or sig_t > 0:
                    rel = rel @ _noise_transform(rng, sig_r, sig_t)
                slog.odometry.append((k - 1, k, rel, cov))
                est = est @ rel
            slog.vertices.append((float(ts[k]), est))

        seen = set()
        # a landmark lost for more than track_gap keyframes is re-detected as a new
        # track, with log id = world id + N * track number
        last_seen = np.full(n, -10 ** 9)
        track = np.zeros(n, dtype=np.int64)
        for k, T_wb in enumerate(true_poses):
            T_cw = (T_wb @ cam.T_body_camera).inverse()
            p_c = T_cw.apply(landmarks)
            depth = p_c[:, 2]
            dist = np.linalg.norm(p_c, axis=1)
            ok = (depth > cfg.min_range) & (dist < cfg.max_range)
            idx = np.flatnonzero(ok)
            uv = cam.project(p_c[idx])
            inside = cam.in_image(uv)
            idx, uv = idx[inside], uv[inside]
            if cfg.pixel_sigma > 0:
                uv = uv + rng.normal(0, cfg.pixel_sigma, uv.shape)
                keep = cam.in_image(uv)
                idx, uv = idx[keep], uv[keep]
            bits = lm_bits[idx] ^ (rng.random((len(idx), cfg.descriptor_bits))
                                   < cfg.observation_flip_rate)
            desc = np.packbits(bits, axis=1)
            renew = (last_seen[idx] >= 0) & (k - last_seen[idx] > cfg.track_gap + 1)
            track[idx[renew]] += 1
            last_seen[idx] = k
            log_ids = idx + n * track[idx]
            for j, lid in enumerate(log_ids):
                slog.keypoints.append(LogKeypoint(k, 0, (float(uv[j, 0]), float(uv[j, 1])),
                                                  kp_sigma, desc[j].tobytes(), int(lid)))
            seen.update(int(x) for x in log_ids)
            if cfg.clutter_per_frame:
                cu = rng.uniform([0, 0], [cam.width, cam.height], (cfg.clutter_per_frame, 2))
                cd = rng.integers(0, 256, (cfg.clutter_per_frame, nbytes), dtype=np.uint8)
                for j in range(cfg.clutter_per_frame):
                    slog.keypoints.append(LogKeypoint(k, 0, (float(cu[j, 0]), float(cu[j, 1])),
                                                      kp_sigma, cd[j].tobytes(), None))
        if cfg.include_landmark_positions:
            inv = T_world_mission.inverse()
            for lid in sorted(seen):
                slog.landmarks[lid] = inv.apply(landmarks[lid % n])
        logs.append(slog)
        truth.timestamps.append(ts)
        truth.poses.append(true_poses)
        truth.observed.append(np.unique(np.array(sorted(seen), dtype=np.int64) % max(n, 1)))
        truth.mission_transforms.append(T_world_mission)
    return logs, truth


def write_world(logs, truth: GroundTruth, out_dir):
    """Emit ``session_XX.log`` files plus ``truth.csv`` and ``landmarks.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, slog in enumerate(logs):
        p = os.path.join(out_dir, f"session_{i:02d}.log")
        with open(p, "w") as fh:
            fh.write(session_log_text(slog))
        paths.append(p)
    with open(os.path.join(out_dir, "truth.csv"), "w") as fh:
        fh.write("session,ts,x,y,z,qw,qx,qy,qz\n")
        for i, (ts, poses) in enumerate(zip(truth.timestamps, truth.poses)):
            for t, T in zip(ts, poses):
                vals = ",".join(repr(float(v)) for v in (*T.translation, *T.rotation))
                fh.write(f"{i},{float(t)!r},{vals}\n")
    with open(os.path.join(out_dir, "landmarks.csv"), "w") as fh:
        fh.write("id,x,y,z\n")
        for lid, p in enumerate(truth.landmarks):
            fh.write(f"{lid}," + ",".join(repr(float(v)) for v in p) + "\n")
    return paths


def read_truth_csv(path):
    """ts -> true position, from a ``truth.csv`` written by ``write_world``."""
    out = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) >= 5:
                out[float(parts[1])] = np.array([float(v) for v in parts[2:5]])
    return out


# -- evaluation oracles --------------------------------------------------------------

def evaluate_ate(estimated, true):
    """RMSE of positions after the least-squares rigid alignment of estimate to truth."""
    est = np.asarray(estimated, dtype=float).reshape(-1, 3)
    gt = np.asarray(true, dtype=float).reshape(-1, 3)
    if len(est) != len(gt):
        raise CountMismatch(f"{len(est)} estimated vs {len(gt)} true positions")
    if len(est) == 0:
        return 0.0
    T = rigid_fit(est, gt)
    err = T.apply(est) - gt
    return float(np.sqrt((err ** 2).sum(axis=1).mean()))


def map_trajectory(m):
    """Global vertex positions keyed by timestamp."""
    out = {}
    for mission in m.missions.values():
        for vid in mission.vertex_ids:
            v = m.vertices[vid]
            out[v.timestamp] = mission.baseframe.apply(v.pose.translation)
    return out


def trajectory_ate(m, truth: GroundTruth, per_mission=False):
    """ATE of a map's vertices against ground truth, matched by timestamp.

    With ``per_mission`` every mission is aligned to the truth on its own (the
    most favourable reading of unregistered odometry) and the errors pooled.
    """
    gt = truth.position_by_timestamp()
    if not per_mission:
        traj = map_trajectory(m)
        keys = sorted(traj)
        return evaluate_ate([traj[k] for k in keys], [gt[k] for k in keys])
    sq, count = 0.0, 0
    for mission in m.missions.values():
        ts = [m.vertices[v].timestamp for v in mission.vertex_ids]
        est = [m.vertices[v].pose.translation for v in mission.vertex_ids]
        e = evaluate_ate(est, [gt[t] for t in ts])
        sq += e * e * len(ts)
        count += len(ts)
    return float(np.sqrt(sq / max(count, 1)))


def render_query(points, descriptors, T_world_camera, camera: PinholeCamera, rng=None,
                 pixel_sigma=0.0, max_range=30.0, min_range=0.5):
    """Keypoints and descriptors seen by a camera at ``T_world_camera``.

    Returns (uv (n, 2), descriptors (n, bytes), indices into ``points``).
    """
    p_c = T_world_camera.inverse().apply(points)
    dist = np.linalg.norm(p_c, axis=1)
    idx = np.flatnonzero((p_c[:, 2] > min_range) & (dist < max_range))
    uv = camera.project(p_c[idx])
    inside = camera.in_image(uv)
    idx, uv = idx[inside], uv[inside]
    if pixel_sigma > 0:
        uv = uv + (rng or np.random.default_rng()).normal(0, pixel_sigma, uv.shape)
    return uv, np.asarray(descriptors)[idx], idx


def synthetic_projected_descriptors(n, d=16, clusters=64, spread=0.15, seed=0):
    """Clustered d-dimensional vectors mimicking projected appearance descriptors."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 1.0, (clusters, d))
    label = rng.integers(clusters, size=n)
    return centers[label] + rng.normal(0, spread, (n, d))
