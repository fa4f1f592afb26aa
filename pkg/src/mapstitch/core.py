"""Map data model, integrity checking and session ingestion."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import PinholeCamera
from .errors import DescriptorLengthMismatch, MalformedLog, NonMonotonicTimestamps
from .geometry import RigidTransform
from .sessionlog import SessionLog, parse_session_log

log = logging.getLogger(__name__)

DEFAULT_DESCRIPTOR_BITS = 512
DEFAULT_ODOMETRY_COVARIANCE = np.diag([1e-4] * 3 + [1e-3] * 3)
FALLBACK_DEPTH = 10.0
NO_LANDMARK = -1


class Quality(enum.IntEnum):
    UNEVALUATED = 0
    GOOD = 1
    BAD = 2


def default_camera():
    return PinholeCamera(400.0, 400.0, 320.0, 240.0)


@dataclass(eq=False)
class Frame:
    """Observations of one camera of the rig at one vertex."""

    keypoints: np.ndarray          # (n, 2) pixels
    sigmas: np.ndarray             # (n,) isotropic std-dev, px
    descriptors: np.ndarray        # (n, bits // 8) uint8, bit-packed
    landmark_refs: np.ndarray      # (n,) int64, NO_LANDMARK when untracked

    @classmethod
    def empty(cls, descriptor_bytes):
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, descriptor_bytes), np.uint8),
                   np.zeros(0, np.int64))

    def __len__(self):
        return len(self.keypoints)


@dataclass(eq=False)
class Vertex:
    id: int
    mission_id: int
    timestamp: float
    pose: RigidTransform            # mission <- body
    frames: list = field(default_factory=list)


@dataclass(eq=False)
class Landmark:
    id: int
    position: np.ndarray            # host mission frame
    host_vertex_id: int
    backlinks: set = field(default_factory=set)   # {(vertex, frame, keypoint)}
    quality: Quality = Quality.UNEVALUATED
    source_id: int = -1             # landmark id in the originating session log


@dataclass(eq=False)
class OdometryEdge:
    from_vertex: int
    to_vertex: int
    relative_pose: RigidTransform   # from <- to
    covariance: np.ndarray


@dataclass(eq=False)
class Mission:
    id: int
    baseframe: RigidTransform = field(default_factory=RigidTransform.identity)
    anchored: bool = False
    vertex_ids: list = field(default_factory=list)


class Map:
    """Missions, keyframe vertices, odometry edges and landmarks."""

    def __init__(self, descriptor_bits=None, cameras=None):
        self.descriptor_bits = descriptor_bits
        self.cameras = list(cameras or [])
        self.missions: dict[int, Mission] = {}
        self.vertices: dict[int, Vertex] = {}
        self.edges: dict[tuple, OdometryEdge] = {}
        self.landmarks: dict[int, Landmark] = {}
        self.reference_mission = None
        self.next_mission_id = 0
        self.next_vertex_id = 0
        self.next_landmark_id = 0
        # optional retrieval index, see loop_engine.LandmarkIndex
        self.index = None

    # -- frames of reference -------------------------------------------------
    def reference(self):
        if self.reference_mission is not None:
            return self.reference_mission
        return next(iter(self.missions), None)

    def mission_of(self, vertex_id) -> Mission:
        return self.missions[self.vertices[vertex_id].mission_id]

    def global_pose(self, vertex_id) -> RigidTransform:
        v = self.vertices[vertex_id]
        return self.missions[v.mission_id].baseframe @ v.pose

    def camera_pose(self, vertex_id, frame_idx) -> RigidTransform:
        return self.global_pose(vertex_id) @ self.cameras[frame_idx].T_body_camera

    def landmark_global(self, landmark_id):
        lm = self.landmarks[landmark_id]
        return self.mission_of(lm.host_vertex_id).baseframe.apply(lm.position)

    def set_landmark_global(self, landmark_id, p_global):
        lm = self.landmarks[landmark_id]
        lm.position = self.mission_of(lm.host_vertex_id).baseframe.inverse().apply(p_global)

    def landmark_positions_global(self, landmark_ids):
        return np.array([self.landmark_global(l) for l in landmark_ids]).reshape(-1, 3)

    # -- landmarks ---------------------------------------------------------------
    def observers(self, landmark_id):
        return {b[0] for b in self.landmarks[landmark_id].backlinks}

    def usable(self, landmark_id):
        return self.landmarks[landmark_id].quality != Quality.BAD

    def usable_landmarks(self):
        return [l for l, lm in self.landmarks.items() if lm.quality != Quality.BAD]

    def rehost(self, landmark_id, new_host):
        lm = self.landmarks[landmark_id]
        p = self.landmark_global(landmark_id)
        lm.host_vertex_id = new_host
        self.set_landmark_global(landmark_id, p)

    def remove_landmark(self, landmark_id):
        lm = self.landmarks.pop(landmark_id)
        for vid, f, k in lm.backlinks:
            self.vertices[vid].frames[f].landmark_refs[k] = NO_LANDMARK

    def unlink_vertex(self, vertex_id):
        """Drop every backlink from a vertex; returns landmarks left unobserved."""
        orphaned = []
        v = self.vertices[vertex_id]
        for f, frame in enumerate(v.frames):
            for k in np.flatnonzero(frame.landmark_refs != NO_LANDMARK):
                lid = int(frame.landmark_refs[k])
                lm = self.landmarks[lid]
                lm.backlinks.discard((vertex_id, f, int(k)))
                frame.landmark_refs[k] = NO_LANDMARK
                if not lm.backlinks:
                    orphaned.append(lid)
        return orphaned

    def transfer_landmark(self, src_id, dst_id):
        """Move all observations of ``src_id`` to ``dst_id`` and delete ``src_id``."""
        src = self.landmarks.pop(src_id)
        dst = self.landmarks[dst_id]
        for vid, f, k in src.backlinks:
            self.vertices[vid].frames[f].landmark_refs[k] = dst_id
        dst.backlinks |= src.backlinks

    def mission_edges(self, mission_id):
        ids = self.missions[mission_id].vertex_ids
        return [self.edges[(a, b)] for a, b in zip(ids[:-1], ids[1:])]

    def counts(self):
        n_desc = sum(len(f) for v in self.vertices.values() for f in v.frames)
        return {
            "missions": len(self.missions),
            "keyframes": len(self.vertices),
            "landmarks": len(self.landmarks),
            "good_landmarks": sum(lm.quality == Quality.GOOD for lm in self.landmarks.values()),
            "descriptors": n_desc,
            "edges": len(self.edges),
        }


@dataclass
class Violation:
    invariant: str
    offending_id: object
    detail: str = ""

    def __str__(self):
        return f"{self.invariant} [{self.offending_id}] {self.detail}".rstrip()


def _pose_ok(T):
    return abs(np.linalg.norm(T.rotation) - 1.0) <= 1e-9


def check_integrity(m: Map) -> list:
    """Return every violated invariant; an empty list means the map is consistent."""
    out = []
    bytes_per = None if m.descriptor_bits is None else m.descriptor_bits // 8
    seen = {}
    for mid, mission in m.missions.items():
        if not _pose_ok(mission.baseframe):
            out.append(Violation("unit-quaternion", f"mission {mid}", "baseframe"))
        ids = mission.vertex_ids
        for vid in ids:
            if vid not in m.vertices:
                out.append(Violation("mission-vertex-exists", f"mission {mid}", f"vertex {vid}"))
            elif vid in seen:
                out.append(Violation("vertex-single-mission", f"vertex {vid}"))
            else:
                seen[vid] = mid
                if m.vertices[vid].mission_id != mid:
                    out.append(Violation("vertex-mission-id", f"vertex {vid}"))
        for a, b in zip(ids[:-1], ids[1:]):
            if a in m.vertices and b in m.vertices:
                if not m.vertices[a].timestamp < m.vertices[b].timestamp:
                    out.append(Violation("monotonic-timestamps", f"vertex {b}"))
            if (a, b) not in m.edges:
                out.append(Violation("odometry-chain", f"mission {mid}", f"missing edge {a}->{b}"))
    for vid in m.vertices:
        if vid not in seen:
            out.append(Violation("vertex-single-mission", f"vertex {vid}", "orphan vertex"))

    for (a, b), e in m.edges.items():
        if (e.from_vertex, e.to_vertex) != (a, b):
            out.append(Violation("edge-key", f"edge {a}->{b}"))
        ma, mb = seen.get(a), seen.get(b)
        ok = ma is not None and ma == mb
        if ok:
            ids = m.missions[ma].vertex_ids
            i = ids.index(a)
            ok = i + 1 < len(ids) and ids[i + 1] == b
        if not ok:
            out.append(Violation("edge-consecutive", f"edge {a}->{b}"))
        if not _pose_ok(e.relative_pose):
            out.append(Violation("unit-quaternion", f"edge {a}->{b}"))
        C = e.covariance
        if C.shape != (6, 6) or np.max(np.abs(C - C.T)) > 1e-12:
            out.append(Violation("covariance-symmetric", f"edge {a}->{b}"))
        elif np.min(np.linalg.eigvalsh(C)) <= 0:
            out.append(Violation("covariance-positive", f"edge {a}->{b}"))

    for vid, v in m.vertices.items():
        if not _pose_ok(v.pose):
            out.append(Violation("unit-quaternion", f"vertex {vid}"))
        if len(v.frames) > max(len(m.cameras), 0) and v.frames:
            out.append(Violation("frame-camera", f"vertex {vid}", "more frames than cameras"))
        for f, fr in enumerate(v.frames):
            n = len(fr.keypoints)
            if not (fr.sigmas.shape == (n,) and fr.descriptors.shape[0] == n
                    and fr.landmark_refs.shape == (n,)):
                out.append(Violation("frame-lengths", f"vertex {vid}", f"frame {f}"))
                continue
            if bytes_per is not None and fr.descriptors.shape[1] != bytes_per:
                out.append(Violation("descriptor-length", f"vertex {vid}", f"frame {f}"))
            for k in np.flatnonzero(fr.landmark_refs != NO_LANDMARK):
                lid = int(fr.landmark_refs[k])
                lm = m.landmarks.get(lid)
                if lm is None:
                    out.append(Violation("landmark-ref-exists", f"vertex {vid}",
                                         f"frame {f} keypoint {k} -> {lid}"))
                elif (vid, f, int(k)) not in lm.backlinks:
                    out.append(Violation("backlink-missing", f"landmark {lid}",
                                         f"({vid}, {f}, {k})"))

    for lid, lm in m.landmarks.items():
        if lm.id != lid:
            out.append(Violation("landmark-id", f"landmark {lid}"))
        if lm.host_vertex_id not in m.vertices:
            out.append(Violation("landmark-host", f"landmark {lid}"))
        if not lm.backlinks:
            out.append(Violation("landmark-observed", f"landmark {lid}", "no backlinks"))
        for vid, f, k in lm.backlinks:
            v = m.vertices.get(vid)
            if v is None or f >= len(v.frames) or k >= len(v.frames[f]):
                out.append(Violation("backlink-dangling", f"landmark {lid}", f"({vid}, {f}, {k})"))
            elif int(v.frames[f].landmark_refs[k]) != lid:
                out.append(Violation("backlink-mismatch", f"landmark {lid}", f"({vid}, {f}, {k})"))
        if not np.all(np.isfinite(lm.position)):
            out.append(Violation("landmark-finite", f"landmark {lid}"))
    if m.reference_mission is not None and m.reference_mission not in m.missions:
        out.append(Violation("reference-mission", m.reference_mission))
    return out


def triangulate_rays(centers, directions, groups, n_groups):
    """Least-squares intersection of rays, grouped by integer label.

    Minimizes the summed squared perpendicular distance to each ray. Returns
    (positions (n_groups, 3), well_conditioned mask).
    """
    P = np.eye(3)[None] - directions[:, :, None] * directions[:, None, :]
    A = np.zeros((n_groups, 3, 3))
    b = np.zeros((n_groups, 3))
    np.add.at(A, groups, P)
    np.add.at(b, groups, np.einsum("nij,nj->ni", P, centers))
    eig = np.linalg.eigvalsh(A)
    ok = eig[:, 0] > 1e-8 * np.maximum(eig[:, 2], 1e-300)
    pos = np.zeros((n_groups, 3))
    if np.any(ok):
        pos[ok] = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    return pos, ok


def _as_log(source):
    return source if isinstance(source, SessionLog) else parse_session_log(source)


def ingest_session(source, m: Map) -> int:
    """Append one session log to the map as a new unanchored mission."""
    slog = _as_log(source)
    if not slog.vertices:
        raise MalformedLog("session log contains no vertices")
    ts = np.array([t for t, _ in slog.vertices])
    if np.any(np.diff(ts) <= 0):
        raise NonMonotonicTimestamps("vertex timestamps must strictly increase")
    bits = slog.descriptor_bits
    if bits is not None and m.descriptor_bits is not None and bits != m.descriptor_bits:
        raise DescriptorLengthMismatch(f"log has {bits}-bit descriptors, map uses "
                                       f"{m.descriptor_bits}")
    n_v = len(slog.vertices)

    if slog.cameras:
        if sorted(slog.cameras) != list(range(len(slog.cameras))):
            raise MalformedLog("camera indices must be contiguous from 0")
        cams = [slog.cameras[i] for i in range(len(slog.cameras))]
        if m.cameras and (len(cams) != len(m.cameras)
                          or any(a != b for a, b in zip(cams, m.cameras))):
            raise MalformedLog("camera rig differs from the map's rig")
    else:
        cams = m.cameras or [default_camera()]

    edges = {}
    for a, b, pose, cov in slog.odometry:
        if not (0 <= a < n_v and b == a + 1):
            raise MalformedLog(f"odometry edge {a}->{b} does not join consecutive vertices")
        if (a, b) in edges:
            raise MalformedLog(f"duplicate odometry edge {a}->{b}")
        cov = 0.5 * (cov + cov.T)
        if np.min(np.linalg.eigvalsh(cov)) <= 0:
            raise MalformedLog(f"odometry covariance {a}->{b} is not positive definite")
        edges[(a, b)] = (pose, cov)

    per_frame = {}
    for i, kp in enumerate(slog.keypoints):
        if not (0 <= kp.vertex < n_v):
            raise MalformedLog(f"keypoint references unknown vertex {kp.vertex}")
        if not (0 <= kp.frame < len(cams)):
            raise MalformedLog(f"keypoint references unknown camera {kp.frame}")
        per_frame.setdefault((kp.vertex, kp.frame), []).append(i)

    # all checks passed: mutate the map
    if m.descriptor_bits is None:
        m.descriptor_bits = bits or DEFAULT_DESCRIPTOR_BITS
    if not m.cameras:
        m.cameras = list(cams)
    nbytes = m.descriptor_bits // 8
    mission = Mission(m.next_mission_id)
    m.next_mission_id += 1
    m.missions[mission.id] = mission
    vids = list(range(m.next_vertex_id, m.next_vertex_id + n_v))
    m.next_vertex_id += n_v
    n_frames = 1 + max([f for _, f in per_frame], default=0)
    for i, (t, pose) in enumerate(slog.vertices):
        v = Vertex(vids[i], mission.id, float(t), pose,
                   [Frame.empty(nbytes) for _ in range(n_frames)])
        m.vertices[v.id] = v
        mission.vertex_ids.append(v.id)
    for i in range(n_v - 1):
        if (i, i + 1) in edges:
            pose, cov = edges[(i, i + 1)]
        else:
            pose = slog.vertices[i][1].inverse() @ slog.vertices[i + 1][1]
            cov = DEFAULT_ODOMETRY_COVARIANCE.copy()
        m.edges[(vids[i], vids[i + 1])] = OdometryEdge(vids[i], vids[i + 1], pose, cov)

    # landmark ids in log order of first reference
    lm_map = {}
    for kp in slog.keypoints:
        if kp.landmark is not None and kp.landmark not in lm_map:
            lm_map[kp.landmark] = m.next_landmark_id
            m.next_landmark_id += 1
    first_obs = {}
    for (vi, f), idx in sorted(per_frame.items()):
        kps = [slog.keypoints[i] for i in idx]
        refs = np.array([NO_LANDMARK if k.landmark is None else lm_map[k.landmark]
                         for k in kps], dtype=np.int64)
        m.vertices[vids[vi]].frames[f] = Frame(
            np.array([k.uv for k in kps], dtype=float).reshape(-1, 2),
            np.array([k.sigma for k in kps], dtype=float),
            np.frombuffer(b"".join(k.descriptor for k in kps), dtype=np.uint8)
            .reshape(len(kps), nbytes).copy(),
            refs)
        for k, lid in enumerate(refs):
            if lid == NO_LANDMARK:
                continue
            lm = m.landmarks.get(int(lid))
            if lm is None:
                lm = Landmark(int(lid), np.zeros(3), vids[vi])
                m.landmarks[int(lid)] = lm
                first_obs[int(lid)] = (vi, f, k)
            lm.backlinks.add((vids[vi], f, k))
    inv_map = {g: s for s, g in lm_map.items()}
    for gid in lm_map.values():
        m.landmarks[gid].source_id = int(inv_map[gid])

    # positions: given in log, else triangulated in the mission frame
    missing = [g for s, g in lm_map.items() if s not in slog.landmarks]
    for s, g in lm_map.items():
        if s in slog.landmarks:
            m.landmarks[g].position = np.array(slog.landmarks[s], dtype=float)
    if missing:
        _triangulate_new(m, missing, first_obs)
    log.info("ingested mission %d: %d vertices, %d landmarks", mission.id, n_v, len(lm_map))
    return mission.id


def _triangulate_new(m: Map, landmark_ids, first_obs):
    group_of = {l: i for i, l in enumerate(landmark_ids)}
    centers, dirs, groups = [], [], []
    cam_cache = {}
    for lid in landmark_ids:
        for vid, f, k in sorted(m.landmarks[lid].backlinks):
            key = (vid, f)
            if key not in cam_cache:
                T = m.vertices[vid].pose @ m.cameras[f].T_body_camera
                cam_cache[key] = T
            T = cam_cache[key]
            ray = m.cameras[f].bearing(m.vertices[vid].frames[f].keypoints[k])[0]
            centers.append(T.translation)
            dirs.append(T.R @ ray)
            groups.append(group_of[lid])
    centers = np.array(centers)
    dirs = np.array(dirs)
    groups = np.array(groups)
    pos, ok = triangulate_rays(centers, dirs, groups, len(landmark_ids))
    for i, lid in enumerate(landmark_ids):
        if ok[i]:
            m.landmarks[lid].position = pos[i]
        else:
            j = int(np.flatnonzero(groups == i)[0])
            m.landmarks[lid].position = centers[j] + FALLBACK_DEPTH * dirs[j]
