import functools
import os
import sys

import numpy as np
import pytest

from mapstitch.core import (NO_LANDMARK, Frame, Landmark, Map, Mission, OdometryEdge, Vertex,
                            default_camera, ingest_session)
from mapstitch.geometry import RigidTransform
from mapstitch.sessionlog import SessionLog
from mapstitch.synth import WorldConfig, generate_world

sys.path.insert(0, os.path.dirname(__file__))

ODOM_COV = np.diag([1e-4] * 3 + [1e-3] * 3)


def build_map(missions, observations=(), landmarks=None, bits=64, seed=0, camera=None):
    """Hand-built map.

    missions: list of pose lists (mission <- body), one per mission.
    observations: (mission index, vertex index, landmark id) triples.
    landmarks: {landmark id: position in the host mission frame}.
    """
    rng = np.random.default_rng(seed)
    m = Map(bits, [camera or default_camera()])
    vids = []
    for mi, poses in enumerate(missions):
        mission = Mission(mi)
        m.missions[mi] = mission
        row = []
        for k, T in enumerate(poses):
            vid = m.next_vertex_id
            m.next_vertex_id += 1
            m.vertices[vid] = Vertex(vid, mi, float(k), T, [Frame.empty(bits // 8)])
            mission.vertex_ids.append(vid)
            row.append(vid)
        for a, b in zip(row[:-1], row[1:]):
            rel = m.vertices[a].pose.inverse() @ m.vertices[b].pose
            m.edges[(a, b)] = OdometryEdge(a, b, rel, ODOM_COV.copy())
        vids.append(row)
    m.next_mission_id = len(missions)
    if missions:
        m.reference_mission = 0
        m.missions[0].anchored = True
    per_vertex = {}
    for mi, k, lid in observations:
        per_vertex.setdefault(vids[mi][k], []).append(lid)
    landmarks = landmarks or {}
    for vid, lids in per_vertex.items():
        n = len(lids)
        refs = np.array(lids, dtype=np.int64)
        m.vertices[vid].frames[0] = Frame(
            rng.uniform(0, 600, (n, 2)), np.ones(n),
            rng.integers(0, 256, (n, bits // 8), dtype=np.uint8), refs)
        for k, lid in enumerate(lids):
            lm = m.landmarks.get(lid)
            if lm is None:
                lm = Landmark(lid, np.asarray(landmarks.get(lid, np.zeros(3)), float), vid)
                m.landmarks[lid] = lm
            lm.backlinks.add((vid, 0, k))
    m.next_landmark_id = max(m.landmarks, default=-1) + 1
    return m


def identity_chain(n):
    return [RigidTransform.identity() for _ in range(n)]


def line_chain(n, step=1.0, axis=0):
    out = []
    for k in range(n):
        t = np.zeros(3)
        t[axis] = k * step
        out.append(RigidTransform.from_Rt(np.eye(3), t))
    return out


@functools.lru_cache(maxsize=None)
def small_world(noise=True, seed=2, sessions=3, length=150.0, landmarks=1500, overlap="shared"):
    cfg = WorldConfig(landmark_count=landmarks, session_count=sessions,
                      trajectory_length=length, overlap=overlap, seed=seed)
    if not noise:
        cfg.odometry_sigma_rot = cfg.odometry_sigma_trans = cfg.pixel_sigma = 0.0
    return cfg, *generate_world(cfg)


def ingest_world(logs):
    m = Map()
    for slog in logs:
        ingest_session(slog, m)
    return m


def truncated(slog, n):
    """First ``n`` vertices of a session log."""
    return SessionLog(slog.vertices[:n], [o for o in slog.odometry if o[1] < n],
                      [k for k in slog.keypoints if k.vertex < n], {}, dict(slog.cameras))


@pytest.fixture
def world_map():
    cfg, logs, truth = small_world()
    return ingest_world(logs), truth


def random_map(seed):
    """Randomized map exercising every serialized field."""
    from mapstitch.camera import PinholeCamera
    from mapstitch.core import Quality
    from mapstitch.descriptor_index import LandmarkIndex, build_index, train_projection
    from mapstitch.geometry import random_transform

    rng = np.random.default_rng(seed)
    n_missions = int(rng.integers(0, 4))
    missions = [[random_transform(rng, max_translation=50.0)
                 for _ in range(int(rng.integers(1, 6)))] for _ in range(n_missions)]
    n_lm = int(rng.integers(0, 12)) if n_missions else 0
    obs = []
    for lid in range(n_lm):
        mi = int(rng.integers(n_missions))
        for k in rng.choice(len(missions[mi]), int(rng.integers(1, len(missions[mi]) + 1)),
                            replace=False):
            obs.append((mi, int(k), lid))
    bits = int(rng.choice([8, 64, 512]))
    cam = PinholeCamera(*rng.uniform(100, 600, 4), random_transform(rng, max_translation=0.2),
                        int(rng.integers(100, 2000)), int(rng.integers(100, 2000)))
    m = build_map(missions, obs, {l: rng.normal(size=3) * 10 for l in range(n_lm)},
                  bits=bits, seed=seed, camera=cam)
    for lm in m.landmarks.values():
        lm.quality = Quality(int(rng.integers(0, 3)))
        lm.source_id = int(rng.integers(-1, 10 ** 6))
    for mission in m.missions.values():
        mission.baseframe = random_transform(rng, max_translation=100.0)
        mission.anchored = bool(rng.integers(0, 2)) or mission.id == 0
    for e in m.edges.values():
        A = rng.normal(size=(6, 6))
        e.covariance = A @ A.T + 1e-3 * np.eye(6)
    if n_missions and rng.integers(0, 2):
        m.reference_mission = int(rng.integers(n_missions))
    if rng.integers(0, 3) == 0 and bits >= 64:
        desc = rng.integers(0, 256, (40, bits // 8), dtype=np.uint8)
        proj = train_projection(desc, 4, seed=seed)
        imi = build_index((np.arange(40), proj.project(desc)), 2, seed=seed)
        m.index = LandmarkIndex(proj, imi)
    return m


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    results = getattr(acc, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
