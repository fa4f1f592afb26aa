"""Redundant keyframe removal along a mission chain."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NO_LANDMARK, Map, OdometryEdge
from .errors import EmptyMission, InvalidKeptSet
from .geometry import se3_adjoint


@dataclass
class KeyframeCriteria:
    """Thresholds for the forward scan. Defaults are tuning choices for desk-scale maps.

    ``min_coobserved_landmarks=None`` disables the co-observation trigger.
    """

    max_translation: float = 0.25
    max_rotation: float = 0.15
    max_consecutive_removed: int = 4
    min_coobserved_landmarks: int | None = 20

    def __post_init__(self):
        if self.max_translation <= 0 or self.max_rotation <= 0:
            raise ValueError("motion thresholds must be positive")
        if int(self.max_consecutive_removed) != self.max_consecutive_removed \
                or self.max_consecutive_removed < 1:
            raise ValueError("max_consecutive_removed must be an integer >= 1")
        if self.min_coobserved_landmarks is not None and (
                int(self.min_coobserved_landmarks) != self.min_coobserved_landmarks
                or self.min_coobserved_landmarks < 1):
            raise ValueError("min_coobserved_landmarks must be an integer >= 1 or None")


def _landmark_set(m: Map, vid):
    out = set()
    for fr in m.vertices[vid].frames:
        out.update(int(x) for x in fr.landmark_refs[fr.landmark_refs != NO_LANDMARK])
    return out


def keep_triggers(m: Map, kept_vid, vid, removed_since, criteria: KeyframeCriteria,
                  kept_landmarks=None):
    """Names of the triggers that force ``vid`` to be kept after ``kept_vid``."""
    rel = m.vertices[kept_vid].pose.inverse() @ m.vertices[vid].pose
    fired = []
    if np.linalg.norm(rel.translation) > criteria.max_translation:
        fired.append("translation")
    if rel.angle() > criteria.max_rotation:
        fired.append("rotation")
    if removed_since == criteria.max_consecutive_removed:
        fired.append("gap")
    if criteria.min_coobserved_landmarks is not None:
        if kept_landmarks is None:
            kept_landmarks = _landmark_set(m, kept_vid)
        if len(kept_landmarks & _landmark_set(m, vid)) < criteria.min_coobserved_landmarks:
            fired.append("coobservation")
    return fired


def select_keyframes(mission, m: Map, criteria: KeyframeCriteria):
    """Greedy forward scan; returns the kept vertex ids in chain order."""
    mission = m.missions[mission] if not hasattr(mission, "vertex_ids") else mission
    ids = mission.vertex_ids
    if not ids:
        raise EmptyMission(f"mission {mission.id} has no vertices")
    kept = [ids[0]]
    removed = 0
    kept_lms = _landmark_set(m, ids[0]) if criteria.min_coobserved_landmarks else None
    for vid in ids[1:-1]:
        if keep_triggers(m, kept[-1], vid, removed, criteria, kept_lms):
            kept.append(vid)
            removed = 0
            if kept_lms is not None:
                kept_lms = _landmark_set(m, vid)
        else:
            removed += 1
    if len(ids) > 1:
        kept.append(ids[-1])
    return kept


def compose_edges(edges):
    """Chain odometry edges; covariance propagated to first order."""
    pose = edges[0].relative_pose
    cov = edges[0].covariance.copy()
    for e in edges[1:]:
        A = se3_adjoint(e.relative_pose.inverse())
        cov = A @ cov @ A.T + e.covariance
        pose = pose @ e.relative_pose
    return pose, 0.5 * (cov + cov.T)


def apply_keyframing(m: Map, kept, mission_id=None) -> Map:
    """Delete the vertices of one mission that are not in ``kept``.

    Odometry between surviving neighbours is the composition of the removed
    edges. Landmarks that lose all observations are deleted.
    """
    kept = list(kept)
    if not kept:
        raise InvalidKeptSet("kept set is empty")
    if mission_id is None:
        mission_id = m.vertices[kept[0]].mission_id if kept[0] in m.vertices else None
    if mission_id not in m.missions:
        raise InvalidKeptSet("kept set does not belong to a mission")
    mission = m.missions[mission_id]
    ids = mission.vertex_ids
    kept_set = set(kept)
    if not kept_set <= set(ids):
        raise InvalidKeptSet("kept set is not a subset of the mission's vertices")
    if ids[0] not in kept_set or ids[-1] not in kept_set:
        raise InvalidKeptSet("mission endpoints must be kept")
    if len(kept_set) == len(ids):
        return m

    new_ids = [v for v in ids if v in kept_set]
    removed = [v for v in ids if v not in kept_set]
    # compose edges between surviving neighbours
    new_edges = {}
    start = 0
    for i in range(1, len(ids)):
        if ids[i] in kept_set:
            chain = [m.edges[(ids[j], ids[j + 1])] for j in range(start, i)]
            a, b = ids[start], ids[i]
            if len(chain) == 1:
                new_edges[(a, b)] = chain[0]
            else:
                pose, cov = compose_edges(chain)
                new_edges[(a, b)] = OdometryEdge(a, b, pose, cov)
            start = i
    for j in range(len(ids) - 1):
        del m.edges[(ids[j], ids[j + 1])]
    m.edges.update(new_edges)

    orphans = set()
    for vid in removed:
        orphans.update(m.unlink_vertex(vid))
    for lid in orphans:
        if lid in m.landmarks and not m.landmarks[lid].backlinks:
            del m.landmarks[lid]
    removed_set = set(removed)
    for lid, lm in m.landmarks.items():
        if lm.host_vertex_id in removed_set:
            m.rehost(lid, min(m.observers(lid)))
    for vid in removed:
        del m.vertices[vid]
    mission.vertex_ids = new_ids
    return m


def keyframe_map(m: Map, criteria: KeyframeCriteria):
    """Keyframe every mission; returns {mission id: (before, after)} counts."""
    report = {}
    for mid in list(m.missions):
        before = len(m.missions[mid].vertex_ids)
        if before == 0:
            continue
        apply_keyframing(m, select_keyframes(m.missions[mid], m, criteria), mid)
        report[mid] = (before, len(m.missions[mid].vertex_ids))
    return report
