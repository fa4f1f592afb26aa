"""Flag landmarks that are unreliable for localization and optimization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Map, Quality
from .errors import DanglingBacklink


@dataclass
class QualityThresholds:
    min_observers: int = 4
    min_disparity_angle: float = 5.0    # degrees
    max_distance: float = 50.0          # meters; a tuning choice

    def __post_init__(self):
        if self.min_observers < 2:
            raise ValueError("min_observers must be >= 2")
        if not 0 < self.min_disparity_angle < 90:
            raise ValueError("min_disparity_angle must lie in (0, 90) degrees")
        if self.max_distance <= 0:
            raise ValueError("max_distance must be positive")


TOO_FEW_OBSERVERS = "TooFewObservers"
LOW_DISPARITY = "LowDisparity"
TOO_FAR = "TooFar"


def max_ray_angle(origins, point):
    """Largest pairwise angle (degrees) between rays from ``origins`` to ``point``."""
    rays = point - np.asarray(origins, dtype=float)
    norms = np.linalg.norm(rays, axis=1)
    rays = rays[norms > 0] / norms[norms > 0, None]
    if len(rays) < 2:
        return 0.0
    cos = np.clip(rays @ rays.T, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos.min())))


def vertex_positions(m: Map):
    """Global position of every vertex."""
    out = {}
    for mission in m.missions.values():
        for vid in mission.vertex_ids:
            out[vid] = mission.baseframe.apply(m.vertices[vid].pose.translation)
    return out


def evaluate_landmark(landmark, m: Map, thresholds: QualityThresholds, positions=None):
    """Return (Quality, reason); reason is None for Good landmarks.

    ``positions`` optionally caches vertex global positions (see ``vertex_positions``).
    """
    lm = m.landmarks[landmark] if not hasattr(landmark, "backlinks") else landmark
    observers = sorted({b[0] for b in lm.backlinks})
    missing = [v for v in observers if v not in m.vertices]
    if missing:
        raise DanglingBacklink(f"landmark {lm.id} references missing vertex {missing[0]}")
    if len(observers) < thresholds.min_observers:
        return Quality.BAD, TOO_FEW_OBSERVERS
    p = m.landmark_global(lm.id)
    if positions is None:
        origins = np.array([m.global_pose(v).translation for v in observers])
    else:
        origins = np.array([positions[v] for v in observers])
    if max_ray_angle(origins, p) < thresholds.min_disparity_angle:
        return Quality.BAD, LOW_DISPARITY
    if np.linalg.norm(origins - p, axis=1).min() > thresholds.max_distance:
        return Quality.BAD, TOO_FAR
    return Quality.GOOD, None


def filter_landmarks(m: Map, thresholds: QualityThresholds | None = None):
    """Set every landmark's quality; returns (good, bad) counts."""
    thresholds = thresholds or QualityThresholds()
    pos = vertex_positions(m)
    verdicts = {lid: evaluate_landmark(lm, m, thresholds, pos)[0]
                for lid, lm in m.landmarks.items()}
    for lid, q in verdicts.items():
        m.landmarks[lid].quality = q
    good = sum(q == Quality.GOOD for q in verdicts.values())
    return good, len(verdicts) - good
