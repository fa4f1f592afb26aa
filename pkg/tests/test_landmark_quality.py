import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import build_map, identity_chain, ingest_world, small_world
from mapstitch.core import Map, Quality
from mapstitch.errors import DanglingBacklink
from mapstitch.geometry import RigidTransform
from mapstitch.landmark_quality import (LOW_DISPARITY, TOO_FAR, TOO_FEW_OBSERVERS,
                                        QualityThresholds, evaluate_landmark, filter_landmarks,
                                        max_ray_angle)


def at(*xyz):
    return RigidTransform.from_Rt(np.eye(3), np.array(xyz, float))


def oracle_angle_deg(origins, p):
    # plain pairwise dot products
    best = 0.0
    for a, b in itertools.combinations(origins, 2):
        u, v = p - a, p - b
        c = sum(x * y for x, y in zip(u, v)) / (math.sqrt(sum(x * x for x in u))
                                                 * math.sqrt(sum(x * x for x in v)))
        best = max(best, math.degrees(math.acos(max(-1.0, min(1.0, c)))))
    return best


def test_three_observers_is_bad():
    m = build_map([[at(0, 0, 0), at(1, 0, 0), at(2, 0, 0)]], [(0, k, 0) for k in range(3)],
                  {0: [1, 5, 0]})
    assert evaluate_landmark(0, m, QualityThresholds()) == (Quality.BAD, TOO_FEW_OBSERVERS)


def test_coincident_observers_low_disparity():
    m = build_map([identity_chain(4)], [(0, k, 0) for k in range(4)], {0: [0, 0, 3]})
    assert evaluate_landmark(0, m, QualityThresholds()) == (Quality.BAD, LOW_DISPARITY)


def test_one_metre_baseline_two_metres_away():
    poses = [at(x, 0, 0) for x in (0, 1 / 3, 2 / 3, 1)]
    p = np.array([0.5, 2.0, 0.0])
    m = build_map([poses], [(0, k, 0) for k in range(4)], {0: p})
    angle = oracle_angle_deg([T.translation for T in poses], p)
    assert angle == pytest.approx(28.0724869, abs=1e-6)     # frozen oracle value
    assert max_ray_angle(np.array([T.translation for T in poses]), p) == pytest.approx(angle)
    assert max(np.linalg.norm(T.translation - p) for T in poses) <= 2.3
    assert evaluate_landmark(0, m, QualityThresholds()) == (Quality.GOOD, None)


def test_far_landmark():
    poses = [at(x, 0, 0) for x in (0, 10, 20, 30)]
    m = build_map([poses], [(0, k, 0) for k in range(4)], {0: [15, 80, 0]})
    assert evaluate_landmark(0, m, QualityThresholds(max_distance=50)) == (Quality.BAD, TOO_FAR)
    assert evaluate_landmark(0, m, QualityThresholds(max_distance=90))[0] == Quality.GOOD


def test_reason_order_follows_tests():
    # few observers wins over low disparity and distance
    m = build_map([identity_chain(2)], [(0, 0, 0), (0, 1, 0)], {0: [0, 0, 500]})
    assert evaluate_landmark(0, m, QualityThresholds())[1] == TOO_FEW_OBSERVERS


def test_dangling_backlink():
    m = build_map([identity_chain(4)], [(0, k, 0) for k in range(4)], {0: [0, 0, 3]})
    m.landmarks[0].backlinks.add((99, 0, 0))
    with pytest.raises(DanglingBacklink):
        evaluate_landmark(0, m, QualityThresholds())


def test_threshold_validation():
    for bad in (dict(min_observers=1), dict(min_disparity_angle=0), dict(min_disparity_angle=90),
                dict(max_distance=0)):
        with pytest.raises(ValueError):
            QualityThresholds(**bad)


def test_empty_map():
    assert filter_landmarks(Map()) == (0, 0)


def test_well_observed_landmarks_all_good():
    poses = [at(np.cos(a) * 5, np.sin(a) * 5, 0) for a in np.linspace(0, np.pi, 10)]
    obs = [(0, k, l) for l in range(20) for k in range(10)]
    rng = np.random.default_rng(0)
    m = build_map([poses], obs, {l: rng.uniform(-2, 2, 3) for l in range(20)})
    assert filter_landmarks(m) == (20, 0)


def test_single_observer_landmarks_all_bad():
    m = build_map([identity_chain(5)], [(0, k, k) for k in range(5)])
    assert filter_landmarks(m) == (0, 5)


def test_idempotent_and_deterministic():
    _, logs, _ = small_world()
    m = ingest_world(logs[:1])
    first = filter_landmarks(m)
    q1 = {l: lm.quality for l, lm in m.landmarks.items()}
    assert filter_landmarks(m) == first
    assert q1 == {l: lm.quality for l, lm in m.landmarks.items()}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_backlink_order_irrelevant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    poses = [at(*rng.normal(size=3) * 3) for _ in range(n)]
    m = build_map([poses], [(0, k, 0) for k in range(n)], {0: rng.normal(size=3) * 10})
    ref = evaluate_landmark(0, m, QualityThresholds())
    links = list(m.landmarks[0].backlinks)
    rng.shuffle(links)
    m.landmarks[0].backlinks = set(links)
    assert evaluate_landmark(m.landmarks[0], m, QualityThresholds()) == ref
