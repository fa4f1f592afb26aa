import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import build_map, identity_chain, ingest_world, small_world
from mapstitch.core import Quality, check_integrity
from mapstitch.landmark_quality import filter_landmarks
from mapstitch.mapio import encode_map
from mapstitch.summarization import coverage_objective, greedy_selection, summarize


def eager_greedy(observer_sets, target, min_cover):
    """Plain rescore-everything greedy, used as a replay oracle."""
    cover, chosen = {}, []
    left = set(observer_sets)
    while left and len(chosen) < target:
        scores = {l: sum(cover.get(v, 0) < min_cover for v in observer_sets[l]) for l in left}
        best = max(scores.values())
        if best == 0:
            break
        lid = min(l for l, s in scores.items() if s == best)
        chosen.append(lid)
        left.remove(lid)
        for v in observer_sets[lid]:
            cover[v] = cover.get(v, 0) + 1
    return chosen


def optimum(observer_sets, target, min_cover):
    ids = sorted(observer_sets)
    k = min(target, len(ids))
    return max(coverage_objective(observer_sets, c, min_cover)
               for c in itertools.combinations(ids, k))


def good_map(missions, obs):
    m = build_map(missions, obs)
    for lm in m.landmarks.values():
        lm.quality = Quality.GOOD
    return m


def test_target_at_least_count_leaves_map_unchanged():
    m = good_map([identity_chain(3)], [(0, k, l) for k in range(3) for l in range(6)])
    before = encode_map(m)
    assert summarize(m, 6) == 6
    assert summarize(m, 100) == 6
    assert encode_map(m) == before


def test_single_keyframe_target_three():
    m = good_map([identity_chain(1)], [(0, 0, l) for l in range(10)])
    assert summarize(m, 3, min_cover=3) == 3
    assert len(m.landmarks) == 3
    assert all(m.observers(l) == {0} for l in m.landmarks)
    assert check_integrity(m) == []
    # exhaustive check on the tiny instance: every 3-subset reaches the same objective
    sets = {l: {0} for l in range(10)}
    assert coverage_objective(sets, list(m.landmarks), 3) == optimum(sets, 3, 3) == 3


def test_disjoint_clusters_one_each():
    # keyframes 0-2 see landmarks 0-4, keyframes 3-5 see landmarks 5-9
    obs = [(0, k, l) for k in range(3) for l in range(5)]
    obs += [(0, k, l) for k in range(3, 6) for l in range(5, 10)]
    m = good_map([identity_chain(6)], obs)
    assert summarize(m, 2, min_cover=1) == 2
    assert sorted(m.landmarks) == [0, 5]
    # the trace: both clusters score 3; landmark 0 wins the tie, then cluster A is spent
    sets = {l: {0, 1, 2} if l < 5 else {3, 4, 5} for l in range(10)}
    assert greedy_selection(sets, 2, 1) == eager_greedy(sets, 2, 1) == [0, 5]


def test_ties_go_to_lower_id():
    sets = {7: {1, 2}, 3: {1, 2}, 5: {3}}
    assert greedy_selection(sets, 1, 1) == [3]


def test_stops_when_everything_covered():
    sets = {0: {0, 1}, 1: {0}, 2: {1}}
    assert greedy_selection(sets, 3, 1) == [0]


def test_bad_landmarks_untouched_and_validation():
    m = good_map([identity_chain(2)], [(0, k, l) for k in range(2) for l in range(5)])
    m.landmarks[4].quality = Quality.BAD
    assert summarize(m, 1) == 1
    assert sorted(m.landmarks) == [0, 4]
    with pytest.raises(ValueError):
        summarize(m, -1)
    with pytest.raises(ValueError):
        summarize(m, 1, min_cover=0)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_greedy_within_bound_of_optimum(seed):
    rng = np.random.default_rng(seed)
    n_lm = int(rng.integers(1, 16))
    n_kf = int(rng.integers(1, 10))
    sets = {l: set(rng.choice(n_kf, int(rng.integers(1, n_kf + 1)), replace=False).tolist())
            for l in range(n_lm)}
    target = int(rng.integers(0, n_lm + 1))
    min_cover = int(rng.integers(1, 4))
    chosen = greedy_selection(sets, target, min_cover)
    assert len(chosen) <= target
    assert chosen == eager_greedy(sets, target, min_cover)
    got = coverage_objective(sets, chosen, min_cover)
    assert got >= (1 - 1 / math.e) * optimum(sets, target, min_cover) - 1e-12


def test_synthetic_map_replay():
    _, logs, _ = small_world()
    m = ingest_world(logs[:1])
    filter_landmarks(m)
    usable = m.usable_landmarks()
    sets = {l: m.observers(l) for l in usable}
    before = {}
    for obs in sets.values():
        for v in obs:
            before[v] = before.get(v, 0) + 1
    target = len(usable) // 4
    kept = summarize(m, target, min_cover=10)
    assert kept <= target and check_integrity(m) == []
    replay = eager_greedy(sets, target, 10)
    assert sorted(l for l in m.landmarks if m.usable(l)) == sorted(replay)
    after = {}
    for l in replay:
        for v in m.observers(l):
            after[v] = after.get(v, 0) + 1
    for v, c in before.items():
        assert after.get(v, 0) <= c
    # kept landmarks keep their observer sets, so the objective is unchanged by the removal
    assert coverage_objective(sets, replay, 10) == coverage_objective(
        {l: m.observers(l) for l in replay}, replay, 10)
    if len(replay) < target:
        # greedy stopped early: every keyframe is saturated
        for v, c in before.items():
            assert after.get(v, 0) >= min(10, c)
