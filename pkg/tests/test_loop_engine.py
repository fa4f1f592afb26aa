import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import build_map, identity_chain, ingest_world, line_chain, small_world
from mapstitch.core import NO_LANDMARK, Frame, Quality, check_integrity
from mapstitch.descriptor_index import exhaustive_knn
from mapstitch.errors import IndexNotBuilt, InsufficientCorrespondences, NoConsensus
from mapstitch.geometry import RigidTransform, random_transform
from mapstitch.landmark_quality import filter_landmarks
from mapstitch.loop_engine import (LoopConfig, Match2D3D, align_missions, build_landmark_index,
                                   covisibility_filter, estimate_rigid_transform_ransac,
                                   landmark_descriptors, merge_duplicate_landmarks,
                                   query_frame_matches, ransac_iterations)


@pytest.fixture(scope="module")
def indexed_mission():
    _, logs, truth = small_world()
    m = ingest_world(logs[:1])
    filter_landmarks(m)
    cfg = LoopConfig()
    return m, build_landmark_index(m, cfg), cfg


# -- 2D-3D queries ---------------------------------------------------------------

def test_empty_frame(indexed_mission):
    m, index, cfg = indexed_mission
    assert query_frame_matches(Frame.empty(64), index, m, cfg) == []


def test_missing_index(indexed_mission):
    m, _, cfg = indexed_mission
    with pytest.raises(IndexNotBuilt):
        query_frame_matches(Frame.empty(64), None, m, cfg)


def test_exact_descriptors_match_true_landmarks(indexed_mission):
    m, index, cfg = indexed_mission
    # landmarks seen from one vertex, queried with descriptors that are in the index
    vid = m.missions[0].vertex_ids[40]
    refs = m.vertices[vid].frames[0].landmark_refs
    lids = [int(l) for l in refs[refs != NO_LANDMARK] if m.usable(int(l))]
    ids, desc = landmark_descriptors(m, lids, cfg.max_descriptors_per_landmark)
    first = {}
    for i, l in enumerate(ids):
        first.setdefault(int(l), i)
    rows = [first[l] for l in lids]
    n = len(rows)
    frame = Frame(np.zeros((n, 2)), np.ones(n), desc[rows], np.full(n, NO_LANDMARK))
    matches = query_frame_matches(frame, index, m, cfg)
    best = {}
    for mt in matches:
        best.setdefault(mt.keypoint_idx, mt)
    assert len(best) == n
    for k, mt in best.items():
        assert mt.landmark_id == lids[k] and mt.distance == pytest.approx(0.0, abs=1e-9)


def test_random_descriptors_find_nothing(indexed_mission):
    m, index, cfg = indexed_mission
    rng = np.random.default_rng(0)
    desc = rng.integers(0, 256, (200, 64), dtype=np.uint8)
    q = index.projection.project(desc)
    # exhaustive oracle: nearest indexed vector for every query
    nearest = [exhaustive_knn(index.imi.ids, index.imi.vectors, v, 1)[0][1] for v in q]
    far = np.array(nearest) >= cfg.match_threshold
    frame = Frame(np.zeros((200, 2)), np.ones(200), desc, np.full(200, NO_LANDMARK))
    matches = query_frame_matches(frame, index, m, cfg, covisibility=False)
    assert not any(far[mt.keypoint_idx] for mt in matches)
    if far.all():
        assert matches == []


def test_bad_landmarks_never_matched(indexed_mission):
    m, index, cfg = indexed_mission
    vid = m.missions[0].vertex_ids[10]
    frame = m.vertices[vid].frames[0]
    for mt in query_frame_matches(frame, index, m, cfg, covisibility=False):
        assert m.landmarks[mt.landmark_id].quality != Quality.BAD


# -- covisibility --------------------------------------------------------------------

def _m(lid, kp=0):
    return Match2D3D(-1, 0, kp, lid, 0.0)


def test_covisibility_empty():
    assert covisibility_filter([], build_map([]), 3) == []


def test_covisibility_single_cluster_unchanged():
    m = build_map([identity_chain(2)], [(0, 0, l) for l in range(6)])
    ms = [_m(l, l) for l in range(6)]
    assert covisibility_filter(ms, m, 6) == ms


def test_covisibility_drops_singleton():
    # 10 landmarks chained through shared observers, one landmark seen alone
    obs = [(0, k, l) for l in range(10) for k in (l // 3, l // 3 + 1)] + [(0, 9, 10)]
    m = build_map([identity_chain(10)], obs)
    ms = [_m(l, l) for l in range(11)]
    # independent component scan
    observers = {l: {b[0] for b in m.landmarks[l].backlinks} for l in range(11)}
    comp = {0}
    grow = True
    while grow:
        new = {l for l in range(11) if any(observers[l] & observers[c] for c in comp)}
        grow = new != comp
        comp = new
    assert comp == set(range(10))
    out = covisibility_filter(ms, m, 2)
    assert [mt.landmark_id for mt in out] == list(range(10))


# -- rigid alignment -----------------------------------------------------------------

def test_iteration_formula():
    assert ransac_iterations(0.99, 0.25, 3, 2000) == 293
    assert ransac_iterations(0.99, 1.0, 3, 2000) == 1
    assert ransac_iterations(0.99, 0.01, 3, 2000) == 2000


def test_identical_point_sets():
    p = np.random.default_rng(0).normal(size=(30, 3)) * 5
    res = estimate_rigid_transform_ransac(p, p)
    assert max(res.transform.distance_to(RigidTransform.identity())) < 1e-12
    assert res.inlier_count == 30 == res.total_matches


def test_noiseless_recovery():
    rng = np.random.default_rng(1)
    T = random_transform(rng, max_translation=20)
    src = rng.uniform(-10, 10, (100, 3))
    res = estimate_rigid_transform_ransac(src, T.apply(src))
    ang, dist = res.transform.distance_to(T)
    assert ang < 1e-9 and dist < 1e-9
    R = res.transform.R
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9) and np.linalg.det(R) == pytest.approx(1)


def test_outliers_are_labelled_exactly():
    rng = np.random.default_rng(2)
    T = random_transform(rng, max_translation=20)
    src = rng.uniform(-10, 10, (100, 3))
    dst = T.apply(src)
    out = rng.choice(100, 30, replace=False)
    dst[out] = rng.uniform(-30, 30, (30, 3))
    res = estimate_rigid_transform_ransac(src, dst)
    truth = np.ones(100, bool)
    truth[out] = False
    assert np.array_equal(res.inliers, truth)
    assert max(res.transform.distance_to(T)) < 1e-6


def test_too_few_and_no_consensus():
    p = np.random.default_rng(3).normal(size=(2, 3))
    with pytest.raises(InsufficientCorrespondences):
        estimate_rigid_transform_ransac(p, p)
    rng = np.random.default_rng(4)
    with pytest.raises(NoConsensus):
        estimate_rigid_transform_ransac(rng.normal(size=(40, 3)) * 10,
                                        rng.normal(size=(40, 3)) * 10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_rotation_is_proper(seed):
    rng = np.random.default_rng(seed)
    T = random_transform(rng)
    src = rng.normal(size=(40, 3)) * 4
    dst = T.apply(src) + rng.normal(0, 0.01, (40, 3))
    R = estimate_rigid_transform_ransac(src, dst).transform.R
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9


# -- mission alignment ---------------------------------------------------------------

def test_single_mission_unchanged():
    _, logs, _ = small_world()
    m = ingest_world(logs[:1])
    rep = align_missions(m)
    assert rep.rounds == {0: 0} and rep.unanchored == []
    assert max(m.missions[0].baseframe.distance_to(RigidTransform.identity())) == 0


def test_two_missions_recover_known_offset():
    _, logs, truth = small_world(noise=False, sessions=2)
    m = ingest_world(logs)
    filter_landmarks(m)
    rep = align_missions(m)
    assert rep.rounds == {0: 0, 1: 1}
    T0, T1 = truth.mission_transforms
    expected = T0.inverse() @ T1
    ang, dist = m.missions[1].baseframe.distance_to(expected)
    assert ang < 1e-6 and dist < 1e-6


def test_chain_overlap_anchors_in_second_round():
    _, logs, truth = small_world(noise=False, sessions=3, overlap="chain", length=200.0,
                                 landmarks=2000)
    # C (session 2) shares no landmarks with A (session 0)
    assert len(truth.correspondences(0, 2)) == 0
    assert len(truth.correspondences(1, 2)) > 0
    m = ingest_world(logs)
    filter_landmarks(m)
    rep = align_missions(m)
    assert rep.rounds == {0: 0, 1: 1, 2: 2}


def test_aligned_landmarks_agree_in_global_frame():
    _, logs, truth = small_world(noise=False, sessions=2)
    m = ingest_world(logs)
    filter_landmarks(m)
    align_missions(m)
    by_true = {}
    for lid in m.usable_landmarks():
        mission = m.vertices[m.landmarks[lid].host_vertex_id].mission_id
        by_true.setdefault(int(truth.true_landmark_id(m.landmarks[lid].source_id)),
                           {})[mission] = m.landmark_global(lid)
    gaps = [np.linalg.norm(d[0] - d[1]) for d in by_true.values() if len(d) == 2]
    assert gaps and max(gaps) < LoopConfig().inlier_radius


def test_no_overlap_reported():
    _, logs_a, _ = small_world(noise=False, sessions=1)
    _, logs_b, _ = small_world(noise=False, sessions=1, seed=9)
    m = ingest_world([logs_a[0], logs_b[0]])
    filter_landmarks(m)
    rep = align_missions(m)
    assert rep.unanchored == [1]


# -- landmark merging ----------------------------------------------------------------

def _two_mission_map(offset, shared_desc=True):
    obs = [(0, k, 0) for k in range(4)] + [(1, k, 1) for k in range(4)]
    obs += [(0, k, 2 + j) for j in range(30) for k in range(4)]
    rng = np.random.default_rng(7)
    lms = {0: [0.0, 5.0, 1.0], 1: [offset, 5.0, 1.0]}
    lms.update({2 + j: rng.uniform(-5, 5, 3) for j in range(30)})
    m = build_map([line_chain(4), line_chain(4)], obs, lms, bits=256)
    m.missions[1].anchored = True
    if shared_desc:
        d = rng.integers(0, 256, 32, dtype=np.uint8)
        for lid in (0, 1):
            for vid, f, k in m.landmarks[lid].backlinks:
                m.vertices[vid].frames[f].descriptors[k] = d
    for lm in m.landmarks.values():
        lm.quality = Quality.GOOD
    return m


MERGE_CFG = LoopConfig(projection_dim=4, codebook_size=2, min_cluster_size=1,
                       match_threshold=1e-6)


def test_identical_descriptors_merge():
    m = _two_mission_map(0.05)
    union = m.landmarks[0].backlinks | m.landmarks[1].backlinks
    assert merge_duplicate_landmarks(m, MERGE_CFG) == 1
    assert 1 not in m.landmarks and m.landmarks[0].backlinks == union
    assert check_integrity(m) == []


def test_radius_gate():
    m = _two_mission_map(1.0)
    assert merge_duplicate_landmarks(m, MERGE_CFG) == 0
    assert 0 in m.landmarks and 1 in m.landmarks


def test_no_cross_mission_matches():
    m = _two_mission_map(0.05, shared_desc=False)
    n = len(m.landmarks)
    assert merge_duplicate_landmarks(m, MERGE_CFG) == 0 and len(m.landmarks) == n


def test_merge_preserves_backlinks_on_synthetic_world():
    _, logs, truth = small_world()
    m = ingest_world(logs)
    filter_landmarks(m)
    align_missions(m)
    # ground-truth world landmark behind every observation, recorded before merging
    world_of = {b: int(truth.true_landmark_id(lm.source_id))
                for lm in m.landmarks.values() for b in lm.backlinks}
    n_lm = len(m.landmarks)
    n_links = sum(len(lm.backlinks) for lm in m.landmarks.values())
    merged = merge_duplicate_landmarks(m)
    assert merged > 0 and len(m.landmarks) == n_lm - merged
    assert sum(len(lm.backlinks) for lm in m.landmarks.values()) == n_links
    assert check_integrity(m) == []
    mixed = sum(len({world_of[b] for b in lm.backlinks}) > 1 for lm in m.landmarks.values())
    assert mixed <= 0.01 * merged
