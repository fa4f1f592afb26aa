"""Frame-to-map correspondence search, mission alignment and landmark merging."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import NO_LANDMARK, Map
from .descriptor_index import LandmarkIndex, build_index, query_knn_batch, train_projection
from .errors import (EmptyInput, IndexNotBuilt, InsufficientCorrespondences, NoConsensus)
from .geometry import RigidTransform, rigid_fit, rigid_fit_batch

log = logging.getLogger(__name__)


@dataclass
class LoopConfig:
    # retrieval
    projection_dim: int = 16
    codebook_size: int = 16
    probe_cells: int = 8
    knn: int = 2
    match_threshold: float = 1.0        # projected-space distance
    min_cluster_size: int = 5
    max_descriptors_per_landmark: int | None = 8
    seed: int = 0
    # 3D-3D RANSAC
    inlier_radius: float = 0.2          # m
    min_inliers: int = 15
    success_probability: float = 0.99
    assumed_inlier_ratio: float = 0.25
    max_ransac_iterations: int = 2000
    # merging
    merge_radius: float = 0.3           # m


@dataclass
class Match2D3D:
    vertex_id: int
    frame_idx: int
    keypoint_idx: int
    landmark_id: int
    distance: float


@dataclass
class AlignmentResult:
    transform: RigidTransform           # reference <- other
    inlier_count: int
    total_matches: int
    inliers: np.ndarray = field(default=None, repr=False)


# -- retrieval -------------------------------------------------------------------------

def landmark_descriptors(m: Map, landmark_ids, max_per_landmark=None):
    """Stacked observation descriptors of the given landmarks and their owner ids."""
    ids, rows = [], []
    for lid in landmark_ids:
        links = sorted(m.landmarks[lid].backlinks)
        if max_per_landmark is not None and len(links) > max_per_landmark:
            pick = np.linspace(0, len(links) - 1, max_per_landmark).round().astype(int)
            links = [links[i] for i in pick]
        for vid, f, k in links:
            rows.append(m.vertices[vid].frames[f].descriptors[k])
            ids.append(lid)
    if not rows:
        return np.zeros(0, np.int64), np.zeros((0, (m.descriptor_bits or 8) // 8), np.uint8)
    return np.array(ids, dtype=np.int64), np.array(rows, dtype=np.uint8)


def build_landmark_index(m: Map, config: LoopConfig | None = None, landmark_ids=None,
                         projection=None) -> LandmarkIndex:
    """Index the observation descriptors of usable landmarks (optionally a subset)."""
    config = config or LoopConfig()
    if landmark_ids is None:
        landmark_ids = m.usable_landmarks()
    landmark_ids = [l for l in landmark_ids if m.usable(l)]
    ids, desc = landmark_descriptors(m, landmark_ids, config.max_descriptors_per_landmark)
    if len(ids) == 0:
        raise EmptyInput("no usable landmarks to index")
    if projection is None:
        projection = train_projection(desc, config.projection_dim, seed=config.seed)
    vecs = projection.project(desc)
    K = min(config.codebook_size, len(ids))
    imi = build_index((ids, vecs), K, seed=config.seed)
    return LandmarkIndex(projection, imi)


def query_frame_matches(frame, index: LandmarkIndex | None, m: Map, config: LoopConfig,
                        vertex_id=-1, frame_idx=0, keypoints=None, exclude=None,
                        covisibility=True):
    """2D-3D matches of one frame's keypoints against the indexed landmarks.

    ``keypoints`` restricts the query to a subset of keypoint indices; ``exclude``
    is a predicate on landmark ids that must not be matched.
    """
    return query_frames([(vertex_id, frame_idx, frame, keypoints)], index, m, config,
                        exclude, covisibility)[0]


def query_frames(requests, index: LandmarkIndex | None, m: Map, config: LoopConfig,
                 exclude=None, covisibility=True):
    """Batched form of ``query_frame_matches``.

    ``requests`` holds (vertex id, frame idx, frame, keypoint subset or None) and
    optionally a fifth entry, a landmark predicate excluding matches for that
    request only. One match list per request is returned.
    """
    if index is None:
        raise IndexNotBuilt("landmark index has not been built")
    rows, owners, descs = [], [], []
    for r, req in enumerate(requests):
        frame, kps = req[2], req[3]
        kp = np.arange(len(frame.descriptors)) if kps is None else np.asarray(kps, dtype=int)
        if len(kp):
            rows.append(kp)
            owners.append(np.full(len(kp), r))
            descs.append(frame.descriptors[kp])
    out = [[] for _ in requests]
    if not rows:
        return out
    kp_idx = np.concatenate(rows)
    owner = np.concatenate(owners)
    vecs = index.projection.project(np.concatenate(descs))
    # several descriptors per landmark are indexed, so over-fetch before de-duplicating
    ids, dists = query_knn_batch(index.imi, vecs, config.knn * 4, config.probe_cells,
                                 max_distance=config.match_threshold)
    verdict = {}

    def allowed(lid):
        ok = verdict.get(lid)
        if ok is None:
            ok = verdict[lid] = (lid in m.landmarks and m.usable(lid)
                                 and not (exclude is not None and exclude(lid)))
        return ok

    for i in np.flatnonzero(ids[:, 0] >= 0):
        r = owner[i]
        vid, f = requests[r][0], requests[r][1]
        own_exclude = requests[r][4] if len(requests[r]) > 4 else None
        taken = set()
        for lid, d in zip(ids[i], dists[i]):
            if lid < 0:
                break
            lid = int(lid)
            if lid in taken or not allowed(lid):
                continue
            if own_exclude is not None and own_exclude(lid):
                continue
            taken.add(lid)
            out[r].append(Match2D3D(vid, f, int(kp_idx[i]), lid, float(d)))
            if len(taken) == config.knn:
                break
    if covisibility:
        obs = {}
        out = [covisibility_filter(ms, m, config.min_cluster_size, obs) for ms in out]
    return out


def covisibility_filter(matches, m: Map, min_cluster_size, observer_cache=None):
    """Keep matches whose landmarks form co-observed clusters of sufficient size.

    Two matches are linked when their landmarks share an observing vertex.
    """
    n = len(matches)
    if n == 0:
        return []
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    owner = {}
    obs_cache = {} if observer_cache is None else observer_cache
    for i, mt in enumerate(matches):
        lid = mt.landmark_id
        if lid not in obs_cache:
            obs_cache[lid] = {b[0] for b in m.landmarks[lid].backlinks}
        for vid in obs_cache[lid]:
            j = owner.setdefault(vid, i)
            if j != i:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    roots = [find(i) for i in range(n)]
    size = {}
    for r in roots:
        size[r] = size.get(r, 0) + 1
    return [mt for mt, r in zip(matches, roots) if size[r] >= min_cluster_size]


# -- rigid alignment -------------------------------------------------------------------

def ransac_iterations(p, inlier_ratio, sample_size, cap):
    if inlier_ratio >= 1:
        return 1
    n = math.log(1 - p) / math.log(1 - inlier_ratio ** sample_size)
    return int(min(cap, max(1, math.ceil(n))))


def _non_degenerate(P):
    a = P[:, 1] - P[:, 0]
    b = P[:, 2] - P[:, 0]
    area = np.linalg.norm(np.cross(a, b), axis=1)
    scale = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)
    return area > 1e-6 * scale


def estimate_rigid_transform_ransac(src, dst, config: LoopConfig | None = None, groups=None,
                                    rng=None) -> AlignmentResult:
    """Robust rigid fit with ``dst ~= T src`` from 3D-3D correspondences.

    Minimal samples of three pairs are solved in closed form. With ``groups`` each
    sample is drawn from a single group (e.g. one query frame), which keeps samples
    spatially local.
    """
    config = config or LoopConfig()
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    if n < 3 or len(dst) != n:
        raise InsufficientCorrespondences(f"need >= 3 correspondences, got {n}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    iters = ransac_iterations(config.success_probability, config.assumed_inlier_ratio, 3,
                              config.max_ransac_iterations)
    samples = _draw_triples(n, iters, groups, rng)
    r2 = config.inlier_radius ** 2
    best_count, best_mask = -1, None
    if len(samples):
        keep = _non_degenerate(src[samples])
        samples = samples[keep]
    for s in range(0, len(samples), 128):
        S = samples[s:s + 128]
        R, t = rigid_fit_batch(src[S], dst[S])
        pred = np.einsum("hij,nj->hni", R, src) + t[:, None, :]
        inl = ((pred - dst[None]) ** 2).sum(axis=2) < r2
        counts = inl.sum(axis=1)
        h = int(np.argmax(counts))
        if counts[h] > best_count:
            best_count, best_mask = int(counts[h]), inl[h]
    if best_mask is None or best_count < 3:
        raise NoConsensus("no non-degenerate minimal sample found")
    mask = best_mask
    T = rigid_fit(src[mask], dst[mask])
    for _ in range(3):
        new = ((T.apply(src) - dst) ** 2).sum(axis=1) < r2
        if new.sum() < 3 or np.array_equal(new, mask):
            break
        mask = new
        T = rigid_fit(src[mask], dst[mask])
    count = int(mask.sum())
    if count < config.min_inliers:
        raise NoConsensus(f"only {count} inliers, need {config.min_inliers}")
    return AlignmentResult(T, count, n, mask)


def _draw_triples(n, iters, groups, rng):
    if groups is None:
        if n < 3:
            return np.zeros((0, 3), int)
        return np.array([rng.choice(n, 3, replace=False) for _ in range(iters)])
    groups = np.asarray(groups)
    buckets = [np.flatnonzero(groups == g) for g in np.unique(groups)]
    buckets = [b for b in buckets if len(b) >= 3]
    if not buckets:
        return _draw_triples(n, iters, None, rng)
    sizes = np.array([len(b) for b in buckets], dtype=float)
    which = rng.choice(len(buckets), iters, p=sizes / sizes.sum())
    return np.array([rng.choice(buckets[w], 3, replace=False) for w in which])


@dataclass
class AlignmentReport:
    reference: int
    rounds: dict = field(default_factory=dict)          # mission -> round anchored
    results: dict = field(default_factory=dict)         # mission -> AlignmentResult
    unanchored: list = field(default_factory=list)      # NoOverlap missions


def mission_correspondences(m: Map, mission_id, index: LandmarkIndex, config: LoopConfig,
                            target_missions):
    """3D-3D pairs (own landmark in mission frame, matched landmark global) and groups."""
    mission = m.missions[mission_id]
    host_mission = {}

    def hosted(lid):
        h = host_mission.get(lid)
        if h is None:
            h = host_mission[lid] = m.vertices[m.landmarks[lid].host_vertex_id].mission_id
        return h

    requests = []
    for vid in mission.vertex_ids:
        for f, frame in enumerate(m.vertices[vid].frames):
            refs = frame.landmark_refs
            own = [k for k in np.flatnonzero(refs != NO_LANDMARK)
                   if m.usable(int(refs[k])) and hosted(int(refs[k])) == mission_id]
            if own:
                requests.append((vid, f, frame, own))
    results = query_frames(requests, index, m, config,
                           exclude=lambda l: hosted(l) not in target_missions)
    pairs, groups, seen = [], [], set()
    for (vid, f, frame, _), matches in zip(requests, results):
        for mt in matches:
            key = (int(frame.landmark_refs[mt.keypoint_idx]), mt.landmark_id)
            if key in seen:
                continue
            seen.add(key)
            pairs.append(key)
            groups.append(vid)
    if not pairs:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, int), []
    src = np.array([m.landmarks[a].position for a, _ in pairs])
    dst = m.landmark_positions_global([b for _, b in pairs])
    return src, dst, np.array(groups), pairs


def align_missions(m: Map, reference=None, config: LoopConfig | None = None) -> AlignmentReport:
    """Anchor every mission it can into the reference mission's global frame.

    Each round indexes the landmarks of the missions anchored so far and tries
    to register every unanchored mission against them; rounds repeat until no
    further mission anchors, so sessions overlapping only with a later-anchored
    session still register.
    """
    config = config or LoopConfig()
    if not m.missions:
        return AlignmentReport(reference)
    ref = reference if reference is not None else m.reference()
    m.reference_mission = ref
    m.missions[ref].anchored = True
    report = AlignmentReport(ref, rounds={ref: 0})
    rnd = 0
    while True:
        anchored = {mid for mid, ms in m.missions.items() if ms.anchored}
        todo = [mid for mid in m.missions if mid not in anchored]
        if not todo:
            break
        rnd += 1
        lids = [l for l, lm in m.landmarks.items()
                if m.usable(l) and m.vertices[lm.host_vertex_id].mission_id in anchored]
        if not lids:
            break
        index = build_landmark_index(m, config, lids)
        progress = []
        for mid in todo:
            src, dst, groups, _ = mission_correspondences(m, mid, index, config, anchored)
            if len(src) < 3:
                continue
            try:
                res = estimate_rigid_transform_ransac(src, dst, config, groups)
            except (NoConsensus, InsufficientCorrespondences):
                continue
            progress.append((mid, res))
        for mid, res in progress:
            m.missions[mid].baseframe = res.transform
            m.missions[mid].anchored = True
            report.rounds[mid] = rnd
            report.results[mid] = res
            log.info("mission %d anchored in round %d (%d/%d inliers)", mid, rnd,
                     res.inlier_count, res.total_matches)
        if not progress:
            break
    report.unanchored = [mid for mid, ms in m.missions.items() if not ms.anchored]
    for mid in report.unanchored:
        log.warning("mission %d shares no consistent overlap with the anchored map", mid)
    return report


# -- landmark merging ----------------------------------------------------------------

def merge_duplicate_landmarks(m: Map, config: LoopConfig | None = None, index=None):
    """Fuse landmarks of different missions that match in appearance and position.

    Returns the number of landmarks removed.
    """
    config = config or LoopConfig()
    usable = m.usable_landmarks()
    if not usable:
        return 0
    index = index or build_landmark_index(m, config, usable)
    host_mission = {l: m.vertices[m.landmarks[l].host_vertex_id].mission_id for l in usable}
    gpos = {}

    def glob(l):
        p = gpos.get(l)
        if p is None:
            p = gpos[l] = m.landmark_global(l)
        return p

    requests = []
    for vid, v in m.vertices.items():
        for f, frame in enumerate(v.frames):
            refs = frame.landmark_refs
            own = [k for k in np.flatnonzero(refs != NO_LANDMARK) if int(refs[k]) in host_mission]
            if own:
                requests.append((vid, f, frame, own))
    pairs = set()
    r2 = config.merge_radius ** 2
    for (vid, f, frame, _), matches in zip(requests, query_frames(requests, index, m, config)):
        refs = frame.landmark_refs
        for mt in matches:
            a, b = int(refs[mt.keypoint_idx]), mt.landmark_id
            if a == b or host_mission.get(b) == host_mission[a]:
                continue
            if ((glob(a) - glob(b)) ** 2).sum() < r2:
                pairs.add((min(a, b), max(a, b)))
    parent = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in sorted(pairs):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    merged = 0
    for x in sorted(parent):
        r = find(x)
        if r != x:
            m.transfer_landmark(x, r)
            merged += 1
    if merged:
        log.info("merged %d duplicate landmarks", merged)
    return merged
