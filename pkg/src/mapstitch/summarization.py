"""Keep the landmarks that best cover the keyframes for localization."""
from __future__ import annotations

import heapq
import logging

from .core import Map

log = logging.getLogger(__name__)

DEFAULT_MIN_COVER = 30


def coverage_objective(observer_sets, selected, min_cover):
    """Sum over keyframes of min(number of selected landmarks seeing it, min_cover)."""
    cover = {}
    for lid in selected:
        for v in observer_sets[lid]:
            cover[v] = cover.get(v, 0) + 1
    return sum(min(c, min_cover) for c in cover.values())


def greedy_selection(observer_sets, target, min_cover=DEFAULT_MIN_COVER):
    """Greedy maximization of ``coverage_objective`` under a cardinality budget.

    A landmark's score is the number of its observers still covered fewer than
    ``min_cover`` times; the best score wins, ties go to the lower id. Stops at
    ``target`` picks or once no landmark adds coverage. Scores only shrink, so
    stale heap entries are re-scored lazily without changing the outcome.
    """
    cover = {}

    def score(lid):
        return sum(1 for v in observer_sets[lid] if cover.get(v, 0) < min_cover)

    heap = [(-len(obs), lid) for lid, obs in observer_sets.items()]
    heapq.heapify(heap)
    chosen = []
    while heap and len(chosen) < target:
        neg, lid = heapq.heappop(heap)
        s = score(lid)
        if s != -neg:
            if s > 0:
                heapq.heappush(heap, (-s, lid))
            continue
        if s == 0:
            break
        chosen.append(lid)
        for v in observer_sets[lid]:
            cover[v] = cover.get(v, 0) + 1
    return chosen


def summarize(m: Map, target_landmark_count, min_cover=DEFAULT_MIN_COVER):
    """Delete every usable landmark outside the greedy selection; returns the kept count.

    Flagged (Bad) landmarks are not candidates and stay untouched.
    """
    if target_landmark_count < 0:
        raise ValueError("target must be non-negative")
    if min_cover < 1:
        raise ValueError("min_cover must be >= 1")
    usable = m.usable_landmarks()
    if target_landmark_count >= len(usable):
        if target_landmark_count > len(usable):
            log.warning("target %d exceeds the %d available landmarks; keeping all",
                        target_landmark_count, len(usable))
        return len(usable)
    observer_sets = {lid: m.observers(lid) for lid in usable}
    chosen = set(greedy_selection(observer_sets, target_landmark_count, min_cover))
    for lid in usable:
        if lid not in chosen:
            m.remove_landmark(lid)
    log.info("summarized map to %d of %d landmarks", len(chosen), len(usable))
    return len(chosen)
