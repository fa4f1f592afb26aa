"""Euclidean projection of binary descriptors and an inverted multi-index over it."""
from __future__ import annotations

import heapq
import io
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (CorruptBlob, DegenerateSample, EmptyInput, InsufficientSample,
                     LengthMismatch)

_CHUNK = 8192


def unpack_bits(descriptors):
    """(n, bytes) uint8 -> (n, bits) float64 of 0/1."""
    d = np.atleast_2d(np.asarray(descriptors, dtype=np.uint8))
    return np.unpackbits(d, axis=1).astype(np.float64)


def hamming(a, b):
    """Hamming distance between bit-packed descriptors (broadcasting over rows)."""
    x = np.bitwise_xor(np.asarray(a, dtype=np.uint8), np.asarray(b, dtype=np.uint8))
    return np.unpackbits(np.atleast_1d(x), axis=-1).sum(axis=-1)


@dataclass(eq=False)
class DescriptorProjection:
    mean: np.ndarray    # (b,)
    basis: np.ndarray   # (d, b), orthonormal rows

    @property
    def bits(self):
        return self.mean.shape[0]

    @property
    def dim(self):
        return self.basis.shape[0]

    def project(self, descriptors):
        """Project bit-packed descriptors, (n, b/8) -> (n, d)."""
        d = np.atleast_2d(np.asarray(descriptors, dtype=np.uint8))
        if d.shape[1] * 8 != self.bits:
            raise LengthMismatch(f"descriptor has {d.shape[1] * 8} bits, projection expects "
                                 f"{self.bits}")
        out = np.empty((len(d), self.dim))
        for s in range(0, len(d), _CHUNK):
            out[s:s + _CHUNK] = (unpack_bits(d[s:s + _CHUNK]) - self.mean) @ self.basis.T
        return out


def train_projection(descriptors, d=16, seed=0, max_samples=20000) -> DescriptorProjection:
    """PCA of the bit vectors: sample mean plus the top-``d`` principal directions.

    At most ``max_samples`` rows (drawn with ``seed``) are used.
    """
    desc = np.atleast_2d(np.asarray(descriptors, dtype=np.uint8))
    if len(desc) < d:
        raise InsufficientSample(f"need at least {d} descriptors, got {len(desc)}")
    b = desc.shape[1] * 8
    if d > b:
        raise InsufficientSample(f"target dimension {d} exceeds descriptor length {b}")
    if max_samples is not None and len(desc) > max_samples:
        rng = np.random.default_rng(seed)
        desc = desc[np.sort(rng.choice(len(desc), max_samples, replace=False))]
    X = unpack_bits(desc)
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / len(X)
    if np.trace(cov) <= 1e-12:
        raise DegenerateSample("descriptor sample has no spread")
    w, V = np.linalg.eigh(cov)
    order = np.argsort(-w, kind="stable")[:d]
    basis = V[:, order].T.copy()
    # sign convention: the largest-magnitude component of each direction is positive
    idx = np.argmax(np.abs(basis), axis=1)
    basis *= np.sign(basis[np.arange(d), idx])[:, None]
    return DescriptorProjection(mean, basis)


def project(descriptor, projection: DescriptorProjection):
    """Single descriptor -> d-vector."""
    return projection.project(np.atleast_2d(descriptor))[0]


def _sq_dists(X, C):
    return cdist(X, C, "sqeuclidean")


def nearest_centroid(X, C):
    """Index of the nearest centroid per row; ties go to the lower index."""
    out = np.empty(len(X), dtype=np.int64)
    for s in range(0, len(X), _CHUNK):
        out[s:s + _CHUNK] = np.argmin(_sq_dists(X[s:s + _CHUNK], C), axis=1)
    return out


def kmeans(X, K, seed=0, max_iter=25):
    """k-means++ seeding followed by Lloyd iterations; deterministic under ``seed``."""
    rng = np.random.default_rng(seed)
    n = len(X)
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, K):
        total = d2.sum()
        i = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers[c] = X[i]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))
    assign = None
    for _ in range(max_iter):
        new = nearest_centroid(X, centers)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, X)
        counts = np.bincount(assign, minlength=K)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
    return centers


@dataclass(eq=False)
class InvertedMultiIndex:
    codebook_1: np.ndarray      # (K, d1)
    codebook_2: np.ndarray      # (K, d2)
    offsets: np.ndarray         # (K*K + 1,) start of each cell in ids/vectors
    ids: np.ndarray             # (n,) landmark ids, grouped by cell
    vectors: np.ndarray         # (n, d)

    @property
    def K(self):
        return len(self.codebook_1)

    @property
    def split(self):
        return self.codebook_1.shape[1]

    def __len__(self):
        return len(self.ids)

    def cell(self, c):
        s, e = self.offsets[c], self.offsets[c + 1]
        return self.ids[s:e], self.vectors[s:e]

    def cell_of(self, vectors):
        v = np.atleast_2d(vectors)
        a = nearest_centroid(v[:, :self.split], self.codebook_1)
        b = nearest_centroid(v[:, self.split:], self.codebook_2)
        return a * self.K + b


def _as_arrays(entries):
    if isinstance(entries, tuple) and len(entries) == 2 and isinstance(entries[1], np.ndarray):
        ids, vecs = entries
    else:
        entries = list(entries)
        if not entries:
            raise EmptyInput("no entries to index")
        ids = np.array([e[0] for e in entries])
        vecs = np.array([np.asarray(e[1], dtype=float) for e in entries])
    ids = np.asarray(ids, dtype=np.int64)
    vecs = np.atleast_2d(np.asarray(vecs, dtype=float))
    if len(ids) == 0:
        raise EmptyInput("no entries to index")
    if len(ids) != len(vecs):
        raise LengthMismatch("ids and vectors differ in length")
    return ids, vecs


def build_index(entries, K=16, seed=0, max_iter=25) -> InvertedMultiIndex:
    """Train one codebook per half of the vector and bucket every entry.

    ``entries`` is a list of (landmark id, vector) pairs or a tuple (ids, vectors).
    """
    ids, vecs = _as_arrays(entries)
    if K < 1 or K > len(ids):
        raise ValueError(f"K must lie in [1, {len(ids)}]")
    split = vecs.shape[1] // 2
    if split == 0:
        raise ValueError("vectors need at least two dimensions")
    c1 = kmeans(vecs[:, :split], K, seed=seed, max_iter=max_iter)
    c2 = kmeans(vecs[:, split:], K, seed=seed + 1, max_iter=max_iter)
    cells = nearest_centroid(vecs[:, :split], c1) * K + nearest_centroid(vecs[:, split:], c2)
    order = np.argsort(cells, kind="stable")
    offsets = np.zeros(K * K + 1, dtype=np.int64)
    np.cumsum(np.bincount(cells, minlength=K * K), out=offsets[1:])
    return InvertedMultiIndex(c1, c2, offsets, ids[order].copy(),
                              np.ascontiguousarray(vecs[order]))


def traverse_cells(index: InvertedMultiIndex, q, probe_cells):
    """Cells in ascending combined centroid distance (multi-sequence traversal)."""
    K, s = index.K, index.split
    d1 = ((index.codebook_1 - q[:s]) ** 2).sum(axis=1)
    d2 = ((index.codebook_2 - q[s:]) ** 2).sum(axis=1)
    o1 = np.argsort(d1, kind="stable")
    o2 = np.argsort(d2, kind="stable")
    s1, s2 = d1[o1], d2[o2]
    heap = [(s1[0] + s2[0], 0, 0)]
    seen = {(0, 0)}
    out = []
    limit = min(probe_cells, K * K)
    while heap and len(out) < limit:
        _, a, b = heapq.heappop(heap)
        out.append(int(o1[a]) * K + int(o2[b]))
        if a + 1 < K and (a + 1, b) not in seen:
            seen.add((a + 1, b))
            heapq.heappush(heap, (s1[a + 1] + s2[b], a + 1, b))
        if b + 1 < K and (a, b + 1) not in seen:
            seen.add((a, b + 1))
            heapq.heappush(heap, (s1[a] + s2[b + 1], a, b + 1))
    return out


def _sq_dist(vecs, q):
    diff = vecs - q
    return np.einsum("ij,ij->i", diff, diff)


def _rank(ids, vecs, q, k, d2=None):
    """Top ``k`` (id, distance) by distance then id; ``d2`` may hold precomputed squares."""
    if len(ids) == 0:
        return []
    dist = _sq_dist(vecs, q) if d2 is None else d2
    if len(ids) > k:
        # keep everything tied with the k-th distance so the id tie-break stays exact
        kth = np.partition(dist, k - 1)[k - 1]
        keep = dist <= kth
        ids, dist = ids[keep], dist[keep]
    dist = np.sqrt(dist)
    order = np.lexsort((ids, dist))[:k]
    return [(int(ids[i]), float(dist[i])) for i in order]


def probe_order(index: InvertedMultiIndex, Q, probe_cells):
    """Vectorized ``traverse_cells`` for a batch of queries, (n, P) cell ids.

    The multi-sequence traversal pops cells in lexicographic (distance sum, rank
    in half 1, rank in half 2) order, and the first P cells always use ranks < P
    in each half, so sorting that P x P block reproduces it exactly.
    """
    K, s = index.K, index.split
    P = min(probe_cells, K * K)
    r = min(P, K)
    d1 = ((Q[:, None, :s] - index.codebook_1[None]) ** 2).sum(axis=2)
    d2 = ((Q[:, None, s:] - index.codebook_2[None]) ** 2).sum(axis=2)
    o1 = np.argsort(d1, axis=1, kind="stable")[:, :r]
    o2 = np.argsort(d2, axis=1, kind="stable")[:, :r]
    s1 = np.take_along_axis(d1, o1, axis=1)
    s2 = np.take_along_axis(d2, o2, axis=1)
    tot = (s1[:, :, None] + s2[:, None, :]).reshape(len(Q), r * r)
    ra = np.repeat(np.arange(r), r)
    rb = np.tile(np.arange(r), r)
    # lexsort per row: stable argsort on sums after pre-ordering by (ra, rb), which is
    # already the flattened order
    order = np.argsort(tot, axis=1, kind="stable")[:, :P]
    cells = (np.take_along_axis(o1, ra[order], axis=1) * K
             + np.take_along_axis(o2, rb[order], axis=1))
    return cells


def query_knn_batch(index: InvertedMultiIndex, Q, k=10, probe_cells=8, max_distance=None,
                    chunk=4096):
    """Batched ``query_knn``; returns (ids, dists) of shape (n, k), padded with -1 / inf.

    ``max_distance`` drops candidates at or beyond that distance. Distances are
    evaluated cell by cell, so each cell's vectors are touched once per batch.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = len(Q)
    if n > chunk:
        parts = [query_knn_batch(index, Q[s:s + chunk], k, probe_cells, max_distance, chunk)
                 for s in range(0, n, chunk)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    out_ids = np.full((n, k), -1, dtype=np.int64)
    out_d = np.full((n, k), np.inf)
    if n == 0:
        return out_ids, out_d
    cells = probe_order(index, Q, probe_cells)
    flat_q = np.repeat(np.arange(n), cells.shape[1])
    by_cell = np.argsort(cells.ravel(), kind="stable")
    cell_sorted = cells.ravel()[by_cell]
    bounds = np.flatnonzero(np.diff(cell_sorted)) + 1
    pieces_q, pieces_i, pieces_d = [], [], []
    for grp in np.split(by_cell, bounds):
        c = cells.ravel()[grp[0]]
        ids, vecs = index.cell(c)
        if len(ids) == 0:
            continue
        qs = flat_q[grp]
        D = cdist(Q[qs], vecs)
        if max_distance is not None:
            D = np.where(D < max_distance, D, np.inf)
        if len(ids) > k:
            kth = np.partition(D, k - 1, axis=1)[:, k - 1:k]
            mask = (D <= kth) & np.isfinite(D)
        else:
            mask = np.isfinite(D)
        r, e = np.nonzero(mask)
        pieces_q.append(qs[r])
        pieces_i.append(ids[e])
        pieces_d.append(D[r, e])
    if not pieces_q:
        return out_ids, out_d
    qidx = np.concatenate(pieces_q)
    ids = np.concatenate(pieces_i)
    dist = np.concatenate(pieces_d)
    order = np.lexsort((ids, dist, qidx))
    qs = qidx[order]
    first = np.searchsorted(qs, np.arange(n))
    rank = np.arange(len(order)) - first[qs]
    keep = rank < k
    out_ids[qs[keep], rank[keep]] = ids[order][keep]
    out_d[qs[keep], rank[keep]] = dist[order][keep]
    return out_ids, out_d


def query_knn(index: InvertedMultiIndex, q, k=10, probe_cells=8):
    """Approximate k nearest entries as a ranked list of (landmark id, distance)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(q, dtype=float)
    cells = traverse_cells(index, q, probe_cells)
    if not cells:
        return []
    off = index.offsets
    # distances per cell slice, so the candidate vectors are never copied
    ids = np.concatenate([index.ids[off[c]:off[c + 1]] for c in cells])
    d2 = np.concatenate([_sq_dist(index.vectors[off[c]:off[c + 1]], q) for c in cells])
    return _rank(ids, None, q, k, d2)


def exhaustive_knn(ids, vectors, q, k=10):
    """Brute-force reference ranking with the same ordering rules as ``query_knn``."""
    return _rank(np.asarray(ids), np.asarray(vectors, dtype=float), np.asarray(q, dtype=float), k)


# -- persistence -----------------------------------------------------------------------

def _put(buf, arr, dtype):
    a = np.ascontiguousarray(arr, dtype=dtype)
    buf.write(struct.pack("<Q", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    buf.write(a.tobytes())


def _get(buf, dtype):
    (ndim,) = struct.unpack("<Q", buf.read(8))
    shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
    dt = np.dtype(dtype)
    n = int(np.prod(shape)) * dt.itemsize
    raw = buf.read(n)
    if len(raw) != n:
        raise ValueError("truncated array")
    return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


@dataclass(eq=False)
class LandmarkIndex:
    """Projection plus inverted multi-index, as stored alongside a map."""

    projection: DescriptorProjection
    imi: InvertedMultiIndex

    def to_bytes(self):
        buf = io.BytesIO()
        _put(buf, self.projection.mean, "<f8")
        _put(buf, self.projection.basis, "<f8")
        _put(buf, self.imi.codebook_1, "<f8")
        _put(buf, self.imi.codebook_2, "<f8")
        _put(buf, self.imi.offsets, "<i8")
        _put(buf, self.imi.ids, "<i8")
        _put(buf, self.imi.vectors, "<f8")
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        buf = io.BytesIO(data)
        try:
            mean, basis = _get(buf, "<f8"), _get(buf, "<f8")
            c1, c2 = _get(buf, "<f8"), _get(buf, "<f8")
            offsets, ids, vecs = _get(buf, "<i8"), _get(buf, "<i8"), _get(buf, "<f8")
        except (ValueError, struct.error) as exc:
            raise CorruptBlob(f"index.bin: {exc}") from None
        return cls(DescriptorProjection(mean, basis), InvertedMultiIndex(c1, c2, offsets, ids, vecs))
