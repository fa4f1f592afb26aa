"""Robust pose-graph relaxation with switchable loop-closure constraints."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import spsolve

from .bundle_adjust import SolverStats, mission_components, relative_pose_batch, whitening
from .core import Map
from .errors import DisconnectedGraph, SolverDiverged
from .geometry import (RigidTransform, quat_exp_batch, quat_multiply_batch, quat_to_matrix_batch)
from .localization import LocalizationConfig, solve_pnp_ransac
from .loop_engine import LoopConfig, build_landmark_index, query_frames

log = logging.getLogger(__name__)

# an inlier at the 95th percentile of a 6-dof chi-square (12.6) keeps s = w / (w + r^2) > 0.9
DEFAULT_SWITCH_PRIOR_WEIGHT = 120.0


@dataclass(eq=False)
class LoopConstraint:
    from_vertex: int
    to_vertex: int
    relative_pose: RigidTransform       # global from <- to
    covariance: np.ndarray
    switch: float = 1.0
    switch_prior_weight: float = DEFAULT_SWITCH_PRIOR_WEIGHT
    inlier_count: int = 0


@dataclass
class LoopClosureConfig:
    matching: LoopConfig = field(default_factory=LoopConfig)
    pnp: LocalizationConfig = field(default_factory=LocalizationConfig)
    query_stride: int = 3               # query every n-th vertex of each mission
    min_vertex_separation: int = 50     # same-mission landmarks this close in the chain are skipped
    rotation_sigma: float = 0.01        # rad
    translation_sigma: float = 0.1      # m
    switch_prior_weight: float = DEFAULT_SWITCH_PRIOR_WEIGHT

    def covariance(self):
        return np.diag([self.rotation_sigma ** 2] * 3 + [self.translation_sigma ** 2] * 3)


@dataclass
class RelaxConfig:
    max_iterations: int = 100
    relative_cost_tolerance: float = 1e-9
    initial_damping: float = 1e-4
    max_damping_retries: int = 12
    linear_solver: str = "auto"         # "dense", "sparse" or "auto"
    dense_limit: int = 1500             # auto uses the dense solve up to this many unknowns

    def __post_init__(self):
        if self.linear_solver not in ("auto", "dense", "sparse"):
            raise ValueError("linear_solver must be 'auto', 'dense' or 'sparse'")
        if not self.relative_cost_tolerance > 0 or not self.initial_damping > 0:
            raise ValueError("tolerances must be positive")


@dataclass
class RelaxResult:
    switches: np.ndarray
    stats: SolverStats


# -- constraint construction -------------------------------------------------------------

def build_loop_constraints(m: Map, config: LoopClosureConfig | None = None, index=None):
    """Loop closures from 2D-3D matches of query vertices against other map parts.

    Matches are grouped by the mission hosting the matched landmarks; each group
    with a PnP consensus yields one constraint between the query vertex and the
    vertex observing the most inlier landmarks. Duplicates per vertex pair keep the
    strongest consensus.
    """
    config = config or LoopClosureConfig()
    usable = m.usable_landmarks()
    if not usable or len(m.missions) == 0:
        return []
    index = index or build_landmark_index(m, config.matching, usable)
    chain_pos = {}
    for mid, ms in m.missions.items():
        for i, v in enumerate(ms.vertex_ids):
            chain_pos[v] = i
    host_m, span = {}, {}
    for lid in usable:
        lm = m.landmarks[lid]
        host_m[lid] = m.vertices[lm.host_vertex_id].mission_id
        pos = [chain_pos[b[0]] for b in lm.backlinks if m.vertices[b[0]].mission_id == host_m[lid]]
        span[lid] = (min(pos), max(pos)) if pos else (0, -1)
    sep = config.min_vertex_separation

    def near_predicate(mid, i):
        def excluded(lid):
            if host_m.get(lid) != mid:
                return False
            lo, hi = span[lid]
            return lo - sep <= i <= hi + sep
        return excluded

    requests = []
    for mid, ms in m.missions.items():
        for i in range(0, len(ms.vertex_ids), max(1, config.query_stride)):
            vid = ms.vertex_ids[i]
            for f, frame in enumerate(m.vertices[vid].frames):
                if len(frame):
                    requests.append((vid, f, frame, None, near_predicate(mid, i)))
    results = query_frames(requests, index, m, config.matching, covisibility=True)

    best = {}
    cov = config.covariance()
    for (vid, f, frame, _, excluded), matches in zip(requests, results):
        groups = {}
        for mt in matches:
            groups.setdefault(host_m[mt.landmark_id], []).append(mt)
        cam = m.cameras[f]
        for gm, ms_ in sorted(groups.items()):
            kp = np.array([mt.keypoint_idx for mt in ms_])
            if len(np.unique(kp)) < config.pnp.min_inliers:
                continue
            lids = [mt.landmark_id for mt in ms_]
            T_wc, mask = solve_pnp_ransac(frame.keypoints[kp], m.landmark_positions_global(lids),
                                          cam, config.pnp, keys=kp)
            count = len(np.unique(kp[mask]))
            if T_wc is None or count < config.pnp.min_inliers:
                continue
            votes = {}
            for lid in {lids[i] for i in np.flatnonzero(mask)}:
                for ov in m.observers(lid):
                    if m.vertices[ov].mission_id != gm or ov == vid:
                        continue
                    if gm == m.vertices[vid].mission_id and \
                            abs(chain_pos[ov] - chain_pos[vid]) <= sep:
                        continue
                    votes[ov] = votes.get(ov, 0) + 1
            if not votes:
                continue
            j = min(votes, key=lambda v: (-votes[v], v))
            G_q = T_wc @ cam.T_body_camera.inverse()
            Z = m.global_pose(j).inverse() @ G_q
            key = (min(j, vid), max(j, vid))
            if key not in best or best[key].inlier_count < count:
                best[key] = LoopConstraint(j, vid, Z, cov.copy(), 1.0,
                                           config.switch_prior_weight, count)
    out = [best[k] for k in sorted(best)]
    log.info("built %d loop constraints", len(out))
    return out


# -- relaxation ------------------------------------------------------------------------

class _PoseGraph:
    def __init__(self, m: Map, constraints):
        self.m = m
        for mid, ms in m.missions.items():
            for a, b in zip(ms.vertex_ids[:-1], ms.vertex_ids[1:]):
                if (a, b) not in m.edges:
                    raise DisconnectedGraph(f"mission {mid} has no odometry edge {a}->{b}")
        for c in constraints:
            if c.from_vertex not in m.vertices or c.to_vertex not in m.vertices:
                raise DisconnectedGraph("loop constraint references a missing vertex")
        if m.vertices and m.reference() is None:
            raise DisconnectedGraph("map has no reference mission")
        self.vids = sorted(m.vertices)
        self.vrow = {v: i for i, v in enumerate(self.vids)}
        self.q = np.array([m.vertices[v].pose.rotation for v in self.vids]).reshape(-1, 4)
        self.t = np.array([m.vertices[v].pose.translation for v in self.vids]).reshape(-1, 3)
        mids = [m.vertices[v].mission_id for v in self.vids]
        base = {mid: ms.baseframe for mid, ms in m.missions.items()}
        self.B_R = np.array([base[mid].R for mid in mids]).reshape(-1, 3, 3)
        self.B_t = np.array([base[mid].t for mid in mids]).reshape(-1, 3)

        edges = list(m.edges.values())
        self.e_i = np.array([self.vrow[e.from_vertex] for e in edges], dtype=np.int64)
        self.e_j = np.array([self.vrow[e.to_vertex] for e in edges], dtype=np.int64)
        self.e_ZR = quat_to_matrix_batch(
            np.array([e.relative_pose.rotation for e in edges]).reshape(-1, 4))
        self.e_Zt = np.array([e.relative_pose.translation for e in edges]).reshape(-1, 3)
        self.e_S = (whitening(np.array([e.covariance for e in edges]))
                    if edges else np.zeros((0, 6, 6)))

        self.c_i = np.array([self.vrow[c.from_vertex] for c in constraints], dtype=np.int64)
        self.c_j = np.array([self.vrow[c.to_vertex] for c in constraints], dtype=np.int64)
        self.c_ZR = quat_to_matrix_batch(
            np.array([c.relative_pose.rotation for c in constraints]).reshape(-1, 4))
        self.c_Zt = np.array([c.relative_pose.translation for c in constraints]).reshape(-1, 3)
        self.c_S = (whitening(np.array([c.covariance for c in constraints]))
                    if constraints else np.zeros((0, 6, 6)))
        self.c_w = np.array([c.switch_prior_weight for c in constraints], dtype=float)
        self.s = np.clip(np.array([c.switch for c in constraints], dtype=float), 0.0, 1.0)

        # gauge: reference mission's first vertex, plus one vertex per mission group
        # not tied to the reference by loop closures
        links = {(m.vertices[c.from_vertex].mission_id, m.vertices[c.to_vertex].mission_id)
                 for c in constraints}
        ref = m.reference()
        fixed = set()
        for comp in mission_components(m, links):
            anchor = ref if ref in comp else min(comp)
            if m.missions[anchor].vertex_ids:
                fixed.add(m.missions[anchor].vertex_ids[0])
        self.v_col = np.full(len(self.vids), -1, dtype=np.int64)
        col = 0
        for i, v in enumerate(self.vids):
            if v not in fixed:
                self.v_col[i] = col
                col += 6
        self.s_col = col + np.arange(len(constraints))
        self.n = col + len(constraints)

    def state(self):
        return self.q.copy(), self.t.copy(), self.s.copy()

    def _global(self, q, t):
        R = quat_to_matrix_batch(q)
        return self.B_R @ R, self.B_t + np.einsum("nij,nj->ni", self.B_R, t), R

    def residuals(self, state, jacobians=False):
        q, t, s = state
        G_R, G_t, R = self._global(q, t)
        od = relative_pose_batch(R[self.e_i], t[self.e_i], R[self.e_j], t[self.e_j],
                                 self.e_ZR, self.e_Zt, self.e_S, jacobians)
        lc = relative_pose_batch(G_R[self.c_i], G_t[self.c_i], G_R[self.c_j], G_t[self.c_j],
                                 self.c_ZR, self.c_Zt, self.c_S, jacobians)
        return od, lc

    def cost(self, state):
        od, lc = self.residuals(state)
        s = state[2]
        return float((od["residual"] ** 2).sum()
                     + (s ** 2 * (lc["residual"] ** 2).sum(axis=1)).sum()
                     + (self.c_w * (1 - s) ** 2).sum())

    def linearize(self, state):
        q, t, s = state
        od, lc = self.residuals(state, True)
        rows, cols, vals, res = [], [], [], []
        r0 = 0

        def block(J, vrows, ridx, scale=None):
            colstart = self.v_col[vrows]
            sel = colstart >= 0
            if not np.any(sel):
                return
            Js = J[sel] if scale is None else J[sel] * scale[sel, None, None]
            rows.append(np.repeat(ridx[sel], 6, axis=1).ravel())
            cols.append(np.broadcast_to(colstart[sel, None, None] + np.arange(6),
                                        (sel.sum(), 6, 6)).ravel())
            vals.append(Js.ravel())

        ne = len(self.e_i)
        ridx = np.arange(6 * ne).reshape(ne, 6)
        res.append(od["residual"].ravel())
        block(od["J_from"], self.e_i, ridx)
        block(od["J_to"], self.e_j, ridx)
        r0 = 6 * ne
        nc = len(self.c_i)
        ridx = r0 + np.arange(6 * nc).reshape(nc, 6)
        res.append((s[:, None] * lc["residual"]).ravel())
        block(lc["J_from"], self.c_i, ridx, s)
        block(lc["J_to"], self.c_j, ridx, s)
        rows.append(ridx.ravel())
        cols.append(np.repeat(self.s_col, 6))
        vals.append(lc["residual"].ravel())
        r0 += 6 * nc
        # switch priors
        sw = np.sqrt(self.c_w)
        res.append(sw * (1 - s))
        rows.append(r0 + np.arange(nc))
        cols.append(self.s_col)
        vals.append(-sw)
        r0 += nc
        J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows).astype(np.int64),
                                                  np.concatenate(cols).astype(np.int64))),
                          shape=(r0, self.n))
        return J, np.concatenate(res)

    def step(self, J, r, lam, dense):
        H = (J.T @ J).tocsr()
        g = J.T @ r
        d = H.diagonal()
        damp = lam * np.maximum(d, 1e-9)
        if dense:
            Hd = H.toarray()
            Hd[np.diag_indices_from(Hd)] += damp
            return -cho_solve(cho_factor(Hd), g)
        return -spsolve((H + sp.diags(damp)).tocsc(), g)

    def apply(self, state, dx):
        q, t, s = (a.copy() for a in state)
        sel = self.v_col >= 0
        if np.any(sel):
            d = dx[self.v_col[sel, None] + np.arange(6)]
            R = quat_to_matrix_batch(q[sel])
            qn = quat_multiply_batch(q[sel], quat_exp_batch(d[:, :3]))
            q[sel] = qn / np.linalg.norm(qn, axis=1, keepdims=True)
            t[sel] = t[sel] + np.einsum("nij,nj->ni", R, d[:, 3:])
        if len(s):
            s = np.clip(s + dx[self.s_col], 0.0, 1.0)
        return q, t, s


def relax(m: Map, constraints, config: RelaxConfig | None = None) -> RelaxResult:
    """Optimize vertex poses and switches; landmarks move rigidly with their host vertex."""
    config = config or RelaxConfig()
    graph = _PoseGraph(m, constraints)
    state = graph.state()
    cost = graph.cost(state)
    if not np.isfinite(cost):
        raise SolverDiverged("initial cost is not finite")
    stats = SolverStats(cost, cost, 0)
    dense = (config.linear_solver == "dense"
             or (config.linear_solver == "auto" and graph.n <= config.dense_limit))
    lam = config.initial_damping
    for it in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        if cost == 0.0 or graph.n == 0:
            stats.converged = True
            break
        J, r = graph.linearize(state)
        accepted = False
        for _ in range(config.max_damping_retries):
            try:
                dx = graph.step(J, r, lam, dense)
            except (np.linalg.LinAlgError, RuntimeError):
                lam *= 10
                continue
            if not np.all(np.isfinite(dx)):
                lam *= 10
                continue
            cand = graph.apply(state, dx)
            new_cost = graph.cost(cand)
            if new_cost < cost:
                state, accepted = cand, True
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        stats.iterations = it
        if not accepted:
            g = J.T @ r
            if np.abs(g).max() > 1e-3 * (1 + cost):
                raise SolverDiverged("no damping level decreased the pose-graph cost")
            stats.converged = True
            stats.history.append((it, cost, time.perf_counter() - t0))
            break
        rel = (cost - new_cost) / cost
        cost = new_cost
        stats.history.append((it, cost, time.perf_counter() - t0))
        if rel < config.relative_cost_tolerance:
            stats.converged = True
            break
    stats.final_cost = cost

    q, t, s = state
    old = {v: m.vertices[v].pose for v in graph.vids}
    for i, v in enumerate(graph.vids):
        if graph.v_col[i] >= 0:
            m.vertices[v].pose = RigidTransform(q[i].copy(), t[i].copy())
    for lm in m.landmarks.values():
        h = lm.host_vertex_id
        new = m.vertices[h].pose
        if new is not old[h]:
            lm.position = new.apply(old[h].inverse().apply(lm.position))
    for c, val in zip(constraints, s):
        c.switch = float(val)
    return RelaxResult(s.copy(), stats)
