"""Full-batch weighted least squares over keyframe poses, landmarks and baseframes."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import spsolve

from .camera import MIN_DEPTH, PinholeCamera, reprojection_batch
from .core import NO_LANDMARK, Map
from .errors import BehindCamera, NoResiduals, SolverDiverged
from .geometry import (RigidTransform, quat_exp_batch, quat_multiply_batch, quat_to_matrix_batch,
                       skew_batch, so3_log_batch, so3_right_jacobian_inv_batch)

log = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    max_iterations: int = 50
    relative_cost_tolerance: float = 1e-9
    huber_threshold_px: float | None = 2.0
    initial_damping: float = 1e-4
    max_damping_retries: int = 12
    step_tolerance: float = 1e-10       # stop once the largest update component is smaller
    linear_solver: str = "schur"        # or "dense"

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not self.relative_cost_tolerance > 0 or not self.initial_damping > 0:
            raise ValueError("tolerances must be positive")
        if self.huber_threshold_px is not None and not self.huber_threshold_px > 0:
            raise ValueError("huber_threshold_px must be positive")
        if self.linear_solver not in ("schur", "dense"):
            raise ValueError("linear_solver must be 'schur' or 'dense'")


@dataclass
class SolverStats:
    initial_cost: float
    final_cost: float
    iterations: int
    history: list = field(default_factory=list)     # (iteration, cost, seconds)
    converged: bool = False
    reprojection_rmse: float = 0.0                  # pixels, final state


# -- residuals ---------------------------------------------------------------------------

def whitening(covariance):
    """Upper factor S with S^T S = inverse(covariance)."""
    info = np.linalg.inv(np.asarray(covariance, dtype=float))
    info = 0.5 * (info + info.swapaxes(-1, -2))
    return np.swapaxes(np.linalg.cholesky(info), -1, -2)


def relative_pose_batch(R_i, t_i, R_j, t_j, R_z, t_z, S=None, jacobians=True):
    """Residual of measured relative pose Z against the estimate T_i^-1 T_j.

    Rotation part Log(R_z^T R_i^T R_j), translation part R_z^T (R_i^T (t_j - t_i) - t_z);
    Jacobians are with respect to right perturbations (phi, rho) of T_i and T_j.
    """
    R_iT = np.swapaxes(R_i, -1, -2)
    R_zT = np.swapaxes(R_z, -1, -2)
    R_ij = R_iT @ R_j
    a = np.einsum("nij,nj->ni", R_iT, t_j - t_i)
    r = np.concatenate([so3_log_batch(R_zT @ R_ij),
                        np.einsum("nij,nj->ni", R_zT, a - t_z)], axis=1)
    out = {}
    if S is not None:
        out["residual"] = np.einsum("nij,nj->ni", S, r)
    else:
        out["residual"] = r
    if not jacobians:
        return out
    n = len(r)
    Jr_inv = so3_right_jacobian_inv_batch(r[:, :3])
    J_i = np.zeros((n, 6, 6))
    J_j = np.zeros((n, 6, 6))
    J_i[:, :3, :3] = -Jr_inv @ np.swapaxes(R_ij, -1, -2)
    J_j[:, :3, :3] = Jr_inv
    J_i[:, 3:, :3] = R_zT @ skew_batch(a)
    J_i[:, 3:, 3:] = -R_zT
    J_j[:, 3:, 3:] = R_zT @ R_ij
    if S is not None:
        J_i = S @ J_i
        J_j = S @ J_j
    out["J_from"] = J_i
    out["J_to"] = J_j
    return out


def relative_pose_residual(edge, pose_from: RigidTransform, pose_to: RigidTransform):
    """Whitened 6-vector residual of an odometry edge plus (J_from, J_to)."""
    Z = edge.relative_pose
    S = whitening(edge.covariance)[None]
    out = relative_pose_batch(pose_from.R[None], pose_from.t[None], pose_to.R[None],
                              pose_to.t[None], Z.R[None], Z.t[None], S)
    return out["residual"][0], out["J_from"][0], out["J_to"][0]


def reprojection_residual(p_global, pose: RigidTransform, baseframe: RigidTransform,
                          camera: PinholeCamera, observed, sigma_px):
    """Whitened pixel residual with Jacobians w.r.t. vertex pose, landmark and baseframe.

    Returns (residual (2,), J_pose (2, 6), J_landmark (2, 3), J_baseframe (2, 6)).
    """
    T_bc = camera.T_body_camera
    out = reprojection_batch(np.asarray(p_global, dtype=float)[None], pose.R[None], pose.t[None],
                             baseframe.R[None], baseframe.t[None], T_bc.R[None], T_bc.t[None],
                             np.array([[camera.fx, camera.fy, camera.cx, camera.cy]]),
                             np.asarray(observed, dtype=float)[None], np.array([sigma_px]))
    if out["depth"][0] <= MIN_DEPTH:
        raise BehindCamera("landmark lies behind the camera")
    return out["residual"][0], out["J_pose"][0], out["J_landmark"][0], out["J_base"][0]


def huber_cost(sq, k):
    """Huber loss of squared whitened norms ``sq`` with per-term thresholds ``k``."""
    if k is None:
        return sq
    e = np.sqrt(sq)
    return np.where(e <= k, sq, 2 * k * e - k * k)


def huber_weight(sq, k):
    if k is None:
        return np.ones_like(sq)
    e = np.sqrt(sq)
    return np.where(e <= k, 1.0, k / np.maximum(e, 1e-300))


# -- problem assembly --------------------------------------------------------------------

def mission_components(m: Map, linked_pairs):
    """Connected components of missions under the given (mission, mission) links."""
    parent = {mid: mid for mid in m.missions}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in linked_pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    comps = {}
    for mid in m.missions:
        comps.setdefault(find(mid), []).append(mid)
    return list(comps.values())


class BundleProblem:
    """Vectorized view of a map for full-batch optimization.

    State: quaternion/translation arrays for every vertex and mission baseframe
    plus global positions of the optimized landmarks.
    """

    def __init__(self, m: Map, config: SolverConfig):
        self.m = m
        self.config = config
        self.vids = sorted(m.vertices)
        self.vrow = {v: i for i, v in enumerate(self.vids)}
        self.mids = sorted(m.missions)
        self.mrow = {mid: i for i, mid in enumerate(self.mids)}
        self.q = np.array([m.vertices[v].pose.rotation for v in self.vids]).reshape(-1, 4)
        self.t = np.array([m.vertices[v].pose.translation for v in self.vids]).reshape(-1, 3)
        self.qb = np.array([m.missions[i].baseframe.rotation for i in self.mids]).reshape(-1, 4)
        self.tb = np.array([m.missions[i].baseframe.translation for i in self.mids]).reshape(-1, 3)

        # observations of usable landmarks
        lm_ids, o_lm, o_v, o_cam, uv, sig = [], [], [], [], [], []
        lrow = {}
        for vid in self.vids:
            for f, frame in enumerate(m.vertices[vid].frames):
                refs = frame.landmark_refs
                for k in np.flatnonzero(refs != NO_LANDMARK):
                    lid = int(refs[k])
                    if not m.usable(lid):
                        continue
                    if lid not in lrow:
                        lrow[lid] = len(lm_ids)
                        lm_ids.append(lid)
                    o_lm.append(lrow[lid])
                    o_v.append(self.vrow[vid])
                    o_cam.append(f)
                    uv.append(frame.keypoints[k])
                    sig.append(frame.sigmas[k])
        self.lm_ids = lm_ids
        self.P = m.landmark_positions_global(lm_ids)
        self.o_lm = np.array(o_lm, dtype=np.int64)
        self.o_v = np.array(o_v, dtype=np.int64)
        self.o_m = np.array([self.mrow[m.vertices[self.vids[i]].mission_id] for i in self.o_v],
                            dtype=np.int64)
        self.o_cam = np.array(o_cam, dtype=np.int64)
        self.uv = np.array(uv, dtype=float).reshape(-1, 2)
        self.sigma = np.array(sig, dtype=float)
        cams = m.cameras
        self.cam_R = np.array([c.T_body_camera.R for c in cams]).reshape(-1, 3, 3)
        self.cam_t = np.array([c.T_body_camera.t for c in cams]).reshape(-1, 3)
        self.cam_K = np.array([[c.fx, c.fy, c.cx, c.cy] for c in cams]).reshape(-1, 4)
        h = config.huber_threshold_px
        self.k = None if h is None else h / self.sigma

        # odometry
        e_i, e_j, Zq, Zt, cov = [], [], [], [], []
        for (a, b), e in m.edges.items():
            e_i.append(self.vrow[a])
            e_j.append(self.vrow[b])
            Zq.append(e.relative_pose.rotation)
            Zt.append(e.relative_pose.translation)
            cov.append(e.covariance)
        self.e_i = np.array(e_i, dtype=np.int64)
        self.e_j = np.array(e_j, dtype=np.int64)
        self.Z_R = quat_to_matrix_batch(np.array(Zq).reshape(-1, 4))
        self.Z_t = np.array(Zt, dtype=float).reshape(-1, 3)
        self.S = whitening(np.array(cov).reshape(-1, 6, 6)) if cov else np.zeros((0, 6, 6))

        if len(self.o_lm) == 0 and len(self.e_i) == 0:
            raise NoResiduals("map has no observations of usable landmarks and no odometry")
        self._drop_behind_camera()
        self._choose_variables()

    def _drop_behind_camera(self):
        if len(self.o_lm) == 0:
            return
        depth = self._reprojection(jacobians=False)["depth"]
        bad = depth <= MIN_DEPTH
        if np.any(bad):
            log.warning("ignoring %d observations behind their camera", int(bad.sum()))
            keep = ~bad
            for name in ("o_lm", "o_v", "o_m", "o_cam", "uv", "sigma"):
                setattr(self, name, getattr(self, name)[keep])
            if self.k is not None:
                self.k = self.k[keep]

    def _choose_variables(self):
        m = self.m
        # missions linked by shared landmarks or by observing each other's landmarks
        host_m = np.array([self.mrow[m.mission_of(m.landmarks[l].host_vertex_id).id]
                           for l in self.lm_ids], dtype=np.int64)
        links = set()
        if len(self.o_lm):
            first = np.full(len(self.lm_ids), -1)
            for lm, mi in zip(self.o_lm, self.o_m):
                if first[lm] < 0:
                    first[lm] = mi
                elif first[lm] != mi:
                    links.add((first[lm], mi))
            for lm, mi in zip(range(len(self.lm_ids)), host_m):
                if first[lm] >= 0 and first[lm] != mi:
                    links.add((first[lm], mi))
        links = {(self.mids[a], self.mids[b]) for a, b in links}
        ref = m.reference()
        fixed_v = set()
        var_base = []
        for comp in mission_components(m, links):
            has_ref = ref in comp
            anchor = ref if has_ref else min(comp)
            if m.missions[anchor].vertex_ids:
                fixed_v.add(m.missions[anchor].vertex_ids[0])
            for mid in comp:
                ms = m.missions[mid]
                if mid != anchor and not ms.anchored and ms.vertex_ids:
                    # unanchored: baseframe is a variable, its first vertex holds the
                    # mission-internal gauge
                    fixed_v.add(ms.vertex_ids[0])
                    if has_ref:
                        var_base.append(mid)
                    # otherwise the whole component floats; the anchor vertex fixes it
        self.fixed_vertices = fixed_v
        col = 0
        self.v_col = np.full(len(self.vids), -1, dtype=np.int64)
        for i, v in enumerate(self.vids):
            if v not in fixed_v:
                self.v_col[i] = col
                col += 6
        self.b_col = np.full(len(self.mids), -1, dtype=np.int64)
        for mid in sorted(var_base):
            self.b_col[self.mrow[mid]] = col
            col += 6
        self.n_cam = col
        self.n_lm = 3 * len(self.lm_ids)

    # -- evaluation ------------------------------------------------------------------
    def _reprojection(self, jacobians=True, state=None):
        q, t, qb, tb, P = state or (self.q, self.t, self.qb, self.tb, self.P)
        R = quat_to_matrix_batch(q)
        Rb = quat_to_matrix_batch(qb)
        return reprojection_batch(P[self.o_lm], R[self.o_v], t[self.o_v], Rb[self.o_m],
                                  tb[self.o_m], self.cam_R[self.o_cam], self.cam_t[self.o_cam],
                                  self.cam_K[self.o_cam], self.uv, self.sigma, jacobians)

    def _odometry(self, jacobians=True, state=None):
        q, t = (state or (self.q, self.t))[:2]
        R = quat_to_matrix_batch(q)
        return relative_pose_batch(R[self.e_i], t[self.e_i], R[self.e_j], t[self.e_j],
                                   self.Z_R, self.Z_t, self.S, jacobians)

    def state(self):
        return (self.q.copy(), self.t.copy(), self.qb.copy(), self.tb.copy(), self.P.copy())

    def cost(self, state=None, robust=True):
        """Total cost; +inf if any observation falls behind its camera."""
        total = 0.0
        if len(self.o_lm):
            rp = self._reprojection(False, state)
            if np.any(rp["depth"] <= MIN_DEPTH):
                return np.inf
            sq = (rp["residual"] ** 2).sum(axis=1)
            total += huber_cost(sq, self.k if robust else None).sum()
        if len(self.e_i):
            total += (self._odometry(False, state)["residual"] ** 2).sum()
        return float(total)

    def reprojection_rmse(self):
        if len(self.o_lm) == 0:
            return 0.0
        rp = self._reprojection(False)
        # per image coordinate
        return float(np.sqrt(((rp["pixel"] - self.uv) ** 2).mean()))

    def linearize(self, robust=True):
        """Weighted Jacobians (sparse, camera part and landmark part) and residual."""
        rows, cols, vals = [], [], []
        lrows, lcols, lvals = [], [], []
        res = []
        r0 = 0
        if len(self.o_lm):
            rp = self._reprojection(True)
            r = rp["residual"]
            sq = (r ** 2).sum(axis=1)
            w = np.sqrt(huber_weight(sq, self.k if robust else None))
            n = len(r)
            r = r * w[:, None]
            res.append(r.ravel())
            ridx = r0 + np.arange(2 * n).reshape(n, 2)
            for J, colstart in ((rp["J_pose"], self.v_col[self.o_v]),
                                (rp["J_base"], self.b_col[self.o_m])):
                sel = colstart >= 0
                if np.any(sel):
                    Jw = J[sel] * w[sel, None, None]
                    rows.append(np.repeat(ridx[sel], 6, axis=1).ravel())
                    cols.append(np.broadcast_to(colstart[sel, None, None] + np.arange(6),
                                                (sel.sum(), 2, 6)).ravel())
                    vals.append(Jw.ravel())
            Jl = rp["J_landmark"] * w[:, None, None]
            lrows.append(np.repeat(ridx, 3, axis=1).ravel())
            lcols.append(np.broadcast_to(3 * self.o_lm[:, None, None] + np.arange(3),
                                         (n, 2, 3)).ravel())
            lvals.append(Jl.ravel())
            r0 += 2 * n
        if len(self.e_i):
            od = self._odometry(True)
            n = len(self.e_i)
            res.append(od["residual"].ravel())
            ridx = r0 + np.arange(6 * n).reshape(n, 6)
            for J, colstart in ((od["J_from"], self.v_col[self.e_i]),
                                (od["J_to"], self.v_col[self.e_j])):
                sel = colstart >= 0
                if np.any(sel):
                    rows.append(np.repeat(ridx[sel], 6, axis=1).ravel())
                    cols.append(np.broadcast_to(colstart[sel, None, None] + np.arange(6),
                                                (sel.sum(), 6, 6)).ravel())
                    vals.append(J[sel].ravel())
            r0 += 6 * n
        cat = lambda xs, dt=float: np.concatenate(xs) if xs else np.zeros(0, dt)
        Jc = sp.csr_matrix((cat(vals), (cat(rows, int), cat(cols, int))), shape=(r0, self.n_cam))
        Jl = sp.csr_matrix((cat(lvals), (cat(lrows, int), cat(lcols, int))),
                           shape=(r0, self.n_lm))
        return Jc, Jl, cat(res)

    def gradient(self, robust=True):
        Jc, Jl, r = self.linearize(robust)
        return np.concatenate([Jc.T @ r, Jl.T @ r])

    # -- steps -------------------------------------------------------------------------
    def solve_step(self, Jc, Jl, r, lam, method="schur"):
        """Damped Gauss-Newton step (H + lam * diag(H)) dx = -g."""
        A = (Jc.T @ Jc).tocsr()
        g_c = Jc.T @ r
        g_l = Jl.T @ r
        nl = len(self.lm_ids)
        if method == "dense":
            J = sp.hstack([Jc, Jl]).toarray()
            H = J.T @ J
            H[np.diag_indices_from(H)] += lam * np.maximum(np.diag(H), 1e-9)
            g = np.concatenate([g_c, g_l])
            return -cho_solve(cho_factor(H), g)
        # landmark blocks are 3x3 and independent: eliminate them
        C = (Jl.T @ Jl).tocsr()
        blocks = np.zeros((nl, 3, 3))
        if nl:
            Cc = C.tocoo()
            blocks[Cc.row // 3, Cc.row % 3, Cc.col % 3] = Cc.data
            d = np.diagonal(blocks, axis1=1, axis2=2).copy()
            idx = np.arange(3)
            blocks[:, idx, idx] += lam * np.maximum(d, 1e-9)
        Cinv = np.linalg.inv(blocks) if nl else blocks
        bi = np.repeat(np.arange(nl), 9)
        rr = 3 * bi + np.tile(np.repeat(np.arange(3), 3), nl)
        cc = 3 * bi + np.tile(np.tile(np.arange(3), 3), nl)
        Cinv_sp = sp.csr_matrix((Cinv.ravel(), (rr, cc)), shape=(self.n_lm, self.n_lm))
        B = (Jc.T @ Jl).tocsr()
        dA = A.diagonal()
        A_d = A + sp.diags(lam * np.maximum(dA, 1e-9))
        BC = B @ Cinv_sp
        Sm = (A_d - BC @ B.T).tocsc()
        rhs = -g_c + BC @ g_l
        if self.n_cam:
            dc = spsolve(Sm, rhs) if self.n_cam > 1 else np.array([rhs[0] / Sm[0, 0]])
        else:
            dc = np.zeros(0)
        dl = Cinv_sp @ (-g_l - B.T @ dc)
        return np.concatenate([np.atleast_1d(dc), dl])

    def apply_step(self, dx):
        q, t, qb, tb, P = self.state()
        dv = dx[:self.n_cam]
        sel = self.v_col >= 0
        if np.any(sel):
            d = dv[self.v_col[sel, None] + np.arange(6)]
            R = quat_to_matrix_batch(q[sel])
            q[sel] = quat_multiply_batch(q[sel], quat_exp_batch(d[:, :3]))
            q[sel] /= np.linalg.norm(q[sel], axis=1, keepdims=True)
            t[sel] = t[sel] + np.einsum("nij,nj->ni", R, d[:, 3:])
        selb = self.b_col >= 0
        if np.any(selb):
            d = dv[self.b_col[selb, None] + np.arange(6)]
            R = quat_to_matrix_batch(qb[selb])
            qb[selb] = quat_multiply_batch(qb[selb], quat_exp_batch(d[:, :3]))
            qb[selb] /= np.linalg.norm(qb[selb], axis=1, keepdims=True)
            tb[selb] = tb[selb] + np.einsum("nij,nj->ni", R, d[:, 3:])
        if self.n_lm:
            P = P + dx[self.n_cam:].reshape(-1, 3)
        return q, t, qb, tb, P

    def set_state(self, state):
        self.q, self.t, self.qb, self.tb, self.P = state

    def write_back(self):
        m = self.m
        for i, v in enumerate(self.vids):
            if self.v_col[i] >= 0:
                m.vertices[v].pose = RigidTransform(self.q[i].copy(), self.t[i].copy())
        for i, mid in enumerate(self.mids):
            if self.b_col[i] >= 0:
                m.missions[mid].baseframe = RigidTransform(self.qb[i].copy(), self.tb[i].copy())
        for i, lid in enumerate(self.lm_ids):
            m.set_landmark_global(lid, self.P[i])


def levenberg_marquardt(problem: BundleProblem, config: SolverConfig, robust=True):
    """Generic LM loop over a BundleProblem; returns SolverStats."""
    cost = problem.cost(robust=robust)
    if not np.isfinite(cost):
        raise SolverDiverged("initial cost is not finite")
    stats = SolverStats(cost, cost, 0)
    lam = config.initial_damping
    for it in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        if cost == 0.0:
            stats.converged = True
            break
        Jc, Jl, r = problem.linearize(robust)
        accepted = False
        for _ in range(config.max_damping_retries):
            try:
                dx = problem.solve_step(Jc, Jl, r, lam, config.linear_solver)
            except (np.linalg.LinAlgError, RuntimeError):
                lam *= 10
                continue
            if not np.all(np.isfinite(dx)):
                lam *= 10
                continue
            cand = problem.apply_step(dx)
            new_cost = problem.cost(cand, robust=robust)
            if new_cost < cost:
                problem.set_state(cand)
                accepted = True
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        stats.iterations = it
        if not accepted:
            g = np.concatenate([Jc.T @ r, Jl.T @ r])
            if np.abs(g).max() > 1e-3 * (1 + cost):
                raise SolverDiverged("no damping level decreased the cost")
            stats.converged = True
            stats.history.append((it, cost, time.perf_counter() - t0))
            break
        rel = (cost - new_cost) / cost
        cost = new_cost
        stats.history.append((it, cost, time.perf_counter() - t0))
        if rel < config.relative_cost_tolerance or np.abs(dx).max() < config.step_tolerance:
            stats.converged = True
            break
    stats.final_cost = cost
    return stats


def optimize_full_batch(m: Map, config: SolverConfig | None = None):
    """Refine vertex poses, usable landmarks and unanchored baseframes in place."""
    config = config or SolverConfig()
    problem = BundleProblem(m, config)
    stats = levenberg_marquardt(problem, config)
    problem.write_back()
    stats.reprojection_rmse = problem.reprojection_rmse()
    for it, c, dt in stats.history:
        log.info("iteration %d cost %.6g time %.3fs", it, c, dt)
    return stats
