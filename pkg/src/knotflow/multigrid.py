"""Geometric multigrid on curve networks for the projected saddle systems.

Coarsening removes alternating interior vertices (endpoints, junctures, and
constraint-pinned vertices always survive); prolongation keeps surviving
values and averages the two black neighbors at removed ones.  Constrained
systems are solved in projected form P A_bar P y = P a with the Euclidean
projector P = I - C^T (C C^T)^{-1} C onto the constraint null space, which is
the unique formula satisfying C P = 0 and P^2 = P.  The smoother is plain
conjugate gradient; the coarsest level uses a dense pseudoinverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import splu

from .bct import DEFAULT_BCT_EPS, HierMetric
from .constraints import (Barycenter, ConstraintSet, EdgeLengths,
                          PointConstraint, SurfaceConstraint,
                          TangentConstraint, TotalLength)
from .energy import EnergyParams
from .metric import MetricOperator
from .network import CurveNetwork


@dataclass
class MgConfig:
    smoother_iters: int = 3
    max_vcycles: int = 6
    target_rel_residual: float = 1e-3
    coarsest_size: int = 32
    bct_eps: float = DEFAULT_BCT_EPS
    dense_cutoff: int = 96   # levels at or below this size assemble densely

    def __post_init__(self):
        if self.smoother_iters <= 0 or self.max_vcycles <= 0:
            raise ValueError("iteration counts must be positive")
        if not 0 < self.target_rel_residual < 1:
            raise ValueError("residual target must lie in (0, 1)")


def coarsen_network(net: CurveNetwork, keep: set[int] | None = None):
    """One coarsening sweep: remove alternating interior vertices.

    Returns (coarse_net, J, vertex_map, edge_map) where J is the sparse
    prolongation (fine x coarse), vertex_map sends fine vertex index to its
    coarse index (-1 for removed), and edge_map sends each fine edge to the
    coarse edge containing it.  Returns None when nothing can be removed.
    """
    keep = set() if keep is None else set(keep)
    V = net.n_vertices
    degrees = net.degrees
    special = (degrees != 2)
    for v in keep:
        special[v] = True

    incident = [[] for _ in range(V)]
    for e, (i, j) in enumerate(net.edges):
        incident[i].append((j, e))
        incident[j].append((i, e))

    WHITE, BLACK, UNSET = 0, 1, 2
    color = np.full(V, UNSET, dtype=int)
    color[special] = BLACK
    visited_edge = np.zeros(net.n_edges, dtype=bool)
    walks = []

    def walk_from(v0, e0):
        """Follow the chain starting along edge e0 until a special vertex or
        the starting point closes a loop."""
        seq_v = [v0]
        seq_e = []
        prev, edge = v0, e0
        while True:
            seq_e.append(edge)
            visited_edge[edge] = True
            i, j = net.edges[edge]
            nxt = j if i == prev else i
            seq_v.append(nxt)
            if special[nxt] or nxt == v0:
                return seq_v, seq_e
            options = [e for (_, e) in incident[nxt] if not visited_edge[e]]
            if not options:
                return seq_v, seq_e
            prev = nxt
            edge = options[0]

    # chains anchored at special vertices first, then leftover pure loops
    for v0 in np.flatnonzero(special):
        for (_, e0) in incident[v0]:
            if not visited_edge[e0]:
                walks.append(walk_from(v0, e0))
    for e0 in range(net.n_edges):
        if not visited_edge[e0]:
            v0 = net.edges[e0][0]
            walks.append(walk_from(v0, e0))

    for seq_v, _ in walks:
        closed_loop = seq_v[0] == seq_v[-1] and not special[seq_v[0]]
        interior = seq_v[:-1] if closed_loop else seq_v
        if closed_loop:
            color[seq_v[0]] = BLACK
        # alternate along the walk; loops keep at least 3 black vertices
        whites_allowed = (len(interior) - 3 if closed_loop else len(interior))
        whites = 0
        for idx in range(len(interior)):
            v = interior[idx]
            if color[v] != UNSET:
                continue
            prev_v = interior[idx - 1] if idx > 0 else seq_v[0]
            if color[prev_v] == BLACK and (not closed_loop
                                           or whites < whites_allowed):
                color[v] = WHITE
                whites += 1
            else:
                color[v] = BLACK

    color[color == UNSET] = BLACK

    # contracting a white vertex must not create a self-loop (bigon through
    # one white) or a duplicate coarse edge (parallel contracted chains);
    # flip offending whites back to black until the contraction is clean
    while True:
        white_idx = np.flatnonzero(color == WHITE)
        if len(white_idx) == 0:
            return None
        offenders = []
        used = set()
        for e, (i, j) in enumerate(net.edges):
            if color[i] == BLACK and color[j] == BLACK:
                used.add((min(i, j), max(i, j)))
        for w in white_idx:
            (u, _), (v, _) = incident[w]
            key = (min(u, v), max(u, v))
            if u == v or key in used:
                offenders.append(w)
            else:
                used.add(key)
        if not offenders:
            break
        color[offenders] = BLACK

    vertex_map = np.full(V, -1, dtype=int)
    black_idx = np.flatnonzero(color == BLACK)
    vertex_map[black_idx] = np.arange(len(black_idx))

    # contract white vertices; each has exactly two (black) neighbors
    coarse_edges = []
    edge_map = np.full(net.n_edges, -1, dtype=int)
    handled = np.zeros(net.n_edges, dtype=bool)
    for w in white_idx:
        (u, e1), (v, e2) = incident[w]
        coarse_edges.append((vertex_map[u], vertex_map[v]))
        edge_map[e1] = len(coarse_edges) - 1
        edge_map[e2] = len(coarse_edges) - 1
        handled[e1] = handled[e2] = True
    for e in range(net.n_edges):
        if not handled[e]:
            i, j = net.edges[e]
            coarse_edges.append((vertex_map[i], vertex_map[j]))
            edge_map[e] = len(coarse_edges) - 1

    coarse_net = CurveNetwork(net.vertices[black_idx], np.array(coarse_edges))

    rows, cols, vals = [], [], []
    rows.append(black_idx)
    cols.append(vertex_map[black_idx])
    vals.append(np.ones(len(black_idx)))
    for w in white_idx:
        (u, _), (v, _) = incident[w]
        rows.append([w, w])
        cols.append([vertex_map[u], vertex_map[v]])
        vals.append([0.5, 0.5])
    J = csr_matrix((np.concatenate([np.atleast_1d(v) for v in vals]),
                    (np.concatenate([np.atleast_1d(r) for r in rows]),
                     np.concatenate([np.atleast_1d(c) for c in cols]))),
                   shape=(V, coarse_net.n_vertices))
    return coarse_net, J, vertex_map, edge_map


def restrict_constraints(constraints: ConstraintSet, coarse_net: CurveNetwork,
                         vertex_map: np.ndarray,
                         edge_map: np.ndarray) -> ConstraintSet:
    """Rebuild the constraint set on a coarse level (Jacobian structure only;
    targets are refreshed from the coarse geometry where needed)."""
    specs = []
    for s in constraints.specs:
        if isinstance(s, Barycenter):
            specs.append(Barycenter(s.target))
        elif isinstance(s, TotalLength):
            specs.append(TotalLength(coarse_net.total_length()))
        elif isinstance(s, EdgeLengths):
            specs.append(EdgeLengths.from_network(coarse_net))
        elif isinstance(s, PointConstraint):
            specs.append(PointConstraint(vertex_map[s.vertex], s.target))
        elif isinstance(s, SurfaceConstraint):
            specs.append(SurfaceConstraint(vertex_map[s.vertex], s.surface))
        elif isinstance(s, TangentConstraint):
            specs.append(TangentConstraint(
                edge_map[s.edge], coarse_net.geometry().tangents[edge_map[s.edge]]))
        else:
            raise TypeError(f"cannot restrict constraint {type(s).__name__}")
    return ConstraintSet(specs)


class MgLevel:
    """One hierarchy level: network, metric apply, constraints, projector.

    `scale` corrects the rediscretized coarse metric toward the Galerkin
    operator J^T A_fine J: the nonlocal Gram matrices are not refinement-
    consistent (the omitted near-diagonal band widens with h), so unscaled
    coarse corrections overshoot and the V-cycle diverges.  The factor is
    fitted at setup by matching Rayleigh quotients on smooth probe functions.
    """

    def __init__(self, net: CurveNetwork, params: EnergyParams,
                 constraints: ConstraintSet, config: MgConfig,
                 use_hier: bool, prolongation=None):
        self.net = net
        self.J = prolongation          # maps this level's values to the finer
        self.constraints = constraints
        self.scale = 1.0
        C = constraints.jacobian(net)
        self.C = C
        if use_hier and net.n_vertices > config.dense_cutoff:
            self.metric = HierMetric(net, params.sigma, eps=config.bct_eps)
        else:
            self.metric = MetricOperator(net, params)
        k = C.shape[0]
        if k:
            cct = (C @ C.T).toarray()
            self._cct_solve = scipy.linalg.cho_factor(cct) if k <= 512 else None
            self._cct_sparse = splu((C @ C.T).tocsc()) if k > 512 else None
        self.k = k

    def apply_scalar_metric(self, u: np.ndarray) -> np.ndarray:
        """Scaled metric action on a per-vertex scalar field."""
        if isinstance(self.metric, MetricOperator):
            return self.scale * (self.metric.A @ u)
        return self.scale * self.metric.apply(u)

    def solve_cct(self, rhs: np.ndarray) -> np.ndarray:
        if self._cct_solve is not None:
            return scipy.linalg.cho_solve(self._cct_solve, rhs)
        return self._cct_sparse.solve(rhs)

    def project(self, v: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto null(C)."""
        if self.k == 0:
            return v
        return v - self.C.T @ self.solve_cct(self.C @ v)

    def apply_projected(self, v: np.ndarray) -> np.ndarray:
        """M v with M = P A_bar P (symmetric PSD on the constraint space)."""
        return self.project(self.scale * self.metric.apply_stacked(self.project(v)))

    def min_norm_solution(self, phi: np.ndarray) -> np.ndarray:
        """z = C^T (C C^T)^{-1} phi, the least-norm solution of C z = phi."""
        return self.C.T @ self.solve_cct(phi)


def prolong(level: "MgLevel", vec_coarse: np.ndarray) -> np.ndarray:
    """Apply blockdiag(J, J, J) to a stacked coarse vector."""
    J = level.J
    n_c = J.shape[1]
    X = vec_coarse.reshape(3, n_c)
    return np.vstack([J @ X[c] for c in range(3)]).reshape(-1)


def restrict(level: "MgLevel", vec_fine: np.ndarray) -> np.ndarray:
    """Apply blockdiag(J, J, J)^T to a stacked fine vector."""
    J = level.J
    n_f = J.shape[0]
    X = vec_fine.reshape(3, n_f)
    return np.vstack([J.T @ X[c] for c in range(3)]).reshape(-1)


class MultigridHierarchy:
    """Level stack plus V-cycle solves for one frozen geometry."""

    def __init__(self, net: CurveNetwork, params: EnergyParams,
                 constraints: ConstraintSet, config: MgConfig | None = None,
                 use_hier: bool = True):
        self.config = config or MgConfig()
        self.params = params
        keep = {s.vertex for s in constraints.specs
                if isinstance(s, (PointConstraint, SurfaceConstraint))}
        self.levels: list[MgLevel] = [
            MgLevel(net, params, constraints, self.config, use_hier)]
        current, cs = net, constraints
        while current.n_vertices > self.config.coarsest_size:
            out = coarsen_network(current, keep=keep)
            if out is None:
                break
            coarse, J, vmap, emap = out
            cs = restrict_constraints(cs, coarse, vmap, emap)
            keep = {vmap[v] for v in keep}
            self.levels.append(
                MgLevel(coarse, params, cs, self.config, use_hier,
                        prolongation=J))
            current = coarse
        self._fit_coarse_scales()
        self._coarse_pinv = None

    def _fit_coarse_scales(self):
        """Match each coarse metric's smooth-mode response to the Galerkin
        operator of the (already corrected) finer level."""
        for i in range(1, len(self.levels)):
            fine = self.levels[i - 1]
            level = self.levels[i]
            pos = level.net.vertices
            probes = [pos[:, 0], pos[:, 1], pos[:, 2],
                      pos[:, 0] * pos[:, 1]]
            num = den = 0.0
            for u in probes:
                u = u - u.mean()
                d = float(u @ level.apply_scalar_metric(u))
                if d <= 0.0:
                    continue
                uf = level.J @ u
                num += float(uf @ fine.apply_scalar_metric(uf))
                den += d
            if den > 0.0 and num > 0.0:
                level.scale *= num / den

    def _coarse_solve(self, b: np.ndarray) -> np.ndarray:
        level = self.levels[-1]
        if self._coarse_pinv is None:
            n = 3 * level.net.n_vertices
            M = np.empty((n, n))
            eye = np.eye(n)
            a_bar = level.metric.a_bar() if isinstance(level.metric, MetricOperator) \
                else None
            if a_bar is not None:
                P = np.column_stack([level.project(eye[:, i]) for i in range(n)])
                M = P.T @ (level.scale * a_bar) @ P
            else:
                for i in range(n):
                    M[:, i] = level.apply_projected(eye[:, i])
            self._coarse_pinv = np.linalg.pinv(M, rcond=1e-10)
        return self._coarse_pinv @ b

    def _smooth(self, level: MgLevel, x: np.ndarray, b: np.ndarray,
                iters: int) -> np.ndarray:
        """Fixed number of conjugate gradient iterations on M x = b."""
        r = b - level.apply_projected(x)
        p = r.copy()
        rr = float(r @ r)
        for _ in range(iters):
            if rr == 0.0:
                break
            Mp = level.apply_projected(p)
            pMp = float(p @ Mp)
            if pMp <= 0.0:
                break
            alpha = rr / pMp
            x = x + alpha * p
            r = r - alpha * Mp
            rr_new = float(r @ r)
            p = r + (rr_new / rr) * p
            rr = rr_new
        return x

    def _vcycle(self, i: int, x: np.ndarray, b: np.ndarray) -> np.ndarray:
        if i == len(self.levels) - 1:
            return self._coarse_solve(b)
        level = self.levels[i]
        nxt = self.levels[i + 1]
        x = self._smooth(level, x, b, self.config.smoother_iters)
        r = b - level.apply_projected(x)
        b_coarse = nxt.project(restrict(nxt, r))
        e = self._vcycle(i + 1, np.zeros_like(b_coarse), b_coarse)
        x = x + level.project(prolong(nxt, e))
        return self._smooth(level, x, b, self.config.smoother_iters)

    def _initial_guess(self, b: np.ndarray) -> np.ndarray:
        """Coarsen the RHS to the bottom, solve, prolong up with smoothing."""
        rhs = [b]
        for lvl in self.levels[1:]:
            rhs.append(lvl.project(restrict(lvl, rhs[-1])))
        x = self._coarse_solve(rhs[-1])
        for i in range(len(self.levels) - 2, -1, -1):
            x = self.levels[i].project(prolong(self.levels[i + 1], x))
            x = self._smooth(self.levels[i], x, rhs[i],
                             self.config.smoother_iters)
        return x

    def vcycle_solve(self, b: np.ndarray):
        """Solve P A_bar P y = b; returns (y, info dict)."""
        norm_b = float(np.linalg.norm(b))
        if norm_b == 0.0:
            return np.zeros_like(b), {"residuals": [0.0], "converged": True,
                                      "cycles": 0}
        x = self._initial_guess(b)
        residuals = [float(np.linalg.norm(
            b - self.levels[0].apply_projected(x))) / norm_b]
        cycles = 0
        while residuals[-1] > self.config.target_rel_residual \
                and cycles < self.config.max_vcycles:
            x = self._vcycle(0, x, b)
            cycles += 1
            residuals.append(float(np.linalg.norm(
                b - self.levels[0].apply_projected(x))) / norm_b)
        info = {"residuals": residuals, "cycles": cycles,
                "converged": residuals[-1] <= self.config.target_rel_residual}
        return x, info

    def solve_gradient(self, differential_stacked: np.ndarray):
        """Multigrid version of the tangent-space gradient saddle solve."""
        top = self.levels[0]
        b = top.project(differential_stacked)
        y, info = self.vcycle_solve(b)
        return top.project(y), info

    def solve_projection_step(self, phi: np.ndarray):
        """Multigrid version of one constraint-restoration saddle solve.

        Returns x with C x = -phi, metric-minimal: x = z - y where z is the
        least-norm solution of C z = -phi and y solves the projected system
        with RHS P A_bar z.
        """
        top = self.levels[0]
        z = top.min_norm_solution(-phi)
        b = top.project(top.scale * top.metric.apply_stacked(z))
        y, info = self.vcycle_solve(b)
        return z - top.project(y), info


def projected_saddle_solve(hierarchy: MultigridHierarchy,
                           a: np.ndarray | None = None,
                           phi: np.ndarray | None = None):
    """Solve one of the two saddle problem flavors through the hierarchy."""
    if (a is None) == (phi is None):
        raise ValueError("pass exactly one of a (gradient) or phi (projection)")
    if a is not None:
        return hierarchy.solve_gradient(a)
    return hierarchy.solve_projection_step(phi)
