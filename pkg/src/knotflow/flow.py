"""Outer optimization loop: descent directions, collision-aware stepping,
backtracking line search, constraint projection, stopping.

Two stepping modes: collision-limited (continuous collision detection yields
the first crossing time tau_max, the search starts at 2/3 tau_max, so the
isotopy class is preserved) and normalized backtracking (direction normalized
in the lumped L2 norm, search starts at tau = 1).  A step is accepted only if
the Armijo condition holds at the post-projection positions, so recorded
energies decrease monotonically.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix, diags

from .bvh import EdgeBvh, bh_differential, bh_energy
from .constraints import ConstraintSet, ProjectionFailure
from .energy import EnergyParams, discrete_differential, discrete_energy
from .metric import MetricOperator, SaddleFactor
from .multigrid import MgConfig, MultigridHierarchy
from .network import (CurveNetwork, edges_share_vertex, stack_fields,
                      unstack_fields)

STRATEGIES = ("hs", "hs-mg", "l2", "h1", "h2")
ACCEL_MODES = ("exact", "bh", "full")


@dataclass
class FlowConfig:
    mode: str = "normalized"            # "normalized" or "collision"
    armijo: float = 1e-4
    backtrack: float = 0.5
    stop_tolerance: float = 1e-4
    stop_energy: float | None = None
    max_iters: int = 500
    accel: str = "exact"
    bh_eps: float = 0.25
    projection_tol: float = 1e-8
    projection_max_iters: int = 10
    tau_floor: float = 1e-12
    collision_cap: float = 1e3
    mg: MgConfig = field(default_factory=MgConfig)

    def __post_init__(self):
        if self.mode not in ("normalized", "collision"):
            raise ValueError(f"unknown stepping mode {self.mode!r}")
        if not 0 < self.armijo <= 0.5:
            raise ValueError("armijo parameter must lie in (0, 0.5]")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.stop_tolerance <= 0:
            raise ValueError("stop tolerance must be positive")
        if self.accel not in ACCEL_MODES:
            raise ValueError(f"unknown accel mode {self.accel!r}")


@dataclass
class StepReport:
    iteration: int
    energy: float
    gradient_norm: float
    step_size: float
    constraint_residual: float
    projection_iters: int
    wall_time: float
    collision_limited: bool


@dataclass
class FlowResult:
    reports: list
    net: CurveNetwork
    stop_reason: str                    # "converged", "stuck", "max_iters"
    frames: list                        # vertex snapshots incl. initial

    @property
    def energies(self):
        return np.array([r.energy for r in self.reports])


def mass_norm(net: CurveNetwork, field_vectors: np.ndarray) -> float:
    """Lumped L2 norm: sqrt(sum_v m_v |u_v|^2) with vertex dual masses."""
    m = net.dual_masses()
    with np.errstate(over="ignore"):
        return float(np.sqrt(np.sum(m * np.einsum("vi,vi->v", field_vectors,
                                                  field_vectors))))


def graph_laplacian(net: CurveNetwork) -> csr_matrix:
    """Vertex Laplacian with edge weights 1/l_I."""
    geom = net.geometry()
    w = 1.0 / geom.lengths
    i, j = net.edges[:, 0], net.edges[:, 1]
    V = net.n_vertices
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([j, i, i, j])
    vals = np.concatenate([-w, -w, w, w])
    return csr_matrix((vals, (rows, cols)), shape=(V, V))


def baseline_metric_matrix(net: CurveNetwork, strategy: str) -> np.ndarray:
    """Dense metric for the L2 / H1 / H2 baseline preconditioners.

    L2 uses the lumped mass; H1 the 1/l graph Laplacian plus a small mass
    term; H2 the Laplacian squared plus a mass term.  The mass terms are
    scaled by powers of the total length so every term carries the same
    physical dimension.
    """
    masses = net.dual_masses()
    if strategy == "l2":
        return np.diag(masses)
    L = graph_laplacian(net).toarray()
    total = net.total_length()
    if strategy == "h1":
        return L + np.diag(masses) / total ** 2
    if strategy == "h2":
        return L @ L + np.diag(masses) / total ** 3
    raise ValueError(f"not a baseline strategy: {strategy!r}")


class Objective:
    """Energy + weighted potentials with exact or Barnes-Hut evaluation."""

    def __init__(self, params: EnergyParams, potentials=(),
                 accel: str = "exact", bh_eps: float = 0.25):
        self.params = params
        self.potentials = tuple(potentials)
        self.accel = accel
        self.bh_eps = bh_eps
        self._bvh: EdgeBvh | None = None
        self._bvh_net: CurveNetwork | None = None

    def _bvh_for(self, net: CurveNetwork, rebuild: bool) -> EdgeBvh:
        if self._bvh is None or rebuild:
            self._bvh = EdgeBvh(net)
            self._bvh_net = net
        elif self._bvh_net is not net:
            self._bvh.refit(net)
            self._bvh_net = net
        return self._bvh

    def energy(self, net: CurveNetwork, rebuild: bool = False) -> float:
        if self.accel == "exact":
            value = discrete_energy(net, self.params)
        else:
            value = bh_energy(net, self._bvh_for(net, rebuild), self.params,
                              eps=self.bh_eps)
        for pot in self.potentials:
            v, _ = pot.value_and_differential(net, self.params)
            value += pot.weight * v
        return value

    def energy_and_differential(self, net: CurveNetwork,
                                rebuild: bool = True):
        if self.accel == "exact":
            value = discrete_energy(net, self.params)
            grad = discrete_differential(net, self.params)
        else:
            bvh = self._bvh_for(net, rebuild)
            value = bh_energy(net, bvh, self.params, eps=self.bh_eps)
            grad = bh_differential(net, bvh, self.params, eps=self.bh_eps)
        for pot in self.potentials:
            v, g = pot.value_and_differential(net, self.params)
            value += pot.weight * v
            grad = grad + pot.weight * g
        return value, grad


class StepSolver:
    """Per-step frozen preconditioner: direction solve + projection solve."""

    def __init__(self, strategy: str, net: CurveNetwork, params: EnergyParams,
                 constraints: ConstraintSet, config: FlowConfig):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.strategy = strategy
        self.constraints = constraints
        C = constraints.jacobian(net)
        if C.shape[0] == 0:
            raise ValueError(
                "at least one translation-fixing constraint is required")
        constraints.check_rank(C)
        self.C = C
        if strategy == "hs-mg":
            self.hierarchy = MultigridHierarchy(net, params, constraints,
                                                config.mg)
            self.factor = None
        else:
            if strategy == "hs":
                a_bar = MetricOperator(net, params).a_bar()
            else:
                A = baseline_metric_matrix(net, strategy)
                n = net.n_vertices
                a_bar = np.zeros((3 * n, 3 * n))
                for c in range(3):
                    a_bar[c * n:(c + 1) * n, c * n:(c + 1) * n] = A
            self.factor = SaddleFactor(a_bar, C.toarray())
            self.hierarchy = None

    def direction(self, differential: np.ndarray) -> np.ndarray:
        """Projected preconditioned gradient, (V, 3)."""
        top = stack_fields(differential)
        if self.factor is not None:
            g, _ = self.factor.solve(top, None)
        else:
            g, _ = self.hierarchy.solve_gradient(top)
        return unstack_fields(g)

    def project(self, net: CurveNetwork, tol: float, max_iters: int):
        """Constraint restoration; returns (net, iterations) or raises."""
        if self.factor is not None:
            from .constraints import project_onto_constraints

            return project_onto_constraints(self.factor, self.constraints,
                                            net, tol=tol, max_iters=max_iters)
        current = net
        phi = self.constraints.evaluate(current)
        if np.linalg.norm(phi, np.inf) <= tol:
            return current, 0
        for iteration in range(1, max_iters + 1):
            x, _ = self.hierarchy.solve_projection_step(phi)
            current = current.with_positions(current.vertices
                                             + unstack_fields(x))
            phi = self.constraints.evaluate(current)
            if np.linalg.norm(phi, np.inf) <= tol:
                return current, iteration
        raise ProjectionFailure(
            "constraint projection stalled", float(np.linalg.norm(phi, np.inf)),
            max_iters)


def descent_direction(strategy: str, net: CurveNetwork, params: EnergyParams,
                      constraints: ConstraintSet, differential: np.ndarray,
                      config: FlowConfig | None = None) -> np.ndarray:
    """One-off projected descent direction under the chosen preconditioner."""
    solver = StepSolver(strategy, net, params, constraints,
                        config or FlowConfig())
    return solver.direction(differential)


def _segment_distance_params(p1, p2, q1, q2):
    """Closest-approach parameters (s, u) in [0,1]^2 of two segments, batched."""
    d1 = p2 - p1
    d2 = q2 - q1
    r = p1 - q1
    a = np.einsum("ni,ni->n", d1, d1)
    e = np.einsum("ni,ni->n", d2, d2)
    f = np.einsum("ni,ni->n", d2, r)
    c = np.einsum("ni,ni->n", d1, r)
    b = np.einsum("ni,ni->n", d1, d2)
    denom = a * e - b * b
    s = np.where(denom > 0, (b * f - c * e) / np.where(denom == 0, 1, denom), 0)
    s = np.clip(s, 0.0, 1.0)
    u = np.where(e > 0, (b * s + f) / np.where(e == 0, 1, e), 0)
    u = np.clip(u, 0.0, 1.0)
    s = np.where(a > 0, (b * u - c) / np.where(a == 0, 1, a), 0)
    s = np.clip(s, 0.0, 1.0)
    return s, u


def _segment_gap(p1, p2, q1, q2):
    s, u = _segment_distance_params(p1, p2, q1, q2)
    close_p = p1 + s[:, None] * (p2 - p1)
    close_q = q1 + u[:, None] * (q2 - q1)
    return np.linalg.norm(close_p - close_q, axis=1)


def collision_step_limit(net: CurveNetwork, direction: np.ndarray,
                         cap: float = 1e3) -> float:
    """First time tau at which any non-adjacent edge pair crosses while the
    vertices move along gamma - tau * direction; returns cap if none."""
    hits = _collision_times(net.vertices, -np.asarray(direction, float),
                            net.edges, cap)
    return float(hits.min()) if len(hits) else cap


def crossings_during_motion(net: CurveNetwork, start: np.ndarray,
                            end: np.ndarray) -> int:
    """Count edge-pair crossing events along the linear motion start -> end.

    Contacts already present at the start frame are not re-counted."""
    hits = _collision_times(start, end - start, net.edges, 1.0)
    return int(np.sum(hits > 1e-12))


def _collision_times(base: np.ndarray, velocity: np.ndarray,
                     edges: np.ndarray, cap: float) -> np.ndarray:
    """First-contact times in (0, cap] over all non-adjacent edge pairs.

    Conservative advancement on linear vertex trajectories: the edge-edge gap
    can shrink at most at the sum of the two segments' maximal relative
    endpoint speeds, so advancing by gap/rate can never skip a crossing.
    Pairs whose swept bounding boxes never overlap are pruned up front.
    """
    E = len(edges)
    ii, jj = np.triu_indices(E, k=1)
    keep = ~edges_share_vertex(edges[ii], edges[jj])
    ii, jj = ii[keep], jj[keep]
    if len(ii) == 0:
        return np.zeros(0)

    p0 = base[edges[:, 0]]
    p1 = base[edges[:, 1]]
    v0 = velocity[edges[:, 0]]
    v1 = velocity[edges[:, 1]]
    lo = np.minimum(np.minimum(p0, p1),
                    np.minimum(p0 + cap * v0, p1 + cap * v1))
    hi = np.maximum(np.maximum(p0, p1),
                    np.maximum(p0 + cap * v0, p1 + cap * v1))
    pad = 1e-12 * max(1.0, np.abs(hi).max())
    overlap = np.all((lo[ii] <= hi[jj] + pad) & (lo[jj] <= hi[ii] + pad),
                     axis=1)
    ii, jj = ii[overlap], jj[overlap]
    if len(ii) == 0:
        return np.zeros(0)

    # common-motion reduction: the gap only depends on relative positions, so
    # subtract each pair's mean velocity before bounding the closing rate
    vmean = 0.25 * (v0[ii] + v1[ii] + v0[jj] + v1[jj])
    speeds = [np.linalg.norm(v - vmean, axis=1)
              for v in (v0[ii], v1[ii], v0[jj], v1[jj])]
    rate = np.maximum(speeds[0], speeds[1]) + np.maximum(speeds[2], speeds[3])

    scale = float(np.abs(base).max() + cap * np.abs(velocity).max() + 1.0)
    tol = 1e-9 * scale
    t = np.zeros(len(ii))
    active = rate > 0
    hits = []
    for _ in range(256):
        if not np.any(active):
            break
        sel = np.flatnonzero(active)
        tv = t[sel]
        P1 = p0[ii[sel]] + tv[:, None] * v0[ii[sel]]
        P2 = p1[ii[sel]] + tv[:, None] * v1[ii[sel]]
        Q1 = p0[jj[sel]] + tv[:, None] * v0[jj[sel]]
        Q2 = p1[jj[sel]] + tv[:, None] * v1[jj[sel]]
        gap = _segment_gap(P1, P2, Q1, Q2)
        touching = gap <= tol
        if np.any(touching):
            contact = sel[touching]
            hits.append(t[contact].copy())
            active[contact] = False
            sel = sel[~touching]
            gap = gap[~touching]
        if len(sel) == 0:
            continue
        t[sel] += gap / rate[sel]
        passed = t[sel] > cap
        active[sel[passed]] = False
    else:
        # iteration budget exhausted: treat unresolved pairs as touching at
        # their current time (errs on the early side, never misses a crossing)
        unresolved = np.flatnonzero(active)
        if len(unresolved):
            times = t[unresolved]
            hits.append(times[(times > 1e-14) & (times <= cap)])
    return np.concatenate(hits) if hits else np.zeros(0)


class StuckFlow(RuntimeError):
    pass


def line_search(net: CurveNetwork, direction: np.ndarray, objective: Objective,
                solver: StepSolver | None, f0: float, slope: float,
                config: FlowConfig):
    """Backtracking search along gamma - tau * direction.

    Returns (tau, new_net, f_new, projection_iters, collision_limited).
    The Armijo test is evaluated after constraint projection, so accepted
    steps decrease the recorded objective.  Raises StuckFlow on underflow.
    """
    collision_limited = False
    if config.mode == "collision":
        # any limit beyond 1.5 is irrelevant (the search starts at <= 1), so
        # cap the CCD horizon there to keep swept-box pruning effective
        horizon = min(config.collision_cap, 1.5)
        tau_max = collision_step_limit(net, direction, cap=horizon)
        if tau_max <= config.tau_floor:
            raise StuckFlow("collision limit is zero; curve is in contact")
        collision_limited = tau_max < horizon
        tau = min((2.0 / 3.0) * tau_max, 1.0)
    else:
        scale = mass_norm(net, direction)
        if scale == 0.0:
            raise StuckFlow("zero direction")
        direction = direction / scale
        slope = slope / scale
        tau = 1.0

    while tau > config.tau_floor:
        candidate = net.with_positions(net.vertices - tau * direction)
        try:
            if solver is not None and solver.constraints.k > 0:
                projected, proj_iters = solver.project(
                    candidate, config.projection_tol,
                    config.projection_max_iters)
            else:
                projected, proj_iters = candidate, 0
            f_new = objective.energy(projected)
        except (ProjectionFailure, ValueError):
            tau *= config.backtrack
            continue
        if np.isfinite(f_new) and f_new <= f0 - config.armijo * tau * slope:
            return tau, projected, f_new, proj_iters, collision_limited
        tau *= config.backtrack
    raise StuckFlow(f"line search underflow below {config.tau_floor:g}")


def run_flow(net: CurveNetwork, params: EnergyParams,
             constraints: ConstraintSet, strategy: str = "hs",
             potentials=(), config: FlowConfig | None = None,
             keep_frames: bool = True) -> FlowResult:
    """Minimize the total objective under constraints; see module docstring."""
    config = config or FlowConfig()
    objective = Objective(params, potentials, accel=config.accel,
                          bh_eps=config.bh_eps)
    reports = []
    current = net
    stop_reason = "max_iters"

    # restore feasibility once up front so per-step projections only ever
    # handle the small drift introduced by a line-search step
    phi0 = constraints.evaluate(current)
    if len(phi0) and np.linalg.norm(phi0, np.inf) > config.projection_tol:
        solver = StepSolver(strategy, current, params, constraints, config)
        try:
            current, _ = solver.project(current, config.projection_tol,
                                        3 * config.projection_max_iters)
        except ProjectionFailure:
            return FlowResult(reports=[], net=current, stop_reason="stuck",
                              frames=[current.vertices.copy()]
                              if keep_frames else [])
    frames = [current.vertices.copy()] if keep_frames else []

    for iteration in range(1, config.max_iters + 1):
        tic = time.perf_counter()
        constraints.advance_schedules()
        f0, dE = objective.energy_and_differential(current, rebuild=True)
        solver = StepSolver(strategy, current, params, constraints, config)
        g = solver.direction(dE)
        grad_norm = mass_norm(current, g)
        if grad_norm <= config.stop_tolerance:
            stop_reason = "converged"
            break
        slope = float(np.sum(dE * g))
        if slope <= 0.0:
            stop_reason = "stuck"
            break
        try:
            tau, current, f_new, proj_iters, limited = line_search(
                current, g, objective, solver, f0, slope, config)
        except StuckFlow:
            stop_reason = "stuck"
            break
        phi = constraints.evaluate(current)
        reports.append(StepReport(
            iteration=iteration, energy=f_new, gradient_norm=grad_norm,
            step_size=tau,
            constraint_residual=float(np.linalg.norm(phi, np.inf))
            if len(phi) else 0.0,
            projection_iters=proj_iters,
            wall_time=time.perf_counter() - tic,
            collision_limited=limited))
        if keep_frames:
            frames.append(current.vertices.copy())
        if config.stop_energy is not None and f_new <= config.stop_energy:
            stop_reason = "target-energy"
            break

    return FlowResult(reports=reports, net=current, stop_reason=stop_reason,
                      frames=frames)


def projected_crossing_count(net: CurveNetwork,
                             view: np.ndarray | None = None) -> int:
    """Count proper crossings of the diagram projected along `view`."""
    if view is None:
        view = np.array([0.1234, 0.3456, 0.9123])
    view = np.asarray(view, float)
    view = view / np.linalg.norm(view)
    # build any orthonormal frame (u, w, view)
    helper = np.array([1.0, 0.0, 0.0])
    if abs(view @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    u = np.cross(view, helper)
    u /= np.linalg.norm(u)
    w = np.cross(view, u)
    pts = np.stack([net.vertices @ u, net.vertices @ w], axis=1)
    E = net.n_edges
    ii, jj = np.triu_indices(E, k=1)
    keep = ~edges_share_vertex(net.edges[ii], net.edges[jj])
    ii, jj = ii[keep], jj[keep]
    p1 = pts[net.edges[ii, 0]]
    p2 = pts[net.edges[ii, 1]]
    q1 = pts[net.edges[jj, 0]]
    q2 = pts[net.edges[jj, 1]]

    def orient(a, b, c):
        return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) \
            - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return int(np.sum((d1 * d2 < 0) & (d3 * d4 < 0)))


def minimal_projected_crossings(net: CurveNetwork, samples: int = 24,
                                seed: int = 0) -> int:
    """Minimum projected crossing count over sampled view directions."""
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(samples):
        v = rng.normal(size=3)
        count = projected_crossing_count(net, v)
        best = count if best is None else min(best, count)
    return best
