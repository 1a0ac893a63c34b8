"""Hard constraints on curve networks: residuals, Jacobians, saddle solves.

Constraints stack into a single function Phi mapping stacked positions to R^k.
Two solves are provided on top of a fixed metric: projecting a gradient onto
the tangent space of the constraint set, and iteratively projecting candidate
positions back onto the set.  Within a time step the metric and Jacobian are
frozen, so one saddle factorization serves both.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from .metric import SaddleFactor
from .network import CurveNetwork, stack_fields, unstack_fields


class RankDeficientConstraintsError(ValueError):
    """Raised when constraint rows are linearly dependent."""


class ProjectionFailure(RuntimeError):
    """Raised when constraint projection does not reach tolerance."""

    def __init__(self, message, residual, iterations):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ImplicitSurface(Protocol):
    def value(self, x: np.ndarray) -> float: ...
    def gradient(self, x: np.ndarray) -> np.ndarray: ...


@dataclass
class SphereSurface:
    """Implicit sphere f(x) = |x - center|^2 - radius^2."""

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0

    def value(self, x):
        d = np.asarray(x, float) - self.center
        return float(d @ d - self.radius ** 2)

    def gradient(self, x):
        return 2.0 * (np.asarray(x, float) - self.center)


class Barycenter:
    """Fix the length-weighted barycenter: sum_I l_I (x_I - x0) = 0; 3 rows."""

    size = 3

    def __init__(self, target=(0.0, 0.0, 0.0)):
        self.target = np.asarray(target, dtype=float)
        if not np.all(np.isfinite(self.target)):
            raise ValueError("barycenter target must be finite")

    @staticmethod
    def from_network(net: CurveNetwork) -> "Barycenter":
        """Pin the barycenter where it currently is (feasible by default)."""
        geom = net.geometry()
        center = np.einsum("e,ei->i", geom.lengths, geom.midpoints) \
            / geom.lengths.sum()
        return Barycenter(center)

    def evaluate(self, net: CurveNetwork) -> np.ndarray:
        geom = net.geometry()
        return np.einsum("e,ei->i", geom.lengths, geom.midpoints - self.target)

    def jacobian_triplets(self, net: CurveNetwork):
        # Phi_c = sum_I l_I ((x_I)_c - x0_c); both l_I and x_I move with the
        # endpoints: dPhi_c/dg_{v,d} = sum over edges at v of
        #   -+ T_{I,d} (x_I - x0)_c + (l_I / 2) delta_cd
        geom = net.geometry()
        E = net.n_edges
        rel = geom.midpoints - self.target               # (E, 3)
        rows, cols, vals = [], [], []
        for c in range(3):
            for d in range(3):
                at_i2 = geom.tangents[:, d] * rel[:, c]
                at_i1 = -at_i2
                if c == d:
                    at_i2 = at_i2 + 0.5 * geom.lengths
                    at_i1 = at_i1 + 0.5 * geom.lengths
                rows.append(np.full(2 * E, c))
                cols.append(np.concatenate([net.edges[:, 0], net.edges[:, 1]])
                            + d * net.n_vertices)
                vals.append(np.concatenate([at_i1, at_i2]))
        return (np.concatenate(rows), np.concatenate(cols),
                np.concatenate(vals))

    def describe(self):
        return f"barycenter -> {self.target.tolist()}"


class TotalLength:
    """Fix total curve length: Phi = L0 - sum_I l_I; 1 row."""

    size = 1

    def __init__(self, target: float, growth: float = 1.0):
        self.target = float(target)
        self.growth = float(growth)

    def evaluate(self, net: CurveNetwork) -> np.ndarray:
        return np.array([self.target - net.geometry().lengths.sum()])

    def jacobian_triplets(self, net: CurveNetwork):
        geom = net.geometry()
        E = net.n_edges
        rows = np.zeros(2 * E * 3, dtype=int)
        cols = np.empty(2 * E * 3, dtype=int)
        vals = np.empty(2 * E * 3)
        for d in range(3):
            sl = slice(2 * E * d, 2 * E * (d + 1))
            cols[sl] = np.concatenate([net.edges[:, 0], net.edges[:, 1]]) \
                + d * net.n_vertices
            vals[sl] = np.concatenate([geom.tangents[:, d],
                                       -geom.tangents[:, d]])
        return rows, cols, vals

    def advance_schedule(self):
        self.target *= self.growth

    def describe(self):
        return f"total-length -> {self.target:g}"


class EdgeLengths:
    """Fix each edge length: Phi_I = l0_I - l_I; one row per edge."""

    def __init__(self, targets, growth: float = 1.0):
        self.targets = np.asarray(targets, dtype=float)
        self.growth = float(growth)

    @property
    def size(self):
        return len(self.targets)

    @staticmethod
    def from_network(net: CurveNetwork, growth: float = 1.0) -> "EdgeLengths":
        return EdgeLengths(net.geometry().lengths.copy(), growth)

    def evaluate(self, net: CurveNetwork) -> np.ndarray:
        if len(self.targets) != net.n_edges:
            raise ValueError("edge-length target count mismatch")
        return self.targets - net.geometry().lengths

    def jacobian_triplets(self, net: CurveNetwork):
        geom = net.geometry()
        E = net.n_edges
        rows, cols, vals = [], [], []
        for d in range(3):
            rows.append(np.tile(np.arange(E), 2))
            cols.append(np.concatenate([net.edges[:, 0], net.edges[:, 1]])
                        + d * net.n_vertices)
            vals.append(np.concatenate([geom.tangents[:, d],
                                        -geom.tangents[:, d]]))
        return (np.concatenate(rows), np.concatenate(cols),
                np.concatenate(vals))

    def advance_schedule(self):
        self.targets = self.targets * self.growth

    def describe(self):
        return f"edge-lengths ({len(self.targets)} rows)"


class PointConstraint:
    """Pin vertex i to a fixed position; 3 rows."""

    size = 3

    def __init__(self, vertex: int, target):
        self.vertex = int(vertex)
        self.target = np.asarray(target, dtype=float)

    def evaluate(self, net: CurveNetwork) -> np.ndarray:
        return net.vertices[self.vertex] - self.target

    def jacobian_triplets(self, net: CurveNetwork):
        rows = np.arange(3)
        cols = self.vertex + np.arange(3) * net.n_vertices
        return rows, cols, np.ones(3)

    def describe(self):
        return f"point v{self.vertex} -> {self.target.tolist()}"


class SurfaceConstraint:
    """Keep vertex i on the implicit surface f(x) = 0; 1 row."""

    size = 1

    def __init__(self, vertex: int, surface: ImplicitSurface):
        self.vertex = int(vertex)
        self.surface = surface

    def evaluate(self, net: CurveNetwork) -> np.ndarray:
        return np.array([self.surface.value(net.vertices[self.vertex])])

    def jacobian_triplets(self, net: CurveNetwork):
        g = np.asarray(self.surface.gradient(net.vertices[self.vertex]), float)
        rows = np.zeros(3, dtype=int)
        cols = self.vertex + np.arange(3) * net.n_vertices
        return rows, cols, g

    def describe(self):
        return f"surface v{self.vertex}"


class TangentConstraint:
    """Force the unit tangent of edge I to a fixed unit vector; 3 rows."""

    size = 3

    def __init__(self, edge: int, target):
        self.edge = int(edge)
        self.target = np.asarray(target, dtype=float)
        norm = np.linalg.norm(self.target)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("tangent target must be a unit vector")

    def evaluate(self, net: CurveNetwork) -> np.ndarray:
        return net.geometry().tangents[self.edge] - self.target

    def jacobian_triplets(self, net: CurveNetwork):
        geom = net.geometry()
        T = geom.tangents[self.edge]
        li = geom.lengths[self.edge]
        P = (np.eye(3) - np.outer(T, T)) / li            # dT/dg_{i2}
        i1, i2 = net.edges[self.edge]
        rows = np.repeat(np.arange(3), 6)
        cols = np.empty(18, dtype=int)
        vals = np.empty(18)
        idx = 0
        for r in range(3):
            for v, sign in ((i1, -1.0), (i2, 1.0)):
                for d in range(3):
                    cols[idx] = v + d * net.n_vertices
                    vals[idx] = sign * P[r, d]
                    idx += 1
        return rows, cols, vals

    def describe(self):
        return f"tangent e{self.edge} -> {self.target.tolist()}"


class ConstraintSet:
    """Ordered collection of constraints with stacked residual and Jacobian."""

    def __init__(self, specs=()):
        self.specs = list(specs)

    def __len__(self):
        return len(self.specs)

    def add(self, spec):
        self.specs.append(spec)
        return self

    @property
    def k(self) -> int:
        return int(sum(s.size for s in self.specs))

    def evaluate(self, net: CurveNetwork) -> np.ndarray:
        if not self.specs:
            return np.zeros(0)
        return np.concatenate([np.atleast_1d(s.evaluate(net))
                               for s in self.specs])

    def jacobian(self, net: CurveNetwork) -> csr_matrix:
        """Stacked sparse Jacobian C (k x 3V), stacked component layout."""
        rows, cols, vals = [], [], []
        offset = 0
        for s in self.specs:
            r, c, v = s.jacobian_triplets(net)
            rows.append(np.asarray(r) + offset)
            cols.append(np.asarray(c))
            vals.append(np.asarray(v, dtype=float))
            offset += s.size
        if not rows:
            return csr_matrix((0, 3 * net.n_vertices))
        return coo_matrix(
            (np.concatenate(vals),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(offset, 3 * net.n_vertices)).tocsr()

    def advance_schedules(self):
        """Apply growth schedules to time-varying targets (pre-projection)."""
        for s in self.specs:
            if hasattr(s, "advance_schedule"):
                s.advance_schedule()

    def check_rank(self, C: np.ndarray | csr_matrix):
        dense = C.toarray() if hasattr(C, "toarray") else np.asarray(C)
        if dense.shape[0] == 0:
            return
        sv = np.linalg.svd(dense, compute_uv=False)
        if sv[-1] < 1e-10 * sv[0]:
            names = self._dependent_rows(dense)
            raise RankDeficientConstraintsError(
                f"constraint Jacobian is rank deficient; dependent rows "
                f"involve: {names}")

    def _dependent_rows(self, dense):
        rank = np.linalg.matrix_rank(dense)
        names = []
        offset = 0
        for s in self.specs:
            others = np.delete(np.arange(dense.shape[0]),
                               np.arange(offset, offset + s.size))
            if np.linalg.matrix_rank(dense[others]) == rank:
                names.append(s.describe())
            offset += s.size
        return names or ["(unidentified combination)"]


def project_gradient(saddle: SaddleFactor, differential: np.ndarray,
                     C: csr_matrix | None = None) -> np.ndarray:
    """Project a gradient onto the constraint tangent space; returns (V, 3).

    Solves [[A_bar, C^T], [C, 0]] [g; lambda] = [dE; 0] using a prebuilt
    saddle factorization of the metric and Jacobian.
    """
    top = stack_fields(differential)
    g, _ = saddle.solve(top, None)
    return unstack_fields(g)


def project_onto_constraints(saddle: SaddleFactor, constraints: ConstraintSet,
                             net: CurveNetwork, tol: float = 1e-8,
                             max_iters: int = 10,
                             solver: Callable | None = None):
    """Return positions to the constraint set by repeated metric-nearest steps.

    Each iteration solves the saddle system with RHS (0, -Phi(current)) and
    adds the primal displacement.  The metric and Jacobian stay frozen in the
    supplied factorization (or custom solver).  Returns (network, iterations).

    Raises ProjectionFailure when the infinity norm of Phi does not reach tol
    within max_iters; callers treat that as a rejected step.
    """
    current = net
    phi = constraints.evaluate(current)
    if phi.size == 0 or np.linalg.norm(phi, np.inf) <= tol:
        return current, 0
    for iteration in range(1, max_iters + 1):
        if solver is not None:
            x = solver(phi)
        else:
            x, _ = saddle.solve(None, -phi)
        current = current.with_positions(
            current.vertices + unstack_fields(x))
        phi = constraints.evaluate(current)
        if np.linalg.norm(phi, np.inf) <= tol:
            return current, iteration
    raise ProjectionFailure(
        f"constraint projection stalled at |Phi|_inf = "
        f"{np.linalg.norm(phi, np.inf):.3e} after {max_iters} iterations",
        residual=float(np.linalg.norm(phi, np.inf)), iterations=max_iters)
