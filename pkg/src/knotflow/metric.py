"""Discrete fractional Sobolev inner product A = B + B0 and dense solves.

B couples edgewise derivatives of vertex functions through a nonlocal weight
w_IJ over non-adjacent edge pairs; B0 is a compensating low-order term built
from edge averages and a fixed order-(-2) tangent-point kernel.  Both kill
globally constant functions, so gradient solves always go through a saddle
system with at least one translation-fixing constraint row.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
from scipy.sparse import csr_matrix

from .energy import EnergyParams, SelfContactError, _kernel_raw
from .network import CurveNetwork

# Low-order kernel exponents; any pair with alpha - beta = -2 scales correctly.
LOW_ORDER_ALPHA = 2.0
LOW_ORDER_BETA = 4.0


def derivative_matrix(net: CurveNetwork) -> csr_matrix:
    """Sparse (3E x V) edgewise derivative: (Du)_I = (u_{i2} - u_{i1}) T_I / l_I.

    Row 3*I + c holds component c of the derivative on edge I.
    """
    geom = net.geometry()
    E = net.n_edges
    coeff = geom.tangents / geom.lengths[:, None]     # (E, 3)
    rows = np.repeat(3 * np.arange(E), 2 * 3).reshape(E, 2, 3) \
        + np.arange(3)[None, None, :]
    cols = np.broadcast_to(net.edges[:, :, None], (E, 2, 3))
    vals = np.stack([-coeff, coeff], axis=1)          # (E, 2, 3)
    return csr_matrix((vals.reshape(-1), (rows.reshape(-1), cols.reshape(-1))),
                      shape=(3 * E, net.n_vertices))


def average_matrix(net: CurveNetwork) -> csr_matrix:
    """Sparse (E x V) vertex-to-edge averaging operator."""
    E = net.n_edges
    rows = np.repeat(np.arange(E), 2)
    cols = net.edges.reshape(-1)
    vals = np.full(2 * E, 0.5)
    return csr_matrix((vals, (rows, cols)), shape=(E, net.n_vertices))


def _pairwise_sums(net, sigma, low_order):
    """Per ordered disjoint pair (I, J): the 4-point quadrature weight.

    low_order False: w_IJ  = 1/4 l_I l_J sum over vertex pairs of r^-(2 sigma + 1)
    low_order True:  w0_IJ = same but with the order-(-2) kernel in the numerator.
    """
    geom = net.geometry()
    pi, pj = net.disjoint_edge_pairs()
    gamma = net.vertices
    edges = net.edges
    expo = 2 * sigma + 1
    acc = np.zeros(len(pi))
    for a in range(2):
        for b in range(2):
            d = gamma[edges[pi, a]] - gamma[edges[pj, b]]
            r2 = np.einsum("pi,pi->p", d, d)
            if np.any(r2 == 0.0):
                raise SelfContactError(
                    "coincident vertices on non-adjacent edges")
            term = r2 ** (-expo / 2)
            if low_order:
                term *= _kernel_raw(d, geom.tangents[pi],
                                    LOW_ORDER_ALPHA, LOW_ORDER_BETA)
            acc += term
    w = 0.25 * geom.lengths[pi] * geom.lengths[pj] * acc
    return pi, pj, w


def high_order_weights(net: CurveNetwork, sigma: float):
    """Ordered pair arrays (I, J) and the high-order weights w_IJ."""
    return _pairwise_sums(net, sigma, low_order=False)


def low_order_weights(net: CurveNetwork, sigma: float):
    """Ordered pair arrays (I, J) and the low-order weights w0_IJ."""
    return _pairwise_sums(net, sigma, low_order=True)


def assemble_high_order(net: CurveNetwork, sigma: float) -> np.ndarray:
    """Dense high-order Gram matrix B (V x V).

    Satisfies u^T B v = sum over non-adjacent ordered pairs of
    w_IJ <D_I u - D_J u, D_I v - D_J v>.
    """
    V = net.n_vertices
    geom = net.geometry()
    pi, pj, w = high_order_weights(net, sigma)
    edges = net.edges
    li, lj = geom.lengths[pi], geom.lengths[pj]
    tdot = np.einsum("pi,pi->p", geom.tangents[pi], geom.tangents[pj])

    B = np.zeros(V * V)
    w_ii = w / li ** 2
    w_jj = w / lj ** 2
    w_ij = w * tdot / (li * lj)
    for a in range(2):
        for b in range(2):
            sign = 1.0 if a == b else -1.0
            np.add.at(B, edges[pi, a] * V + edges[pi, b], sign * w_ii)
            np.add.at(B, edges[pj, a] * V + edges[pj, b], sign * w_jj)
            np.add.at(B, edges[pi, a] * V + edges[pj, b], -sign * w_ij)
            np.add.at(B, edges[pj, a] * V + edges[pi, b], -sign * w_ij)
    return B.reshape(V, V)


def assemble_low_order(net: CurveNetwork, sigma: float,
                       params: EnergyParams | None = None) -> np.ndarray:
    """Dense low-order Gram matrix B0 (V x V).

    Satisfies u^T B0 v = sum over non-adjacent ordered pairs of
    w0_IJ (u_I - u_J)(v_I - v_J) with edge averages u_I.  The kernel in w0 is
    fixed at order -2 regardless of the energy exponents.
    """
    del params  # exponents of the low-order kernel are fixed
    V = net.n_vertices
    pi, pj, w0 = low_order_weights(net, sigma)
    edges = net.edges
    B0 = np.zeros(V * V)
    q = 0.25 * w0
    for a in range(2):
        for b in range(2):
            np.add.at(B0, edges[pi, a] * V + edges[pi, b], q)
            np.add.at(B0, edges[pj, a] * V + edges[pj, b], q)
            np.add.at(B0, edges[pi, a] * V + edges[pj, b], -q)
            np.add.at(B0, edges[pj, a] * V + edges[pi, b], -q)
    return B0.reshape(V, V)


class MetricOperator:
    """Assembled dense metric A = B + B0 with componentwise (3V) application."""

    def __init__(self, net: CurveNetwork, params: EnergyParams):
        self.B = assemble_high_order(net, params.sigma)
        self.B0 = assemble_low_order(net, params.sigma)
        self.A = self.B + self.B0
        self.n = net.n_vertices

    def apply_stacked(self, vec: np.ndarray) -> np.ndarray:
        """Apply blockdiag(A, A, A) to a stacked (3V,) vector."""
        X = vec.reshape(3, self.n)
        return (self.A @ X.T).T.reshape(-1)

    def a_bar(self) -> np.ndarray:
        """Dense (3V x 3V) block-diagonal form; used by small direct solves."""
        n = self.n
        M = np.zeros((3 * n, 3 * n))
        for c in range(3):
            M[c * n:(c + 1) * n, c * n:(c + 1) * n] = self.A
        return M


def assemble_metric(net: CurveNetwork, params: EnergyParams) -> MetricOperator:
    return MetricOperator(net, params)


class SaddleFactor:
    """Reusable LU factorization of the saddle matrix [[A_bar, C^T], [C, 0]].

    The same factorization serves the gradient projection and every iteration
    of constraint projection within one time step.
    """

    def __init__(self, a_bar: np.ndarray, C: np.ndarray | None):
        n = a_bar.shape[0]
        if C is None or C.shape[0] == 0:
            raise ValueError(
                "saddle system is singular: supply at least one "
                "translation-fixing constraint")
        C = np.asarray(C.todense()) if hasattr(C, "todense") else np.asarray(C)
        k = C.shape[0]
        M = np.zeros((n + k, n + k))
        M[:n, :n] = a_bar
        M[:n, n:] = C.T
        M[n:, :n] = C
        self.n, self.k = n, k
        self._lu = scipy.linalg.lu_factor(M)
        self._matrix = M

    def solve(self, top: np.ndarray | None, bottom: np.ndarray | None):
        """Solve for primal (n,) and multipliers (k,) given RHS blocks."""
        rhs = np.zeros(self.n + self.k)
        if top is not None:
            rhs[:self.n] = top
        if bottom is not None:
            rhs[self.n:] = bottom
        sol = scipy.linalg.lu_solve(self._lu, rhs)
        return sol[:self.n], sol[self.n:]

    def residual(self, x: np.ndarray, mult: np.ndarray,
                 top: np.ndarray | None, bottom: np.ndarray | None) -> float:
        rhs = np.zeros(self.n + self.k)
        if top is not None:
            rhs[:self.n] = top
        if bottom is not None:
            rhs[self.n:] = bottom
        sol = np.concatenate([x, mult])
        r = self._matrix @ sol - rhs
        scale = max(np.linalg.norm(rhs), 1e-300)
        return float(np.linalg.norm(r) / scale)


def sobolev_gradient_dense(net: CurveNetwork, params: EnergyParams,
                           differential: np.ndarray,
                           constraint_jacobian: np.ndarray | None = None
                           ) -> np.ndarray:
    """Solve A_bar g = dE within the constrained saddle system; returns (V, 3).

    constraint_jacobian is the (k x 3V) Jacobian in stacked component order;
    it must fix translations or the system is singular.
    """
    from .network import stack_fields, unstack_fields

    metric = assemble_metric(net, params)
    factor = SaddleFactor(metric.a_bar(), constraint_jacobian)
    g, _ = factor.solve(stack_fields(differential), None)
    return unstack_fields(g)
