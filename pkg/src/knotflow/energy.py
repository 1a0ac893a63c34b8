"""Discrete tangent-point energy of a curve network and its exact differential.

The energy is a double sum over ordered pairs of edges that share no vertex;
each pair is weighted by a 4-point trapezoidal sample of the kernel

    k(p, q, T) = |T x (p - q)|^alpha / |p - q|^beta

using the first edge's unit tangent.  The differential is assembled from
closed-form partials of each pair term, including the dependence of edge
length and tangent on the endpoint positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import CurveNetwork


class ParameterError(ValueError):
    """Raised for exponent pairs outside the finite-energy window."""


class SelfContactError(ValueError):
    """Raised when vertices of non-adjacent edges coincide (curve touches itself)."""


@dataclass(frozen=True)
class EnergyParams:
    """Kernel exponents (alpha, beta) with the derived fractional orders.

    s = (beta - 1) / alpha is the differentiability order of finite-energy
    curves, sigma = s - 1 parameterizes the nonlocal metric operators.
    """

    alpha: float
    beta: float
    s: float = field(init=False)
    sigma: float = field(init=False)

    def __post_init__(self):
        a, b = self.alpha, self.beta
        if not a > 1:
            raise ParameterError(f"alpha must satisfy alpha > 1, got alpha = {a}")
        if not b >= a + 2:
            raise ParameterError(
                f"beta must satisfy beta >= alpha + 2 = {a + 2}, got beta = {b}")
        if not b < 2 * a + 1:
            raise ParameterError(
                f"beta must satisfy beta < 2*alpha + 1 = {2 * a + 1}, got beta = {b}")
        object.__setattr__(self, "s", (b - 1) / a)
        object.__setattr__(self, "sigma", (b - 1) / a - 1)

    @property
    def scale_invariant(self) -> bool:
        """True on the boundary beta = alpha + 2 where the energy is scale-free."""
        return self.beta == self.alpha + 2


def validate_params(alpha: float, beta: float) -> EnergyParams:
    """Check (alpha, beta) against the finite-energy window and derive s, sigma."""
    return EnergyParams(float(alpha), float(beta))


def kernel(p, q, T, params: EnergyParams) -> float:
    """Tangent-point kernel |T x (p-q)|^alpha / |p-q|^beta for unit tangent T."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    T = np.asarray(T, dtype=float)
    if abs(np.linalg.norm(T) - 1.0) > 1e-9:
        raise ValueError("T must be a unit vector")
    d = p - q
    r = np.linalg.norm(d)
    if r == 0.0:
        raise SelfContactError("kernel undefined at p == q")
    cr = np.linalg.norm(np.cross(T, d))
    return float(cr ** params.alpha / r ** params.beta)


def _kernel_raw(d: np.ndarray, T: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Vectorized kernel over difference vectors d (..., 3), tangents T (..., 3).

    Near-contact overflow is deliberate: an inf energy makes the line search
    reject the trial, so the warning is suppressed rather than guarded.
    """
    r2 = np.einsum("...i,...i->...", d, d)
    cr2 = np.einsum("...i,...i->...", T, T) * r2 - np.einsum("...i,...i->...", T, d) ** 2
    cr2 = np.maximum(cr2, 0.0)
    with np.errstate(over="ignore", divide="ignore"):
        return cr2 ** (alpha / 2) / r2 ** (beta / 2)


def _kernel_grads(d, T, alpha, beta):
    """Kernel value plus gradients w.r.t. d and T.

    Returns (k, dk_dd, dk_dT) with shapes (...,), (..., 3), (..., 3).  The
    cross-product magnitude enters as cr^(alpha-2) times an O(cr) vector, so
    the cr -> 0 limit is zero for alpha > 1; guarded explicitly.
    """
    r2 = np.einsum("...i,...i->...", d, d)
    td = np.einsum("...i,...i->...", T, d)
    t2 = np.einsum("...i,...i->...", T, T)
    cr2 = np.maximum(t2 * r2 - td ** 2, 0.0)

    k = cr2 ** (alpha / 2) / r2 ** (beta / 2)

    # cr^(alpha-2) with a safe value where cr == 0 (the factors below are O(cr))
    safe = cr2 > 0
    cr_am2 = np.where(safe, cr2, 1.0) ** ((alpha - 2) / 2)
    cr_am2 = np.where(safe, cr_am2, 0.0)

    w_d = t2[..., None] * d - td[..., None] * T          # grad of cr^2 / 2 in d
    w_T = r2[..., None] * T - td[..., None] * d          # grad of cr^2 / 2 in T
    rb = r2 ** (beta / 2)
    dk_dd = (alpha * cr_am2 / rb)[..., None] * w_d \
        - (beta * cr2 ** (alpha / 2) / (rb * r2))[..., None] * d
    dk_dT = (alpha * cr_am2 / rb)[..., None] * w_T
    return k, dk_dd, dk_dT


def _check_pair_distances(r2: np.ndarray):
    if np.any(r2 == 0.0):
        raise SelfContactError(
            "coincident vertices on non-adjacent edges; curve touches itself")


def _pair_chunks(n_pairs: int, chunk: int = 200_000):
    for start in range(0, n_pairs, chunk):
        yield slice(start, min(start + chunk, n_pairs))


def discrete_energy(net: CurveNetwork, params: EnergyParams) -> float:
    """Trapezoidal tangent-point energy over all ordered non-adjacent edge pairs."""
    geom = net.geometry()
    pi, pj = net.disjoint_edge_pairs()
    gamma = net.vertices
    edges = net.edges
    total = 0.0
    for sl in _pair_chunks(len(pi)):
        I, J = pi[sl], pj[sl]
        ti = geom.tangents[I]                       # (P, 3)
        khat = np.zeros(len(I))
        for a in range(2):
            for b in range(2):
                d = gamma[edges[I, a]] - gamma[edges[J, b]]
                r2 = np.einsum("pi,pi->p", d, d)
                _check_pair_distances(r2)
                khat += _kernel_raw(d, ti, params.alpha, params.beta)
        total += float(np.sum(0.25 * khat * geom.lengths[I] * geom.lengths[J]))
    return total


def _pair_grad_terms(gamma, edges, geom, I, J, alpha, beta):
    """Differential contributions of the ordered pair terms (I, J).

    For each pair, the energy term is (1/4) l_I l_J sum_{a,b} k(g_{ia}, g_{jb}, T_I).
    Returns gradients (gi1, gi2, gj1, gj2) of shape (P, 3) to be scattered onto
    the endpoints of I and J respectively.
    """
    li = geom.lengths[I]
    lj = geom.lengths[J]
    ti = geom.tangents[I]
    tj_unused = None  # J enters only through l_J and its vertex positions
    del tj_unused

    ksum = np.zeros(len(I))
    sum_dk_dd = [np.zeros((len(I), 3)) for _ in range(2)]   # per a, summed over b
    sum_dk_dq = [np.zeros((len(I), 3)) for _ in range(2)]   # per b, summed over a
    sum_dk_dT = np.zeros((len(I), 3))

    for a in range(2):
        for b in range(2):
            d = gamma[edges[I, a]] - gamma[edges[J, b]]
            r2 = np.einsum("pi,pi->p", d, d)
            _check_pair_distances(r2)
            k, dk_dd, dk_dT = _kernel_grads(d, ti, alpha, beta)
            ksum += k
            sum_dk_dd[a] += dk_dd
            sum_dk_dq[b] -= dk_dd
            sum_dk_dT += dk_dT

    w = 0.25 * li * lj
    base = 0.25 * ksum

    # Tangent variation: dT_I/dg_{i2} = (Id - T T^t)/l_I, negated for i1.
    tproj = sum_dk_dT - np.einsum("pi,pi->p", sum_dk_dT, ti)[:, None] * ti
    t_term = w[:, None] * tproj / li[:, None]

    gi1 = -base[:, None] * lj[:, None] * ti + w[:, None] * sum_dk_dd[0] - t_term
    gi2 = base[:, None] * lj[:, None] * ti + w[:, None] * sum_dk_dd[1] + t_term

    tj = geom.tangents[J]
    gj1 = -base[:, None] * li[:, None] * tj + w[:, None] * sum_dk_dq[0]
    gj2 = base[:, None] * li[:, None] * tj + w[:, None] * sum_dk_dq[1]
    return gi1, gi2, gj1, gj2


def discrete_differential(net: CurveNetwork, params: EnergyParams) -> np.ndarray:
    """Exact gradient of the discrete energy w.r.t. vertex positions, (V, 3)."""
    geom = net.geometry()
    pi, pj = net.disjoint_edge_pairs()
    gamma = net.vertices
    edges = net.edges
    grad = np.zeros_like(gamma)
    for sl in _pair_chunks(len(pi)):
        I, J = pi[sl], pj[sl]
        gi1, gi2, gj1, gj2 = _pair_grad_terms(
            gamma, edges, geom, I, J, params.alpha, params.beta)
        np.add.at(grad, edges[I, 0], gi1)
        np.add.at(grad, edges[I, 1], gi2)
        np.add.at(grad, edges[J, 0], gj1)
        np.add.at(grad, edges[J, 1], gj2)
    return grad
