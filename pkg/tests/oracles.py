"""Independent brute-force oracles shared by the test suite.

Everything here is written as plain loops over the defining formulas, kept
deliberately separate from the library's vectorized implementations.
"""

import numpy as np


def finite_difference_gradient(func, x0, h=1e-5):
    """Central-difference gradient of a scalar function of an (n, 3) array."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x0.copy()
        xm = x0.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (func(xp) - func(xm)) / (2 * h)
        it.iternext()
    return grad


def kernel_value(p, q, T, alpha, beta):
    d = np.asarray(p, float) - np.asarray(q, float)
    cr = np.linalg.norm(np.cross(T, d))
    return cr ** alpha / np.linalg.norm(d) ** beta


def brute_energy(vertices, edges, alpha, beta):
    """Direct loop evaluation of the trapezoidal tangent-point energy."""
    vertices = np.asarray(vertices, float)
    total = 0.0
    for I, (i1, i2) in enumerate(edges):
        li = np.linalg.norm(vertices[i2] - vertices[i1])
        ti = (vertices[i2] - vertices[i1]) / li
        for J, (j1, j2) in enumerate(edges):
            if {i1, i2} & {j1, j2}:
                continue
            lj = np.linalg.norm(vertices[j2] - vertices[j1])
            khat = 0.25 * sum(
                kernel_value(vertices[i], vertices[j], ti, alpha, beta)
                for i in (i1, i2) for j in (j1, j2))
            total += khat * li * lj
    return total


def edge_local_derivative(vertices, edge, u):
    """D_I u = (u_{i2} - u_{i1}) T_I / l_I as a 3-vector."""
    i1, i2 = edge
    d = vertices[i2] - vertices[i1]
    li = np.linalg.norm(d)
    return (u[i2] - u[i1]) * d / li ** 2


def brute_high_order_form(vertices, edges, sigma, u, v):
    """Direct double-sum evaluation of the high-order bilinear form."""
    vertices = np.asarray(vertices, float)
    total = 0.0
    for I, (i1, i2) in enumerate(edges):
        li = np.linalg.norm(vertices[i2] - vertices[i1])
        for J, (j1, j2) in enumerate(edges):
            if {i1, i2} & {j1, j2}:
                continue
            lj = np.linalg.norm(vertices[j2] - vertices[j1])
            w = 0.25 * li * lj * sum(
                1.0 / np.linalg.norm(vertices[i] - vertices[j]) ** (2 * sigma + 1)
                for i in (i1, i2) for j in (j1, j2))
            du = edge_local_derivative(vertices, (i1, i2), u) \
                - edge_local_derivative(vertices, (j1, j2), u)
            dv = edge_local_derivative(vertices, (i1, i2), v) \
                - edge_local_derivative(vertices, (j1, j2), v)
            total += w * float(du @ dv)
    return total


def brute_low_order_form(vertices, edges, sigma, u, v):
    """Direct double-sum evaluation of the low-order bilinear form."""
    vertices = np.asarray(vertices, float)
    total = 0.0
    for I, (i1, i2) in enumerate(edges):
        li = np.linalg.norm(vertices[i2] - vertices[i1])
        ti = (vertices[i2] - vertices[i1]) / li
        ui = 0.5 * (u[i1] + u[i2])
        vi = 0.5 * (v[i1] + v[i2])
        for J, (j1, j2) in enumerate(edges):
            if {i1, i2} & {j1, j2}:
                continue
            lj = np.linalg.norm(vertices[j2] - vertices[j1])
            w0 = 0.25 * li * lj * sum(
                kernel_value(vertices[i], vertices[j], ti, 2.0, 4.0)
                / np.linalg.norm(vertices[i] - vertices[j]) ** (2 * sigma + 1)
                for i in (i1, i2) for j in (j1, j2))
            uj = 0.5 * (u[j1] + u[j2])
            vj = 0.5 * (v[j1] + v[j2])
            total += w0 * (ui - uj) * (vi - vj)
    return total


def regular_polygon(n, radius=1.0):
    """Closed regular n-gon inscribed in a circle of the given radius."""
    theta = 2 * np.pi * np.arange(n) / n
    verts = np.stack([radius * np.cos(theta), radius * np.sin(theta),
                      np.zeros(n)], axis=1)
    edges = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    return verts, edges


def perturbed_polygon(n, seed, amplitude=0.05):
    """Regular n-gon with seeded radial and vertical noise."""
    rng = np.random.default_rng(seed)
    theta = 2 * np.pi * np.arange(n) / n
    r = 1.0 + amplitude * rng.uniform(-1, 1, n)
    verts = np.stack([r * np.cos(theta), r * np.sin(theta),
                      amplitude * rng.uniform(-1, 1, n)], axis=1)
    edges = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    return verts, edges


def segments_cross_2d(p1, p2, q1, q2):
    """Exact-ish proper intersection test for 2D segments."""
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)
