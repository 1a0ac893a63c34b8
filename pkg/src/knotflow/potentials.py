"""Penalty energies added to the tangent-point objective.

Each potential returns (value, differential) and is scaled by its weight; the
sum joins the main energy before preconditioning, since these terms are all of
lower differential order than the repulsive kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .energy import EnergyParams
from .meshes import FaceTree, TriangleMesh
from .network import CurveNetwork


class VectorField(Protocol):
    def value(self, x: np.ndarray) -> np.ndarray: ...
    def jacobian(self, x: np.ndarray) -> np.ndarray: ...


@dataclass
class ConstantField:
    """Spatially constant unit field."""

    direction: np.ndarray = field(default_factory=lambda: np.array([0., 0., 1.]))

    def __post_init__(self):
        self.direction = np.asarray(self.direction, float)
        self.direction = self.direction / np.linalg.norm(self.direction)

    def value(self, x):
        x = np.atleast_2d(x)
        return np.broadcast_to(self.direction, x.shape).copy()

    def jacobian(self, x):
        x = np.atleast_2d(x)
        return np.zeros((len(x), 3, 3))


@dataclass
class RotationField:
    """Unit field circulating around an axis: X = axis x r / |axis x r|."""

    axis: np.ndarray = field(default_factory=lambda: np.array([0., 0., 1.]))

    def __post_init__(self):
        self.axis = np.asarray(self.axis, float)
        self.axis = self.axis / np.linalg.norm(self.axis)

    def _raw(self, x):
        return np.cross(np.broadcast_to(self.axis, x.shape), x)

    def value(self, x):
        x = np.atleast_2d(x)
        v = self._raw(x)
        n = np.linalg.norm(v, axis=1, keepdims=True)
        n[n == 0] = 1.0
        return v / n

    def jacobian(self, x):
        x = np.atleast_2d(x)
        v = self._raw(x)
        n = np.linalg.norm(v, axis=1)
        n[n == 0] = 1.0
        # dv/dx = [axis]_x (cross-product matrix); X = v/|v|
        a = self.axis
        cross_mat = np.array([[0, -a[2], a[1]],
                              [a[2], 0, -a[0]],
                              [-a[1], a[0], 0]])
        X = v / n[:, None]
        proj = np.eye(3)[None] - np.einsum("ni,nj->nij", X, X)
        return np.einsum("nij,jk->nik", proj, cross_mat) / n[:, None, None]


class TotalLengthPotential:
    """Soft counterpart of the total-length constraint: value = sum of lengths."""

    def __init__(self, weight: float = 1.0):
        self.weight = float(weight)

    def value_and_differential(self, net: CurveNetwork,
                               params: EnergyParams | None = None):
        geom = net.geometry()
        grad = np.zeros_like(net.vertices)
        np.add.at(grad, net.edges[:, 0], -geom.tangents)
        np.add.at(grad, net.edges[:, 1], geom.tangents)
        return float(geom.lengths.sum()), grad


class LengthDifferencePotential:
    """Penalizes unequal adjacent edge lengths at interior (degree-2) vertices."""

    def __init__(self, weight: float = 1.0):
        self.weight = float(weight)

    def value_and_differential(self, net: CurveNetwork,
                               params: EnergyParams | None = None):
        geom = net.geometry()
        interior = net.interior_vertices
        # the two incident edges of each interior vertex
        incident = [[] for _ in range(net.n_vertices)]
        for e, (i, j) in enumerate(net.edges):
            incident[i].append(e)
            incident[j].append(e)
        value = 0.0
        grad = np.zeros_like(net.vertices)
        for v in interior:
            eI, eJ = incident[v]
            diff = geom.lengths[eI] - geom.lengths[eJ]
            value += diff * diff
            for e, sign in ((eI, 1.0), (eJ, -1.0)):
                i1, i2 = net.edges[e]
                t = geom.tangents[e]
                grad[i1] -= 2.0 * diff * sign * t
                grad[i2] += 2.0 * diff * sign * t
        return float(value), grad


class SurfacePotential:
    """Inverse-distance repulsion from a triangle mesh obstacle.

    Discretized with one quadrature point per edge midpoint and per face
    centroid; far-away face clusters are lumped through an AABB tree.  The
    exponent defaults to beta - alpha of the active energy parameters.
    """

    def __init__(self, mesh: TriangleMesh, weight: float = 1.0,
                 exponent: float | None = None, accel: bool = True,
                 theta: float = 0.1):
        self.mesh = mesh
        self.weight = float(weight)
        self.exponent = exponent
        self.accel = bool(accel)
        self.theta = float(theta)
        self._tree = FaceTree(mesh) if accel else None

    def _power(self, params):
        if self.exponent is not None:
            return float(self.exponent)
        if params is None:
            raise ValueError("surface potential needs params or an exponent")
        return params.beta - params.alpha

    def value_and_differential(self, net: CurveNetwork,
                               params: EnergyParams | None = None):
        expo = self._power(params)
        geom = net.geometry()
        value = 0.0
        # dPhi/dx at each edge midpoint, plus the length factor pieces
        per_edge_value = np.zeros(net.n_edges)
        per_edge_force = np.zeros((net.n_edges, 3))
        if self.accel:
            self._accumulate_tree(geom.midpoints, expo,
                                  per_edge_value, per_edge_force)
        else:
            self._accumulate_exact(geom.midpoints, expo,
                                   per_edge_value, per_edge_force)
        value = float(np.sum(geom.lengths * per_edge_value))
        grad = np.zeros_like(net.vertices)
        # d(l_I)/dg = -+T_I; d(x_I)/dg = Id/2
        np.add.at(grad, net.edges[:, 0],
                  -geom.tangents * per_edge_value[:, None]
                  + 0.5 * geom.lengths[:, None] * per_edge_force)
        np.add.at(grad, net.edges[:, 1],
                  geom.tangents * per_edge_value[:, None]
                  + 0.5 * geom.lengths[:, None] * per_edge_force)
        return value, grad

    def _accumulate_exact(self, midpoints, expo, values, forces):
        mesh = self.mesh
        for i, x in enumerate(midpoints):
            d = x - mesh.face_centroids
            r2 = np.einsum("fi,fi->f", d, d)
            if np.any(r2 == 0.0):
                raise ValueError("curve touches the obstacle mesh")
            r = np.sqrt(r2)
            contrib = mesh.face_areas / r ** expo
            values[i] = contrib.sum()
            forces[i] = np.einsum(
                "f,fi->i", -expo * contrib / r2, d)

    def _accumulate_tree(self, midpoints, expo, values, forces):
        tree = self._tree
        mesh = self.mesh
        for i, x in enumerate(midpoints):
            stack = [0]
            while stack:
                node = stack.pop()
                d = x - tree.centroid[node]
                dist = np.linalg.norm(d)
                if dist == 0.0:
                    raise ValueError("curve touches the obstacle mesh")
                if tree.radius[node] <= self.theta * dist:
                    contrib = tree.area[node] / dist ** expo
                    values[i] += contrib
                    forces[i] += -expo * contrib / dist ** 2 * d
                elif tree.left[node] >= 0:
                    stack.append(tree.left[node])
                    stack.append(tree.right[node])
                else:
                    sel = tree.order[tree.start[node]:tree.end[node]]
                    dd = x - mesh.face_centroids[sel]
                    r2 = np.einsum("fi,fi->f", dd, dd)
                    if np.any(r2 == 0.0):
                        raise ValueError("curve touches the obstacle mesh")
                    r = np.sqrt(r2)
                    contrib = mesh.face_areas[sel] / r ** expo
                    values[i] += contrib.sum()
                    forces[i] += np.einsum("f,fi->i", -expo * contrib / r2, dd)


class FieldPotential:
    """Alignment energy sum of l_I |T_I x X(x_I)|^2 for a unit vector field."""

    def __init__(self, fieldspec: VectorField, weight: float = 1.0):
        self.field = fieldspec
        self.weight = float(weight)

    def value_and_differential(self, net: CurveNetwork,
                               params: EnergyParams | None = None):
        geom = net.geometry()
        X = self.field.value(geom.midpoints)             # (E, 3)
        JX = self.field.jacobian(geom.midpoints)         # (E, 3, 3)
        T = geom.tangents
        cross = np.cross(T, X)
        cr2 = np.einsum("ei,ei->e", cross, cross)
        value = float(np.sum(geom.lengths * cr2))

        # d(cr2)/dT = 2(|X|^2 T - <T,X> X); d(cr2)/dX = 2(|T|^2 X - <T,X> T)
        tx = np.einsum("ei,ei->e", T, X)
        x2 = np.einsum("ei,ei->e", X, X)
        d_dT = 2.0 * (x2[:, None] * T - tx[:, None] * X)
        d_dX = 2.0 * (X - tx[:, None] * T)               # |T| = 1
        d_dmid = np.einsum("ei,eij->ej", d_dX, JX)       # chain rule through X

        grad = np.zeros_like(net.vertices)
        # through l_I
        np.add.at(grad, net.edges[:, 0], -T * cr2[:, None])
        np.add.at(grad, net.edges[:, 1], T * cr2[:, None])
        # through T_I: l_I cancels against dT/dg = (Id - T T^t)/l_I
        t_term = d_dT - np.einsum("ei,ei->e", d_dT, T)[:, None] * T
        np.add.at(grad, net.edges[:, 0], -t_term)
        np.add.at(grad, net.edges[:, 1], t_term)
        # through x_I: half to each endpoint
        mid_term = 0.5 * geom.lengths[:, None] * d_dmid
        np.add.at(grad, net.edges[:, 0], mid_term)
        np.add.at(grad, net.edges[:, 1], mid_term)
        return value, grad


def total_objective(net: CurveNetwork, params: EnergyParams, potentials=(),
                    energy_value=None, energy_grad=None):
    """Sum the main energy with weighted potentials; returns (value, grad)."""
    from .energy import discrete_differential, discrete_energy

    value = discrete_energy(net, params) if energy_value is None else energy_value
    grad = discrete_differential(net, params) if energy_grad is None else energy_grad
    grad = grad.copy()
    for pot in potentials:
        v, g = pot.value_and_differential(net, params)
        value += pot.weight * v
        grad += pot.weight * g
    return value, grad
