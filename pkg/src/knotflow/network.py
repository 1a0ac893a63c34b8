"""Curve networks: vertex positions plus an edge graph, and per-edge geometry.

A network may contain closed loops, open arcs, and junctures where three or
more edges meet.  Positions are stored in double precision; the repulsive
kernels downstream divide by near-zero distances, so float32 is not enough.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidNetworkError(ValueError):
    """Raised when vertices/edges do not form a valid embedded curve network."""


def stack_fields(field: np.ndarray) -> np.ndarray:
    """Flatten an (n, 3) vertex field to a stacked (3n,) vector [x; y; z]."""
    field = np.asarray(field, dtype=float)
    return field.T.reshape(-1).copy()


def unstack_fields(vec: np.ndarray) -> np.ndarray:
    """Inverse of stack_fields: (3n,) -> (n, 3)."""
    vec = np.asarray(vec, dtype=float)
    n = vec.size // 3
    return vec.reshape(3, n).T.copy()


@dataclass(frozen=True)
class EdgeGeometry:
    """Per-edge length, unit tangent, and midpoint arrays."""

    lengths: np.ndarray   # (E,)
    tangents: np.ndarray  # (E, 3) unit vectors
    midpoints: np.ndarray  # (E, 3)


class CurveNetwork:
    """Immutable snapshot of a curve network.

    Parameters
    ----------
    vertices : (V, 3) array of positions.
    edges : (E, 2) array of vertex index pairs.

    Vertices of degree 1 are endpoints, degree 2 interior, degree >= 3
    junctures.  Edge direction (i1 -> i2) fixes the sign of the unit tangent.
    """

    def __init__(self, vertices, edges):
        vertices = np.atleast_2d(np.asarray(vertices, dtype=float))
        edges = np.atleast_2d(np.asarray(edges, dtype=int))
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise InvalidNetworkError(f"vertices must be (V, 3), got {vertices.shape}")
        if edges.ndim != 2 or edges.shape[1] != 2:
            raise InvalidNetworkError(f"edges must be (E, 2), got {edges.shape}")
        if len(vertices) < 2 or len(edges) < 1:
            raise InvalidNetworkError("need at least 2 vertices and 1 edge")
        if not np.all(np.isfinite(vertices)):
            raise InvalidNetworkError("vertex positions must be finite")
        if edges.min() < 0 or edges.max() >= len(vertices):
            raise InvalidNetworkError("edge index out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            bad = int(np.flatnonzero(edges[:, 0] == edges[:, 1])[0])
            raise InvalidNetworkError(f"edge {bad} has coincident endpoints")
        key = np.sort(edges, axis=1)
        _, counts = np.unique(key, axis=0, return_counts=True)
        if np.any(counts > 1):
            raise InvalidNetworkError("duplicate edge")
        diffs = vertices[edges[:, 1]] - vertices[edges[:, 0]]
        lengths = np.linalg.norm(diffs, axis=1)
        if np.any(lengths == 0.0):
            bad = int(np.flatnonzero(lengths == 0.0)[0])
            raise InvalidNetworkError(f"edge {bad} has zero length")

        self.vertices = vertices
        self.edges = edges
        self._geometry: EdgeGeometry | None = None
        self._labels: np.ndarray | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def with_positions(self, vertices) -> "CurveNetwork":
        """New network with the same edges and updated positions."""
        return CurveNetwork(vertices, self.edges)

    @property
    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n_vertices)

    @property
    def component_labels(self) -> np.ndarray:
        """Connected-component label per vertex (labels are 0..c-1)."""
        if self._labels is None:
            from scipy.sparse import coo_matrix
            from scipy.sparse.csgraph import connected_components

            i, j = self.edges[:, 0], self.edges[:, 1]
            ones = np.ones(len(i))
            adj = coo_matrix((ones, (i, j)), shape=(self.n_vertices,) * 2)
            _, labels = connected_components(adj, directed=False)
            self._labels = labels
        return self._labels

    @property
    def interior_vertices(self) -> np.ndarray:
        return np.flatnonzero(self.degrees == 2)

    @property
    def endpoints(self) -> np.ndarray:
        return np.flatnonzero(self.degrees == 1)

    @property
    def junctures(self) -> np.ndarray:
        return np.flatnonzero(self.degrees >= 3)

    def geometry(self) -> EdgeGeometry:
        if self._geometry is None:
            self._geometry = edge_geometry(self)
        return self._geometry

    def total_length(self) -> float:
        return float(self.geometry().lengths.sum())

    def dual_masses(self) -> np.ndarray:
        """Per-vertex lumped mass: half the sum of incident edge lengths."""
        lengths = self.geometry().lengths
        masses = np.zeros(self.n_vertices)
        np.add.at(masses, self.edges[:, 0], 0.5 * lengths)
        np.add.at(masses, self.edges[:, 1], 0.5 * lengths)
        return masses

    def disjoint_edge_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Ordered edge pairs (I, J) sharing no vertex, as two index arrays."""
        e = self.edges
        ii, jj = np.meshgrid(np.arange(self.n_edges), np.arange(self.n_edges),
                             indexing="ij")
        ii, jj = ii.reshape(-1), jj.reshape(-1)
        share = edges_share_vertex(e[ii], e[jj])
        keep = ~share
        return ii[keep], jj[keep]


def edges_share_vertex(ea: np.ndarray, eb: np.ndarray) -> np.ndarray:
    """Elementwise test whether edge rows ea and eb share an endpoint."""
    return ((ea[:, 0] == eb[:, 0]) | (ea[:, 0] == eb[:, 1])
            | (ea[:, 1] == eb[:, 0]) | (ea[:, 1] == eb[:, 1]))


def build_network(vertices, edges) -> CurveNetwork:
    """Validate and construct a CurveNetwork (alias for the constructor)."""
    return CurveNetwork(vertices, edges)


def edge_geometry(net: CurveNetwork) -> EdgeGeometry:
    """Lengths, unit tangents, and midpoints for every edge."""
    a = net.vertices[net.edges[:, 0]]
    b = net.vertices[net.edges[:, 1]]
    diffs = b - a
    lengths = np.linalg.norm(diffs, axis=1)
    if np.any(lengths == 0.0):
        bad = int(np.flatnonzero(lengths == 0.0)[0])
        raise InvalidNetworkError(f"edge {bad} has zero length")
    tangents = diffs / lengths[:, None]
    midpoints = 0.5 * (a + b)
    return EdgeGeometry(lengths=lengths, tangents=tangents, midpoints=midpoints)


def edge_average(net: CurveNetwork, u: np.ndarray) -> np.ndarray:
    """Average per-vertex values onto edges: u_I = (u_{i1} + u_{i2}) / 2."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] != net.n_vertices:
        raise ValueError(f"expected {net.n_vertices} vertex values, got {u.shape[0]}")
    return 0.5 * (u[net.edges[:, 0]] + u[net.edges[:, 1]])
