"""Six-dimensional bounding volume hierarchy over edge tangent-points.

Each edge contributes a point (T_I, x_I) in R^6 with mass l_I.  Nodes store
length-weighted aggregates (total mass, center of mass, average tangent) plus
spatial and tangential bounding radii.  Far-field energy and differential
contributions are lumped at admissible nodes; near-field pairs are evaluated
with the exact 4-point trapezoid terms so the eps -> 0 limit reproduces the
dense energy and differential bit-for-bit (up to summation order).
"""

from __future__ import annotations

import numpy as np

from .energy import EnergyParams, SelfContactError, _kernel_grads, _kernel_raw
from .network import CurveNetwork, edges_share_vertex


class EdgeBvh:
    """Flat-array binary BVH; edges are permuted so nodes own contiguous runs."""

    def __init__(self, net: CurveNetwork, leaf_size: int = 8):
        self.leaf_size = int(leaf_size)
        geom = net.geometry()
        E = net.n_edges
        pts = np.concatenate([geom.tangents, geom.midpoints], axis=1)  # (E, 6)
        self.order = np.arange(E)

        # node storage (python lists during build, arrays afterwards)
        self._left, self._right = [], []
        self._start, self._end = [], []
        self._build(pts, 0, E)
        self.left = np.asarray(self._left, dtype=int)
        self.right = np.asarray(self._right, dtype=int)
        self.start = np.asarray(self._start, dtype=int)
        self.end = np.asarray(self._end, dtype=int)
        del self._left, self._right, self._start, self._end
        self.n_nodes = len(self.left)
        self.pos_in_order = np.empty(E, dtype=int)
        self.pos_in_order[self.order] = np.arange(E)

        # topology helpers for vectorized percolation: nodes grouped by depth
        # (top-down) and leaves sorted by their contiguous run start
        depth = np.zeros(self.n_nodes, dtype=int)
        self.parent = np.full(self.n_nodes, -1, dtype=int)
        for node in range(self.n_nodes):
            l, r = self.left[node], self.right[node]
            if l >= 0:
                self.parent[l] = self.parent[r] = node
                depth[l] = depth[r] = depth[node] + 1
        self.internal_by_depth = []
        internal = np.flatnonzero(self.left >= 0)
        if len(internal):
            for d in range(depth[internal].max() + 1):
                lvl = internal[depth[internal] == d]
                if len(lvl):
                    self.internal_by_depth.append(lvl)
        leaves = np.flatnonzero(self.left < 0)
        self.leaves_by_start = leaves[np.argsort(self.start[leaves])]

        # permuted positions of each edge and its vertex-sharing neighbors,
        # padded; a node may only be lumped for edge I if it contains none of
        # them (otherwise near-singular excluded pairs would be aggregated)
        incident = [[] for _ in range(net.n_vertices)]
        for e, (i, j) in enumerate(net.edges):
            incident[i].append(e)
            incident[j].append(e)
        groups = []
        for e in range(E):
            nb = set()
            for v in net.edges[e]:
                nb.update(incident[v])
            groups.append(sorted(nb))
        width = max(len(g) for g in groups)
        self.excluded_pos = np.full((E, width), E, dtype=int)
        for e, g in enumerate(groups):
            self.excluded_pos[e, :len(g)] = self.pos_in_order[g]

        self.mass = np.zeros(self.n_nodes)
        self.com = np.zeros((self.n_nodes, 3))
        self.avg_tangent = np.zeros((self.n_nodes, 3))
        self.r_x = np.zeros(self.n_nodes)
        self.r_T = np.zeros(self.n_nodes)
        self.lo = np.zeros((self.n_nodes, 6))
        self.hi = np.zeros((self.n_nodes, 6))
        self.refit(net)

    def _build(self, pts, start, end):
        idx = len(self._left)
        self._left.append(-1)
        self._right.append(-1)
        self._start.append(start)
        self._end.append(end)
        m = end - start
        if m <= self.leaf_size:
            return idx
        sel = self.order[start:end]
        best = None
        # cycle through all six coordinates; for each, scan every split of the
        # sorted order and score by summed squared box diagonals
        for axis in range(6):
            srt = sel[np.argsort(pts[sel, axis], kind="stable")]
            p = pts[srt]
            pre_min = np.minimum.accumulate(p, axis=0)
            pre_max = np.maximum.accumulate(p, axis=0)
            suf_min = np.minimum.accumulate(p[::-1], axis=0)[::-1]
            suf_max = np.maximum.accumulate(p[::-1], axis=0)[::-1]
            d_left = np.sum((pre_max[:-1] - pre_min[:-1]) ** 2, axis=1)
            d_right = np.sum((suf_max[1:] - suf_min[1:]) ** 2, axis=1)
            scores = d_left + d_right
            k = int(np.argmin(scores))
            if best is None or scores[k] < best[0]:
                best = (scores[k], axis, k + 1, srt)
        _, _, cut, srt = best
        self.order[start:end] = srt
        mid = start + cut
        left = self._build(pts, start, mid)
        right = self._build(pts, mid, end)
        self._left[idx] = left
        self._right[idx] = right
        return idx

    def refit(self, net: CurveNetwork):
        """Recompute node aggregates for current positions; topology unchanged.

        Spatial boxes bound full edge extents (both endpoints), not just
        midpoints: the lumped far-field replaces 4-point trapezoid terms, so
        the quadrature spread of each edge must count toward the node radius.
        """
        geom = net.geometry()
        lengths = geom.lengths
        ends_lo = np.minimum(net.vertices[net.edges[:, 0]],
                             net.vertices[net.edges[:, 1]])
        ends_hi = np.maximum(net.vertices[net.edges[:, 0]],
                             net.vertices[net.edges[:, 1]])
        # children are created after parents, so reverse order is bottom-up
        for node in range(self.n_nodes - 1, -1, -1):
            if self.left[node] < 0:
                sel = self.order[self.start[node]:self.end[node]]
                w = lengths[sel]
                self.mass[node] = w.sum()
                self.com[node] = (w[:, None] * geom.midpoints[sel]).sum(0) \
                    / self.mass[node]
                self.avg_tangent[node] = (w[:, None] * geom.tangents[sel]).sum(0) \
                    / self.mass[node]
                self.lo[node, :3] = geom.tangents[sel].min(axis=0)
                self.hi[node, :3] = geom.tangents[sel].max(axis=0)
                self.lo[node, 3:] = ends_lo[sel].min(axis=0)
                self.hi[node, 3:] = ends_hi[sel].max(axis=0)
            else:
                l, r = self.left[node], self.right[node]
                self.mass[node] = self.mass[l] + self.mass[r]
                self.com[node] = (self.mass[l] * self.com[l]
                                  + self.mass[r] * self.com[r]) / self.mass[node]
                self.avg_tangent[node] = (
                    self.mass[l] * self.avg_tangent[l]
                    + self.mass[r] * self.avg_tangent[r]) / self.mass[node]
                self.lo[node] = np.minimum(self.lo[l], self.lo[r])
                self.hi[node] = np.maximum(self.hi[l], self.hi[r])
        half = 0.5 * (self.hi - self.lo)
        self.r_T = np.linalg.norm(half[:, :3], axis=1)
        self.r_x = np.linalg.norm(half[:, 3:], axis=1)
        return self

    def contains(self, node: int, edge_positions: np.ndarray) -> np.ndarray:
        """Mask of edges (given by permuted positions) inside the node's run."""
        return (edge_positions >= self.start[node]) \
            & (edge_positions < self.end[node])


def build_bvh(net: CurveNetwork, leaf_size: int = 8) -> EdgeBvh:
    return EdgeBvh(net, leaf_size=leaf_size)


def _leaf_pair_arrays(net, bvh, node, active):
    """Valid exact-interaction pairs (active x leaf edges), adjacency removed."""
    leaf_edges = bvh.order[bvh.start[node]:bvh.end[node]]
    I = np.repeat(active, len(leaf_edges))
    J = np.tile(leaf_edges, len(active))
    keep = (I != J) & ~edges_share_vertex(net.edges[I], net.edges[J])
    return I[keep], J[keep]


def bh_energy(net: CurveNetwork, bvh: EdgeBvh, params: EnergyParams,
              eps: float = 0.25) -> float:
    """Barnes-Hut estimate of the discrete tangent-point energy."""
    geom = net.geometry()
    gamma = net.vertices
    edges = net.edges
    alpha, beta = params.alpha, params.beta
    total = 0.0
    stack = [(0, np.arange(net.n_edges))]
    while stack:
        node, active = stack.pop()
        blocked = np.any(
            (bvh.excluded_pos[active] >= bvh.start[node])
            & (bvh.excluded_pos[active] < bvh.end[node]), axis=1)
        d = geom.midpoints[active] - bvh.com[node]
        dist = np.linalg.norm(d, axis=1)
        if eps > 0:
            # the query edge's own half-length joins the node radius: the
            # lumped value also replaces the 4-point spread across edge I
            reach = bvh.r_x[node] + 0.5 * geom.lengths[active]
            admissible = (~blocked) & (dist > 0) \
                & (reach <= eps * dist) & (bvh.r_T[node] <= eps)
        else:
            admissible = np.zeros(len(active), dtype=bool)
        if np.any(admissible):
            kv = _kernel_raw(d[admissible], geom.tangents[active[admissible]],
                             alpha, beta)
            total += float(np.sum(kv * geom.lengths[active[admissible]])) \
                * bvh.mass[node]
        rest = active[~admissible]
        if len(rest) == 0:
            continue
        if bvh.left[node] < 0:
            I, J = _leaf_pair_arrays(net, bvh, node, rest)
            if len(I) == 0:
                continue
            khat = np.zeros(len(I))
            for a in range(2):
                for b in range(2):
                    dd = gamma[edges[I, a]] - gamma[edges[J, b]]
                    if np.any(np.einsum("pi,pi->p", dd, dd) == 0.0):
                        raise SelfContactError(
                            "coincident vertices on non-adjacent edges")
                    khat += _kernel_raw(dd, geom.tangents[I], alpha, beta)
            total += float(np.sum(0.25 * khat * geom.lengths[I]
                                  * geom.lengths[J]))
        else:
            stack.append((bvh.left[node], rest))
            stack.append((bvh.right[node], rest))
    return total


def bh_differential(net: CurveNetwork, bvh: EdgeBvh, params: EnergyParams,
                    eps: float = 0.25) -> np.ndarray:
    """Barnes-Hut estimate of the energy differential, (V, 3).

    Admissible nodes contribute the symmetrized two-term increment (the lumped
    counterpart of both pair orders), treating node aggregates as constants;
    leaf pairs contribute the exact trapezoid pair partials restricted to the
    traversing edge's endpoints.
    """
    from .energy import _pair_grad_terms

    geom = net.geometry()
    edges = net.edges
    alpha, beta = params.alpha, params.beta
    grad = np.zeros_like(net.vertices)
    stack = [(0, np.arange(net.n_edges))]
    while stack:
        node, active = stack.pop()
        blocked = np.any(
            (bvh.excluded_pos[active] >= bvh.start[node])
            & (bvh.excluded_pos[active] < bvh.end[node]), axis=1)
        d = geom.midpoints[active] - bvh.com[node]
        dist = np.linalg.norm(d, axis=1)
        if eps > 0:
            # the query edge's own half-length joins the node radius: the
            # lumped value also replaces the 4-point spread across edge I
            reach = bvh.r_x[node] + 0.5 * geom.lengths[active]
            admissible = (~blocked) & (dist > 0) \
                & (reach <= eps * dist) & (bvh.r_T[node] <= eps)
        else:
            admissible = np.zeros(len(active), dtype=bool)
        if np.any(admissible):
            sel = active[admissible]
            ti = geom.tangents[sel]
            li = geom.lengths[sel]
            da = d[admissible]
            tbar = np.broadcast_to(bvh.avg_tangent[node], da.shape)
            k1, dk1_dd, dk1_dT = _kernel_grads(da, ti, alpha, beta)
            k2, dk2_dd, _ = _kernel_grads(-da, tbar, alpha, beta)
            # dk2 is w.r.t. its own difference vector (xbar - x_I); the
            # derivative w.r.t. x_I flips the sign back
            dk2_dxI = -dk2_dd
            tproj = dk1_dT - np.einsum("pi,pi->p", dk1_dT, ti)[:, None] * ti
            common = 0.5 * li[:, None] * (dk1_dd + dk2_dxI)
            ksum = (k1 + k2)[:, None] * ti
            inc1 = bvh.mass[node] * (-ksum - tproj + common)
            inc2 = bvh.mass[node] * (ksum + tproj + common)
            np.add.at(grad, edges[sel, 0], inc1)
            np.add.at(grad, edges[sel, 1], inc2)
        rest = active[~admissible]
        if len(rest) == 0:
            continue
        if bvh.left[node] < 0:
            I, J = _leaf_pair_arrays(net, bvh, node, rest)
            if len(I) == 0:
                continue
            gi1, gi2, _, _ = _pair_grad_terms(
                net.vertices, edges, geom, I, J, alpha, beta)
            _, _, gj1, gj2 = _pair_grad_terms(
                net.vertices, edges, geom, J, I, alpha, beta)
            np.add.at(grad, edges[I, 0], gi1 + gj1)
            np.add.at(grad, edges[I, 1], gi2 + gj2)
        else:
            stack.append((bvh.left[node], rest))
            stack.append((bvh.right[node], rest))
    return grad
