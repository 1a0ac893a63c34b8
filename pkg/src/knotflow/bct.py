"""Block cluster tree over BVH node pairs and hierarchical kernel matvecs.

Kernel matrices K_IJ = k(p_I, p_J) l_I l_J over edge pairs are partitioned
into admissible blocks (approximated by the rank-1 outer product of cluster
length vectors, scaled by the kernel at the aggregate tangent-points) and
near-field blocks (kept exact, assembled once into a sparse matrix).  Cluster
sums percolate up the BVH and block contributions percolate back down, so one
matvec costs O(nodes + blocks + near-field entries).

The two kernels used by the metric are the high-order inverse power
k0(p, q) = 1/|p-q|^(2 sigma + 1) and the low-order tangent-point compound
k2(p, q, T) = |T x (p-q)|^2 / |p-q|^(2 sigma + 5), both symmetrized over the
argument order per the metric's ordered double sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from .bvh import EdgeBvh
from .energy import SelfContactError
from .network import CurveNetwork, edges_share_vertex


# Default admissibility parameter for hierarchical matvecs.  Block error
# scales like eps^2 (first-order terms cancel against the length-weighted
# aggregates); 0.125 keeps the matvec within 0.3% of the dense kernel matrix,
# well inside the 1e-2 preconditioning budget.
DEFAULT_BCT_EPS = 0.125


@dataclass(frozen=True)
class KernelSpec:
    """Selects the kernel entering the hierarchical matrix."""

    kind: str            # "high" or "low"
    sigma: float
    symmetrized: bool = True

    def __post_init__(self):
        if self.kind not in ("high", "low"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")


def _kernel_values(spec: KernelSpec, xi, xj, ti, tj):
    """Far-field kernel at aggregate tangent-points, without length factors."""
    d = xi - xj
    r2 = np.einsum("...i,...i->...", d, d)
    if np.any(r2 == 0.0):
        raise SelfContactError("coincident tangent-points in kernel matrix")
    expo = 2 * spec.sigma + 1
    if spec.kind == "high":
        base = r2 ** (-expo / 2)
        return 2.0 * base if spec.symmetrized else base

    def k2(t, dvec):
        cr2 = np.maximum(
            np.einsum("...i,...i->...", t, t) * r2
            - np.einsum("...i,...i->...", t, dvec) ** 2, 0.0)
        return cr2 / r2 ** ((expo + 4) / 2)

    val = k2(ti, d)
    if spec.symmetrized:
        val = val + k2(tj, -d)
    return val


def _trapezoid_entries(spec: KernelSpec, net: CurveNetwork,
                       I: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Exact near-field entries: 4-point trapezoid pair weights, with lengths.

    Near pairs sit where the kernels are steep, so midpoint sampling is far
    off there; trapezoid entries make the eps -> 0 metric matvec reproduce the
    dense Gram matrices exactly.
    """
    geom = net.geometry()
    gamma = net.vertices
    edges = net.edges
    expo = 2 * spec.sigma + 1
    acc = np.zeros(len(I))
    for a in range(2):
        for b in range(2):
            d = gamma[edges[I, a]] - gamma[edges[J, b]]
            r2 = np.einsum("pi,pi->p", d, d)
            if np.any(r2 == 0.0):
                raise SelfContactError(
                    "coincident vertices on non-adjacent edges")
            term = r2 ** (-expo / 2)
            if spec.kind == "low":
                def k24(t):
                    cr2 = np.maximum(
                        np.einsum("pi,pi->p", t, t) * r2
                        - np.einsum("pi,pi->p", t, d) ** 2, 0.0)
                    return cr2 / r2 ** 2

                factor = k24(geom.tangents[I])
                if spec.symmetrized:
                    factor = factor + k24(geom.tangents[J])
                term = term * factor
            elif spec.symmetrized:
                term = 2.0 * term
            acc += term
    return 0.25 * geom.lengths[I] * geom.lengths[J] * acc


class BlockClusterTree:
    """Partition of the edge-pair matrix into admissible and near blocks.

    Construction proceeds breadth-first with all candidate blocks of one
    generation tested in single vectorized sweeps.
    """

    def __init__(self, bvh: EdgeBvh, eps: float = DEFAULT_BCT_EPS,
                 near_size: int = 8):
        self.bvh = bvh
        self.eps = float(eps)
        self.near_size = int(near_size)
        adm_a, adm_b = [], []
        near_a, near_b = [], []
        sizes = bvh.end - bvh.start
        is_leaf = bvh.left < 0
        a = np.array([0])
        b = np.array([0])
        while len(a):
            if self.eps > 0:
                d = bvh.com[a] - bvh.com[b]
                dist2 = np.einsum("ni,ni->n", d, d)
                rx = np.maximum(bvh.r_x[a], bvh.r_x[b])
                rt = np.maximum(bvh.r_T[a], bvh.r_T[b])
                ok = (dist2 > 0) & (rx * rx <= self.eps ** 2 * dist2) \
                    & (rt <= self.eps)
                if np.any(ok):
                    idx = np.flatnonzero(ok)
                    clean = np.fromiter(
                        (not self._contains_excluded(a[i], b[i]) for i in idx),
                        dtype=bool, count=len(idx))
                    ok[idx[~clean]] = False
            else:
                ok = np.zeros(len(a), dtype=bool)
            adm_a.append(a[ok])
            adm_b.append(b[ok])
            a, b = a[~ok], b[~ok]
            # a side is done when it is small or cannot be split further; keep
            # splitting any oversized side so near blocks stay strictly local
            done_a = (sizes[a] <= self.near_size) | is_leaf[a]
            done_b = (sizes[b] <= self.near_size) | is_leaf[b]
            settled = done_a & done_b
            near_a.append(a[settled])
            near_b.append(b[settled])
            a, b = a[~settled], b[~settled]
            done_a, done_b = done_a[~settled], done_b[~settled]
            next_a, next_b = [], []
            both = ~done_a & ~done_b
            if np.any(both):
                la, ra = bvh.left[a[both]], bvh.right[a[both]]
                lb, rb = bvh.left[b[both]], bvh.right[b[both]]
                next_a += [la, la, ra, ra]
                next_b += [lb, rb, lb, rb]
            only_a = ~done_a & done_b
            if np.any(only_a):
                next_a += [bvh.left[a[only_a]], bvh.right[a[only_a]]]
                next_b += [b[only_a], b[only_a]]
            only_b = done_a & ~done_b
            if np.any(only_b):
                next_a += [a[only_b], a[only_b]]
                next_b += [bvh.left[b[only_b]], bvh.right[b[only_b]]]
            a = np.concatenate(next_a) if next_a else np.zeros(0, dtype=int)
            b = np.concatenate(next_b) if next_b else np.zeros(0, dtype=int)
        self.adm_a = np.concatenate(adm_a) if adm_a else np.zeros(0, dtype=int)
        self.adm_b = np.concatenate(adm_b) if adm_b else np.zeros(0, dtype=int)
        self.near = list(zip(np.concatenate(near_a) if near_a else [],
                             np.concatenate(near_b) if near_b else []))
        # leaf node of each permuted position, for the downward distribution
        E = len(bvh.order)
        self.leaf_of_pos = np.empty(E, dtype=int)
        for node in bvh.leaves_by_start:
            self.leaf_of_pos[bvh.start[node]:bvh.end[node]] = node
        self._near_pairs = None

    def _contains_excluded(self, a, b) -> bool:
        """True if the block would aggregate an identical/adjacent edge pair."""
        bvh = self.bvh
        edges_a = bvh.order[bvh.start[a]:bvh.end[a]]
        ex = bvh.excluded_pos[edges_a]
        return bool(np.any((ex >= bvh.start[b]) & (ex < bvh.end[b])))

    def near_pair_arrays(self, net: CurveNetwork):
        """All exact near-field edge pairs (excluded pairs removed), cached."""
        if self._near_pairs is None:
            bvh = self.bvh
            I_parts, J_parts = [], []
            for a, b in self.near:
                ia = bvh.order[bvh.start[a]:bvh.end[a]]
                jb = bvh.order[bvh.start[b]:bvh.end[b]]
                I_parts.append(np.repeat(ia, len(jb)))
                J_parts.append(np.tile(jb, len(ia)))
            if I_parts:
                I = np.concatenate(I_parts)
                J = np.concatenate(J_parts)
                keep = (I != J) & ~edges_share_vertex(net.edges[I],
                                                      net.edges[J])
                self._near_pairs = (I[keep], J[keep])
            else:
                self._near_pairs = (np.zeros(0, dtype=int),
                                    np.zeros(0, dtype=int))
        return self._near_pairs

    def coverage_count(self) -> int:
        """Total edge pairs covered by all leaf blocks (should tile E x E)."""
        bvh = self.bvh
        total = 0
        for a, b in zip(self.adm_a, self.adm_b):
            total += int((bvh.end[a] - bvh.start[a])
                         * (bvh.end[b] - bvh.start[b]))
        for a, b in self.near:
            total += int((bvh.end[a] - bvh.start[a])
                         * (bvh.end[b] - bvh.start[b]))
        return total


def build_bct(bvh: EdgeBvh, eps: float = DEFAULT_BCT_EPS,
              near_size: int = 8) -> BlockClusterTree:
    return BlockClusterTree(bvh, eps=eps, near_size=near_size)


class HierKernelMatrix:
    """Matrix-free K with rank-1 far field and precomputed sparse near field."""

    def __init__(self, bct: BlockClusterTree, spec: KernelSpec,
                 net: CurveNetwork):
        self.bct = bct
        self.spec = spec
        bvh = bct.bvh
        geom = net.geometry()
        self.lengths = geom.lengths
        self.n_edges = net.n_edges

        # far field: one kernel evaluation per admissible block
        if len(bct.adm_a):
            self.kbar = _kernel_values(
                spec,
                bvh.com[bct.adm_a], bvh.com[bct.adm_b],
                bvh.avg_tangent[bct.adm_a], bvh.avg_tangent[bct.adm_b])
        else:
            self.kbar = np.zeros(0)

        # near field: exact trapezoid entries, excluded pairs zeroed
        I, J = bct.near_pair_arrays(net)
        if len(I):
            self.near = coo_matrix(
                (_trapezoid_entries(spec, net, I, J), (I, J)),
                shape=(self.n_edges, self.n_edges)).tocsr()
        else:
            self.near = csr_matrix((self.n_edges, self.n_edges))
        self._row_sums = None

    def matvec(self, psi: np.ndarray) -> np.ndarray:
        """K @ psi for psi of shape (E,) or (E, m)."""
        psi = np.asarray(psi, dtype=float)
        single = psi.ndim == 1
        if single:
            psi = psi[:, None]
        bvh = self.bct.bvh
        m = psi.shape[1]

        # upward: weighted cluster sums S_N = sum of l_J psi_J over the node,
        # leaves via segment reduction, internal nodes level by level
        S = np.zeros((bvh.n_nodes, m))
        weighted = (self.lengths[:, None] * psi)[bvh.order]
        leaves = bvh.leaves_by_start
        S[leaves] = np.add.reduceat(weighted, bvh.start[leaves], axis=0)
        for lvl in reversed(bvh.internal_by_depth):
            S[lvl] = S[bvh.left[lvl]] + S[bvh.right[lvl]]

        # block interactions land on the receiving cluster
        W = np.zeros((bvh.n_nodes, m))
        if len(self.bct.adm_a):
            np.add.at(W, self.bct.adm_a,
                      self.kbar[:, None] * S[self.bct.adm_b])

        # downward: accumulate ancestors, then expand to edges through leaves
        for lvl in bvh.internal_by_depth:
            W[bvh.left[lvl]] += W[lvl]
            W[bvh.right[lvl]] += W[lvl]
        phi = self.lengths[:, None] \
            * W[self.bct.leaf_of_pos[bvh.pos_in_order]]
        phi += self.near @ psi
        return phi[:, 0] if single else phi

    def row_sums(self) -> np.ndarray:
        """K @ ones, cached; the diagonal of the metric decomposition."""
        if self._row_sums is None:
            self._row_sums = self.matvec(np.ones(self.n_edges))
        return self._row_sums


def dense_kernel_matrix(net: CurveNetwork, spec: KernelSpec) -> np.ndarray:
    """Exact dense K for oracles: trapezoid entries, excluded pairs zeroed."""
    E = net.n_edges
    I, J = np.meshgrid(np.arange(E), np.arange(E), indexing="ij")
    I, J = I.reshape(-1), J.reshape(-1)
    keep = (I != J) & ~edges_share_vertex(net.edges[I], net.edges[J])
    K = np.zeros(E * E)
    K[np.flatnonzero(keep)] = _trapezoid_entries(spec, net, I[keep], J[keep])
    return K.reshape(E, E)


class HierMetric:
    """Matrix-free fractional metric built from two hierarchical kernels.

    apply_high/apply_low mirror the dense Gram matrices B and B0 through the
    decomposition M = Op^T (diag(K 1) - K) Op with Op the edgewise derivative
    (high order, blockwise over 3 components) or the vertex-to-edge average
    (low order).  The diagonal term reuses the same approximate K, so constants
    are annihilated exactly regardless of the block approximation error.
    """

    def __init__(self, net: CurveNetwork, sigma: float,
                 bvh: EdgeBvh | None = None, eps: float = DEFAULT_BCT_EPS,
                 near_size: int = 8, leaf_size: int = 8):
        from .metric import average_matrix, derivative_matrix

        self.net = net
        self.sigma = float(sigma)
        self.bvh = bvh if bvh is not None else EdgeBvh(net, leaf_size=leaf_size)
        self.bct = BlockClusterTree(self.bvh, eps=eps, near_size=near_size)
        self.k_high = HierKernelMatrix(
            self.bct, KernelSpec("high", self.sigma), net)
        self.k_low = HierKernelMatrix(
            self.bct, KernelSpec("low", self.sigma), net)
        self.D = derivative_matrix(net)                  # (3E, V)
        self.E_avg = average_matrix(net)                 # (E, V)
        self.n = net.n_vertices

    def apply_high(self, u: np.ndarray) -> np.ndarray:
        """B u for per-vertex scalars u."""
        t = (self.D @ u).reshape(-1, 3)                  # (E, 3)
        c = self.k_high.row_sums()
        y = c[:, None] * t - self.k_high.matvec(t)
        return self.D.T @ y.reshape(-1)

    def apply_low(self, u: np.ndarray) -> np.ndarray:
        """B0 u for per-vertex scalars u."""
        a = self.E_avg @ u
        c = self.k_low.row_sums()
        y = c * a - self.k_low.matvec(a)
        return self.E_avg.T @ y

    def apply(self, u: np.ndarray) -> np.ndarray:
        """(B + B0) u for per-vertex scalars u."""
        return self.apply_high(u) + self.apply_low(u)

    def apply_stacked(self, vec: np.ndarray) -> np.ndarray:
        """blockdiag(A, A, A) @ vec for stacked (3V,) vectors."""
        X = vec.reshape(3, self.n)
        out = np.empty_like(X)
        for c in range(3):
            out[c] = self.apply(X[c])
        return out.reshape(-1)


def metric_matvec(bct_metric: HierMetric, which: str,
                  u: np.ndarray) -> np.ndarray:
    """Apply one metric part ("B", "B0", or "A") to per-vertex values."""
    if which == "B":
        return bct_metric.apply_high(u)
    if which == "B0":
        return bct_metric.apply_low(u)
    if which == "A":
        return bct_metric.apply(u)
    raise ValueError(f"unknown metric part {which!r}")
