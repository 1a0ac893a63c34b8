import numpy as np
import pytest

from knotflow.bct import (BlockClusterTree, HierKernelMatrix, HierMetric,
                          KernelSpec, build_bct, dense_kernel_matrix,
                          metric_matvec)
from knotflow.bvh import build_bvh
from knotflow.energy import validate_params
from knotflow.metric import assemble_high_order, assemble_low_order
from knotflow.network import build_network

from oracles import perturbed_polygon, regular_polygon

P36 = validate_params(3, 6)
SIGMA = P36.sigma


def polygon_net(n, seed=None):
    verts, edges = (regular_polygon(n) if seed is None
                    else perturbed_polygon(n, seed=seed))
    return build_network(verts, edges)


class TestStructure:
    def test_leaf_blocks_tile_all_pairs(self):
        net = polygon_net(64, seed=0)
        bct = build_bct(build_bvh(net), eps=0.25)
        assert bct.coverage_count() == net.n_edges ** 2

    def test_far_loops_cross_interaction_fully_admissible(self):
        # tangent coherence (not distance) limits block coarseness on closed
        # loops, but every cross-loop pair must still land in an admissible
        # block rather than the near field
        v1, e1 = regular_polygon(16)
        verts = np.concatenate([v1, v1 + np.array([40.0, 0.0, 0.0])])
        edges = np.concatenate([e1, e1 + 16])
        net = build_network(verts, edges)
        bvh = build_bvh(net, leaf_size=2)
        bct = build_bct(bvh, eps=0.25, near_size=2)
        loop_of = np.zeros(net.n_edges, dtype=int)
        loop_of[16:] = 1

        def block_loops(node):
            return set(loop_of[bvh.order[bvh.start[node]:bvh.end[node]]])

        for a, b in bct.near:
            assert block_loops(a) == block_loops(b) != {0, 1}
        cross = [(a, b) for a, b in zip(bct.adm_a, bct.adm_b)
                 if block_loops(a) != block_loops(b)]
        covered = sum((bvh.end[a] - bvh.start[a]) * (bvh.end[b] - bvh.start[b])
                      for a, b in cross)
        assert covered == 2 * 16 * 16

    def test_smaller_eps_never_increases_admissible_leaves(self):
        net = polygon_net(64, seed=1)
        bvh = build_bvh(net)
        counts = [len(build_bct(bvh, eps=e).adm_a)
                  for e in (0.4, 0.2, 0.1, 0.05)]
        for coarse, fine in zip(counts, counts[1:]):
            assert fine <= coarse

    def test_no_admissible_block_contains_excluded_pair(self):
        net = polygon_net(48, seed=2)
        bvh = build_bvh(net, leaf_size=2)
        bct = build_bct(bvh, eps=0.5)
        from knotflow.network import edges_share_vertex

        for a, b in zip(bct.adm_a, bct.adm_b):
            ia = bvh.order[bvh.start[a]:bvh.end[a]]
            jb = bvh.order[bvh.start[b]:bvh.end[b]]
            I = np.repeat(ia, len(jb))
            J = np.tile(jb, len(ia))
            assert not np.any(I == J)
            assert not np.any(edges_share_vertex(net.edges[I], net.edges[J]))


class TestKernelMatvec:
    @pytest.mark.parametrize("kind", ["high", "low"])
    def test_zero_vector(self, kind):
        net = polygon_net(32, seed=3)
        bct = build_bct(build_bvh(net))
        K = HierKernelMatrix(bct, KernelSpec(kind, SIGMA), net)
        assert np.all(K.matvec(np.zeros(net.n_edges)) == 0.0)

    @pytest.mark.parametrize("kind", ["high", "low"])
    def test_matches_dense_at_default_eps(self, kind):
        net = polygon_net(64, seed=4)
        spec = KernelSpec(kind, SIGMA)
        bct = build_bct(build_bvh(net))
        K = HierKernelMatrix(bct, spec, net)
        dense = dense_kernel_matrix(net, spec)
        rng = np.random.default_rng(5)
        psi = rng.normal(size=net.n_edges)
        err = np.linalg.norm(K.matvec(psi) - dense @ psi) \
            / np.linalg.norm(dense @ psi)
        assert err <= 1e-2

    @pytest.mark.parametrize("kind", ["high", "low"])
    def test_exact_fallback_at_eps_zero(self, kind):
        net = polygon_net(48, seed=6)
        spec = KernelSpec(kind, SIGMA)
        bct = build_bct(build_bvh(net), eps=0.0)
        assert len(bct.adm_a) == 0
        K = HierKernelMatrix(bct, spec, net)
        dense = dense_kernel_matrix(net, spec)
        rng = np.random.default_rng(7)
        psi = rng.normal(size=net.n_edges)
        got = K.matvec(psi)
        want = dense @ psi
        assert np.linalg.norm(got - want) <= 1e-12 * np.linalg.norm(want)

    def test_accuracy_improves_as_eps_decreases(self):
        net = polygon_net(96, seed=8)
        spec = KernelSpec("high", SIGMA)
        dense = dense_kernel_matrix(net, spec)
        rng = np.random.default_rng(9)
        psi = rng.normal(size=net.n_edges)
        want = dense @ psi
        bvh = build_bvh(net)
        errs = []
        for eps in (0.4, 0.2, 0.1, 0.05):
            K = HierKernelMatrix(build_bct(bvh, eps=eps), spec, net)
            errs.append(np.linalg.norm(K.matvec(psi) - want))
        for coarse, fine in zip(errs, errs[1:]):
            assert fine <= coarse + 1e-12

    def test_symmetrized_kernel_near_symmetric_action(self):
        net = polygon_net(64, seed=10)
        spec = KernelSpec("low", SIGMA)
        dense = dense_kernel_matrix(net, spec)
        asym = np.abs(dense - dense.T).max() / np.abs(dense).max()
        assert asym < 1e-12
        bct = build_bct(build_bvh(net), eps=0.25)
        K = HierKernelMatrix(bct, spec, net)
        rng = np.random.default_rng(11)
        psi = rng.normal(size=net.n_edges)
        chi = rng.normal(size=net.n_edges)
        lhs = chi @ K.matvec(psi)
        rhs = psi @ K.matvec(chi)
        scale = np.abs(dense).max() * np.linalg.norm(psi) * np.linalg.norm(chi)
        assert abs(lhs - rhs) <= 2e-2 * scale

    def test_matrix_rhs_matches_columnwise(self):
        net = polygon_net(32, seed=12)
        bct = build_bct(build_bvh(net))
        K = HierKernelMatrix(bct, KernelSpec("high", SIGMA), net)
        rng = np.random.default_rng(13)
        block = rng.normal(size=(net.n_edges, 3))
        batched = K.matvec(block)
        for c in range(3):
            assert np.allclose(batched[:, c], K.matvec(block[:, c]))


class TestHierMetric:
    def test_constant_annihilated_exactly(self):
        net = polygon_net(64, seed=14)
        hm = HierMetric(net, SIGMA, eps=0.25)
        u = np.full(net.n_vertices, 2.3)
        scale = np.linalg.norm(hm.apply(np.random.default_rng(15)
                                        .normal(size=net.n_vertices)))
        assert np.linalg.norm(hm.apply_high(u)) <= 1e-12 * scale
        assert np.linalg.norm(hm.apply_low(u)) <= 1e-12 * scale

    def test_linearity(self):
        net = polygon_net(48, seed=16)
        hm = HierMetric(net, SIGMA)
        rng = np.random.default_rng(17)
        u = rng.normal(size=net.n_vertices)
        v = rng.normal(size=net.n_vertices)
        lhs = hm.apply(u + v)
        rhs = hm.apply(u) + hm.apply(v)
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * np.abs(rhs).max())

    @pytest.mark.parametrize("which", ["B", "B0"])
    def test_matches_dense_gram_at_n64(self, which):
        net = polygon_net(64, seed=18)
        hm = HierMetric(net, SIGMA)
        dense = (assemble_high_order(net, SIGMA) if which == "B"
                 else assemble_low_order(net, SIGMA))
        rng = np.random.default_rng(19)
        u = rng.normal(size=net.n_vertices)
        got = metric_matvec(hm, which, u)
        want = dense @ u
        assert np.linalg.norm(got - want) <= 1e-2 * np.linalg.norm(want)

    def test_exact_fallback_matches_assembled_grams(self):
        # with trapezoid near-field entries and no admissible blocks, the
        # decomposition reproduces the assembled Gram matrices exactly
        net = polygon_net(32, seed=20)
        hm = HierMetric(net, SIGMA, eps=0.0)
        B = assemble_high_order(net, SIGMA)
        B0 = assemble_low_order(net, SIGMA)
        rng = np.random.default_rng(21)
        u = rng.normal(size=net.n_vertices)
        assert np.linalg.norm(hm.apply_high(u) - B @ u) \
            <= 1e-12 * np.linalg.norm(B @ u)
        assert np.linalg.norm(hm.apply_low(u) - B0 @ u) \
            <= 1e-12 * np.linalg.norm(B0 @ u)

    def test_stacked_apply(self):
        net = polygon_net(32, seed=22)
        hm = HierMetric(net, SIGMA)
        rng = np.random.default_rng(23)
        X = rng.normal(size=(3, net.n_vertices))
        out = hm.apply_stacked(X.reshape(-1)).reshape(3, -1)
        for c in range(3):
            assert np.allclose(out[c], hm.apply(X[c]))
