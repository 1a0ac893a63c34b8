import numpy as np
import pytest

from knotflow.constraints import (Barycenter, ConstraintSet, PointConstraint,
                                  TotalLength)
from knotflow.energy import discrete_differential, validate_params
from knotflow.metric import SaddleFactor, assemble_metric
from knotflow.multigrid import (MgConfig, MultigridHierarchy, coarsen_network,
                                projected_saddle_solve, restrict_constraints)
from knotflow.network import build_network, stack_fields

from oracles import perturbed_polygon, regular_polygon

P36 = validate_params(3, 6)


class TestCoarsening:
    def test_eight_cycle_becomes_four_cycle(self):
        verts, edges = regular_polygon(8)
        net = build_network(verts, edges)
        coarse, J, vmap, emap = coarsen_network(net)
        assert coarse.n_vertices == 4 and coarse.n_edges == 4
        assert np.all(coarse.degrees == 2)
        J = J.toarray()
        unit_rows = np.sum((J == 1.0).sum(axis=1) == 1)
        avg_rows = np.sum(np.isclose(J, 0.5).sum(axis=1) == 2)
        assert unit_rows == 4 and avg_rows == 4

    def test_three_vertex_arc_becomes_segment(self):
        net = build_network([[0., 0., 0.], [1., 0., 0.], [2., 0., 0.]],
                            [[0, 1], [1, 2]])
        coarse, J, _, _ = coarsen_network(net)
        assert coarse.n_vertices == 2 and coarse.n_edges == 1
        assert coarse.total_length() == pytest.approx(2.0)

    def test_junctures_survive_every_level(self):
        # Y junction with three 5-vertex legs
        verts = [[0., 0., 0.]]
        edges = []
        for leg, direction in enumerate(np.array(
                [[1., 0., 0.], [-0.5, 1., 0.], [-0.5, -1., 0.]])):
            prev = 0
            for k in range(1, 6):
                verts.append((k * direction).tolist())
                idx = len(verts) - 1
                edges.append([prev, idx])
                prev = idx
        net = build_network(np.array(verts), edges)
        while True:
            out = coarsen_network(net)
            if out is None:
                break
            coarse, _, vmap, _ = coarsen_network(net)
            assert vmap[0] >= 0  # the juncture keeps a coarse counterpart
            assert coarse.degrees[vmap[0]] == 3
            net = coarse

    def test_prolongation_reproduces_constants(self):
        verts, edges = perturbed_polygon(32, seed=0)
        net = build_network(verts, edges)
        coarse, J, _, _ = coarsen_network(net)
        ones = np.ones(coarse.n_vertices)
        assert np.allclose(J @ ones, 1.0)

    def test_no_whites_left_returns_none(self):
        verts, edges = regular_polygon(3)
        net = build_network(verts, edges)
        assert coarsen_network(net) is None

    def test_constrained_vertices_stay_black(self):
        verts, edges = regular_polygon(16)
        net = build_network(verts, edges)
        coarse, J, vmap, emap = coarsen_network(net, keep={5})
        assert vmap[5] >= 0

    def test_restricted_constraints_match_structure(self):
        verts, edges = regular_polygon(16)
        net = build_network(verts, edges)
        cs = ConstraintSet([Barycenter(), TotalLength(net.total_length()),
                            PointConstraint(3, net.vertices[3])])
        coarse, J, vmap, emap = coarsen_network(net, keep={3})
        rcs = restrict_constraints(cs, coarse, vmap, emap)
        assert rcs.k == cs.k
        C = rcs.jacobian(coarse)
        assert C.shape == (cs.k, 3 * coarse.n_vertices)


def hierarchy_for(net, constraints, use_hier=True, **cfg):
    config = MgConfig(**cfg) if cfg else MgConfig()
    return MultigridHierarchy(net, P36, constraints, config,
                              use_hier=use_hier)


class TestProjector:
    def test_projector_identities(self):
        verts, edges = perturbed_polygon(24, seed=1)
        net = build_network(verts, edges)
        cs = ConstraintSet([Barycenter(), TotalLength(net.total_length())])
        hier = hierarchy_for(net, cs)
        level = hier.levels[0]
        n = 3 * net.n_vertices
        eye = np.eye(n)
        P = np.column_stack([level.project(eye[:, i]) for i in range(n)])
        assert np.linalg.norm(P @ P - P) <= 1e-10
        assert np.linalg.norm(level.C @ P) <= 1e-10
        assert np.linalg.norm(P - P.T) <= 1e-10


class TestVcycle:
    def test_zero_rhs(self):
        verts, edges = perturbed_polygon(64, seed=2)
        net = build_network(verts, edges)
        cs = ConstraintSet([Barycenter()])
        hier = hierarchy_for(net, cs)
        x, info = hier.vcycle_solve(np.zeros(3 * net.n_vertices))
        assert np.all(x == 0.0) and info["converged"]

    def test_metric_system_close_to_dense_solve(self):
        verts, edges = perturbed_polygon(128, seed=3)
        net = build_network(verts, edges)
        cs = ConstraintSet([Barycenter()])
        hier = hierarchy_for(net, cs)
        dE = stack_fields(discrete_differential(net, P36))
        x, info = hier.solve_gradient(dE)
        # dense oracle
        metric = assemble_metric(net, P36)
        C = cs.jacobian(net).toarray()
        dense, _ = SaddleFactor(metric.a_bar(), C).solve(dE, None)
        a_bar = metric.a_bar()
        diff = x - dense
        rel = np.sqrt(diff @ (a_bar @ diff)) / np.sqrt(dense @ (a_bar @ dense))
        assert rel <= 1e-3 * 10  # residual target 1e-3 in the metric norm
        assert np.linalg.norm(C @ x) <= 1e-8 * np.linalg.norm(x)

    def test_residual_history_non_increasing(self):
        verts, edges = perturbed_polygon(96, seed=4)
        net = build_network(verts, edges)
        cs = ConstraintSet([Barycenter(), TotalLength(net.total_length())])
        hier = hierarchy_for(net, cs)
        rng = np.random.default_rng(5)
        b = hier.levels[0].project(
            stack_fields(rng.normal(size=(net.n_vertices, 3))))
        x, info = hier.vcycle_solve(b)
        res = info["residuals"]
        for a, b2 in zip(res, res[1:]):
            assert b2 <= a * 1.001

    def test_stagnation_reported(self):
        verts, edges = perturbed_polygon(64, seed=6)
        net = build_network(verts, edges)
        cs = ConstraintSet([Barycenter()])
        hier = hierarchy_for(net, cs, max_vcycles=1,
                             target_rel_residual=1e-14, smoother_iters=1)
        dE = stack_fields(discrete_differential(net, P36))
        x, info = hier.solve_gradient(dE)
        assert not info["converged"]
        assert info["residuals"][-1] > 0


class TestProjectedSaddle:
    def test_gradient_mode_against_dense(self):
        verts, edges = perturbed_polygon(64, seed=7)
        net = build_network(verts, edges)
        cs = ConstraintSet([Barycenter()])
        hier = hierarchy_for(net, cs)
        dE = stack_fields(discrete_differential(net, P36))
        x, _ = projected_saddle_solve(hier, a=dE)
        metric = assemble_metric(net, P36)
        C = cs.jacobian(net).toarray()
        dense, _ = SaddleFactor(metric.a_bar(), C).solve(dE, None)
        a_bar = metric.a_bar()
        diff = x - dense
        rel = np.sqrt(diff @ (a_bar @ diff)) / np.sqrt(dense @ (a_bar @ dense))
        assert rel <= 1e-2

    def test_projection_mode_feasible_returns_zero(self):
        verts, edges = perturbed_polygon(48, seed=8)
        net = build_network(verts, edges)
        cs = ConstraintSet([Barycenter(), TotalLength(net.total_length())])
        hier = hierarchy_for(net, cs)
        x, _ = projected_saddle_solve(hier, phi=np.zeros(cs.k))
        assert np.linalg.norm(x) <= 1e-12

    def test_projection_mode_restores_constraint(self):
        verts, edges = perturbed_polygon(64, seed=9)
        net = build_network(verts, edges)
        cs = ConstraintSet([Barycenter(), TotalLength(net.total_length())])
        stretched = net.with_positions(net.vertices * 1.02)
        hier = hierarchy_for(stretched, cs)
        phi = cs.evaluate(stretched)
        x, _ = projected_saddle_solve(hier, phi=phi)
        C = cs.jacobian(stretched)
        assert np.linalg.norm(C @ x + phi, np.inf) <= 1e-8 * max(
            1.0, np.linalg.norm(phi, np.inf))

    def test_mode_arguments_validated(self):
        verts, edges = perturbed_polygon(32, seed=10)
        net = build_network(verts, edges)
        cs = ConstraintSet([Barycenter()])
        hier = hierarchy_for(net, cs)
        with pytest.raises(ValueError):
            projected_saddle_solve(hier)
