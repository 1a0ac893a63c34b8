import numpy as np
import pytest

from knotflow.energy import validate_params
from knotflow.meshes import (MeshSignedDistance, TriangleMesh, load_obj_mesh,
                             octahedron_sphere, save_obj_mesh)
from knotflow.network import build_network
from knotflow.potentials import (ConstantField, FieldPotential,
                                 LengthDifferencePotential, RotationField,
                                 SurfacePotential, TotalLengthPotential,
                                 total_objective)

from oracles import finite_difference_gradient, perturbed_polygon, regular_polygon

P36 = validate_params(3, 6)


def fd_check(potential, net, rel=1e-5, h=1e-6):
    value, grad = potential.value_and_differential(net, P36)

    def value_of(pos):
        v, _ = potential.value_and_differential(net.with_positions(pos), P36)
        return v

    fd = finite_difference_gradient(value_of, net.vertices, h=h)
    assert np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12) < rel
    return value


class TestTotalLength:
    def test_unit_square_value_and_fd(self):
        net = build_network(
            [[0., 0., 0.], [1., 0., 0.], [1., 1., 0.], [0., 1., 0.]],
            [[0, 1], [1, 2], [2, 3], [3, 0]])
        value = fd_check(TotalLengthPotential(), net)
        assert value == pytest.approx(4.0)

    def test_single_edge_endpoint_gradients(self):
        net = build_network([[0., 0., 0.], [2., 0., 0.]], [[0, 1]])
        value, grad = TotalLengthPotential().value_and_differential(net)
        assert value == pytest.approx(2.0)
        assert np.allclose(grad[0], [-1, 0, 0])
        assert np.allclose(grad[1], [1, 0, 0])

    def test_scaling(self):
        verts, edges = perturbed_polygon(9, seed=0)
        net = build_network(verts, edges)
        v1, _ = TotalLengthPotential().value_and_differential(net)
        v2, _ = TotalLengthPotential().value_and_differential(
            net.with_positions(3.0 * verts))
        assert v2 == pytest.approx(3.0 * v1)


class TestLengthDifference:
    def test_equilateral_polygon_is_zero(self):
        verts, edges = regular_polygon(10)
        net = build_network(verts, edges)
        value, grad = LengthDifferencePotential().value_and_differential(net)
        assert value == pytest.approx(0.0, abs=1e-25)

    def test_three_vertex_arc(self):
        net = build_network([[0., 0., 0.], [1., 0., 0.], [3., 0., 0.]],
                            [[0, 1], [1, 2]])
        value, _ = LengthDifferencePotential().value_and_differential(net)
        assert value == pytest.approx(1.0)

    def test_junctures_and_endpoints_skipped(self):
        # Y junction: no degree-2 vertices at all
        verts = np.array([[0., 0., 0.], [1., 0., 0.], [-1., 1., 0.],
                          [-1., -1., 0.]])
        net = build_network(verts, [[0, 1], [0, 2], [0, 3]])
        value, grad = LengthDifferencePotential().value_and_differential(net)
        assert value == 0.0 and np.all(grad == 0.0)

    def test_fd_on_random_arc(self):
        rng = np.random.default_rng(1)
        verts = np.cumsum(rng.uniform(0.5, 1.5, size=(7, 3)), axis=0)
        edges = [[i, i + 1] for i in range(6)]
        net = build_network(verts, edges)
        fd_check(LengthDifferencePotential(), net, rel=1e-6)


class TestSurfacePotential:
    def unit_face_mesh(self):
        # single unit-area triangle in the plane z = 0
        return TriangleMesh([[0., 0., 0.], [2., 0., 0.], [0., 1., 0.]],
                            [[0, 1, 2]])

    def test_single_face_value(self):
        mesh = self.unit_face_mesh()
        c = mesh.face_centroids[0]
        d = 1.7
        # unit edge whose midpoint sits distance d above the centroid
        net = build_network([c + [0, -0.5, d], c + [0, 0.5, d]], [[0, 1]])
        pot = SurfacePotential(mesh, accel=False)
        value, _ = pot.value_and_differential(net, P36)
        assert value == pytest.approx(1.0 / d ** (P36.beta - P36.alpha))

    def test_distance_scaling(self):
        mesh = self.unit_face_mesh()
        c = mesh.face_centroids[0]
        pot = SurfacePotential(mesh, accel=False)
        nets = [build_network([c + [0, -0.5, d], c + [0, 0.5, d]], [[0, 1]])
                for d in (1.0, 2.0)]
        v1, _ = pot.value_and_differential(nets[0], P36)
        v2, _ = pot.value_and_differential(nets[1], P36)
        assert v2 / v1 == pytest.approx(2.0 ** (P36.alpha - P36.beta))

    def test_tree_matches_exhaustive_within_one_percent(self):
        mesh = octahedron_sphere(radius=1.0, subdivisions=3)
        verts, edges = perturbed_polygon(24, seed=2)
        net = build_network(verts * 3.0 + np.array([0.0, 0.0, 2.5]), edges)
        exact = SurfacePotential(mesh, accel=False)
        fast = SurfacePotential(mesh, accel=True)
        v_exact, g_exact = exact.value_and_differential(net, P36)
        v_fast, g_fast = fast.value_and_differential(net, P36)
        assert abs(v_fast - v_exact) / v_exact < 0.01
        assert np.linalg.norm(g_fast - g_exact) / np.linalg.norm(g_exact) < 0.05

    def test_fd_exact_mode(self):
        mesh = self.unit_face_mesh()
        verts, edges = perturbed_polygon(8, seed=3)
        net = build_network(verts + np.array([0.0, 0.0, 2.0]), edges)
        fd_check(SurfacePotential(mesh, accel=False), net)

    def test_touching_mesh_rejected(self):
        # centroid (1, 1, 0) is exactly representable, so the edge midpoint
        # lands exactly on it
        mesh = TriangleMesh([[0., 0., 0.], [3., 0., 0.], [0., 3., 0.]],
                            [[0, 1, 2]])
        net = build_network([[1., 0.5, 0.], [1., 1.5, 0.]], [[0, 1]])
        with pytest.raises(ValueError, match="touches"):
            SurfacePotential(mesh, accel=False).value_and_differential(net, P36)


class TestFieldPotential:
    def test_aligned_edge_is_zero(self):
        net = build_network([[0., 0., 0.], [0., 0., 2.]], [[0, 1]])
        value, _ = FieldPotential(ConstantField([0, 0, 1])) \
            .value_and_differential(net)
        assert value == pytest.approx(0.0, abs=1e-28)

    def test_orthogonal_unit_edge(self):
        net = build_network([[0., 0., 0.], [1., 0., 0.]], [[0, 1]])
        value, _ = FieldPotential(ConstantField([0, 0, 1])) \
            .value_and_differential(net)
        assert value == pytest.approx(1.0)

    def test_fd_constant_field(self):
        verts, edges = perturbed_polygon(9, seed=4)
        net = build_network(verts, edges)
        fd_check(FieldPotential(ConstantField([0.3, -0.5, 0.81])), net)

    def test_fd_rotation_field(self):
        rng = np.random.default_rng(5)
        verts = np.cumsum(rng.uniform(0.3, 0.9, size=(8, 3)), axis=0) \
            + np.array([2.0, 0.0, 0.0])
        edges = [[i, i + 1] for i in range(7)]
        net = build_network(verts, edges)
        fd_check(FieldPotential(RotationField([0, 0, 1])), net)

    def test_nonnegative(self):
        verts, edges = perturbed_polygon(16, seed=6)
        net = build_network(verts, edges)
        value, _ = FieldPotential(RotationField()).value_and_differential(net)
        assert value >= 0.0


class TestTotalObjective:
    def test_weighted_sum(self):
        verts, edges = perturbed_polygon(10, seed=7)
        net = build_network(verts, edges)
        from knotflow.energy import discrete_energy

        pot = TotalLengthPotential(weight=0.25)
        value, grad = total_objective(net, P36, [pot])
        base = discrete_energy(net, P36)
        assert value == pytest.approx(base + 0.25 * net.total_length())
        assert grad.shape == (10, 3)


class TestMeshes:
    def test_obj_roundtrip(self, tmp_path):
        mesh = octahedron_sphere(subdivisions=1)
        path = tmp_path / "sphere.obj"
        save_obj_mesh(path, mesh)
        back = load_obj_mesh(path)
        assert np.allclose(back.vertices, mesh.vertices)
        assert np.array_equal(back.faces, mesh.faces)

    def test_signed_distance_of_sphere(self):
        mesh = octahedron_sphere(radius=1.0, subdivisions=3)
        sdf = MeshSignedDistance(mesh)
        assert sdf.value([2.0, 0.0, 0.0]) == pytest.approx(1.0, abs=0.02)
        assert sdf.value([0.2, 0.0, 0.0]) == pytest.approx(-0.8, abs=0.02)
        g = sdf.gradient([2.0, 0.0, 0.0])
        assert np.allclose(g, [1, 0, 0], atol=0.05)

    def test_degenerate_meshes_rejected(self):
        with pytest.raises(ValueError):
            TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int))
