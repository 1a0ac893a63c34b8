import json

import numpy as np
import pytest

from knotflow.cli import main
from knotflow.energy import discrete_energy, validate_params
from knotflow.flow import minimal_projected_crossings
from knotflow.scenes import (SceneError, generate_test_curve, load_obj_curve,
                             parse_scene, save_obj_curve, scene_equal,
                             serialize_scene)

MINIMAL_SCENE = """
[curve]
kind = circle
n = 24

[constraint]
type = barycenter
"""


class TestParse:
    def test_minimal_scene_defaults(self):
        scene = parse_scene(MINIMAL_SCENE)
        params = scene.build_params()
        assert params.alpha == 3 and params.beta == 6
        strategy, config = scene.build_flow_config()
        assert strategy == "hs"
        assert config.stop_tolerance == 1e-4
        assert config.mode == "normalized"

    def test_invalid_energy_window_named(self):
        text = MINIMAL_SCENE + "\n[energy]\nalpha = 2\nbeta = 5\n"
        with pytest.raises(SceneError, match="2\\*alpha \\+ 1"):
            parse_scene(text)

    def test_missing_obstacle_reported(self, tmp_path):
        text = MINIMAL_SCENE + ("\n[potential]\ntype = surface\n"
                                "path = missing.obj\n")
        scene = parse_scene(text)
        with pytest.raises(SceneError, match="missing.obj"):
            scene.build_potentials(scene.build_params())

    def test_unknown_key_with_line_number(self):
        with pytest.raises(SceneError, match=":3"):
            parse_scene("[curve]\nkind = circle\nbogus = 1\n")

    def test_round_trip(self):
        text = MINIMAL_SCENE + ("\n[flow]\nstrategy = l2\nmax_iters = 7\n"
                                "\n[output]\ndirectory = out\nstride = 2\n")
        scene = parse_scene(text)
        again = parse_scene(serialize_scene(scene))
        assert scene_equal(scene, again)

    def test_full_accel_implies_multigrid(self):
        text = MINIMAL_SCENE + "\n[flow]\naccel = full\n"
        strategy, config = parse_scene(text).build_flow_config()
        assert strategy == "hs-mg"
        assert config.accel == "full"


class TestGenerators:
    def test_circle_n4_is_square(self):
        net = generate_test_curve("circle", 4)
        assert net.n_vertices == 4
        assert np.allclose(np.linalg.norm(net.vertices, axis=1), 1.0)
        lengths = net.geometry().lengths
        assert np.allclose(lengths, np.sqrt(2.0))

    def test_torus_knot_embedded(self):
        net = generate_test_curve("torus-knot", 96, p=2, q=3)
        from knotflow.scenes import _min_pair_gap

        assert _min_pair_gap(net) > 0.01

    def test_trefoil_is_actually_a_trefoil(self):
        net = generate_test_curve("random-trefoil", 128, seed=5)
        assert minimal_projected_crossings(net, samples=40) == 3

    def test_determinism(self):
        a = generate_test_curve("random-trefoil", 64, seed=9)
        b = generate_test_curve("random-trefoil", 64, seed=9)
        assert np.array_equal(a.vertices, b.vertices)
        c = generate_test_curve("perturbed-circle", 32, seed=1)
        d = generate_test_curve("perturbed-circle", 32, seed=2)
        assert not np.allclose(c.vertices, d.vertices)

    def test_grid_braid_open_strands(self):
        net = generate_test_curve("grid-braid", 30, seed=0, strands=3)
        assert net.endpoints.size == 6
        assert len(np.unique(net.component_labels)) == 3

    def test_invalid_kind(self):
        with pytest.raises(ValueError):
            generate_test_curve("helix", 32)


class TestObjCurves:
    def test_roundtrip(self, tmp_path):
        net = generate_test_curve("torus-knot", 48)
        path = tmp_path / "curve.obj"
        save_obj_curve(path, net)
        again = load_obj_curve(path)
        assert np.allclose(again.vertices, net.vertices)
        assert np.array_equal(again.edges, net.edges)


class TestCliSolve:
    def scene_file(self, tmp_path, extra=""):
        path = tmp_path / "scene.knot"
        path.write_text(MINIMAL_SCENE + extra)
        return path

    def test_solve_writes_outputs_and_exit_code(self, tmp_path, capsys):
        scene = self.scene_file(tmp_path, """
[curve]
kind = perturbed-circle
n = 24
seed = 1

[constraint]
type = total-length

[flow]
max_iters = 4
""")
        # the second [curve] section is rejected: write a clean scene instead
        scene.write_text("""
[curve]
kind = perturbed-circle
n = 24
seed = 1

[constraint]
type = barycenter

[constraint]
type = total-length

[flow]
max_iters = 4
""")
        out = tmp_path / "out"
        code = main(["solve", str(scene), "--out", str(out), "--stride", "2"])
        assert code in (0, 3)
        assert (out / "log.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["iterations"] <= 4
        frames = sorted(out.glob("frame_*.obj"))
        assert len(frames) >= 2

    def test_duplicate_curve_section_rejected(self, tmp_path):
        path = tmp_path / "bad.knot"
        path.write_text(MINIMAL_SCENE + "\n[curve]\nkind = circle\nn = 8\n")
        with pytest.raises(SceneError, match="multiple"):
            scene = parse_scene(path)
            scene.build_curve()

    def test_final_frame_reproduces_logged_energy(self, tmp_path):
        path = tmp_path / "scene.knot"
        path.write_text("""
[curve]
kind = perturbed-circle
n = 20
seed = 3

[constraint]
type = barycenter

[constraint]
type = total-length

[flow]
max_iters = 6
""")
        out = tmp_path / "run"
        main(["solve", str(path), "--out", str(out), "--stride", "1"])
        summary = json.loads((out / "summary.json").read_text())
        frames = sorted(out.glob("frame_*.obj"))
        final = load_obj_curve(frames[-1])
        params = validate_params(3, 6)
        energy = discrete_energy(final, params)
        assert energy == pytest.approx(summary["final_energy"], rel=1e-10)

    def test_csv_row_count_matches_iterations(self, tmp_path):
        path = tmp_path / "scene.knot"
        path.write_text("""
[curve]
kind = circle
n = 16

[constraint]
type = barycenter

[flow]
max_iters = 3
""")
        out = tmp_path / "run"
        main(["solve", str(path), "--out", str(out)])
        rows = (out / "log.csv").read_text().strip().splitlines()
        summary = json.loads((out / "summary.json").read_text())
        assert len(rows) - 1 == summary["iterations"]
