import numpy as np
import pytest

from plivox.cli import EXIT_CONFIG, EXIT_FORMAT, EXIT_OK, main
from plivox.datasets import Trajectory, save_trajectory
from plivox.geometry import Pose
from plivox.grid import VoxelGrid, save_grid
from plivox.network import init_weights, load_weights, save_weights
from plivox.render import lateral_path


def _traj_file(tmp_path, n=5):
    traj = Trajectory()
    for i, p in enumerate(lateral_path(n)):
        traj.append(i / 30.0, p)
    path = tmp_path / "traj.txt"
    save_trajectory(traj, path)
    return path


class TestTrainCommand:
    def test_epochs_zero_writes_initialization(self, tmp_path):
        out = tmp_path / "w.weights"
        rc = main(["train", "--epochs", "0", "--shapes", "2", "--seed", "3", "--out", str(out)])
        assert rc == EXIT_OK
        written = load_weights(out)
        expect = init_weights(seed=3, dtype=np.float32)
        for (a, ab), (b, bb) in zip(expect.encoder + expect.decoder, written.encoder + written.decoder):
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(ab, bb)

    def test_manifest_corpus(self, tmp_path):
        manifest = tmp_path / "corpus.txt"
        manifest.write_text('{"kind": "sphere", "center": [0,0,0], "radius": 1.2}\n')
        out = tmp_path / "w.weights"
        rc = main(["train", "--corpus", str(manifest), "--epochs", "0", "--out", str(out)])
        assert rc == EXIT_OK and out.exists()


class TestMeshCommand:
    def test_empty_map_writes_empty_ply(self, tmp_path, capsys):
        grid = VoxelGrid(voxel_size=0.1, latent_dim=29)
        map_path = tmp_path / "empty.plivox"
        save_grid(grid, map_path)
        weights_path = tmp_path / "w.weights"
        save_weights(init_weights(seed=0), weights_path)
        out = tmp_path / "mesh.ply"
        rc = main(
            ["mesh", "--map", str(map_path), "--weights", str(weights_path), "--out", str(out)]
        )
        captured = capsys.readouterr()
        assert rc == EXIT_OK
        assert out.exists()
        assert "warning: empty mesh" in captured.err

    def test_bad_map_file_format_exit(self, tmp_path):
        bad = tmp_path / "bad.plivox"
        bad.write_bytes(b"garbage")
        weights_path = tmp_path / "w.weights"
        save_weights(init_weights(seed=0), weights_path)
        rc = main(["mesh", "--map", str(bad), "--weights", str(weights_path), "--out", str(tmp_path / "m.ply")])
        assert rc == EXIT_FORMAT


class TestEvalAte:
    def test_identical_trajectories_print_zero(self, tmp_path, capsys):
        p = _traj_file(tmp_path)
        rc = main(["eval-ate", str(p), str(p)])
        captured = capsys.readouterr()
        assert rc == EXIT_OK
        assert "ATE RMSE 0.000" in captured.out


class TestRenderAndFuse:
    def test_render_synthetic_writes_sequence(self, tmp_path):
        traj = _traj_file(tmp_path, n=3)
        out = tmp_path / "seq"
        rc = main(["render-synthetic", "--scene", "sphere", "--traj", str(traj), "--out", str(out)])
        assert rc == EXIT_OK
        assert (out / "associations.txt").exists()
        assert (out / "groundtruth.txt").exists()

    def test_fuse_requires_input_or_scene(self, tmp_path):
        weights_path = tmp_path / "w.weights"
        save_weights(init_weights(seed=0), weights_path)
        rc = main(["fuse", "--weights", str(weights_path), "--out", str(tmp_path / "o")])
        assert rc == EXIT_CONFIG

    def test_fuse_smoke(self, trained_prior_path, tmp_path, capsys):
        out = tmp_path / "run"
        rc = main(
            [
                "fuse",
                "--weights", trained_prior_path,
                "--scene", "room",
                "--frames", "3",
                "--out", str(out),
            ]
        )
        captured = capsys.readouterr()
        assert rc == EXIT_OK
        assert "fused 3 frames" in captured.out
        assert (out / "trajectory.txt").exists()

    def test_eval_surface_on_fused_mesh(self, trained_prior_path, tmp_path, capsys):
        out = tmp_path / "run"
        mesh = tmp_path / "m.ply"
        rc = main(
            [
                "fuse",
                "--weights", trained_prior_path,
                "--scene", "room",
                "--frames", "3",
                "--out", str(out),
                "--mesh", str(mesh),
            ]
        )
        assert rc == EXIT_OK
        rc = main(["eval-surface", str(mesh), "room"])
        captured = capsys.readouterr()
        assert rc == EXIT_OK
        assert "surface error mean" in captured.out


class TestConfigPlumbing:
    def test_config_file_flows_through(self, trained_prior_path, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("integration_interval = 2\nmax_points = 3000\n")
        out = tmp_path / "run"
        rc = main(
            [
                "fuse",
                "--config", str(cfg),
                "--weights", trained_prior_path,
                "--scene", "room",
                "--frames", "3",
                "--out", str(out),
            ]
        )
        assert rc == EXIT_OK
        import csv

        with open(out / "frames.csv") as f:
            rows = list(csv.DictReader(f))
        assert [r["integrated"] for r in rows] == ["True", "True", "True"]

    def test_bad_config_exit_code(self, trained_prior_path, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("nonsense = 1\n")
        rc = main(
            [
                "fuse",
                "--config", str(cfg),
                "--weights", trained_prior_path,
                "--scene", "room",
                "--out", str(tmp_path / "o"),
            ]
        )
        assert rc == EXIT_CONFIG
