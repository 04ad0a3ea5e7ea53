import numpy as np
import pytest

from plivox.datasets import Trajectory
from plivox.evaluate import (
    associate_timestamps,
    evaluate_ate,
    evaluate_surface,
    mesh_distance,
    point_triangle_distance,
    umeyama_alignment,
)
from plivox.geometry import Pose
from plivox.meshing import TriangleMesh
from plivox.shapes import PlanePatch, Sphere, rotation_from_axis_angle


def _traj(positions, rotations=None, t0=0.0, dt=0.1):
    traj = Trajectory()
    for i, p in enumerate(np.asarray(positions, dtype=float)):
        r = rotations[i] if rotations is not None else np.eye(3)
        traj.append(t0 + i * dt, Pose(r, p))
    return traj


class TestUmeyama:
    def test_recovers_known_transform(self):
        rng = np.random.default_rng(0)
        src = rng.uniform(-2, 2, (40, 3))
        r = rotation_from_axis_angle([0.3, 1.0, -0.2], 0.7)
        t = np.array([0.5, -1.0, 2.0])
        dst = src @ r.T + t
        align = umeyama_alignment(src, dst)
        np.testing.assert_allclose(align.r, r, atol=1e-10)
        np.testing.assert_allclose(align.t, t, atol=1e-10)


class TestAte:
    def test_identical_trajectories_zero(self):
        rng = np.random.default_rng(1)
        pos = rng.uniform(-1, 1, (20, 3))
        res = evaluate_ate(_traj(pos), _traj(pos))
        assert res["rmse"] == pytest.approx(0.0, abs=1e-12)
        assert res["pairs"] == 20

    def test_rigid_offset_removed_by_alignment(self):
        rng = np.random.default_rng(2)
        pos = rng.uniform(-1, 1, (30, 3))
        offset = Pose(rotation_from_axis_angle([1, 2, 3], 0.4), np.array([5.0, -2.0, 1.0]))
        est = _traj(offset.apply(pos))
        res = evaluate_ate(est, _traj(pos))
        assert res["rmse"] < 1e-9

    def test_gaussian_noise_rmse_monte_carlo(self):
        rng = np.random.default_rng(3)
        pos = rng.uniform(-2, 2, (1000, 3))
        noisy = pos + rng.normal(0.0, 0.01 / np.sqrt(3), (1000, 3))
        res = evaluate_ate(_traj(noisy, dt=0.05), _traj(pos, dt=0.05))
        assert res["rmse"] == pytest.approx(0.01, rel=0.15)

    def test_too_few_pairs(self):
        pos = np.zeros((2, 3))
        with pytest.raises(ValueError):
            evaluate_ate(_traj(pos), _traj(pos))

    def test_association_window(self):
        a = _traj(np.zeros((5, 3)), dt=0.1)
        b = _traj(np.zeros((5, 3)), t0=0.5, dt=0.1)  # no timestamps within 20 ms... except overlaps
        pairs = associate_timestamps(a.timestamps, b.timestamps, max_dt=0.02)
        assert len(pairs) == 0  # a ends at 0.4, b starts at 0.5

    def test_association_nearest(self):
        pairs = associate_timestamps([0.0, 0.1], [0.005, 0.2], max_dt=0.02)
        assert pairs == [(0, 0)]


class TestPointTriangleDistance:
    def test_matches_brute_force_sampling(self):
        rng = np.random.default_rng(4)
        tri = rng.uniform(-1, 1, (50, 3, 3))
        pts = rng.uniform(-1.5, 1.5, (50, 3))
        d = point_triangle_distance(pts, tri)
        # dense barycentric sampling as the oracle
        u = np.linspace(0, 1, 60)
        uu, vv = np.meshgrid(u, u)
        keep = uu + vv <= 1.0
        bary = np.stack([1 - uu[keep] - vv[keep], uu[keep], vv[keep]], axis=1)
        for i in range(50):
            samples = bary @ tri[i]
            brute = np.linalg.norm(samples - pts[i], axis=1).min()
            assert d[i] <= brute + 1e-9
            assert d[i] >= brute - 0.05  # sampling resolution bound

    def test_vertex_cases(self):
        tri = np.array([[[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]])
        assert point_triangle_distance(np.array([[0.0, 0, 0]]), tri)[0] == 0.0
        assert point_triangle_distance(np.array([[-1.0, 0, 0]]), tri)[0] == pytest.approx(1.0)
        assert point_triangle_distance(np.array([[0.2, 0.2, 0.5]]), tri)[0] == pytest.approx(0.5)


class TestEvaluateSurface:
    def test_mesh_equals_reference_mesh(self):
        rng = np.random.default_rng(5)
        verts = rng.uniform(-1, 1, (40, 3))
        tris = np.array([[i, (i + 1) % 40, (i + 7) % 40] for i in range(38)], dtype=np.int32)
        mesh = TriangleMesh(verts, tris)
        res = evaluate_surface(mesh, mesh)
        assert res["mean"] < 1e-9

    def test_displaced_plane_error(self):
        plane = PlanePatch(np.zeros(3), np.array([0.0, 0.0, 1.0]), extent=2.0)
        rng = np.random.default_rng(6)
        verts = np.concatenate([rng.uniform(-1, 1, (500, 2)), np.full((500, 1), 0.01)], axis=1)
        mesh = TriangleMesh(verts, np.zeros((0, 3), dtype=np.int32))
        res = evaluate_surface(mesh, plane)
        assert res["mean"] == pytest.approx(0.01, abs=1e-4)

    def test_sphere_reference(self):
        sphere = Sphere(np.zeros(3), 1.0)
        rng = np.random.default_rng(7)
        d = rng.standard_normal((300, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        mesh = TriangleMesh(d * 1.003, np.zeros((0, 3), dtype=np.int32))
        res = evaluate_surface(mesh, sphere)
        assert res["mean"] == pytest.approx(0.003, abs=1e-9)

    def test_empty_mesh_is_error(self):
        with pytest.raises(ValueError):
            evaluate_surface(TriangleMesh.empty(), Sphere(np.zeros(3), 1.0))

    def test_vertex_subsampling_cap(self):
        sphere = Sphere(np.zeros(3), 1.0)
        rng = np.random.default_rng(8)
        d = rng.standard_normal((5000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        mesh = TriangleMesh(d, np.zeros((0, 3), dtype=np.int32))
        res = evaluate_surface(mesh, sphere, max_vertices=1000)
        assert res["n"] == 1000

    def test_mesh_distance_exact_on_shared_vertices(self):
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
        tris = np.array([[0, 1, 2], [1, 3, 2]], dtype=np.int32)
        ref = TriangleMesh(verts, tris)
        d = mesh_distance(verts + [0, 0, 0.25], ref)
        np.testing.assert_allclose(d, 0.25, atol=1e-12)
