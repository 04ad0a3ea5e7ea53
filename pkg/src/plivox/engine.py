"""The online loop: track each frame, integrate every N-th, mesh on demand."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .datasets import Trajectory, load_tum_sequence, save_trajectory
from .errors import ConfigError, DegenerateTrackingError
from .geometry import Pose, backproject
from .grid import VoxelGrid, save_grid
from .mapping import IntegrationConfig, integrate
from .meshing import MeshRequest, colorize_mesh, extract_mesh, save_ply, sigma_filter
from .network import MlpWeights, load_weights
from .render import default_intrinsics, lateral_path, render_synthetic
from .shapes import load_scene
from .tracking import MapField, TrackingConfig, track


@dataclass
class EngineConfig:
    """Everything the fusion loop needs; mirrors the config-file keys."""

    voxel_size: float = 0.10
    latent_dim: int = 29
    allocation_threshold: int = 16
    integration_interval: int = 5
    fusion_mode: str = "mean"
    intensity_weight: float = 1000.0
    huber_delta: float = 1.345
    max_iters: int = 10
    convergence_eps: float = 1e-5
    max_points: int = 10000
    sigma_mode: str = "probabilistic"
    intensity_budget: int = 2000
    sigma_threshold: float = 0.06
    mesh_resolution: int = 8
    seed: int = 0
    keep_color: bool = False

    def validate(self, weights: MlpWeights | None = None):
        problems = []
        if self.voxel_size <= 0:
            problems.append(f"voxel_size must be > 0 (got {self.voxel_size})")
        if self.integration_interval < 1:
            problems.append("integration_interval must be >= 1")
        if weights is not None and weights.latent_dim != self.latent_dim:
            problems.append(
                f"latent_dim {self.latent_dim} does not match weights ({weights.latent_dim})"
            )
        if self.fusion_mode not in ("mean", "max"):
            problems.append(f"fusion_mode must be mean|max (got {self.fusion_mode})")
        if self.sigma_mode not in ("probabilistic", "constant_one"):
            problems.append(f"sigma_mode must be probabilistic|constant_one (got {self.sigma_mode})")
        if problems:
            raise ConfigError("; ".join(problems))

    def tracking(self) -> TrackingConfig:
        return TrackingConfig(
            intensity_weight=self.intensity_weight,
            huber_delta=self.huber_delta,
            max_iters=self.max_iters,
            convergence_eps=self.convergence_eps,
            max_points=self.max_points,
            sigma_mode=self.sigma_mode,
            intensity_budget=self.intensity_budget,
        )

    def integration(self) -> IntegrationConfig:
        return IntegrationConfig(
            every_n=self.integration_interval,
            fusion_mode=self.fusion_mode,
            keep_color_points=self.keep_color,
        )


def parse_config_file(path, base: EngineConfig | None = None) -> EngineConfig:
    """Read ``key = value`` lines ('#' comments) into an EngineConfig."""
    cfg = base or EngineConfig()
    known = {f.name: f.type for f in fields(EngineConfig)}
    problems = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"line {lineno}: expected key = value")
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip().strip("\"'")
            if key not in known:
                problems.append(f"line {lineno}: unknown key {key!r}")
                continue
            try:
                setattr(cfg, key, _coerce(raw, getattr(cfg, key)))
            except ValueError:
                problems.append(f"line {lineno}: bad value for {key!r}: {raw!r}")
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def _coerce(raw, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(raw)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


@dataclass
class FusionOutput:
    trajectory: Trajectory
    grid: VoxelGrid
    frame_log: list = field(default_factory=list)
    color_points: np.ndarray | None = None
    color_values: np.ndarray | None = None


def run_fusion(frames, weights: MlpWeights, cfg: EngineConfig, log=None) -> FusionOutput:
    """Track and integrate a frame sequence against a fresh map.

    Frame 0 is integrated at the identity pose.  Tracking failures fall
    back to the previous pose and skip that frame's integration; the
    per-frame log records what happened.
    """
    cfg.validate(weights)
    grid = VoxelGrid(
        voxel_size=cfg.voxel_size,
        latent_dim=cfg.latent_dim,
        allocation_threshold=cfg.allocation_threshold,
    )
    tracking_cfg = cfg.tracking()
    integration_cfg = cfg.integration()
    traj = Trajectory()
    frame_log = []
    color_pts, color_vals = [], []

    pose = Pose.identity()
    prev_frame = None
    for t, frame in enumerate(frames):
        t0 = time.perf_counter()
        entry = {
            "frame": t,
            "timestamp": frame.timestamp,
            "tracked": False,
            "failed": False,
            "integrated": False,
            "iterations": 0,
            "track_seconds": 0.0,
            "integrate_seconds": 0.0,
            "inlier_fraction": 0.0,
        }
        cloud = backproject(frame)
        if t > 0:
            field_ = MapField(grid, weights, sigma_mode=cfg.sigma_mode)
            try:
                result = track(
                    frame,
                    prev_frame,
                    pose,
                    field_,
                    tracking_cfg,
                    seed=_frame_seed(cfg.seed, t),
                    cloud=cloud,
                )
                entry["iterations"] = result.iterations
                entry["inlier_fraction"] = result.inlier_fraction
                if result.failed:
                    entry["failed"] = True
                else:
                    pose = result.pose
                    entry["tracked"] = True
            except DegenerateTrackingError:
                entry["failed"] = True
        entry["track_seconds"] = time.perf_counter() - t0

        if (t % integration_cfg.every_n == 0) and not entry["failed"]:
            t1 = time.perf_counter()
            stats = integrate(frame, pose, grid, weights, integration_cfg, cloud=cloud)
            entry["integrated"] = True
            entry["integrate_seconds"] = time.perf_counter() - t1
            if stats.color_points is not None:
                color_pts.append(stats.color_points)
                color_vals.append(stats.color_values)
        traj.append(frame.timestamp, pose)
        frame_log.append(entry)
        if log:
            log(
                f"frame {t}: tracked={entry['tracked']} failed={entry['failed']} "
                f"integrated={entry['integrated']} iters={entry['iterations']} "
                f"voxels={len(grid)}"
            )
        prev_frame = frame
    return FusionOutput(
        traj,
        grid,
        frame_log,
        color_points=np.vstack(color_pts) if color_pts else None,
        color_values=np.vstack(color_vals) if color_vals else None,
    )


def _frame_seed(seed, t):
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def write_frame_log(frame_log, path):
    cols = [
        "frame",
        "timestamp",
        "tracked",
        "failed",
        "integrated",
        "iterations",
        "inlier_fraction",
        "track_seconds",
        "integrate_seconds",
    ]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for e in frame_log:
            w.writerow([e[c] for c in cols])


def fuse_command(
    cfg: EngineConfig,
    weights_path,
    out_dir,
    input_dir=None,
    scene=None,
    traj_path=None,
    n_frames=60,
    noise_coef=0.0,
    mesh_out=None,
    log=None,
):
    """End-to-end fusion driver shared by the CLI and the test bench."""
    weights = load_weights(weights_path)
    cfg.validate(weights)
    os.makedirs(out_dir, exist_ok=True)
    if input_dir is not None:
        frames, _ = load_tum_sequence(input_dir, keep_color=cfg.keep_color)
    else:
        scene_obj = load_scene(scene)
        if traj_path is not None:
            from .datasets import load_trajectory

            gt = load_trajectory(traj_path)
            poses, stamps = gt.poses, gt.timestamps
        else:
            poses = lateral_path(n_frames)
            stamps = [i / 30.0 for i in range(n_frames)]
        frames = render_synthetic(
            scene_obj,
            poses,
            default_intrinsics(),
            timestamps=stamps,
            noise_coef=noise_coef,
            seed=cfg.seed,
            keep_color=cfg.keep_color,
        )
    out = run_fusion(frames, weights, cfg, log=log)
    save_trajectory(out.trajectory, os.path.join(out_dir, "trajectory.txt"))
    save_grid(out.grid, os.path.join(out_dir, "map.plivox"))
    write_frame_log(out.frame_log, os.path.join(out_dir, "frames.csv"))
    if mesh_out:
        mesh = extract_mesh(out.grid, weights, MeshRequest(samples_per_voxel=cfg.mesh_resolution))
        mesh = sigma_filter(mesh, cfg.sigma_threshold)
        if cfg.keep_color and out.color_points is not None and len(mesh.vertices):
            mesh = colorize_mesh(mesh, out.color_points, out.color_values, cfg.voxel_size / 2)
        save_ply(mesh, mesh_out)
    return out
