"""Command-line entry points; every pipeline stage is a subcommand."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import engine
from .errors import ConfigError, DegenerateTrackingError, FileFormatError, PlivoxError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_DATA = 4


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileFormatError as e:
        print(f"error: {e.kind}: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (DegenerateTrackingError, ValueError) as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except PlivoxError as e:
        print(f"error: runtime: {e}", file=sys.stderr)
        return EXIT_ERROR


def build_parser():
    p = argparse.ArgumentParser(prog="plivox", description=__doc__)
    sub = p.add_subparsers(required=True)

    f = sub.add_parser("fuse", help="run tracking + integration over a sequence")
    f.add_argument("--config", help="key = value config file")
    f.add_argument("--weights", required=True)
    f.add_argument("--input", help="TUM-layout dataset directory")
    f.add_argument("--scene", help="scene JSON or builtin name (renders instead of loading)")
    f.add_argument("--traj", help="trajectory file for --scene rendering")
    f.add_argument("--frames", type=int, default=60)
    f.add_argument("--noise", type=float, default=0.0, help="depth noise coef (sigma = coef*d^2)")
    f.add_argument("--out", required=True)
    f.add_argument("--mesh", help="also extract a sigma-filtered mesh to this PLY")
    f.add_argument("--seed", type=int)
    f.add_argument("--sigma-mode", choices=["probabilistic", "constant_one"])
    f.add_argument("--fusion-mode", choices=["mean", "max"])
    f.set_defaults(func=cmd_fuse)

    t = sub.add_parser("train", help="train the prior on a shape corpus")
    t.add_argument("--corpus", help="manifest file (JSON shape per line); default procedural")
    t.add_argument("--shapes", type=int, default=48, help="procedural corpus size")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--curve", help="write the per-epoch loss curve CSV here")
    t.add_argument("--checkpoints", help="checkpoint directory")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("mesh", help="extract a mesh from a map snapshot")
    m.add_argument("--map", required=True)
    m.add_argument("--weights", required=True)
    m.add_argument("--res", type=int, default=8)
    m.add_argument("--sigma-threshold", type=float, default=None)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mesh)

    a = sub.add_parser("eval-ate", help="trajectory RMSE after rigid alignment")
    a.add_argument("estimated")
    a.add_argument("groundtruth")
    a.add_argument("--csv", help="write per-pair errors to this CSV")
    a.set_defaults(func=cmd_eval_ate)

    s = sub.add_parser("eval-surface", help="mean mesh-to-scene surface error")
    s.add_argument("mesh")
    s.add_argument("scene", help="scene JSON or builtin name")
    s.add_argument("--csv", help="write the summary row to this CSV")
    s.set_defaults(func=cmd_eval_surface)

    r = sub.add_parser("render-synthetic", help="render a scene along a trajectory")
    r.add_argument("--scene", required=True)
    r.add_argument("--traj", required=True)
    r.add_argument("--noise", type=float, default=0.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def cmd_fuse(args) -> int:
    cfg = engine.EngineConfig()
    if args.config:
        cfg = engine.parse_config_file(args.config, cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.sigma_mode:
        cfg.sigma_mode = args.sigma_mode
    if args.fusion_mode:
        cfg.fusion_mode = args.fusion_mode
    if not args.input and not args.scene:
        raise ConfigError("one of --input or --scene is required")
    out = engine.fuse_command(
        cfg,
        args.weights,
        args.out,
        input_dir=args.input,
        scene=args.scene,
        traj_path=args.traj,
        n_frames=args.frames,
        noise_coef=args.noise,
        mesh_out=args.mesh,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    n_failed = sum(e["failed"] for e in out.frame_log)
    print(f"fused {len(out.frame_log)} frames, {len(out.grid)} voxels, {n_failed} tracking failures")
    return EXIT_OK


def cmd_train(args) -> int:
    from .network import save_weights
    from .shapes import load_shape_manifest
    from .training import TrainConfig, default_corpus, train

    if args.corpus:
        shapes = load_shape_manifest(args.corpus)
    else:
        shapes = default_corpus(args.shapes, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    weights, curve = train(
        shapes,
        cfg,
        checkpoint_dir=args.checkpoints,
        curve_path=args.curve,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    save_weights(weights, args.out)
    last = curve[-1]["mean_nll"] if curve else float("nan")
    print(f"trained {args.epochs} epochs on {len(shapes)} shapes; final nll/term {last}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    from .grid import load_grid
    from .meshing import MeshRequest, extract_mesh, save_ply, sigma_filter
    from .network import load_weights

    grid = load_grid(args.map)
    weights = load_weights(args.weights)
    mesh = extract_mesh(grid, weights, MeshRequest(samples_per_voxel=args.res))
    if args.sigma_threshold is not None:
        mesh = sigma_filter(mesh, args.sigma_threshold)
    save_ply(mesh, args.out)
    if len(mesh.vertices) == 0:
        print("warning: empty mesh", file=sys.stderr)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {args.out}")
    return EXIT_OK


def cmd_eval_ate(args) -> int:
    import csv

    from .datasets import load_trajectory
    from .evaluate import evaluate_ate

    est = load_trajectory(args.estimated)
    gt = load_trajectory(args.groundtruth)
    result = evaluate_ate(est, gt)
    print(f"ATE RMSE {result['rmse']:.3f} m over {result['pairs']} pairs")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["pair", "error_m"])
            for i, e in enumerate(result["errors"]):
                w.writerow([i, repr(float(e))])
    return EXIT_OK


def cmd_eval_surface(args) -> int:
    import csv

    from .evaluate import evaluate_surface
    from .meshing import load_ply
    from .shapes import load_scene

    mesh = load_ply(args.mesh)
    scene = load_scene(args.scene)
    result = evaluate_surface(mesh, scene.shape)
    print(f"surface error mean {result['mean']:.4f} m over {result['n']} vertices")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["mean_m", "rmse_m", "max_m", "n_vertices"])
            w.writerow([repr(result["mean"]), repr(result["rmse"]), repr(result["max"]), result["n"]])
    return EXIT_OK


def cmd_render(args) -> int:
    from .datasets import load_trajectory, save_tum_sequence
    from .render import default_intrinsics, render_synthetic
    from .shapes import load_scene

    scene = load_scene(args.scene)
    traj = load_trajectory(args.traj)
    frames = render_synthetic(
        scene,
        traj.poses,
        default_intrinsics(),
        timestamps=traj.timestamps,
        noise_coef=args.noise,
        seed=args.seed,
    )
    save_tum_sequence(frames, args.out, trajectory=traj)
    print(f"rendered {len(frames)} frames to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
