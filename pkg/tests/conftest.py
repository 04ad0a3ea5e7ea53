import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from plivox.datasets import Trajectory
from plivox.network import load_weights, save_weights
from plivox.render import default_intrinsics, lateral_path, render_synthetic
from plivox.shapes import builtin_scene
from plivox.training import TrainConfig, corpus_voxel_samples, default_corpus, train

CACHE_DIR = Path(__file__).parent / "_cache"

PRIOR_SHAPES = 64
PRIOR_CFG = dict(epochs=48, seed=0, max_voxels_per_shape=24)


def _prior_cache_path() -> Path:
    key = hashlib.sha256(
        json.dumps({"shapes": PRIOR_SHAPES, **PRIOR_CFG}, sort_keys=True).encode()
    ).hexdigest()[:16]
    return CACHE_DIR / f"prior_{key}.weights"


@pytest.fixture(scope="session")
def trained_prior():
    """The shared geometry prior; trained once per session and cached on
    disk (training is deterministic, so the cache is safe to reuse)."""
    path = _prior_cache_path()
    if path.exists():
        return load_weights(path)
    cfg = TrainConfig(**PRIOR_CFG)
    shapes = default_corpus(PRIOR_SHAPES, seed=0)
    weights, _ = train(shapes, cfg)
    CACHE_DIR.mkdir(exist_ok=True)
    save_weights(weights, path)
    return weights


@pytest.fixture(scope="session")
def trained_prior_path(trained_prior):
    return str(_prior_cache_path())


@pytest.fixture(scope="session")
def heldout_samples():
    cfg = TrainConfig(**PRIOR_CFG)
    shapes = default_corpus(10, seed=20_000_001)
    return corpus_voxel_samples(shapes, cfg, seed=999)


@pytest.fixture(scope="session")
def room_sequence():
    """60 noiseless frames of the room scene with ground-truth poses."""
    scene = builtin_scene("room")
    poses = lateral_path(60)
    frames = render_synthetic(scene, poses, default_intrinsics())
    gt = Trajectory()
    for f, p in zip(frames, poses):
        gt.append(f.timestamp, p)
    return scene, frames, gt


def make_noisy_room(seed, n_frames=24, noise_coef=0.005):
    scene = builtin_scene("room")
    poses = lateral_path(n_frames)
    frames = render_synthetic(
        scene, poses, default_intrinsics(), noise_coef=noise_coef, seed=seed
    )
    gt = Trajectory()
    for f, p in zip(frames, poses):
        gt.append(f.timestamp, p)
    return scene, frames, gt
