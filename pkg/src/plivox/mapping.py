"""Per-frame map integration: encode observations and fuse latents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import OrientedPointCloud, Pose, RgbdFrame, backproject
from .grid import VoxelGrid
from .network import MlpWeights, encode_points


@dataclass
class IntegrationConfig:
    every_n: int = 5
    fusion_mode: str = "mean"
    keep_color_points: bool = False

    def __post_init__(self):
        if self.every_n < 1:
            raise ValueError("every_n must be >= 1")
        if self.fusion_mode not in ("mean", "max"):
            raise ValueError("fusion_mode must be 'mean' or 'max'")


@dataclass
class IntegrationStats:
    n_points: int = 0
    n_fused_voxels: int = 0
    n_new_voxels: int = 0
    n_withheld_points: int = 0
    n_withheld_buckets: int = 0
    color_points: np.ndarray | None = None
    color_values: np.ndarray | None = None


def integrate(
    frame: RgbdFrame,
    pose: Pose,
    grid: VoxelGrid,
    weights: MlpWeights,
    cfg: IntegrationConfig = None,
    cloud: OrientedPointCloud | None = None,
) -> IntegrationStats:
    """Fold one frame's observations into the map at the given pose.

    Points are transformed to world coordinates, bucketed per voxel, and
    each sufficiently observed bucket is encoded to an observation latent
    with weight = point count, then fused.  An empty frame is a no-op.
    """
    cfg = cfg or IntegrationConfig()
    if cloud is None:
        cloud = backproject(frame)
    stats = IntegrationStats(n_points=len(cloud))
    if len(cloud) == 0:
        return stats

    world = OrientedPointCloud(pose.apply(cloud.points), pose.rotate(cloud.normals))
    buckets, withheld = grid.bucket_points(world)
    stats.n_withheld_buckets = len(withheld)
    stats.n_withheld_points = sum(len(ys) for ys, _ in withheld.values())
    for key, (ys, ns) in buckets.items():
        fresh = key not in grid.table
        latent = encode_points(np.concatenate([ys, ns], axis=1), weights)
        grid.fuse(key, latent.astype(float), len(ys), mode=cfg.fusion_mode)
        stats.n_fused_voxels += 1
        stats.n_new_voxels += int(fresh)

    if cfg.keep_color_points and frame is not None and frame.color is not None:
        stats.color_points, stats.color_values = _colored_cloud(frame, pose)
    return stats


def _colored_cloud(frame: RgbdFrame, pose: Pose, stride: int = 2):
    k = frame.intrinsics
    valid = frame.valid_mask()
    vs, us = np.nonzero(valid)
    vs, us = vs[::stride], us[::stride]
    d = frame.depth[vs, us]
    pts = np.stack([(us - k.cx) * d / k.fx, (vs - k.cy) * d / k.fy, d], axis=1)
    return pose.apply(pts), frame.color[vs, us]
