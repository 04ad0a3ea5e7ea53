"""Sparse voxel map: indexing, local coordinates, allocation and latent fusion.

Indexing convention: voxel k covers ``origin + [k*a, (k+1)*a)`` per axis
(floor rule, boundary points belong to the upper voxel), and the centroid
sits at ``origin + (k + 0.5) * a``.  Local coordinates are expressed in
voxel-size units, so they live in ``[-1/2, 1/2]^3``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FileFormatError
from .geometry import OrientedPointCloud

SNAPSHOT_MAGIC = b"PLIV"
SNAPSHOT_VERSION = 1


@dataclass
class PLIVox:
    """One probabilistic local implicit voxel: centroid, latent, weight."""

    centroid: np.ndarray
    latent: np.ndarray
    weight: int = 0


@dataclass(frozen=True)
class LocalPoint:
    """A point in voxel-local coordinates with its unit normal."""

    y: np.ndarray
    n: np.ndarray


@dataclass
class VoxelGrid:
    """Sparse map from integer 3-indices to :class:`PLIVox` records."""

    voxel_size: float = 0.10
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    latent_dim: int = 29
    allocation_threshold: int = 16
    weight_cap: int | None = None
    table: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.table)

    def voxel_index(self, x):
        """Integer index of the voxel containing x (single point or batch)."""
        q = (np.asarray(x, dtype=float) - self.origin) / self.voxel_size
        idx = np.floor(q).astype(np.int64)
        if idx.ndim == 1:
            return tuple(int(i) for i in idx)
        return idx

    def centroid(self, index):
        return self.origin + (np.asarray(index, dtype=float) + 0.5) * self.voxel_size

    def to_local(self, x, n):
        """Map a world point/normal to (index, LocalPoint)."""
        index = self.voxel_index(x)
        y = (np.asarray(x, dtype=float) - self.centroid(index)) / self.voxel_size
        return index, LocalPoint(y, np.asarray(n, dtype=float))

    def get(self, index) -> PLIVox | None:
        return self.table.get(tuple(index))

    def allocated_mask(self, indices) -> np.ndarray:
        """Vectorized membership test for an (n, 3) integer index array."""
        table = self.table
        return np.fromiter(
            (tuple(row) in table for row in indices), dtype=bool, count=len(indices)
        )

    def fuse(self, index, l_obs, w_obs: int, mode: str = "mean") -> PLIVox:
        """Fold one observation latent into the voxel at ``index``.

        A fresh voxel is allocated and takes the observation directly.  For
        ``mean`` the update is the weight-running mean; for ``max`` it is the
        elementwise maximum.  Weights accumulate in both modes.
        """
        if w_obs < 1:
            raise ValueError("observation weight must be >= 1")
        l_obs = np.asarray(l_obs, dtype=float)
        if not np.all(np.isfinite(l_obs)):
            raise ValueError("observation latent must be finite")
        key = tuple(index)
        vox = self.table.get(key)
        if vox is None:
            vox = PLIVox(self.centroid(key), l_obs.copy(), int(w_obs))
            self.table[key] = vox
            return vox
        if mode == "mean":
            vox.latent = (vox.latent * vox.weight + l_obs * w_obs) / (vox.weight + w_obs)
        elif mode == "max":
            vox.latent = np.maximum(vox.latent, l_obs)
        else:
            raise ValueError(f"unknown fusion mode {mode!r}")
        vox.weight += int(w_obs)
        if self.weight_cap is not None:
            vox.weight = min(vox.weight, self.weight_cap)
        return vox

    def bucket_points(self, cloud: OrientedPointCloud):
        """Partition a world-frame cloud into per-voxel local point lists.

        Returns ``(buckets, withheld)``: both map index -> (ys, ns) arrays.
        A bucket lands in ``withheld`` when its voxel is unallocated and the
        bucket is smaller than the allocation threshold; withheld points are
        reported for diagnostics but never fused.
        """
        buckets: dict = {}
        withheld: dict = {}
        if len(cloud) == 0:
            return buckets, withheld
        pts = np.asarray(cloud.points, dtype=float)
        indices = self.voxel_index(pts)
        order = np.lexsort((indices[:, 2], indices[:, 1], indices[:, 0]))
        sorted_idx = indices[order]
        boundaries = np.flatnonzero(np.any(np.diff(sorted_idx, axis=0) != 0, axis=1)) + 1
        groups = np.split(order, boundaries)
        for g in groups:
            key = tuple(int(i) for i in indices[g[0]])
            ys = (pts[g] - self.centroid(key)) / self.voxel_size
            ns = cloud.normals[g]
            if key in self.table or len(g) >= self.allocation_threshold:
                buckets[key] = (ys, ns)
            else:
                withheld[key] = (ys, ns)
        return buckets, withheld

    def latents_for(self, keys) -> np.ndarray:
        return np.stack([self.table[k].latent for k in keys])


def save_grid(grid: VoxelGrid, path) -> None:
    """Write a versioned binary snapshot (atomic: temp file + rename).

    Latents are stored as little-endian float32; indices as int32, weights
    as uint32.  Records are sorted by index so equal maps produce identical
    bytes.
    """
    keys = sorted(grid.table.keys())
    blob = bytearray()
    blob += SNAPSHOT_MAGIC
    blob += struct.pack("<I", SNAPSHOT_VERSION)
    blob += struct.pack("<d", grid.voxel_size)
    blob += struct.pack("<3d", *grid.origin)
    blob += struct.pack("<III", grid.latent_dim, grid.allocation_threshold, len(keys))
    for k in keys:
        vox = grid.table[k]
        blob += struct.pack("<3i", *k)
        blob += struct.pack("<I", vox.weight)
        blob += np.asarray(vox.latent, dtype="<f4").tobytes()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(blob))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_grid(path) -> VoxelGrid:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != SNAPSHOT_MAGIC:
        raise FileFormatError("bad magic; not a map snapshot", kind="version")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != SNAPSHOT_VERSION:
        raise FileFormatError(f"unsupported snapshot version {version}", kind="version")
    (a,) = struct.unpack_from("<d", data, off)
    off += 8
    origin = np.array(struct.unpack_from("<3d", data, off))
    off += 24
    latent_dim, threshold, count = struct.unpack_from("<III", data, off)
    off += 12
    grid = VoxelGrid(
        voxel_size=a, origin=origin, latent_dim=latent_dim, allocation_threshold=threshold
    )
    rec = 12 + 4 + 4 * latent_dim
    if len(data) - off != count * rec:
        raise FileFormatError("snapshot truncated or padded", kind="truncated")
    for _ in range(count):
        key = struct.unpack_from("<3i", data, off)
        off += 12
        (weight,) = struct.unpack_from("<I", data, off)
        off += 4
        latent = np.frombuffer(data, dtype="<f4", count=latent_dim, offset=off).astype(float)
        off += 4 * latent_dim
        grid.table[key] = PLIVox(grid.centroid(key), latent, int(weight))
    return grid
