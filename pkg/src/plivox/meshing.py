"""Mesh extraction from the latent map, with cross-voxel blending.

Each allocated voxel decodes the field over a lattice spanning its own
cube, but the value at every lattice point is a blend: the voxel centers
around the point form a trilinear partition of unity, and the decoded
values of all *allocated* centers are mixed with renormalized weights.
Because each voxel's decoder is evaluated over twice its cube (local
coordinates up to [-1, 1]), neighboring voxels overlap and the blended
field stays continuous across voxel boundaries.

Marching cubes runs per voxel on the shared global lattice, so vertices on
shared faces coincide bitwise and are welded exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import FileFormatError
from .grid import VoxelGrid
from .network import MlpWeights, decode_batch

_CORNER_OFFSETS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)


@dataclass
class MeshRequest:
    samples_per_voxel: int = 8
    iso: float = 0.0
    color: bool = False

    def __post_init__(self):
        if self.samples_per_voxel < 2:
            raise ValueError("samples_per_voxel must be >= 2")


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None
    sigma: np.ndarray | None = None

    def __post_init__(self):
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    @staticmethod
    def empty() -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))


def _pack(idx):
    off = 1 << 20
    i = np.asarray(idx, dtype=np.int64) + off
    return (i[:, 0] << 42) | (i[:, 1] << 21) | i[:, 2]


def blended_sdf(grid: VoxelGrid, weights: MlpWeights, points, chunk=200000):
    """Blend decoded (mu, sigma) at world points; third output flags defined.

    Points outside every allocated voxel's influence are undefined and get
    mu = sigma = 0.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    keys = np.array(sorted(grid.table.keys()), dtype=np.int64).reshape(-1, 3)
    if len(keys) == 0:
        z = np.zeros(len(pts))
        return z, z.copy(), np.zeros(len(pts), dtype=bool)
    packed_keys = _pack(keys)
    latents = np.stack([grid.table[tuple(k)].latent for k in keys]).astype(weights.dtype)

    mu = np.zeros(len(pts))
    sigma = np.zeros(len(pts))
    wsum = np.zeros(len(pts))
    s = (pts - grid.origin) / grid.voxel_size - 0.5
    base = np.floor(s).astype(np.int64)
    frac = s - base
    for corner in _CORNER_OFFSETS:
        ck = base + corner
        w = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1)
        pos = np.searchsorted(packed_keys, _pack(ck))
        pos_c = np.clip(pos, 0, len(packed_keys) - 1)
        hit = (packed_keys[pos_c] == _pack(ck)) & (w > 0)
        if not hit.any():
            continue
        ys = s[hit] - ck[hit] + 0.0
        for lo in range(0, int(hit.sum()), chunk):
            sl = slice(lo, lo + chunk)
            rows = np.flatnonzero(hit)[sl]
            m, sg = decode_batch(
                ys[sl].astype(weights.dtype), latents[pos_c[rows]], weights
            )
            mu[rows] += w[rows] * m
            sigma[rows] += w[rows] * sg
            wsum[rows] += w[rows]
    defined = wsum > 0
    mu[defined] /= wsum[defined]
    sigma[defined] /= wsum[defined]
    return mu, sigma, defined


def extract_mesh(grid: VoxelGrid, weights: MlpWeights, req: MeshRequest = None) -> TriangleMesh:
    """Triangulate the zero level set of the blended field.

    Every allocated voxel is sampled on an (r+1)^3 lattice of its own cube
    (r = samples_per_voxel); lattice points are shared between neighbors so
    the per-voxel marching cubes passes stitch into one watertight sheet
    wherever voxels touch.  Returns world-space vertices in meters with a
    per-vertex blended sigma.
    """
    req = req or MeshRequest()
    r = req.samples_per_voxel
    keys = np.array(sorted(grid.table.keys()), dtype=np.int64).reshape(-1, 3)
    if len(keys) == 0:
        return TriangleMesh.empty()

    # unique global lattice points over all voxel cubes
    rng_ax = np.arange(r + 1, dtype=np.int64)
    cube = np.stack(np.meshgrid(rng_ax, rng_ax, rng_ax, indexing="ij"), axis=-1).reshape(-1, 3)
    lattice = (keys[:, None, :] * r + cube[None, :, :]).reshape(-1, 3)
    uniq, inverse = np.unique(lattice, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)

    world = grid.origin + uniq.astype(float) * (grid.voxel_size / r)
    w32 = weights if weights.dtype == np.float32 else weights.astype(np.float32)
    mu_u, sg_u, defined = blended_sdf(grid, w32, world)
    # lattice points inside an allocated voxel always carry its weight
    assert defined.all()

    verts_all = []
    sig_all = []
    faces_all = []
    weld: dict = {}
    n_pts = (r + 1) ** 3
    for vi, key in enumerate(keys):
        ids = inverse[vi * n_pts : (vi + 1) * n_pts]
        vol = mu_u[ids].reshape(r + 1, r + 1, r + 1)
        if vol.min() >= req.iso or vol.max() <= req.iso:
            continue
        svol = sg_u[ids].reshape(r + 1, r + 1, r + 1)
        v, f, _, _ = measure.marching_cubes(vol, level=req.iso, allow_degenerate=False)
        gpos = key * r + v  # global lattice float coordinates (bitwise shared)
        sig = _trilinear_volume(svol, v)
        face_ids = np.empty(len(v), dtype=np.int64)
        for i, row in enumerate(gpos):
            key_b = row.tobytes()
            found = weld.get(key_b)
            if found is None:
                found = len(verts_all)
                weld[key_b] = found
                verts_all.append(row)
                sig_all.append(sig[i])
            face_ids[i] = found
        faces_all.append(face_ids[f])

    if not faces_all:
        return TriangleMesh.empty()
    coords = np.array(verts_all)
    vertices = grid.origin + coords * (grid.voxel_size / r)
    triangles = np.vstack(faces_all).astype(np.int32)
    # drop degenerate faces (welded duplicates or numerically flat)
    a = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
    b = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
    area2 = np.linalg.norm(np.cross(a, b), axis=1)
    keep = area2 > 2e-12
    return TriangleMesh(vertices, triangles[keep], sigma=np.array(sig_all))


def _trilinear_volume(vol, pts):
    base = np.floor(pts).astype(int)
    base = np.minimum(base, np.array(vol.shape) - 2)
    f = pts - base
    out = np.zeros(len(pts))
    for c in _CORNER_OFFSETS:
        w = np.prod(np.where(c == 1, f, 1.0 - f), axis=1)
        out += w * vol[base[:, 0] + c[0], base[:, 1] + c[1], base[:, 2] + c[2]]
    return out


def sigma_filter(mesh: TriangleMesh, threshold: float = 0.06) -> TriangleMesh:
    """Drop vertices whose blended sigma exceeds the threshold.

    Triangles touching a dropped vertex disappear.  With an infinite
    threshold this is the identity; with threshold 0 the mesh empties
    (sigma is strictly positive).
    """
    if mesh.sigma is None or len(mesh.vertices) == 0:
        return mesh
    keep = mesh.sigma <= threshold
    if not keep.any():
        return TriangleMesh.empty()
    remap = -np.ones(len(mesh.vertices), dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    tri_ok = keep[mesh.triangles].all(axis=1)
    return TriangleMesh(
        mesh.vertices[keep],
        remap[mesh.triangles[tri_ok]].astype(np.int32),
        colors=mesh.colors[keep] if mesh.colors is not None else None,
        sigma=mesh.sigma[keep],
    )


def colorize_mesh(mesh: TriangleMesh, points, colors, radius, k=4) -> TriangleMesh:
    """Average the k nearest colored points within ``radius`` per vertex.

    Vertices with no neighbor get mid-gray.  Color channels are in [0, 1].
    """
    from scipy.spatial import cKDTree

    if len(mesh.vertices) == 0:
        return mesh
    points = np.asarray(points, dtype=float)
    colors = np.asarray(colors, dtype=float)
    out = np.full((len(mesh.vertices), 3), 0.5)
    if len(points):
        tree = cKDTree(points)
        dist, idx = tree.query(mesh.vertices, k=k, distance_upper_bound=radius)
        dist = dist.reshape(len(mesh.vertices), -1)
        idx = idx.reshape(len(mesh.vertices), -1)
        hit = np.isfinite(dist)
        idx_safe = np.where(hit, idx, 0)
        csum = (colors[idx_safe] * hit[:, :, None]).sum(axis=1)
        cnt = hit.sum(axis=1)
        nz = cnt > 0
        out[nz] = csum[nz] / cnt[nz, None]
    return TriangleMesh(mesh.vertices, mesh.triangles, colors=out, sigma=mesh.sigma)


def save_ply(mesh: TriangleMesh, path) -> None:
    """Binary little-endian PLY with optional per-vertex color and sigma."""
    n_v = len(mesh.vertices)
    n_f = len(mesh.triangles)
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {n_v}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if mesh.colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    if mesh.sigma is not None:
        lines += ["property float sigma"]
    lines += [f"element face {n_f}", "property list uchar int vertex_indices", "end_header"]
    header = ("\n".join(lines) + "\n").encode("ascii")

    blob = bytearray(header)
    v32 = np.asarray(mesh.vertices, dtype="<f4")
    col = (
        np.clip(np.asarray(mesh.colors) * 255.0 + 0.5, 0, 255).astype(np.uint8)
        if mesh.colors is not None
        else None
    )
    sig = np.asarray(mesh.sigma, dtype="<f4") if mesh.sigma is not None else None
    for i in range(n_v):
        blob += v32[i].tobytes()
        if col is not None:
            blob += col[i].tobytes()
        if sig is not None:
            blob += sig[i : i + 1].tobytes()
    tri = np.asarray(mesh.triangles, dtype="<i4")
    for i in range(n_f):
        blob += b"\x03" + tri[i].tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_ply(path) -> TriangleMesh:
    """Read meshes written by :func:`save_ply` (same property subset)."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FileFormatError("not a PLY file", kind="format")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header[1]:
        raise FileFormatError("unsupported PLY format", kind="version")
    n_v = n_f = 0
    has_color = has_sigma = False
    for line in header:
        if line.startswith("element vertex"):
            n_v = int(line.split()[-1])
        elif line.startswith("element face"):
            n_f = int(line.split()[-1])
        elif line == "property uchar red":
            has_color = True
        elif line == "property float sigma":
            has_sigma = True
    off = end + len(b"end_header\n")
    stride = 12 + (3 if has_color else 0) + (4 if has_sigma else 0)
    need = n_v * stride + n_f * 13
    if len(data) - off != need:
        raise FileFormatError("PLY payload truncated", kind="truncated")
    raw = np.frombuffer(data, dtype=np.uint8, count=n_v * stride, offset=off).reshape(n_v, stride)
    verts = raw[:, :12].copy().view("<f4").astype(float).reshape(n_v, 3)
    pos = 12
    colors = None
    if has_color:
        colors = raw[:, pos : pos + 3].astype(float) / 255.0
        pos += 3
    sigma = None
    if has_sigma:
        sigma = raw[:, pos : pos + 4].copy().view("<f4").astype(float).reshape(n_v)
    off += n_v * stride
    fraw = np.frombuffer(data, dtype=np.uint8, count=n_f * 13, offset=off).reshape(n_f, 13)
    if n_f and not np.all(fraw[:, 0] == 3):
        raise FileFormatError("only triangle faces supported", kind="format")
    tris = fraw[:, 1:].copy().view("<i4").reshape(n_f, 3) if n_f else np.zeros((0, 3), dtype="<i4")
    return TriangleMesh(verts, tris.astype(np.int32), colors=colors, sigma=sigma)


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
