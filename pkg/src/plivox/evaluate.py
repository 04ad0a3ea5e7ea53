"""Trajectory and surface-quality metrics."""

from __future__ import annotations

import numpy as np

from .datasets import Trajectory
from .geometry import Pose
from .meshing import TriangleMesh
from .shapes import Shape


def umeyama_alignment(src, dst) -> Pose:
    """Rigid transform (no scale) minimizing ||dst - (R src + t)||^2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    return Pose(r, mu_d - r @ mu_s)


def associate_timestamps(ts_a, ts_b, max_dt=0.02):
    """Nearest-neighbor pairing of two timestamp lists within ``max_dt``."""
    ts_a = np.asarray(ts_a, dtype=float)
    ts_b = np.asarray(ts_b, dtype=float)
    order = np.argsort(ts_b)
    sorted_b = ts_b[order]
    pos = np.searchsorted(sorted_b, ts_a)
    pairs = []
    for i, p in enumerate(pos):
        cands = [c for c in (p - 1, p) if 0 <= c < len(sorted_b)]
        if not cands:
            continue
        best = min(cands, key=lambda c: abs(sorted_b[c] - ts_a[i]))
        if abs(sorted_b[best] - ts_a[i]) <= max_dt:
            pairs.append((i, int(order[best])))
    return pairs


def evaluate_ate(estimated: Trajectory, gt: Trajectory, max_dt=0.02):
    """Absolute trajectory error after rigid alignment.

    Returns a dict with ``rmse`` (meters), per-pair ``errors``, the number
    of associations and the alignment transform.  Requires at least three
    associated pairs.
    """
    pairs = associate_timestamps(estimated.timestamps, gt.timestamps, max_dt)
    if len(pairs) < 3:
        raise ValueError(f"only {len(pairs)} associated pose pairs; need >= 3")
    est_pos = estimated.positions()[[i for i, _ in pairs]]
    gt_pos = gt.positions()[[j for _, j in pairs]]
    align = umeyama_alignment(est_pos, gt_pos)
    diff = gt_pos - align.apply(est_pos)
    errors = np.linalg.norm(diff, axis=1)
    return {
        "rmse": float(np.sqrt(np.mean(errors**2))),
        "mean": float(errors.mean()),
        "median": float(np.median(errors)),
        "errors": errors,
        "pairs": len(pairs),
        "alignment": align,
    }


def point_triangle_distance(points, tri):
    """Exact distance from points (n,3) to triangles (n,3,3), pairwise rows."""
    p = np.asarray(points, dtype=float)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    closest = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        m = mask & ~done
        closest[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    put((d6 >= 0) & (d5 <= d6), c)

    vc = d1 * d4 - d3 * d2
    v = np.divide(d1, d1 - d3, out=np.zeros_like(d1), where=(d1 - d3) != 0)
    put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)

    vb = d5 * d2 - d1 * d6
    w = np.divide(d2, d2 - d6, out=np.zeros_like(d2), where=(d2 - d6) != 0)
    put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)

    va = d3 * d6 - d5 * d4
    w2 = np.divide(d4 - d3, (d4 - d3) + (d5 - d6), out=np.zeros_like(d4), where=((d4 - d3) + (d5 - d6)) != 0)
    put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w2[:, None] * (c - b))

    denom = np.where(va + vb + vc != 0, va + vb + vc, 1.0)
    v_in = vb / denom
    w_in = vc / denom
    put(np.ones(len(p), dtype=bool), a + v_in[:, None] * ab + w_in[:, None] * ac)
    return np.linalg.norm(p - closest, axis=1)


def mesh_distance(points, mesh: TriangleMesh, k=8, max_incidence=24):
    """Distance from points to a reference mesh.

    Candidate triangles are those incident to the k nearest mesh vertices,
    so a point lying on the mesh always finds its own triangle and the
    distance is exact there.
    """
    from scipy.spatial import cKDTree

    points = np.asarray(points, dtype=float)
    tri_pts = mesh.vertices[mesh.triangles]
    n_verts = len(mesh.vertices)
    incident = np.full((n_verts, max_incidence), -1, dtype=np.int64)
    counts = np.zeros(n_verts, dtype=np.int64)
    for ti, tri in enumerate(mesh.triangles):
        for v in tri:
            if counts[v] < max_incidence:
                incident[v, counts[v]] = ti
                counts[v] += 1
    tree = cKDTree(mesh.vertices)
    k = min(k, n_verts)
    _, vidx = tree.query(points, k=k)
    vidx = vidx.reshape(len(points), -1)
    best = np.full(len(points), np.inf)
    for j in range(vidx.shape[1]):
        cand = incident[vidx[:, j]]  # (n, max_incidence)
        for c in range(max_incidence):
            ids = cand[:, c]
            ok = ids >= 0
            if not ok.any():
                continue
            d = point_triangle_distance(points[ok], tri_pts[ids[ok]])
            best[ok] = np.minimum(best[ok], d)
    return best


def evaluate_surface(mesh: TriangleMesh, reference, max_vertices=200000, seed=0):
    """Mean distance from mesh vertices to the ground-truth surface.

    ``reference`` is either an analytic :class:`Shape` (distance =
    |sdf|) or a reference :class:`TriangleMesh`.  The mesh is expected to
    be sigma-filtered already; an empty mesh is an error.
    """
    if len(mesh.vertices) == 0:
        raise ValueError("empty mesh (did the sigma filter remove everything?)")
    verts = mesh.vertices
    if len(verts) > max_vertices:
        rng = np.random.default_rng(seed)
        verts = verts[rng.permutation(len(verts))[:max_vertices]]
    if isinstance(reference, Shape):
        d = np.abs(reference.sdf(verts))
    elif isinstance(reference, TriangleMesh):
        d = mesh_distance(verts, reference)
    else:
        raise TypeError("reference must be a Shape or TriangleMesh")
    return {"mean": float(d.mean()), "max": float(d.max()), "rmse": float(np.sqrt(np.mean(d**2))), "n": len(verts)}
