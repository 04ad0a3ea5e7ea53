"""Prior training: voxel sample generation and the encode/decode loss.

Training operates entirely in voxel-size units.  Each training voxel
carries a pool of exact surface samples (encoder context) and ``n_d``
signed-distance queries labeled with the exact analytic SDF.  The loss for
one voxel is the summed Gaussian negative log likelihood of the query
labels under the decoded distribution, with the context pooled through the
encoder, plus an l2 penalty of weight ``delta`` on the latent norm.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import PlivoxError
from .network import (
    MlpWeights,
    accumulate_grads,
    decode_batch,
    encode_points,
    gaussian_nll,
    init_weights,
    save_weights,
    voxel_loss_and_grads,
    zero_like_grads,
)
from .shapes import (
    Box,
    PlanePatch,
    Shape,
    Sphere,
    Torus,
    Transformed,
    Union,
    random_rotation,
)


class TrainingDiverged(PlivoxError):
    """Loss became non-finite; carries the offending step for diagnosis."""


@dataclass
class TrainVoxelSample:
    """Training data for one voxel, all in voxel-local units.

    ``surface`` is the (m, 6) pool of exact on-surface (y, n) rows used as
    encoder context (inside the voxel cube); ``queries``/(n_d, 3) over the
    doubled cube and ``targets``/(n_d,) are the decoder supervision.
    Contexts for a training step are drawn from the pool with a per-epoch
    size in [16, 128].
    """

    surface: np.ndarray
    queries: np.ndarray
    targets: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def draw_context(self, rng, lo=16, hi=128, density_skew=3.0):
        """Random-size context draw with randomized sampling density.

        Camera-projected points are never uniform over a patch (distance
        and grazing angle skew the density), so training contexts are drawn
        with a random exponential tilt across the voxel to make the pooled
        latent robust to it.
        """
        n = int(rng.integers(lo, hi + 1))
        m = self.surface.shape[0]
        if density_skew > 0:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            alpha = rng.uniform(0.0, density_skew)
            logits = alpha * (self.surface[:, :3] @ direction)
            p = np.exp(logits - logits.max())
            p /= p.sum()
            idx = rng.choice(m, size=n, p=p)
        else:
            idx = rng.integers(0, m, size=n)
        return self.surface[idx]


@dataclass
class TrainConfig:
    delta: float = 1e-2
    lr: float = 1e-3
    lr_decay: float = 0.95  # multiplicative, per epoch
    batch: int = 16
    epochs: int = 20
    n_d: int = 4096
    samples_per_step: int = 256
    voxel_size: float = 1.0
    surface_samples_per_shape: int = 16384
    max_voxels_per_shape: int = 20
    min_surface_points: int = 32
    pool_cap: int = 256
    jitter_pos: float = 0.01
    jitter_normal_deg: float = 5.0
    query_jitter: float = 0.01
    density_skew: float = 3.0
    aug_taper: float = 1.0  # fraction of epochs with augmentation active
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.delta <= 0 or self.lr < 0:
            raise ValueError("delta must be positive and lr non-negative")


def default_corpus(n_shapes: int = 48, seed: int = 0):
    """Procedurally generated primitive corpus with pose/scale variation.

    Mixes convex primitives with wall-like slabs and concave corners so
    that both object surfaces and room interiors are in-distribution.
    """
    rng = np.random.default_rng(seed)
    shapes = []
    kinds = ["sphere", "box", "torus", "plane", "union", "corner", "box", "plane"]
    for i in range(n_shapes):
        kind = kinds[i % len(kinds)]
        if kind == "sphere":
            shapes.append(Sphere(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.7, 2.4)))
        elif kind == "box":
            base = Box(np.zeros(3), rng.uniform(0.5, 1.6, 3))
            shapes.append(Transformed(base, random_rotation(rng), rng.uniform(-0.5, 0.5, 3)))
        elif kind == "torus":
            base = Torus(np.zeros(3), rng.uniform(0.9, 1.7), rng.uniform(0.3, 0.6))
            shapes.append(Transformed(base, random_rotation(rng), rng.uniform(-0.5, 0.5, 3)))
        elif kind == "plane":
            n = rng.standard_normal(3)
            shapes.append(PlanePatch(rng.uniform(-0.5, 0.5, 3), n, extent=3.0))
        elif kind == "slab":
            # a thin wall seen from both sides
            he = np.array([rng.uniform(1.5, 2.5), rng.uniform(1.5, 2.5), rng.uniform(0.08, 0.3)])
            base = Box(np.zeros(3), he)
            shapes.append(Transformed(base, random_rotation(rng), rng.uniform(-0.3, 0.3, 3)))
        elif kind == "corner":
            # concave junction of two or three wall patches
            n1 = np.array([1.0, 0.0, 0.0])
            n2 = np.array([0.0, rng.choice([-1.0, 1.0]), rng.uniform(-0.3, 0.3)])
            members = [
                PlanePatch(np.zeros(3), n1, extent=2.5),
                PlanePatch(np.zeros(3), n2, extent=2.5),
            ]
            if rng.uniform() < 0.5:
                members.append(PlanePatch(np.zeros(3), np.array([0.0, 0.1 * rng.standard_normal(), 1.0]), extent=2.5))
            base = Union(*members)
            shapes.append(Transformed(base, random_rotation(rng), rng.uniform(-0.3, 0.3, 3)))
        else:
            a = Sphere(rng.uniform(-0.8, 0.8, 3), rng.uniform(0.6, 1.4))
            b = Transformed(
                Box(np.zeros(3), rng.uniform(0.4, 1.2, 3)),
                random_rotation(rng),
                rng.uniform(-0.8, 0.8, 3),
            )
            shapes.append(Union(a, b))
    return shapes


def sample_voxel(
    shape: Shape,
    center,
    voxel_size: float = 1.0,
    n_d: int = 4096,
    rng=None,
    surface_pool=None,
    pool_cap: int = 256,
    min_surface: int = 16,
) -> TrainVoxelSample:
    """Build the training sample for the voxel centered at ``center``.

    The encoder context comes from exact surface samples inside the voxel
    cube itself.  Decoder queries cover the voxel's *doubled* cube
    (local coordinates up to [-1, 1]^3), because the mesher blends decoded
    values over overlapping doubled domains: 45% Gaussian-perturbed surface
    points at sigma 0.05, 45% at sigma 0.01 (voxel units) and 10% uniform
    over the doubled cube, each labeled with the exact analytic SDF at its
    final position.  Raises ValueError when the voxel cube does not meet
    the shape's surface.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    center = np.asarray(center, dtype=float)
    if surface_pool is None:
        pts_list, nrm_list = [], []
        total = 0
        for _ in range(20):
            p, m = shape.sample_surface(8192, rng)
            near = np.all(np.abs(p - center) <= voxel_size, axis=1)
            pts_list.append(p[near])
            nrm_list.append(m[near])
            total += int(np.all(np.abs(p[near] - center) <= voxel_size / 2, axis=1).sum())
            if total >= max(min_surface * 8, pool_cap):
                break
        near_pts = np.vstack(pts_list)
        near_nrm = np.vstack(nrm_list)
    else:
        p, m = surface_pool
        near = np.all(np.abs(p - center) <= voxel_size, axis=1)
        near_pts, near_nrm = p[near], m[near]
    inside = np.all(np.abs(near_pts - center) <= voxel_size / 2, axis=1)
    pts, nrm = near_pts[inside], near_nrm[inside]
    if pts.shape[0] < min_surface:
        raise ValueError(
            f"voxel at {center} does not meet the surface "
            f"({pts.shape[0]} surface samples, need {min_surface})"
        )
    if pts.shape[0] > pool_cap:
        keep = rng.permutation(pts.shape[0])[:pool_cap]
        pts, nrm = pts[keep], nrm[keep]
    surface = np.concatenate([(pts - center) / voxel_size, nrm], axis=1)

    # near-surface seeds: favor the core cube (where tracking queries run)
    # but keep the shell covered for the mesher's doubled-domain blending
    ys_all = (near_pts - center) / voxel_size
    core_mask = np.all(np.abs(ys_all) <= 0.5, axis=1)
    ys_core = ys_all[core_mask]
    ys_shell = ys_all[~core_mask] if (~core_mask).any() else ys_core
    n_near = int(round(0.45 * n_d))
    n_uni = n_d - 2 * n_near
    parts = []
    for sigma, count in ((0.05, n_near), (0.01, n_near)):
        got = np.empty((0, 3))
        while got.shape[0] < count:
            from_core = rng.uniform(size=2 * count) < 0.6
            base = np.where(
                from_core[:, None],
                ys_core[rng.integers(0, ys_core.shape[0], size=2 * count)],
                ys_shell[rng.integers(0, ys_shell.shape[0], size=2 * count)],
            )
            cand = base + rng.normal(0.0, sigma, size=base.shape)
            ok = np.all(np.abs(cand) <= 1.0, axis=1)
            got = np.vstack([got, cand[ok]])
        parts.append(got[:count])
    parts.append(rng.uniform(-1.0, 1.0, size=(n_uni, 3)))
    queries = np.vstack(parts)
    targets = shape.sdf(queries * voxel_size + center) / voxel_size
    return TrainVoxelSample(surface, queries, targets, center=center)


def corpus_voxel_samples(shapes, cfg: TrainConfig, seed=None):
    """Voxelize every corpus shape into training samples.

    Each shape gets its own randomly shifted voxel grid so surfaces cut
    voxels at varied offsets.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    samples = []
    for shape in shapes:
        pts, nrm = shape.sample_surface(cfg.surface_samples_per_shape, rng)
        shift = rng.uniform(0.0, cfg.voxel_size, 3)
        idx = np.floor((pts - shift) / cfg.voxel_size).astype(int)
        keys, counts = np.unique(idx, axis=0, return_counts=True)
        order = np.argsort(-counts, kind="stable")
        taken = 0
        for j in order:
            if taken >= cfg.max_voxels_per_shape:
                break
            if counts[j] < cfg.min_surface_points:
                break
            center = shift + (keys[j] + 0.5) * cfg.voxel_size
            try:
                s = sample_voxel(
                    shape,
                    center,
                    cfg.voxel_size,
                    n_d=cfg.n_d,
                    rng=rng,
                    surface_pool=(pts, nrm),
                    pool_cap=cfg.pool_cap,
                    min_surface=cfg.min_surface_points,
                )
            except ValueError:
                continue
            samples.append(s)
            taken += 1
    return samples


def augment_context(context, rng, jitter_pos=0.01, jitter_normal_deg=5.0):
    """Position jitter plus bounded random rotation of the normals."""
    ctx = context.copy()
    ctx[:, :3] += rng.normal(0.0, jitter_pos, size=(ctx.shape[0], 3))
    if jitter_normal_deg > 0:
        max_rad = math.radians(jitter_normal_deg)
        axes = rng.standard_normal((ctx.shape[0], 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        angles = rng.uniform(0.0, max_rad, ctx.shape[0])
        n = ctx[:, 3:]
        # Rodrigues per row
        k_cross_n = np.cross(axes, n)
        k_dot_n = np.einsum("ij,ij->i", axes, n)[:, None]
        cos_a = np.cos(angles)[:, None]
        sin_a = np.sin(angles)[:, None]
        ctx[:, 3:] = n * cos_a + k_cross_n * sin_a + axes * k_dot_n * (1 - cos_a)
        ctx[:, 3:] /= np.linalg.norm(ctx[:, 3:], axis=1, keepdims=True)
    return ctx


def cnp_loss(sample: TrainVoxelSample, weights: MlpWeights, delta: float = 1e-2, context=None):
    """Exact per-voxel loss: summed Gaussian NLL + delta * ||latent||^2."""
    if sample.surface.shape[0] == 0 or sample.queries.shape[0] == 0:
        raise ValueError("sample must have non-empty context and queries")
    ctx = sample.surface if context is None else context
    latent = encode_points(ctx, weights)
    mu, sigma = decode_batch(sample.queries, np.tile(latent, (sample.queries.shape[0], 1)), weights)
    nll = gaussian_nll(sample.targets.astype(weights.dtype), mu, sigma)
    return float(nll.sum()) + delta * float(latent @ latent)


class Adam:
    """Adam over a flat list of parameter arrays."""

    def __init__(self, arrays, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays, grads):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            a -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_arrays(self):
        return {"t": np.array(self.t)} | {f"m{i}": m for i, m in enumerate(self.m)} | {
            f"v{i}": v for i, v in enumerate(self.v)
        }


def _grads_as_arrays(enc_grads, dec_grads):
    out = []
    for w, b in enc_grads + dec_grads:
        out += [w, b]
    return out


def train(
    shapes,
    cfg: TrainConfig,
    weights: MlpWeights | None = None,
    samples=None,
    checkpoint_dir=None,
    curve_path=None,
    log=None,
):
    """Train encoder and decoder jointly; returns (weights, loss curve).

    Deterministic for a fixed config seed.  The loss curve is a list of
    dicts with per-epoch means; with ``epochs == 0`` the initialization is
    returned untouched.  Raises :class:`TrainingDiverged` on non-finite
    loss.
    """
    dtype = np.dtype(cfg.dtype)
    if weights is None:
        weights = init_weights(seed=cfg.seed, dtype=dtype)
    elif weights.dtype != dtype:
        weights = weights.astype(dtype)
    else:
        weights = weights.copy()
    if samples is None:
        if not shapes:
            raise ValueError("corpus must contain at least one shape")
        samples = corpus_voxel_samples(shapes, cfg)
    if not samples:
        raise ValueError("corpus produced no training voxels")

    arrays = weights.arrays()
    opt = Adam(arrays, lr=cfg.lr)
    curve = []
    n_layers_enc = len(weights.encoder)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * cfg.lr_decay**epoch
        # anneal the input augmentation for the final stretch so the field
        # settles on clean geometry
        augment = epoch < cfg.aug_taper * cfg.epochs
        jp = cfg.jitter_pos if augment else 0.0
        jn = cfg.jitter_normal_deg if augment else 0.0
        skew = cfg.density_skew if augment else 0.0
        rng = np.random.default_rng([cfg.seed, 7, epoch])
        order = rng.permutation(len(samples))
        sums = {"nll": 0.0, "reg": 0.0, "terms": 0, "voxels": 0}
        for start in range(0, len(order), cfg.batch):
            batch = order[start : start + cfg.batch]
            total = zero_like_grads(weights.encoder) + zero_like_grads(weights.decoder)
            for si in batch:
                s = samples[si]
                ctx = augment_context(s.draw_context(rng, density_skew=skew), rng, jp, jn)
                # query jitter keeps the stored exact labels: it smooths the
                # learned field, trading surface sharpness for robustness to
                # off-distribution fusion inputs
                pick = rng.integers(0, s.queries.shape[0], size=cfg.samples_per_step)
                qs = s.queries[pick]
                if augment and cfg.query_jitter > 0:
                    qs = qs + rng.normal(0.0, cfg.query_jitter, size=qs.shape)
                ts = s.targets[pick]
                loss, nll_sum, eg, dg = voxel_loss_and_grads(ctx, qs, ts, weights, cfg.delta)
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, voxel {si}: "
                        f"nll_sum={nll_sum}, context={ctx.shape}, lr={cfg.lr}"
                    )
                accumulate_grads(total, eg + dg, scale=1.0 / len(batch))
                sums["nll"] += nll_sum
                sums["reg"] += loss - nll_sum
                sums["terms"] += len(pick)
                sums["voxels"] += 1
            opt.step(arrays, _grads_as_arrays(total[:n_layers_enc], total[n_layers_enc:]))
        row = {
            "epoch": epoch,
            "mean_loss": sums["nll"] / sums["terms"] + sums["reg"] / sums["voxels"],
            "mean_nll": sums["nll"] / sums["terms"],
            "mean_reg": sums["reg"] / sums["voxels"],
        }
        curve.append(row)
        if log:
            log(f"epoch {epoch}: nll/term {row['mean_nll']:.4f} reg {row['mean_reg']:.5f}")
        if checkpoint_dir:
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_weights(weights, os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.weights"))
            np.savez(
                os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.adam.npz"),
                **opt.state_arrays(),
            )
    if curve_path:
        write_curve(curve, curve_path)
    return weights, curve


def write_curve(curve, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss", "mean_nll", "mean_reg"])
        for row in curve:
            w.writerow([row["epoch"], repr(row["mean_loss"]), repr(row["mean_nll"]), repr(row["mean_reg"])])


def coverage_table(targets, mu, sigma, ks=(1, 2, 3)):
    """Empirical coverage of |target - mu| <= k sigma vs Gaussian nominals."""
    targets = np.asarray(targets, dtype=float)
    if targets.size == 0:
        raise ValueError("empty evaluation set")
    err = np.abs(targets - np.asarray(mu, dtype=float))
    sigma = np.asarray(sigma, dtype=float)
    nominal = {1: 0.6826894921370859, 2: 0.9544997361036416, 3: 0.9973002039367398}
    rows = []
    for k in ks:
        rows.append(
            {
                "k": k,
                "nominal": nominal.get(k, float("nan")),
                "coverage": float(np.mean(err <= k * sigma)),
                "n": int(targets.size),
            }
        )
    return rows


def calibration_report(weights: MlpWeights, samples, ks=(1, 2, 3)):
    """Coverage of the decoded uncertainty on held-out voxel samples.

    Returns ``{"rows": [...], "over_conservative": bool}``; the flag fires
    when 1-sigma coverage reaches 99%, i.e. the predictor claims far less
    confidence than it has.
    """
    if not samples:
        raise ValueError("held-out sample set is empty")
    t_all, mu_all, sg_all = [], [], []
    for s in samples:
        latent = encode_points(s.surface, weights)
        mu, sigma = decode_batch(s.queries, np.tile(latent, (s.queries.shape[0], 1)), weights)
        t_all.append(s.targets)
        mu_all.append(mu)
        sg_all.append(sigma)
    rows = coverage_table(np.concatenate(t_all), np.concatenate(mu_all), np.concatenate(sg_all), ks)
    one_sigma = next((r for r in rows if r["k"] == 1), rows[0])
    return {"rows": rows, "over_conservative": one_sigma["coverage"] >= 0.99}
