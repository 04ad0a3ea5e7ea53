"""Frame-to-model camera tracking on the implicit map.

The pose of frame t is factored as ``T_t = T_prev * exp(xi)`` and the
Gauss-Newton solver iterates on the twist ``xi``.  Two residual families
are stacked:

* SDF rows: one per depth point landing in an allocated voxel, residual
  ``mu / sigma`` (dimensionless).  The Jacobian treats sigma as locally
  constant, which keeps the linearization stable even when the uncertainty
  head is off.
* Intensity rows: photometric difference between the current frame and the
  previous one warped through the relative pose, scaled by
  ``sqrt(intensity_weight)``.

Huber reweighting applies to the SDF rows.  Jacobians are validated
against finite differences of the scalar cost in the test-suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTrackingError
from .geometry import (
    OrientedPointCloud,
    Pose,
    RgbdFrame,
    Twist,
    backproject,
    image_gradients,
    projection_jacobian,
    se3_exp,
)
from .network import decode_gradients

SIGMA_MODES = ("probabilistic", "constant_one")


@dataclass
class TrackingConfig:
    intensity_weight: float = 1000.0
    huber_delta: float = 1.345
    max_iters: int = 10
    convergence_eps: float = 1e-5
    max_points: int = 10000
    sigma_mode: str = "probabilistic"
    intensity_budget: int = 2000
    intensity_full_domain: bool = False
    min_sdf_points: int = 50
    cond_limit: float = 1e12
    constant_velocity: bool = False

    def __post_init__(self):
        problems = []
        if self.intensity_weight < 0:
            problems.append("intensity_weight must be >= 0")
        if self.max_iters < 1:
            problems.append("max_iters must be >= 1")
        if self.sigma_mode not in SIGMA_MODES:
            problems.append(f"sigma_mode must be one of {SIGMA_MODES}")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class TrackingResult:
    pose: Pose
    iterations: int
    converged: bool
    failed: bool
    final_cost: float
    sdf_cost: float
    intensity_cost: float
    inlier_fraction: float
    xi: Twist = field(default_factory=Twist.zero)
    trace: list = field(default_factory=list)


class MapField:
    """Queries the decoded SDF distribution of a voxel grid in world units.

    ``query`` returns ``(mu, sigma, grad_mu, valid)`` with mu/sigma in
    voxel-size units and ``grad_mu = d(mu)/d(x_world)`` (1/m); points in
    unallocated voxels are flagged invalid.
    """

    def __init__(self, grid, weights, sigma_mode="probabilistic"):
        self.grid = grid
        self.weights = weights
        self.sigma_mode = sigma_mode
        keys = np.array(sorted(grid.table.keys()), dtype=np.int64).reshape(-1, 3)
        self._packed = _pack_indices(keys) if len(keys) else np.empty(0, dtype=np.int64)
        self._latents = (
            np.stack([grid.table[tuple(k)].latent for k in keys])
            if len(keys)
            else np.zeros((0, grid.latent_dim))
        )

    def query(self, x, want_sigma_grad=False):
        g = self.grid
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        q = (x - g.origin) / g.voxel_size
        idx = np.floor(q).astype(np.int64)
        packed = _pack_indices(idx)
        pos = np.searchsorted(self._packed, packed)
        pos_c = np.clip(pos, 0, max(len(self._packed) - 1, 0))
        valid = len(self._packed) > 0 and np.zeros(n, dtype=bool)
        if len(self._packed):
            valid = self._packed[pos_c] == packed
        else:
            valid = np.zeros(n, dtype=bool)

        mu = np.zeros(n)
        sigma = np.ones(n)
        grad_mu = np.zeros((n, 3))
        grad_sigma = np.zeros((n, 3))
        if valid.any():
            ys = q[valid] - idx[valid] - 0.5
            latents = self._latents[pos_c[valid]]
            outputs = ("mu", "sigma") if want_sigma_grad else ("mu",)
            grads, (m, s) = decode_gradients(ys, latents, self.weights, outputs=outputs)
            mu[valid] = m
            grad_mu[valid] = grads["mu"] / g.voxel_size
            if self.sigma_mode == "probabilistic":
                sigma[valid] = s
                if want_sigma_grad:
                    grad_sigma[valid] = grads["sigma"] / g.voxel_size
        if want_sigma_grad:
            return mu, sigma, grad_mu, grad_sigma, valid
        return mu, sigma, grad_mu, valid


class AnalyticSdfField:
    """Closed-form field for validation: any callable SDF plus sigma."""

    def __init__(self, sdf, grad=None, sigma=1.0, sigma_grad=None, fd_step=1e-6):
        self.sdf = sdf
        self._grad = grad
        self.sigma = sigma
        self._sigma_grad = sigma_grad
        self.fd_step = fd_step

    def _numeric_grad(self, fn, x):
        g = np.zeros_like(x)
        for i in range(3):
            e = np.zeros(3)
            e[i] = self.fd_step
            g[:, i] = (fn(x + e) - fn(x - e)) / (2 * self.fd_step)
        return g

    def query(self, x, want_sigma_grad=False):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        mu = np.asarray(self.sdf(x), dtype=float)
        sigma = (
            np.asarray(self.sigma(x), dtype=float)
            if callable(self.sigma)
            else np.full(n, float(self.sigma))
        )
        grad = self._grad(x) if self._grad else self._numeric_grad(self.sdf, x)
        valid = np.ones(n, dtype=bool)
        if want_sigma_grad:
            if self._sigma_grad:
                sg = self._sigma_grad(x)
            elif callable(self.sigma):
                sg = self._numeric_grad(lambda p: np.asarray(self.sigma(p)), x)
            else:
                sg = np.zeros((n, 3))
            return mu, sigma, grad, sg, valid
        return mu, sigma, grad, valid


def _pack_indices(idx):
    # 21 bits per axis, offset to keep keys non-negative
    off = 1 << 20
    i = idx + off
    return (i[:, 0] << 42) | (i[:, 1] << 21) | i[:, 2]


def huber_weight(r, delta):
    """IRLS weight of the Huber penalty: 1 inside, delta/|r| outside."""
    a = np.abs(r)
    w = np.ones_like(a)
    out = a > delta
    w[out] = delta / a[out]
    return w


def huber_cost(r, delta):
    a = np.abs(r)
    quad = 0.5 * r**2
    lin = delta * (a - 0.5 * delta)
    return np.where(a <= delta, quad, lin)


def sdf_residuals(points, prev_pose: Pose, xi: Twist, field, huber_delta=1.345, min_points=50):
    """Residual/Jacobian rows of the SDF term at the current twist.

    ``points`` are camera-frame points of the tracked frame.  Returns
    ``(r, J, w, n_valid)`` over points landing in defined field regions.
    Raises :class:`DegenerateTrackingError` below ``min_points`` usable
    rows.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    rel = se3_exp(xi)
    q = rel.apply(p)
    x = prev_pose.apply(q)
    mu, sigma, grad_mu, valid = field.query(x)[:4]
    n_valid = int(valid.sum())
    if n_valid < min_points:
        raise DegenerateTrackingError(
            f"only {n_valid} of {len(p)} points fall in the mapped region"
        )
    q = q[valid]
    r = mu[valid] / sigma[valid]
    g_q = (grad_mu[valid] / sigma[valid][:, None]) @ prev_pose.r
    jac = np.concatenate([g_q, np.cross(q, g_q)], axis=1)
    return r, jac, huber_weight(r, huber_delta), n_valid


def select_intensity_pixels(frame: RgbdFrame, budget=2000, full_domain=False):
    """Pick pixels for the photometric term.

    Keeps valid-depth interior pixels; unless ``full_domain``, the highest
    image-gradient-magnitude pixels are kept up to ``budget`` (deterministic
    top-k with row-major tiebreak).  Returns (uv (m,2) float, p_cam (m,3)).
    """
    k = frame.intrinsics
    gu, gv = image_gradients(frame.intensity)
    mag = gu**2 + gv**2
    valid = frame.valid_mask()
    valid[:2, :] = valid[-2:, :] = valid[:, :2] = valid[:, -2:] = False
    vs, us = np.nonzero(valid)
    if len(us) == 0:
        return np.zeros((0, 2)), np.zeros((0, 3))
    if not full_domain and len(us) > budget:
        m = mag[vs, us]
        top = np.argsort(-m, kind="stable")[:budget]
        us, vs = us[top], vs[top]
    d = frame.depth[vs, us]
    p = np.stack([(us - k.cx) * d / k.fx, (vs - k.cy) * d / k.fy, d], axis=1)
    uv = np.stack([us, vs], axis=1).astype(float)
    return uv, p


def intensity_residuals(
    frame_t: RgbdFrame,
    frame_prev: RgbdFrame,
    xi: Twist,
    pixels=None,
    prev_gradients=None,
    budget=2000,
    full_domain=False,
):
    """Photometric rows: warp frame t pixels into frame t-1 and compare.

    Returns ``(r, J)``; both may be empty if no warp lands inside the
    previous image.  ``pixels`` and ``prev_gradients`` can carry per-frame
    precomputations across solver iterations.
    """
    if frame_t.intrinsics != frame_prev.intrinsics:
        raise ValueError("intensity term requires shared intrinsics")
    if pixels is None:
        pixels = select_intensity_pixels(frame_t, budget, full_domain)
    uv, p = pixels
    if len(p) == 0:
        return np.zeros(0), np.zeros((0, 6))
    if prev_gradients is None:
        prev_gradients = image_gradients(frame_prev.intensity)

    k = frame_t.intrinsics
    q = se3_exp(xi).apply(p)
    front = q[:, 2] > 1e-6
    q, uv_t = q[front], uv[front]
    z = q[:, 2]
    warp = np.stack([k.fx * q[:, 0] / z + k.cx, k.fy * q[:, 1] / z + k.cy], axis=1)
    inside = (
        (warp[:, 0] >= 0.5)
        & (warp[:, 0] <= k.width - 1.5)
        & (warp[:, 1] >= 0.5)
        & (warp[:, 1] <= k.height - 1.5)
    )
    if not inside.any():
        return np.zeros(0), np.zeros((0, 6))
    q, uv_t, warp = q[inside], uv_t[inside], warp[inside]

    sampled, grad_img = _sample_intensity(frame_prev.intensity, warp, prev_gradients)
    i_t = frame_t.intensity[uv_t[:, 1].astype(int), uv_t[:, 0].astype(int)]
    r = i_t - sampled

    proj_jac = projection_jacobian(q, k)
    h = np.einsum("ni,nij->nj", grad_img, proj_jac)
    jac = -np.concatenate([h, np.cross(q, h)], axis=1)
    return r, jac


def _sample_intensity(image, uv, gradients):
    from .geometry import bilinear_sample

    return bilinear_sample(image, uv, gradients)


def gauss_newton_step(blocks, cond_limit=1e12):
    """Solve the stacked weighted normal equations; None when degenerate.

    ``blocks`` is a list of ``(r, J, w, scale)``; each block contributes
    ``scale * w_i * J_i^T J_i`` to the normal matrix.
    """
    h = np.zeros((6, 6))
    b = np.zeros(6)
    for r, jac, w, scale in blocks:
        if len(r) == 0:
            continue
        jw = jac * (scale * w)[:, None]
        h += jw.T @ jac
        b -= jw.T @ r
    if not np.all(np.isfinite(h)) or np.linalg.cond(h) > cond_limit:
        return None
    return np.linalg.solve(h, b)


def track(
    frame_t: RgbdFrame,
    frame_prev: RgbdFrame | None,
    prev_pose: Pose,
    field,
    cfg: TrackingConfig = None,
    seed: int = 0,
    init_xi: Twist | None = None,
    cloud: OrientedPointCloud | None = None,
) -> TrackingResult:
    """Estimate the pose of ``frame_t`` against the mapped field.

    Returns ``T_prev * exp(xi)``; on a degenerate normal matrix the result
    carries ``failed=True`` and the previous pose.  Raises
    :class:`DegenerateTrackingError` when too few points land on the map.
    """
    cfg = cfg or TrackingConfig()
    if cloud is None:
        cloud = backproject(frame_t)
    pts = cloud.points
    if len(pts) > cfg.max_points:
        rng = np.random.default_rng([seed, 11])
        pts = pts[rng.permutation(len(pts))[: cfg.max_points]]

    use_intensity = cfg.intensity_weight > 0 and frame_prev is not None
    pixels = prev_grads = None
    if use_intensity:
        pixels = select_intensity_pixels(frame_t, cfg.intensity_budget, cfg.intensity_full_domain)
        prev_grads = image_gradients(frame_prev.intensity)
        if len(pixels[0]) == 0:
            use_intensity = False

    xi = init_xi if init_xi is not None else Twist.zero()
    xi_vec = xi.vector().copy()
    trace = []
    iterations = 0
    converged = False
    n_valid = 0
    for it in range(cfg.max_iters):
        iterations = it + 1
        tw = Twist.from_vector(xi_vec)
        r_s, j_s, w_s, n_valid = sdf_residuals(
            pts, prev_pose, tw, field, cfg.huber_delta, cfg.min_sdf_points
        )
        blocks = [(r_s, j_s, w_s, 1.0)]
        if use_intensity:
            r_i, j_i = intensity_residuals(
                frame_t, frame_prev, tw, pixels=pixels, prev_gradients=prev_grads
            )
            blocks.append((r_i, j_i, np.ones(len(r_i)), cfg.intensity_weight))
        delta = gauss_newton_step(blocks, cfg.cond_limit)
        if delta is None:
            return TrackingResult(
                pose=prev_pose,
                iterations=iterations,
                converged=False,
                failed=True,
                final_cost=float("nan"),
                sdf_cost=float("nan"),
                intensity_cost=float("nan"),
                inlier_fraction=n_valid / max(len(pts), 1),
                xi=Twist.from_vector(xi_vec),
                trace=trace,
            )
        xi_vec += delta
        trace.append(prev_pose.compose(se3_exp(Twist.from_vector(xi_vec))))
        if np.linalg.norm(delta) < cfg.convergence_eps:
            converged = True
            break

    tw = Twist.from_vector(xi_vec)
    r_s, _, _, n_valid = sdf_residuals(pts, prev_pose, tw, field, cfg.huber_delta, cfg.min_sdf_points)
    sdf_cost = float(huber_cost(r_s, cfg.huber_delta).sum())
    intensity_cost = 0.0
    if use_intensity:
        r_i, _ = intensity_residuals(frame_t, frame_prev, tw, pixels=pixels, prev_gradients=prev_grads)
        intensity_cost = float((r_i**2).sum())
    return TrackingResult(
        pose=prev_pose.compose(se3_exp(tw)),
        iterations=iterations,
        converged=converged,
        failed=False,
        final_cost=sdf_cost + cfg.intensity_weight * intensity_cost,
        sdf_cost=sdf_cost,
        intensity_cost=intensity_cost,
        inlier_fraction=n_valid / max(len(pts), 1),
        xi=tw,
        trace=trace,
    )


def sdf_cost_at(points, prev_pose, xi, field, huber_delta=1.345):
    """Scalar SDF-term cost at a twist or relative pose."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    rel = xi if isinstance(xi, Pose) else se3_exp(xi)
    x = prev_pose.apply(rel.apply(p))
    mu, sigma, _, valid = field.query(x)[:4]
    r = mu[valid] / sigma[valid]
    return float(huber_cost(r, huber_delta).sum())


def gd_reference_step(points, prev_pose: Pose, xi: Twist, field, alpha, huber_delta=1.345) -> Twist:
    """One exact-gradient descent step on the SDF term.

    Unlike the solver's linearization this differentiates through sigma as
    well; kept for convergence comparisons, not used in the online loop.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    rel = se3_exp(xi)
    q = rel.apply(p)
    x = prev_pose.apply(q)
    mu, sigma, grad_mu, grad_sigma, valid = field.query(x, want_sigma_grad=True)
    q, mu, sigma = q[valid], mu[valid], sigma[valid]
    grad_mu, grad_sigma = grad_mu[valid], grad_sigma[valid]
    r = mu / sigma
    dr_dx = (grad_mu * sigma[:, None] - grad_sigma * mu[:, None]) / (sigma**2)[:, None]
    g_q = dr_dx @ prev_pose.r
    jac = np.concatenate([g_q, np.cross(q, g_q)], axis=1)
    rho_prime = np.where(np.abs(r) <= huber_delta, r, huber_delta * np.sign(r))
    grad = jac.T @ rho_prime
    new = xi.vector() - alpha * grad
    return Twist.from_vector(new)
