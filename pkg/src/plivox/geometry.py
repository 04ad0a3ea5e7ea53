"""Rigid-body math, pinhole camera model and depth-image geometry.

Conventions used throughout the package:

* A pose maps camera coordinates to world coordinates: ``x_w = R @ x_c + t``.
* Twists are ordered ``(v, omega)``: translational part first.
* Depth images store meters, with 0 marking invalid pixels.
* Image arrays are indexed ``[row, col]`` = ``[v, u]``; pixel ``(u, v)``
  means column u, row v, with the convention that integer coordinates hit
  pixel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedFrameError

_SMALL_ANGLE = 1e-8


def skew(w):
    """3x3 cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform with rotation ``r`` (3x3) and translation ``t`` (3,)."""

    r: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.r @ other.r, self.r @ other.t + self.t)

    def inverse(self) -> "Pose":
        rt = self.r.T
        return Pose(rt, -rt @ self.t)

    def apply(self, points):
        """Transform one point (3,) or a batch (n, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.r.T + self.t

    def rotate(self, vectors):
        v = np.asarray(vectors, dtype=float)
        return v @ self.r.T

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    def is_valid(self, tol=1e-6) -> bool:
        ortho = np.allclose(self.r @ self.r.T, np.eye(3), atol=tol)
        return bool(ortho and abs(np.linalg.det(self.r) - 1.0) < tol)


@dataclass(frozen=True)
class Twist:
    """se(3) tangent vector: translational ``v`` and rotational ``w``."""

    v: np.ndarray
    w: np.ndarray

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(xi) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return Twist(xi[:3].copy(), xi[3:6].copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])


def _rotation_terms(theta):
    # sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with Taylor fallbacks
    if theta < _SMALL_ANGLE:
        return 1.0 - theta**2 / 6.0, 0.5 - theta**2 / 24.0, 1.0 / 6.0 - theta**2 / 120.0
    t2 = theta * theta
    return math.sin(theta) / theta, (1.0 - math.cos(theta)) / t2, (theta - math.sin(theta)) / (t2 * theta)


def se3_exp(xi: Twist) -> Pose:
    """Closed-form exponential map from a twist to a rigid transform."""
    v = np.asarray(xi.v, dtype=float)
    w = np.asarray(xi.w, dtype=float)
    theta = float(np.linalg.norm(w))
    k = skew(w)
    k2 = k @ k
    a, b, c = _rotation_terms(theta)
    r = np.eye(3) + a * k + b * k2
    vmat = np.eye(3) + b * k + c * k2
    return Pose(r, vmat @ v)


def se3_log(pose: Pose) -> Twist:
    """Inverse of :func:`se3_exp`; valid for rotation angles below pi."""
    r = pose.r
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if theta < _SMALL_ANGLE:
        w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    else:
        w = theta / (2.0 * math.sin(theta)) * np.array(
            [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
        )
    k = skew(w)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        vinv = np.eye(3) - 0.5 * k + k2 / 12.0
    else:
        coef = (1.0 - theta * math.cos(theta / 2.0) / (2.0 * math.sin(theta / 2.0))) / theta**2
        vinv = np.eye(3) - 0.5 * k + coef * k2
    return Twist(vinv @ pose.t, w)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        problems = []
        if not (self.fx > 0 and self.fy > 0):
            problems.append("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            problems.append("principal point must lie inside the image")
        if problems:
            raise ValueError("; ".join(problems))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class RgbdFrame:
    """One registered intensity + depth observation.

    ``intensity`` is H x W in [0, 1]; ``depth`` is H x W meters with 0 for
    invalid pixels.  ``color`` is an optional H x W x 3 array in [0, 1] kept
    only when texturing is requested.
    """

    intensity: np.ndarray
    depth: np.ndarray
    intrinsics: Intrinsics
    timestamp: float
    depth_range: tuple[float, float] = (0.1, 8.0)
    color: np.ndarray | None = None

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.intensity.shape != shape or self.depth.shape != shape:
            raise MalformedFrameError(
                f"image shape mismatch: intensity {self.intensity.shape}, "
                f"depth {self.depth.shape}, intrinsics expect {shape}"
            )
        if self.color is not None and self.color.shape != shape + (3,):
            raise MalformedFrameError(f"color shape {self.color.shape} != {shape + (3,)}")

    def valid_mask(self) -> np.ndarray:
        lo, hi = self.depth_range
        return (self.depth >= lo) & (self.depth <= hi)


@dataclass
class OrientedPointCloud:
    """Points with unit outward normals, equal counts."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __len__(self):
        return self.points.shape[0]


def backproject(frame: RgbdFrame) -> OrientedPointCloud:
    """Lift valid depth pixels to camera-frame points with normals.

    Normals come from the cross product of central differences of the
    back-projected neighbors and are flipped so that ``n . x < 0`` (facing
    the camera).  Pixels missing any of the four direct neighbors are
    dropped, so the result can be empty even if the frame has valid depth.
    """
    k = frame.intrinsics
    valid = frame.valid_mask()
    if not valid.any():
        return OrientedPointCloud()

    h, w = frame.depth.shape
    us = np.arange(w, dtype=float)
    vs = np.arange(h, dtype=float)
    uu, vv = np.meshgrid(us, vs)
    z = frame.depth
    with np.errstate(invalid="ignore"):
        px = (uu - k.cx) * z / k.fx
        py = (vv - k.cy) * z / k.fy
    pts = np.stack([px, py, z], axis=-1)

    ok = valid.copy()
    ok[0, :] = ok[-1, :] = ok[:, 0] = ok[:, -1] = False
    ok[1:-1, 1:-1] &= (
        valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
    )
    if not ok.any():
        return OrientedPointCloud()

    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[1:-1, 1:-1] = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv[1:-1, 1:-1] = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(du[ok], dv[ok])
    norms = np.linalg.norm(n, axis=1)
    keep = norms > 1e-12
    n = n[keep] / norms[keep][:, None]
    p = pts[ok][keep]
    flip = np.einsum("ij,ij->i", n, p) > 0
    n[flip] = -n[flip]
    return OrientedPointCloud(p, n)


def project(points, k: Intrinsics):
    """Project camera-frame points to continuous pixel coordinates.

    Returns ``(uv, in_bounds)``.  Out-of-bounds coordinates are returned
    untouched; ``in_bounds`` flags the ones inside the image rectangle.
    Raises ValueError on non-positive depth.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    z = p[:, 2]
    if np.any(z <= 0):
        raise ValueError("projection requires positive depth for every point")
    uv = np.stack([k.fx * p[:, 0] / z + k.cx, k.fy * p[:, 1] / z + k.cy], axis=1)
    inb = (
        (uv[:, 0] >= 0)
        & (uv[:, 0] <= k.width - 1)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] <= k.height - 1)
    )
    if np.asarray(points).ndim == 1:
        return uv[0], bool(inb[0])
    return uv, inb


def projection_jacobian(points, k: Intrinsics):
    """d(uv)/d(point) for camera-frame points, shape (n, 2, 3)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    z = p[:, 2]
    jac = np.zeros((p.shape[0], 2, 3))
    jac[:, 0, 0] = k.fx / z
    jac[:, 0, 2] = -k.fx * p[:, 0] / z**2
    jac[:, 1, 1] = k.fy / z
    jac[:, 1, 2] = -k.fy * p[:, 1] / z**2
    return jac


def image_gradients(image):
    """Per-pixel central-difference gradients ``(d/du, d/dv)``."""
    gv, gu = np.gradient(np.asarray(image, dtype=float))
    return gu, gv


def bilinear_sample(image, uv, gradients=None):
    """Bilinear value and central-difference gradient at continuous uv.

    ``uv`` is (n, 2) or (2,), inside the interior of the image by at least
    half a pixel.  ``gradients`` may carry precomputed
    :func:`image_gradients` output to avoid recomputation; the gradient of
    the value with respect to (u, v) is the bilinear sample of those
    central-difference images.  Raises ValueError on out-of-bounds input.
    """
    img = np.asarray(image, dtype=float)
    single = np.asarray(uv).ndim == 1
    q = np.atleast_2d(np.asarray(uv, dtype=float))
    h, w = img.shape
    if np.any(q[:, 0] < 0.5) or np.any(q[:, 0] > w - 1.5) or np.any(q[:, 1] < 0.5) or np.any(q[:, 1] > h - 1.5):
        raise ValueError("sample coordinates outside the valid interior")

    if gradients is None:
        gradients = image_gradients(img)
    gu, gv = gradients

    u0 = np.floor(q[:, 0]).astype(int)
    v0 = np.floor(q[:, 1]).astype(int)
    fu = q[:, 0] - u0
    fv = q[:, 1] - v0
    w00 = (1 - fu) * (1 - fv)
    w10 = fu * (1 - fv)
    w01 = (1 - fu) * fv
    w11 = fu * fv

    def lerp(a):
        return w00 * a[v0, u0] + w10 * a[v0, u0 + 1] + w01 * a[v0 + 1, u0] + w11 * a[v0 + 1, u0 + 1]

    val = lerp(img)
    grad = np.stack([lerp(gu), lerp(gv)], axis=1)
    if single:
        return float(val[0]), grad[0]
    return val, grad
