"""Analytic signed-distance shapes with exact surface sampling.

Sign convention: negative inside solid matter, positive in free space.
Primitives return exact distances; ``min``/``max`` combinations keep the
correct sign and stay 1-Lipschitz, which is what the sphere-tracing
renderer and the training sampler rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


def rotation_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


class Shape:
    def sdf(self, p):
        raise NotImplementedError

    def sample_surface(self, n, rng):
        """Exact surface points and outward unit normals, shapes (n,3)."""
        raise NotImplementedError

    def area(self):
        raise NotImplementedError

    def sdf_normal(self, p, h=1e-5):
        """Numerical outward normal of the SDF (central differences)."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        g = np.zeros_like(p)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            g[:, i] = (self.sdf(p + e) - self.sdf(p - e)) / (2 * h)
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        return g / np.maximum(norms, 1e-12)


@dataclass
class Sphere(Shape):
    center: np.ndarray
    radius: float

    def sdf(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        return np.linalg.norm(p - self.center, axis=1) - self.radius

    def sample_surface(self, n, rng):
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d, d

    def area(self):
        return 4 * np.pi * self.radius**2


@dataclass
class Box(Shape):
    center: np.ndarray
    half_extents: np.ndarray

    def sdf(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        q = np.abs(p - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(np.max(q, axis=1), 0.0)
        return outside + inside

    def sample_surface(self, n, rng):
        he = np.asarray(self.half_extents, dtype=float)
        face_areas = np.array(
            [he[1] * he[2], he[1] * he[2], he[0] * he[2], he[0] * he[2], he[0] * he[1], he[0] * he[1]]
        )
        probs = face_areas / face_areas.sum()
        faces = rng.choice(6, size=n, p=probs)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * he
        normals = np.zeros((n, 3))
        for f in range(6):
            axis, sign = divmod(f, 2)
            sign = 1.0 if sign == 0 else -1.0
            sel = faces == f
            pts[sel, axis] = sign * he[axis]
            normals[sel, axis] = sign
        return pts + self.center, normals

    def area(self):
        a, b, c = 2 * np.asarray(self.half_extents, dtype=float)
        return 2 * (a * b + b * c + c * a)


@dataclass
class Torus(Shape):
    """Torus around the z axis through ``center``."""

    center: np.ndarray
    major_radius: float
    minor_radius: float

    def sdf(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float)) - self.center
        qxy = np.linalg.norm(p[:, :2], axis=1) - self.major_radius
        return np.sqrt(qxy**2 + p[:, 2] ** 2) - self.minor_radius

    def sample_surface(self, n, rng):
        # rejection in the tube angle to get uniform area density
        out_p = np.empty((0, 3))
        out_n = np.empty((0, 3))
        while out_p.shape[0] < n:
            m = 2 * (n - out_p.shape[0]) + 16
            theta = rng.uniform(0, 2 * np.pi, m)
            phi = rng.uniform(0, 2 * np.pi, m)
            accept = rng.uniform(0, 1, m) < (
                (self.major_radius + self.minor_radius * np.cos(phi))
                / (self.major_radius + self.minor_radius)
            )
            theta, phi = theta[accept], phi[accept]
            ring = np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], axis=1)
            nrm = ring * np.cos(phi)[:, None]
            nrm[:, 2] = np.sin(phi)
            pts = ring * self.major_radius + nrm * self.minor_radius
            out_p = np.vstack([out_p, pts])
            out_n = np.vstack([out_n, nrm])
        return out_p[:n] + self.center, out_n[:n]

    def area(self):
        return 4 * np.pi**2 * self.major_radius * self.minor_radius


@dataclass
class PlanePatch(Shape):
    """Infinite plane SDF; surface sampling restricted to a square patch."""

    point: np.ndarray
    normal: np.ndarray
    extent: float = 2.0

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=float)
        self.normal = self.normal / np.linalg.norm(self.normal)
        a = np.array([1.0, 0.0, 0.0])
        if abs(self.normal @ a) > 0.9:
            a = np.array([0.0, 1.0, 0.0])
        self._u = np.cross(self.normal, a)
        self._u /= np.linalg.norm(self._u)
        self._v = np.cross(self.normal, self._u)

    def sdf(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        return (p - self.point) @ self.normal

    def sample_surface(self, n, rng):
        ab = rng.uniform(-self.extent, self.extent, size=(n, 2))
        pts = self.point + ab[:, :1] * self._u + ab[:, 1:] * self._v
        return pts, np.tile(self.normal, (n, 1))

    def area(self):
        return (2 * self.extent) ** 2


@dataclass
class Transformed(Shape):
    """Rigidly posed and uniformly scaled child shape."""

    base: Shape
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def _to_base(self, p):
        return ((np.atleast_2d(p) - self.translation) @ self.rotation) / self.scale

    def sdf(self, p):
        return self.scale * self.base.sdf(self._to_base(p))

    def sample_surface(self, n, rng):
        pts, nrm = self.base.sample_surface(n, rng)
        return (self.scale * pts) @ self.rotation.T + self.translation, nrm @ self.rotation.T

    def area(self):
        return self.scale**2 * self.base.area()


class _Csg(Shape):
    def __init__(self, *shapes):
        self.shapes = list(shapes)

    def _member_samples(self, n, rng, keep_tol=1e-9):
        areas = np.array([s.area() for s in self.shapes])
        counts = np.maximum((n * areas / areas.sum()).astype(int), 1)
        pts, nrms = [], []
        for s, c in zip(self.shapes, counts):
            p, m = s.sample_surface(int(c), rng)
            on = np.abs(self.sdf(p)) <= keep_tol
            pts.append(p[on])
            nrms.append(m[on])
        return np.vstack(pts), np.vstack(nrms)

    def sample_surface(self, n, rng):
        pts = np.empty((0, 3))
        nrm = np.empty((0, 3))
        for _ in range(64):
            p, m = self._member_samples(max(n, 32), rng)
            pts = np.vstack([pts, p])
            nrm = np.vstack([nrm, m])
            if pts.shape[0] >= n:
                break
        if pts.shape[0] < n:
            raise ValueError("CSG surface sampling failed to find enough points")
        return pts[:n], nrm[:n]

    def area(self):
        return sum(s.area() for s in self.shapes)


class Union(_Csg):
    def sdf(self, p):
        return np.min(np.stack([s.sdf(p) for s in self.shapes]), axis=0)


class Intersection(_Csg):
    def sdf(self, p):
        return np.max(np.stack([s.sdf(p) for s in self.shapes]), axis=0)


class Complement(Shape):
    def __init__(self, base):
        self.base = base

    def sdf(self, p):
        return -self.base.sdf(p)

    def sample_surface(self, n, rng):
        pts, nrm = self.base.sample_surface(n, rng)
        return pts, -nrm

    def area(self):
        return self.base.area()


def difference(a: Shape, b: Shape) -> Shape:
    """Solid a with solid b carved out."""
    return Intersection(a, Complement(b))


@dataclass
class SdfScene:
    """A shape plus shading info for the synthetic renderer."""

    shape: Shape
    light_dir: np.ndarray
    ambient: float = 0.25

    def __post_init__(self):
        self.light_dir = np.asarray(self.light_dir, dtype=float)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)


def build_shape(spec) -> Shape:
    """Construct a shape from a plain-dict spec (see README for the schema)."""
    if isinstance(spec, Shape):
        return spec
    kind = spec["kind"]
    if kind == "sphere":
        return Sphere(np.asarray(spec["center"], dtype=float), float(spec["radius"]))
    if kind == "box":
        return Box(np.asarray(spec["center"], dtype=float), np.asarray(spec["half_extents"], dtype=float))
    if kind == "torus":
        return Torus(
            np.asarray(spec["center"], dtype=float),
            float(spec["major_radius"]),
            float(spec["minor_radius"]),
        )
    if kind == "plane":
        return PlanePatch(
            np.asarray(spec["point"], dtype=float),
            np.asarray(spec["normal"], dtype=float),
            float(spec.get("extent", 2.0)),
        )
    if kind == "union":
        return Union(*[build_shape(s) for s in spec["shapes"]])
    if kind == "intersection":
        return Intersection(*[build_shape(s) for s in spec["shapes"]])
    if kind == "difference":
        return difference(build_shape(spec["a"]), build_shape(spec["b"]))
    if kind == "transform":
        axis = np.asarray(spec.get("axis", [0, 0, 1]), dtype=float)
        angle = float(spec.get("angle", 0.0))
        return Transformed(
            build_shape(spec["base"]),
            rotation_from_axis_angle(axis, angle),
            np.asarray(spec.get("translation", [0, 0, 0]), dtype=float),
            float(spec.get("scale", 1.0)),
        )
    raise ValueError(f"unknown shape kind {kind!r}")


def builtin_scene(name: str) -> SdfScene:
    """Named scenes used by the test-bench and the CLI shortcuts."""
    if name == "room":
        # centered so a camera at the origin looking +z sees corners,
        # floor and both objects: plenty of pose constraints in view
        center = np.array([0.0, 0.2, 0.65])
        walls = difference(
            Box(center, np.array([1.5, 1.3, 1.5])),
            Box(center, np.array([1.3, 1.1, 1.3])),
        )
        ball = Sphere(np.array([0.50, 0.55, 1.20]), 0.35)
        crate = Box(np.array([-0.60, 0.62, 1.05]), np.array([0.30, 0.30, 0.28]))
        return SdfScene(Union(walls, ball, crate), light_dir=np.array([0.35, -0.8, 0.45]))
    if name == "sphere":
        return SdfScene(Sphere(np.zeros(3), 0.35), light_dir=np.array([0.3, -0.7, 0.5]))
    if name == "box":
        return SdfScene(Box(np.zeros(3), np.array([0.4, 0.25, 0.3])), light_dir=np.array([0.3, -0.7, 0.5]))
    raise ValueError(f"unknown builtin scene {name!r}")


def load_scene(path_or_name) -> SdfScene:
    """Load a scene from a JSON file, or resolve a builtin name."""
    s = str(path_or_name)
    try:
        with open(s) as f:
            spec = json.load(f)
    except (OSError, json.JSONDecodeError):
        return builtin_scene(s)
    return SdfScene(
        build_shape(spec["shape"]),
        light_dir=np.asarray(spec.get("light", [0.3, -0.7, 0.5]), dtype=float),
        ambient=float(spec.get("ambient", 0.25)),
    )


def load_shape_manifest(path):
    """Read a corpus manifest: one JSON shape spec per line ('#' comments)."""
    shapes = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                shapes.append(build_shape(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: bad shape spec ({e})") from e
    return shapes
