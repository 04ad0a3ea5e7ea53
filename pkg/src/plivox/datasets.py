"""Dataset ingestion and trajectory files (TUM RGB-D layout).

Directory layout::

    rgb/*.png            8-bit grayscale or color
    depth/*.png          16-bit, meters = value / 5000
    associations.txt     "t_rgb rgb/... t_depth depth/..." per line
    intrinsics.txt       "fx fy cx cy width height"
    groundtruth.txt      optional, "t tx ty tz qx qy qz qw" per line

Floats in text files are written with ``repr`` so parsing them back yields
the same doubles; files we wrote round-trip byte for byte.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import FileFormatError
from .geometry import Intrinsics, Pose, RgbdFrame

DEPTH_SCALE = 5000.0
GRAY_COEFFS = (0.299, 0.587, 0.114)  # ITU-R 601


def quat_from_rotation(r) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) with qw >= 0."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            w = (r[2, 1] - r[1, 2]) / s
            x = 0.25 * s
            y = (r[0, 1] + r[1, 0]) / s
            z = (r[0, 2] + r[2, 0]) / s
        elif i == 1:
            s = np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2
            w = (r[0, 2] - r[2, 0]) / s
            x = (r[0, 1] + r[1, 0]) / s
            y = 0.25 * s
            z = (r[1, 2] + r[2, 1]) / s
        else:
            s = np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2
            w = (r[1, 0] - r[0, 1]) / s
            x = (r[0, 2] + r[2, 0]) / s
            y = (r[1, 2] + r[2, 1]) / s
            z = 0.25 * s
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_from_quat(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass
class Trajectory:
    """Timestamped poses, strictly increasing timestamps.

    ``quats`` caches the on-disk quaternion of each pose so re-saving a
    loaded trajectory reproduces the file bytes.
    """

    timestamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    quats: list = field(default_factory=list)

    def append(self, timestamp: float, pose: Pose, quat=None):
        if self.timestamps and timestamp <= self.timestamps[-1]:
            raise ValueError("timestamps must be strictly increasing")
        self.timestamps.append(float(timestamp))
        self.poses.append(pose)
        self.quats.append(np.asarray(quat, dtype=float) if quat is not None else None)

    def __len__(self):
        return len(self.timestamps)

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)


def save_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose, q in zip(traj.timestamps, traj.poses, traj.quats):
            if q is None:
                q = quat_from_rotation(pose.r)
            vals = [t, *pose.t, *q]
            f.write(" ".join(repr(float(v)) for v in vals) + "\n")


def load_trajectory(path) -> Trajectory:
    traj = Trajectory()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FileFormatError(
                    f"{path}:{lineno}: expected 8 fields, got {len(parts)}", kind="format"
                )
            try:
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise FileFormatError(f"{path}:{lineno}: {e}", kind="format") from e
            t = vals[0]
            pos = np.array(vals[1:4])
            quat = np.array(vals[4:8])
            traj.append(t, Pose(rotation_from_quat(quat), pos), quat=quat)
    return traj


def save_tum_sequence(frames, dirpath, trajectory: Trajectory | None = None) -> None:
    os.makedirs(os.path.join(dirpath, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(dirpath, "depth"), exist_ok=True)
    k = frames[0].intrinsics
    with open(os.path.join(dirpath, "intrinsics.txt"), "w") as f:
        f.write(
            " ".join(repr(float(v)) for v in (k.fx, k.fy, k.cx, k.cy))
            + f" {k.width} {k.height}\n"
        )
    assoc_lines = []
    for i, frame in enumerate(frames):
        rgb_rel = f"rgb/{i:06d}.png"
        depth_rel = f"depth/{i:06d}.png"
        if frame.color is not None:
            arr = np.clip(np.round(frame.color * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(os.path.join(dirpath, rgb_rel))
        else:
            arr = np.clip(np.round(frame.intensity * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(os.path.join(dirpath, rgb_rel))
        d16 = np.clip(np.round(frame.depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)
        Image.fromarray(d16).save(os.path.join(dirpath, depth_rel))
        ts = repr(float(frame.timestamp))
        assoc_lines.append(f"{ts} {rgb_rel} {ts} {depth_rel}\n")
    with open(os.path.join(dirpath, "associations.txt"), "w") as f:
        f.writelines(assoc_lines)
    if trajectory is not None:
        save_trajectory(trajectory, os.path.join(dirpath, "groundtruth.txt"))


def load_intrinsics(dirpath) -> Intrinsics:
    path = os.path.join(dirpath, "intrinsics.txt")
    if not os.path.exists(path):
        raise FileFormatError(f"missing {path}", kind="format")
    with open(path) as f:
        parts = f.read().split()
    fx, fy, cx, cy = (float(p) for p in parts[:4])
    return Intrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5]))


def load_tum_sequence(
    dirpath,
    intrinsics: Intrinsics | None = None,
    depth_range=(0.1, 8.0),
    keep_color: bool = False,
):
    """Load frames (timestamp order) and the ground-truth trajectory if any.

    Bad image files are skipped with a warning; a missing association file
    is an error.
    """
    assoc = None
    for name in ("associations.txt", "association.txt", "assoc.txt"):
        cand = os.path.join(dirpath, name)
        if os.path.exists(cand):
            assoc = cand
            break
    if assoc is None:
        raise FileFormatError(f"no association file in {dirpath}", kind="format")
    if intrinsics is None:
        intrinsics = load_intrinsics(dirpath)

    entries = []
    with open(assoc) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FileFormatError(
                    f"{assoc}:{lineno}: expected 4 fields, got {len(parts)}", kind="format"
                )
            t1, p1, t2, p2 = parts
            if "depth" in p1 and "depth" not in p2:
                t_rgb, rgb_rel, t_depth, depth_rel = t2, p2, t1, p1
            else:
                t_rgb, rgb_rel, t_depth, depth_rel = t1, p1, t2, p2
            entries.append((float(t_rgb), rgb_rel, float(t_depth), depth_rel))
    entries.sort(key=lambda e: e[0])

    frames = []
    for t_rgb, rgb_rel, _, depth_rel in entries:
        try:
            rgb_img = Image.open(os.path.join(dirpath, rgb_rel))
            rgb_arr = np.asarray(rgb_img)
            depth_img = Image.open(os.path.join(dirpath, depth_rel))
            depth_arr = np.asarray(depth_img)
        except (OSError, SyntaxError) as e:
            warnings.warn(f"skipping frame at t={t_rgb}: {e}")
            continue
        depth = depth_arr.astype(float) / DEPTH_SCALE
        color = None
        if rgb_arr.ndim == 3:
            c = rgb_arr.astype(float) / 255.0
            intensity = GRAY_COEFFS[0] * c[:, :, 0] + GRAY_COEFFS[1] * c[:, :, 1] + GRAY_COEFFS[2] * c[:, :, 2]
            if keep_color:
                color = c[:, :, :3]
        else:
            intensity = rgb_arr.astype(float) / 255.0
            if keep_color:
                color = np.repeat(intensity[:, :, None], 3, axis=2)
        frames.append(
            RgbdFrame(intensity, depth, intrinsics, t_rgb, depth_range=depth_range, color=color)
        )

    gt = None
    gt_path = os.path.join(dirpath, "groundtruth.txt")
    if os.path.exists(gt_path):
        gt = load_trajectory(gt_path)
    return frames, gt
