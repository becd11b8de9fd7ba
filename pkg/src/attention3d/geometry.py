"""Rigid poses, pinhole intrinsics, projection and viewing rays.

Convention used everywhere in the package: a pose maps world to camera,
``Xc = R @ X + t``. The camera looks along +Z, image ``u`` grows to the right
and ``v`` grows downwards, pixel (0, 0) is the centre of the top-left pixel.
Images are assumed undistorted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCamera, InputError, NonPositiveDepth


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotvec_to_matrix(w):
    """Rodrigues formula, accurate down to ``|w| = 0``."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def matrix_to_rotvec(R):
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        M = (R + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(M)))
        axis = M[:, i] / np.sqrt(M[i, i])
        return axis * theta
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * theta / (2.0 * np.sin(theta))


def orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose6D:
    """World-to-camera rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InputError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation):
        return cls(rotvec_to_matrix(rotvec), translation)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)):
        """Camera at ``eye`` looking at ``target``; ``up`` is world up (default -Y)."""
        eye = np.asarray(eye, float)
        z = np.asarray(target, float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(-np.asarray(up, float), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def inverse(self):
        return Pose6D(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose6D(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def transform(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def perturb(self, rotvec, dt):
        """Left-multiplied increment: ``R <- exp(rotvec) R``, ``t <- exp(rotvec) t + dt``."""
        dR = rotvec_to_matrix(rotvec)
        return Pose6D(orthonormalize(dR @ self.rotation), dR @ self.translation + np.asarray(dt, float))

    def rotation_distance(self, other):
        return float(np.linalg.norm(matrix_to_rotvec(self.rotation @ other.rotation.T)))

    def center_distance(self, other):
        return float(np.linalg.norm(self.center - other.center))

    def __repr__(self):
        return f"Pose6D(rotvec={np.round(matrix_to_rotvec(self.rotation), 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InputError("principal point outside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self):
        return (self.height, self.width)

    def contains(self, uv, margin=0.0):
        uv = np.asarray(uv, float)
        return (
            (uv[..., 0] >= -0.5 + margin)
            & (uv[..., 0] <= self.width - 0.5 - margin)
            & (uv[..., 1] >= -0.5 + margin)
            & (uv[..., 1] <= self.height - 0.5 - margin)
        )

    def scaled(self, factor):
        return Intrinsics(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)),
        )


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n == 0:
            raise InputError("ray direction must be non-zero")
        object.__setattr__(self, "origin", _frozen(np.asarray(self.origin, float).reshape(3)))
        object.__setattr__(self, "direction", _frozen(d / n))

    def at(self, s):
        return self.origin + s * self.direction

    def distance_to(self, point):
        v = np.asarray(point, float) - self.origin
        return float(np.linalg.norm(v - (v @ self.direction) * self.direction))


def project_points(points, pose, k):
    """Vectorised projection. Returns ``(pixels, depths)``; no depth check."""
    pc = pose.transform(points)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([k.fx * pc[..., 0] / z + k.cx, k.fy * pc[..., 1] / z + k.cy], axis=-1)
    return uv, z


def project(point, pose, k):
    pc = pose.transform(point)
    if pc[2] <= 0:
        raise BehindCamera(f"camera-frame depth {pc[2]:.6g} <= 0")
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def backproject_points(pixels, depths, pose, k):
    pixels = np.asarray(pixels, float)
    depths = np.asarray(depths, float)
    x = (pixels[..., 0] - k.cx) / k.fx * depths
    y = (pixels[..., 1] - k.cy) / k.fy * depths
    pc = np.stack([x, y, depths], axis=-1)
    return (pc - pose.translation) @ pose.rotation


def backproject(pixel, depth, pose, k):
    if not depth > 0:
        raise NonPositiveDepth(f"depth {depth} must be positive")
    return backproject_points(np.asarray(pixel, float), float(depth), pose, k)


def pixel_rays(pixels, pose, k):
    """Unit world-frame directions through ``pixels`` (shape (..., 2))."""
    pixels = np.asarray(pixels, float)
    d = np.stack(
        [(pixels[..., 0] - k.cx) / k.fx, (pixels[..., 1] - k.cy) / k.fy, np.ones(pixels.shape[:-1])],
        axis=-1,
    )
    d = d @ pose.rotation
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(pixel, pose, k):
    return Ray(pose.center, pixel_rays(np.asarray(pixel, float), pose, k))


# --- file formats -----------------------------------------------------------

def write_poses_csv(path, poses):
    """``poses`` is a mapping frame_id -> Pose6D (written in key order)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"])
        for fid, pose in poses.items():
            w.writerow([fid] + [repr(float(x)) for x in pose.rotation.ravel()] + [repr(float(x)) for x in pose.translation])


def read_poses_csv(path):
    poses = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "frame_id" or len(header) != 13:
            raise InputError(f"{path}: not a pose CSV")
        for row in reader:
            vals = [float(x) for x in row[1:]]
            R = orthonormalize(np.array(vals[:9]).reshape(3, 3))
            poses[int(row[0])] = Pose6D(R, vals[9:])
    return poses


def write_intrinsics(path, k):
    Path(path).write_text(
        "".join(f"{name}={getattr(k, name)!r}\n" for name in ("fx", "fy", "cx", "cy", "width", "height"))
    )


def read_intrinsics(path):
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    try:
        return Intrinsics(
            float(values["fx"]), float(values["fy"]), float(values["cx"]), float(values["cy"]),
            int(values["width"]), int(values["height"]),
        )
    except KeyError as exc:
        raise InputError(f"{path}: missing intrinsics key {exc}") from None
