"""Analytic scenes, ray-traced RGB-D frames and simulated gaze sessions with exact ground truth.

Scene and session specs are JSON documents::

    {"bounds": [[x0,y0,z0],[x1,y1,z1]],
     "texture_cell": 0.04, "seed": 0,
     "primitives": [{"type": "sphere", "center": [..], "radius": r},
                    {"type": "box", "center": [..], "half_extents": [..]},
                    {"type": "patch", "corners": [[..],[..],[..],[..]]}],
     "logos": [{"id": "A", "corners": [[..] x4], "seed": 1, "size": [h, w]}]}

Patch corners run c0 -> c1 -> c2 -> c3 around a parallelogram.  Logo
corners map the texture's top-left, top-right, bottom-right and
bottom-left pixels.  Sessions list a camera trajectory, a gaze program and
noise settings (see ``SessionSpec``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .errors import CameraInsideGeometry, ConfigError, TargetBehindCamera
from .gaze import GazeSample, write_gaze_csv
from .geometry import Intrinsics, Pose6D, pixel_rays, project_points, write_intrinsics, write_poses_csv


# -- primitives -------------------------------------------------------------

@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, o, d):
        oc = o - self.center
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        ok = disc >= 0
        s = np.sqrt(np.where(ok, disc, 0.0))
        t0, t1 = -b - s, -b + s
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        return np.where(ok, t, np.inf)

    def contains(self, p):
        return np.linalg.norm(np.asarray(p) - self.center) < self.radius

    def distance(self, p):
        return np.abs(np.linalg.norm(p - self.center, axis=-1) - self.radius)

    def to_dict(self):
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius}


@dataclass
class Box:
    center: np.ndarray
    half_extents: np.ndarray

    def intersect(self, o, d):
        lo, hi = self.center - self.half_extents, self.center + self.half_extents
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1, t2 = (lo - o) * inv, (hi - o) * inv
        t1 = np.nan_to_num(t1, nan=-np.inf)
        t2 = np.nan_to_num(t2, nan=np.inf)
        tn = np.minimum(t1, t2).max(1)
        tf = np.maximum(t1, t2).min(1)
        t = np.where(tn > 1e-9, tn, tf)
        return np.where((tf >= tn) & (tf > 1e-9), t, np.inf)

    def contains(self, p):
        return bool(np.all(np.abs(np.asarray(p) - self.center) < self.half_extents))

    def distance(self, p):
        q = np.abs(p - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        inside = np.minimum(q.max(-1), 0)
        return np.abs(outside + inside)

    def to_dict(self):
        return {"type": "box", "center": self.center.tolist(), "half_extents": self.half_extents.tolist()}


@dataclass
class PlanePatch:
    """Parallelogram ``origin + a*u + b*v`` with ``a, b`` in [0, 1]."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def from_corners(cls, corners):
        c = np.asarray(corners, float)
        if c.shape != (4, 3) or np.linalg.norm(c[0] + c[2] - c[1] - c[3]) > 1e-9:
            raise ConfigError("patch corners must form a parallelogram c0 c1 c2 c3")
        return cls(c[0], c[1] - c[0], c[3] - c[0])

    @property
    def corners(self):
        return np.array([self.origin, self.origin + self.u, self.origin + self.u + self.v, self.origin + self.v])

    @property
    def normal(self):
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def center(self):
        return self.origin + 0.5 * (self.u + self.v)

    def params(self, p):
        """(a, b) coordinates of points in the patch plane."""
        guu, guv, gvv = self.u @ self.u, self.u @ self.v, self.v @ self.v
        q = p - self.origin
        ru, rv = q @ self.u, q @ self.v
        det = guu * gvv - guv * guv
        return np.stack([(gvv * ru - guv * rv) / det, (guu * rv - guv * ru) / det], -1)

    def intersect(self, o, d):
        n = self.normal
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.origin - o) @ n) / den
        t = np.where(np.abs(den) > 1e-15, t, np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        ab = self.params(p)
        inside = np.all((ab >= 0) & (ab <= 1), axis=1)
        return np.where(inside, t, np.inf)

    def contains(self, p):
        return False

    def distance(self, p):
        return np.abs((p - self.origin) @ self.normal)

    def to_dict(self):
        return {"type": "patch", "corners": self.corners.tolist()}


def _primitive(d):
    kind = d.get("type")
    if kind == "sphere":
        return Sphere(np.asarray(d["center"], float), float(d["radius"]))
    if kind == "box":
        return Box(np.asarray(d["center"], float), np.asarray(d["half_extents"], float))
    if kind == "patch":
        return PlanePatch.from_corners(d["corners"])
    raise ConfigError(f"unknown primitive type {kind!r}")


# -- logos ------------------------------------------------------------------

def make_logo_texture(seed, size=(120, 168), n_shapes=90):
    """High-contrast procedural logo: blocks, discs and bars inside a frame on white, lightly blurred."""
    rng = np.random.default_rng(seed)
    h, w = size
    img = Image.new("RGB", (w, h), (245, 245, 245))
    draw = ImageDraw.Draw(img)
    palette = [tuple(int(c) for c in rng.integers(0, 180, 3)) for _ in range(4)] + [(20, 20, 20)]
    draw.rectangle([2, 2, w - 3, h - 3], outline=palette[-1], width=3)
    for _ in range(n_shapes):
        kind = rng.integers(0, 3)
        x0, y0 = rng.integers(6, w - 14), rng.integers(6, h - 14)
        sw, sh = rng.integers(5, 18), rng.integers(5, 18)
        col = palette[rng.integers(0, len(palette))]
        box = [int(x0), int(y0), int(min(x0 + sw, w - 6)), int(min(y0 + sh, h - 6))]
        if kind == 0:
            draw.rectangle(box, fill=col)
        elif kind == 1:
            draw.ellipse(box, fill=col)
        else:
            draw.line([box[0], box[1], box[2], box[3]], fill=col, width=int(rng.integers(2, 4)))
    img = img.filter(ImageFilter.GaussianBlur(0.8))
    return np.asarray(img, dtype=np.uint8)


@dataclass
class LogoPlacement:
    logo_id: str
    patch: PlanePatch
    texture: np.ndarray
    seed: int = 0

    def to_dict(self):
        return {"id": self.logo_id, "corners": self.patch.corners.tolist(), "seed": self.seed,
                "size": list(self.texture.shape[:2])}


# -- scene ------------------------------------------------------------------

@dataclass
class SceneSpec:
    primitives: list
    logos: list = field(default_factory=list)
    bounds: np.ndarray = None
    texture_cell: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.bounds is None:
            self.bounds = np.array([[-10.0] * 3, [10.0] * 3])
        self.bounds = np.asarray(self.bounds, float)

    @classmethod
    def from_dict(cls, d):
        known = {"primitives", "logos", "bounds", "texture_cell", "seed"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown scene keys: {sorted(extra)}")
        logos = []
        for L in d.get("logos", []):
            seed = int(L.get("seed", 0))
            size = tuple(L.get("size", (120, 168)))
            logos.append(LogoPlacement(str(L["id"]), PlanePatch.from_corners(L["corners"]),
                                       make_logo_texture(seed, size), seed))
        scene = cls([_primitive(p) for p in d.get("primitives", [])], logos, d.get("bounds"),
                    float(d.get("texture_cell", 0.04)), int(d.get("seed", 0)))
        scene.validate()
        return scene

    def validate(self):
        lo, hi = self.bounds
        for p in self.primitives:
            pts = p.corners if isinstance(p, PlanePatch) else (
                np.array([p.center - p.radius, p.center + p.radius]) if isinstance(p, Sphere)
                else np.array([p.center - p.half_extents, p.center + p.half_extents]))
            if np.any(pts < lo - 1e-9) or np.any(pts > hi + 1e-9):
                raise ConfigError("primitive outside the declared bounds")

    def to_dict(self):
        return {"bounds": self.bounds.tolist(), "texture_cell": self.texture_cell, "seed": self.seed,
                "primitives": [p.to_dict() for p in self.primitives], "logos": [L.to_dict() for L in self.logos]}

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def logo(self, logo_id):
        for L in self.logos:
            if L.logo_id == logo_id:
                return L
        raise KeyError(logo_id)

    def check_camera(self, center):
        for p in self.primitives:
            if p.contains(center):
                raise CameraInsideGeometry(f"camera centre {np.round(center, 3)} lies inside a primitive")

    def packed(self):
        kinds = np.zeros(len(self.primitives), dtype=np.int64)
        par = np.zeros((len(self.primitives), 9))
        for i, p in enumerate(self.primitives):
            if isinstance(p, Sphere):
                kinds[i] = 0
                par[i, :4] = [*p.center, p.radius]
            elif isinstance(p, Box):
                kinds[i] = 1
                par[i, :6] = [*(p.center - p.half_extents), *(p.center + p.half_extents)]
            else:
                kinds[i] = 2
                par[i] = [*p.origin, *p.u, *p.v]
        return kinds, par

    def trace(self, origins, dirs):
        """Nearest hit distance and primitive index per ray (``inf``, -1 on miss)."""
        dirs = np.ascontiguousarray(dirs, dtype=float).reshape(-1, 3)
        o = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, float), dirs.shape))
        kinds, par = self.packed()
        return _trace_kernel(o, dirs, kinds, par)

    def trace_reference(self, origins, dirs):
        """Same as ``trace`` using the vectorised per-primitive intersectors."""
        o = np.broadcast_to(np.asarray(origins, float), np.shape(dirs))
        best = np.full(len(dirs), np.inf)
        which = np.full(len(dirs), -1)
        for i, p in enumerate(self.primitives):
            t = p.intersect(o, dirs)
            closer = t < best
            best[closer] = t[closer]
            which[closer] = i
        return best, which

    def surface_distance(self, points):
        return np.min([p.distance(points) for p in self.primitives], axis=0)

    def logo_at(self, points):
        """Logo index at each surface point (-1 outside every logo) and texture coordinates."""
        points = np.asarray(points, float).reshape(-1, 3)
        idx = np.full(len(points), -1)
        ab = np.zeros((len(points), 2))
        for j, L in enumerate(self.logos):
            near = L.patch.distance(points) < 1e-6
            if not near.any():
                continue
            pab = L.patch.params(points[near])
            inside = np.all((pab >= 0) & (pab <= 1), axis=1)
            sel = np.flatnonzero(near)[inside]
            idx[sel] = j
            ab[sel] = pab[inside]
        return idx, ab

    def shade(self, points, prim):
        """RGB in [0, 1]: solid lattice texture tinted per primitive, logos as decals."""
        m = len(self.logos)
        hmax = max([L.texture.shape[0] for L in self.logos], default=1)
        wmax = max([L.texture.shape[1] for L in self.logos], default=1)
        tex = np.zeros((max(m, 1), hmax, wmax, 3))
        sizes = np.zeros((max(m, 1), 2), dtype=np.int64)
        lpar = np.zeros((max(m, 1), 9))
        for j, L in enumerate(self.logos):
            h, w = L.texture.shape[:2]
            tex[j, :h, :w] = L.texture[..., :3] / 255.0
            sizes[j] = (h, w)
            lpar[j] = [*L.patch.origin, *L.patch.u, *L.patch.v]
        pts = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
        return _shade_kernel(pts, np.asarray(prim, dtype=np.int64), float(self.texture_cell), int(self.seed),
                             m, lpar, tex, sizes)


@numba.njit(cache=True)
def _hash_cell(i, j, k, seed):
    h = (np.uint64(i) * np.uint64(73856093)) ^ (np.uint64(j) * np.uint64(19349663)) \
        ^ (np.uint64(k) * np.uint64(83492791)) ^ np.uint64((seed * 2654435761) % 4294967296)
    h ^= h >> np.uint64(13)
    h *= np.uint64(0x5BD1E995)
    h ^= h >> np.uint64(15)
    return float(h % np.uint64(1 << 20)) / float(1 << 20)


@numba.njit(cache=True)
def _shade_kernel(points, prim, cell, seed, n_logos, lpar, tex, sizes):
    n = points.shape[0]
    out = np.empty((n, 3))
    for r in range(n):
        x, y, z = points[r, 0], points[r, 1], points[r, 2]
        g = 0.15 + 0.55 * _hash_cell(np.int64(np.floor(x / cell)), np.int64(np.floor(y / cell)),
                                     np.int64(np.floor(z / cell)), seed)
        half = 0.5 * cell
        g += 0.25 * _hash_cell(np.int64(np.floor(x / half)), np.int64(np.floor(y / half)),
                               np.int64(np.floor(z / half)), seed + 1)
        q = prim[r]
        out[r, 0] = g * (0.85 + 0.15 * np.cos(q * 1.3))
        out[r, 1] = g * (0.85 + 0.15 * np.cos(q * 2.1 + 1.0))
        out[r, 2] = g * (0.85 + 0.15 * np.cos(q * 0.7 + 2.0))
        for j in range(n_logos):
            p = lpar[j]
            ux, uy, uz, vx, vy, vz = p[3], p[4], p[5], p[6], p[7], p[8]
            nx, ny, nz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
            nn = np.sqrt(nx * nx + ny * ny + nz * nz)
            qx, qy, qz = x - p[0], y - p[1], z - p[2]
            if abs(qx * nx + qy * ny + qz * nz) / nn >= 1e-6:
                continue
            guu = ux * ux + uy * uy + uz * uz
            guv = ux * vx + uy * vy + uz * vz
            gvv = vx * vx + vy * vy + vz * vz
            ru = qx * ux + qy * uy + qz * uz
            rv = qx * vx + qy * vy + qz * vz
            det = guu * gvv - guv * guv
            a = (gvv * ru - guv * rv) / det
            b = (guu * rv - guv * ru) / det
            if a < 0.0 or a > 1.0 or b < 0.0 or b > 1.0:
                continue
            h, w = sizes[j, 0], sizes[j, 1]
            u = min(a * (w - 1), w - 1.000001)
            v = min(b * (h - 1), h - 1.000001)
            u0, v0 = int(np.floor(u)), int(np.floor(v))
            du, dv = u - u0, v - v0
            for c in range(3):
                out[r, c] = ((1 - du) * (1 - dv) * tex[j, v0, u0, c] + du * (1 - dv) * tex[j, v0, u0 + 1, c]
                             + (1 - du) * dv * tex[j, v0 + 1, u0, c] + du * dv * tex[j, v0 + 1, u0 + 1, c])
            break
        for c in range(3):
            out[r, c] = min(max(out[r, c], 0.0), 1.0)
    return out


@numba.njit(cache=True)
def _trace_kernel(origins, dirs, kinds, par):
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    which = np.full(n, -1, dtype=np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        for i in range(kinds.shape[0]):
            t = np.inf
            p = par[i]
            if kinds[i] == 0:
                cx, cy, cz = ox - p[0], oy - p[1], oz - p[2]
                b = cx * dx + cy * dy + cz * dz
                c = cx * cx + cy * cy + cz * cz - p[3] * p[3]
                disc = b * b - c
                if disc >= 0:
                    s = np.sqrt(disc)
                    if -b - s > 1e-9:
                        t = -b - s
                    elif -b + s > 1e-9:
                        t = -b + s
            elif kinds[i] == 1:
                tn, tf = -np.inf, np.inf
                o3 = (ox, oy, oz)
                d3 = (dx, dy, dz)
                for a in range(3):
                    lo, hi = p[a], p[a + 3]
                    if d3[a] == 0.0:
                        if o3[a] < lo or o3[a] > hi:
                            tn, tf = np.inf, -np.inf
                        continue
                    t1 = (lo - o3[a]) / d3[a]
                    t2 = (hi - o3[a]) / d3[a]
                    if t1 > t2:
                        t1, t2 = t2, t1
                    tn = max(tn, t1)
                    tf = min(tf, t2)
                if tf >= tn and tf > 1e-9:
                    t = tn if tn > 1e-9 else tf
            else:
                ux, uy, uz, vx, vy, vz = p[3], p[4], p[5], p[6], p[7], p[8]
                nx, ny, nz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
                nn = np.sqrt(nx * nx + ny * ny + nz * nz)
                nx, ny, nz = nx / nn, ny / nn, nz / nn
                den = dx * nx + dy * ny + dz * nz
                if abs(den) > 1e-15:
                    tt = ((p[0] - ox) * nx + (p[1] - oy) * ny + (p[2] - oz) * nz) / den
                    if tt > 1e-9:
                        qx, qy, qz = ox + tt * dx - p[0], oy + tt * dy - p[1], oz + tt * dz - p[2]
                        guu = ux * ux + uy * uy + uz * uz
                        guv = ux * vx + uy * vy + uz * vz
                        gvv = vx * vx + vy * vy + vz * vz
                        ru = qx * ux + qy * uy + qz * uz
                        rv = qx * vx + qy * vy + qz * vz
                        det = guu * gvv - guv * guv
                        a_ = (gvv * ru - guv * rv) / det
                        b_ = (guu * rv - guv * ru) / det
                        if 0.0 <= a_ <= 1.0 and 0.0 <= b_ <= 1.0:
                            t = tt
            if t < best[r]:
                best[r] = t
                which[r] = i
    return best, which


# -- rendering --------------------------------------------------------------

def _pixel_grid(k, offset=(0.0, 0.0)):
    vv, uu = np.mgrid[0:k.height, 0:k.width].astype(float)
    return np.stack([uu.ravel() + offset[0], vv.ravel() + offset[1]], 1)


def render_depth(scene, pose, k, max_range=10.0):
    """Camera-frame depth (metres along +Z) at every pixel centre; 0 where nothing is hit."""
    scene.check_camera(pose.center)
    if not scene.primitives:
        return np.zeros(k.shape)
    dirs = pixel_rays(_pixel_grid(k), pose, k)
    t, _ = scene.trace(pose.center, dirs)
    z = t * (dirs @ pose.rotation[2])
    z = np.where(np.isfinite(t) & (z <= max_range), z, 0.0)
    return z.reshape(k.shape)


def render_color(scene, pose, k, supersample=2, background=(0.0, 0.0, 0.0)):
    """Anti-aliased RGB uint8 image by ``supersample``^2 rays per pixel."""
    scene.check_camera(pose.center)
    acc = np.zeros((k.width * k.height, 3))
    s = int(supersample)
    offsets = [((i + 0.5) / s - 0.5, (j + 0.5) / s - 0.5) for j in range(s) for i in range(s)]
    for off in offsets:
        dirs = pixel_rays(_pixel_grid(k, off), pose, k)
        t, which = scene.trace(pose.center, dirs)
        rgb = np.tile(np.asarray(background, float), (len(dirs), 1))
        hit = np.isfinite(t)
        if hit.any():
            pts = pose.center + t[hit, None] * dirs[hit]
            rgb[hit] = scene.shade(pts, which[hit])
        acc += rgb
    img = acc / len(offsets)
    return np.round(img * 255.0).astype(np.uint8).reshape(k.height, k.width, 3)


def blur_image(image, sigma):
    return np.asarray(Image.fromarray(image).filter(ImageFilter.GaussianBlur(sigma)))


# -- gaze sessions ----------------------------------------------------------

@dataclass
class SessionSpec:
    """Head trajectory, gaze program and sensor settings of one eye-tracking session.

    ``trajectory``: list of ``(t, eye, look_at)`` waypoints, linearly
    interpolated.  ``gaze_program``: list of ``(t0, t1, target)`` where
    target is a world point, ``"logo:<id>"`` or ``"random"``.
    """

    trajectory: list
    gaze_program: list
    noise_deg: float = 0.6
    rate_hz: float = 30.0
    n_samples: int = 600
    frame_every: int = 3
    blurred_frames: list = field(default_factory=list)
    blur_sigma: float = 8.0
    intrinsics: Intrinsics = None

    @classmethod
    def from_dict(cls, d):
        known = {"trajectory", "gaze_program", "noise_deg", "rate_hz", "n_samples", "frame_every",
                 "blurred_frames", "blur_sigma", "intrinsics"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown session keys: {sorted(extra)}")
        k = d.get("intrinsics")
        spec = cls([(float(t), np.asarray(e, float), np.asarray(a, float)) for t, e, a in d["trajectory"]],
                   [(float(a), float(b), tgt if isinstance(tgt, str) else np.asarray(tgt, float))
                    for a, b, tgt in d["gaze_program"]],
                   float(d.get("noise_deg", 0.6)), float(d.get("rate_hz", 30.0)), int(d.get("n_samples", 600)),
                   int(d.get("frame_every", 3)), [int(i) for i in d.get("blurred_frames", [])],
                   float(d.get("blur_sigma", 8.0)), Intrinsics(**k) if k else None)
        times = [t for t, _, _ in spec.trajectory]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("trajectory timestamps must increase")
        return spec

    def to_dict(self):
        k = self.intrinsics
        return {"trajectory": [[t, e.tolist(), a.tolist()] for t, e, a in self.trajectory],
                "gaze_program": [[a, b, tgt if isinstance(tgt, str) else np.asarray(tgt).tolist()]
                                 for a, b, tgt in self.gaze_program],
                "noise_deg": self.noise_deg, "rate_hz": self.rate_hz, "n_samples": self.n_samples,
                "frame_every": self.frame_every, "blurred_frames": list(self.blurred_frames),
                "blur_sigma": self.blur_sigma,
                "intrinsics": None if k is None else {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                                                      "width": k.width, "height": k.height}}

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def timestamps(self):
        return np.arange(self.n_samples) / self.rate_hz

    def pose_at(self, t):
        times = np.array([w[0] for w in self.trajectory])
        t = float(np.clip(t, times[0], times[-1]))
        i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)) if len(times) > 1 else 0
        if len(times) == 1:
            _, eye, at = self.trajectory[0]
        else:
            (t0, e0, a0), (t1, e1, a1) = self.trajectory[i], self.trajectory[i + 1]
            s = (t - t0) / (t1 - t0)
            eye, at = (1 - s) * e0 + s * e1, (1 - s) * a0 + s * a1
        return Pose6D.look_at(eye, at)


def vmf_sample(mu, kappa, rng):
    """One unit vector from a von Mises-Fisher distribution on the 2-sphere (Wood 1994, exact in 3D)."""
    mu = np.asarray(mu, float)
    u = rng.random()
    w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    phi = 2.0 * np.pi * rng.random()
    a = np.array([1.0, 0.0, 0.0]) if abs(mu[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(mu, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(mu, e1)
    r = np.sqrt(max(0.0, 1.0 - w * w))
    return w * mu + r * (np.cos(phi) * e1 + np.sin(phi) * e2)


def kappa_for_median(sigma_rad):
    """Concentration whose median angular deviation equals ``sigma_rad``."""
    return np.log(2.0) / (1.0 - np.cos(sigma_rad)) if sigma_rad > 0 else np.inf


def perturb_direction(d, sigma_rad, rng):
    if sigma_rad <= 0:
        return np.asarray(d, float)
    return vmf_sample(d, kappa_for_median(sigma_rad), rng)


@dataclass
class GazeSession:
    samples: list  # GazeSample per timestamp
    poses: list  # true head pose per sample
    targets: np.ndarray  # true fixation point per sample (world)
    hits: np.ndarray  # analytic intersection of the noisy gaze ray (nan if none)
    labels: list  # logo id hit by the true target, "" otherwise
    frame_samples: list  # sample index of each scene-camera frame


def _random_walk_target(scene, pose, k, rng, prev_uv):
    uv = prev_uv + rng.normal(scale=15.0, size=2) if prev_uv is not None else np.array([k.cx, k.cy])
    uv = np.clip(uv, 10, [k.width - 11, k.height - 11])
    d = pixel_rays(uv, pose, k)
    t, _ = scene.trace(pose.center, d[None])
    return (pose.center + t[0] * d if np.isfinite(t[0]) else None), uv


def simulate_gaze_session(scene, session, seed=0):
    rng = np.random.default_rng(seed)
    k = session.intrinsics
    sigma = np.deg2rad(session.noise_deg)
    samples, poses, targets, hits, labels = [], [], [], [], []
    walk_uv = None
    for t in session.timestamps():
        pose = session.pose_at(t)
        scene.check_camera(pose.center)
        target = None
        for t0, t1, tgt in session.gaze_program:
            if t0 <= t < t1:
                target = tgt
                break
        if isinstance(target, str) and target.startswith("logo:"):
            target = scene.logo(target[5:]).patch.center
        elif isinstance(target, str) or target is None:
            target, walk_uv = _random_walk_target(scene, pose, k, rng, walk_uv)
        if target is None:
            samples.append(GazeSample(float(t), (np.nan, np.nan), False))
            poses.append(pose)
            targets.append(np.full(3, np.nan))
            hits.append(np.full(3, np.nan))
            labels.append("")
            continue
        target = np.asarray(target, float)
        d_true = target - pose.center
        if pose.transform(target)[2] <= 0:
            raise TargetBehindCamera(f"gaze target at t={t:.3f}s is behind the camera")
        d_true /= np.linalg.norm(d_true)
        d = perturb_direction(d_true, sigma, rng)
        dc = pose.rotation @ d
        valid = dc[2] > 0
        uv = np.array([k.fx * dc[0] / dc[2] + k.cx, k.fy * dc[1] / dc[2] + k.cy]) if valid else np.full(2, np.nan)
        valid = bool(valid and k.contains(uv[None])[0])
        th, _ = scene.trace(pose.center, d[None])
        li, _ = scene.logo_at(target[None])
        samples.append(GazeSample(float(t), (float(uv[0]), float(uv[1])), valid))
        poses.append(pose)
        targets.append(target)
        hits.append(pose.center + th[0] * d if np.isfinite(th[0]) else np.full(3, np.nan))
        labels.append(scene.logos[li[0]].logo_id if li[0] >= 0 and scene.surface_distance(target[None])[0] < 1e-6
                      else "")
    frame_samples = list(range(0, session.n_samples, session.frame_every))
    return GazeSession(samples, poses, np.array(targets), np.array(hits), labels, frame_samples)


# -- datasets ---------------------------------------------------------------

def write_depth_png(path, depth):
    mm = np.round(np.asarray(depth) * 1000.0)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


def read_depth_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0


def write_logos(directory, scene):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["id,filename,x0,y0,x1,y1"]
    for L in scene.logos:
        name = f"logo_{L.logo_id}.png"
        Image.fromarray(L.texture).save(d / name)
        h, w = L.texture.shape[:2]
        lines.append(f"{L.logo_id},{name},0,0,{w - 1},{h - 1}")
    (d / "logos.csv").write_text("\n".join(lines) + "\n")


def scan_poses(n_frames, eye_from, eye_to, look_from, look_to):
    out = []
    for i in range(n_frames):
        s = i / max(n_frames - 1, 1)
        out.append(Pose6D.look_at((1 - s) * np.asarray(eye_from) + s * np.asarray(eye_to),
                                  (1 - s) * np.asarray(look_from) + s * np.asarray(look_to)))
    return out


def write_dataset(out, scene, scan_k, scan_trajectory, session, seed=0, supersample=2, log=None):
    """Render a full synthetic dataset in the formats the pipeline reads.

    Layout: ``scan/`` (colour and 16-bit mm depth PNGs, ``poses_gt.csv``,
    ``intrinsics.txt``), ``etg/`` (scene-camera PNGs, ``gaze.csv``,
    ``poses_gt.csv``, ``gaze_gt.csv``, ``frames.csv``), ``logos/`` and
    ``gt/`` (per-frame ground-truth logo polygons), plus the specs.
    """
    out = Path(out)
    for sub in ("scan", "etg", "logos", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    scene.save(out / "scene.json")
    session.save(out / "session.json")
    write_intrinsics(out / "scan" / "intrinsics.txt", scan_k)
    write_poses_csv(out / "scan" / "poses_gt.csv", dict(enumerate(scan_trajectory)))
    for i, pose in enumerate(scan_trajectory):
        depth = render_depth(scene, pose, scan_k)
        write_depth_png(out / "scan" / f"depth_{i:04d}.png", depth)
        Image.fromarray(render_color(scene, pose, scan_k, supersample)).save(out / "scan" / f"color_{i:04d}.png")
        if log and i % 50 == 0:
            log(f"scan frame {i}/{len(scan_trajectory)}")
    write_logos(out / "logos", scene)
    _write_gt_polygons(out / "gt" / "scan_polygons.csv", scene, scan_trajectory, scan_k)

    gs = simulate_gaze_session(scene, session, seed)
    ek = session.intrinsics
    write_intrinsics(out / "etg" / "intrinsics.txt", ek)
    write_gaze_csv(out / "etg" / "gaze.csv", gs.samples)
    frame_poses = []
    with open(out / "etg" / "frames.csv", "w") as fh:
        fh.write("frame_id,timestamp_s,sample_index,blurred\n")
        for f, si in enumerate(gs.frame_samples):
            blurred = f in set(session.blurred_frames)
            fh.write(f"{f},{gs.samples[si].timestamp!r},{si},{int(blurred)}\n")
            img = render_color(scene, gs.poses[si], ek, supersample)
            if blurred:
                img = blur_image(img, session.blur_sigma)
            Image.fromarray(img).save(out / "etg" / f"frame_{f:04d}.png")
            frame_poses.append((f, gs.poses[si]))
    write_poses_csv(out / "etg" / "poses_gt.csv", dict(frame_poses))
    with open(out / "etg" / "gaze_gt.csv", "w") as fh:
        fh.write("timestamp_s,target_x,target_y,target_z,hit_x,hit_y,hit_z,logo_id\n")
        for s, tgt, hit, lab in zip(gs.samples, gs.targets, gs.hits, gs.labels):
            fh.write(",".join([repr(s.timestamp)] + [repr(float(x)) for x in tgt] + [repr(float(x)) for x in hit]
                              + [lab]) + "\n")
    _write_gt_polygons(out / "gt" / "etg_polygons.csv", scene, frame_poses and [p for _, p in frame_poses], ek)
    return gs


def logo_polygon(logo, pose, k):
    """Projected logo corners, or None if any corner is behind the camera or the patch faces away."""
    uv, z = project_points(logo.patch.corners, pose, k)
    if np.any(z <= 0) or (pose.center - logo.patch.center) @ logo.patch.normal >= 0:
        return None
    return uv


def visible_fraction(uv, k):
    """Share of a projected polygon's area that falls inside the image."""
    from shapely.geometry import Polygon, box

    poly = Polygon(uv)
    if not poly.is_valid or poly.area <= 0:
        return 0.0
    return poly.intersection(box(-0.5, -0.5, k.width - 0.5, k.height - 0.5)).area / poly.area


def _write_gt_polygons(path, scene, poses, k, min_visible=0.5):
    """Ground-truth 2D logo polygons per frame, kept when at least ``min_visible`` of the logo is in view."""
    with open(path, "w") as fh:
        fh.write("frame_id,logo_id,x0,y0,x1,y1,x2,y2,x3,y3\n")
        for f, pose in enumerate(poses):
            for L in scene.logos:
                uv = logo_polygon(L, pose, k)
                if uv is None or visible_fraction(uv, k) < min_visible:
                    continue
                fh.write(",".join([str(f), L.logo_id] + [f"{x:.6f}" for x in uv.ravel()]) + "\n")


def analytic_roi(scene, logo_id, mesh, viewpoint, tolerance):
    """Mesh triangles that lie on a logo patch: every vertex inside the patch
    outline and within ``tolerance`` of its plane, facing ``viewpoint``."""
    from .metrics import Roi3D

    patch = scene.logo(logo_id).patch
    ab = patch.params(mesh.vertices)
    vin = np.all((ab >= 0) & (ab <= 1), axis=1) & (patch.distance(mesh.vertices) <= tolerance)
    n = patch.normal * np.sign((np.asarray(viewpoint, float) - patch.center) @ patch.normal)
    front = mesh.face_normals() @ n > 0
    return Roi3D.from_triangles(logo_id, np.flatnonzero(vin[mesh.triangles].all(1) & front), mesh)


# -- bundled demo -----------------------------------------------------------

def demo_scene():
    wall_z = 2.0
    prims = [
        {"type": "box", "center": [0.0, 0.0, wall_z + 0.1], "half_extents": [1.5, 1.1, 0.1]},  # back wall
        {"type": "box", "center": [0.0, 1.05, 1.0], "half_extents": [1.5, 0.05, 1.1]},  # floor
        {"type": "box", "center": [-0.9, 0.75, 1.5], "half_extents": [0.2, 0.25, 0.2]},
        {"type": "box", "center": [0.95, 0.7, 1.4], "half_extents": [0.25, 0.3, 0.2]},
        {"type": "sphere", "center": [0.15, 0.72, 1.3], "radius": 0.28},
    ]

    # edges sit mid-cell between mesh vertex columns so membership is never decided by roundoff
    def on_wall(cx, cy, w=0.475, h=0.325):
        z = wall_z
        return [[cx - w / 2, cy - h / 2, z], [cx + w / 2, cy - h / 2, z], [cx + w / 2, cy + h / 2, z],
                [cx - w / 2, cy + h / 2, z]]

    logos = [{"id": "A", "corners": on_wall(-0.6, -0.45), "seed": 11},
             {"id": "B", "corners": on_wall(0.05, -0.55), "seed": 22},
             {"id": "C", "corners": on_wall(0.65, -0.3), "seed": 33}]
    return SceneSpec.from_dict({"bounds": [[-1.6, -1.2, -0.6], [1.6, 2.0, 2.6]], "texture_cell": 0.04,
                                "seed": 7, "primitives": prims, "logos": logos})


DEMO_SCAN_K = Intrinsics(300.0, 300.0, 159.5, 119.5, 320, 240)
DEMO_ETG_K = Intrinsics(280.0, 280.0, 159.5, 119.5, 320, 240)


def demo_scan_trajectory(n_frames=200):
    return scan_poses(n_frames, (-0.6, -0.3, 0.55), (0.6, -0.2, 0.7), (-0.35, -0.4, 2.0), (0.4, -0.35, 2.0))


def demo_session(n_samples=600):
    traj = [(0.0, [-0.5, -0.35, 0.6], [-0.6, -0.3, 2.0]),
            (7.0, [0.0, -0.3, 0.7], [0.0, -0.4, 2.0]),
            (14.0, [0.5, -0.25, 0.6], [0.6, -0.2, 2.0]),
            (20.0, [0.2, -0.3, 0.5], [0.1, -0.1, 2.0])]
    program = [(0.0, 2.5, "logo:A"), (2.5, 4.0, "random"), (4.0, 6.0, "logo:A"), (6.0, 9.0, "logo:B"),
               (9.0, 10.5, "random"), (10.5, 14.5, "logo:C"), (14.5, 16.0, "random"), (16.0, 18.5, "logo:B"),
               (18.5, 20.1, "random")]
    return SessionSpec.from_dict({"trajectory": traj, "gaze_program": program, "noise_deg": 0.6, "rate_hz": 30.0,
                                  "n_samples": n_samples, "frame_every": 3,
                                  "blurred_frames": [20, 21, 90, 91, 150, 151, 152],
                                  "intrinsics": {"fx": DEMO_ETG_K.fx, "fy": DEMO_ETG_K.fy, "cx": DEMO_ETG_K.cx,
                                                 "cy": DEMO_ETG_K.cy, "width": DEMO_ETG_K.width,
                                                 "height": DEMO_ETG_K.height}})
