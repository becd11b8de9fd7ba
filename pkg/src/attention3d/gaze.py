"""Gaze rays against the mesh: OBB tree, fixation recovery, saliency accumulation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numba
import numpy as np
from sklearn.base import BaseEstimator

from .errors import EmptyMesh, InputError, InvalidSample
from .geometry import pixel_rays

LEAF_SIZE = 4
_T_MIN = 1e-12


@dataclass
class ObbTree:
    """Flattened OBB hierarchy; node 0 is the root.

    ``axes[n]`` holds the box axes as rows, ``left/right`` are child ids
    (-1 for leaves) and a leaf owns ``tri_index[start:start+count]``.
    """

    centers: np.ndarray
    axes: np.ndarray
    half: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    tri_index: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    centroids: np.ndarray

    @property
    def n_nodes(self):
        return len(self.centers)

    def leaves(self):
        return [self.tri_index[s:s + c] for s, c in zip(self.start, self.count) if c > 0]


@dataclass(frozen=True)
class GazeSample:
    timestamp: float
    pixel: tuple
    valid: bool = True


@dataclass(frozen=True)
class FixationHit:
    timestamp: float
    triangle_id: int
    point: np.ndarray
    distance: float


@dataclass
class SaliencyMap:
    weights: np.ndarray
    total_hits: int
    sigma: float

    def top(self, n=10):
        order = np.argsort(-self.weights, kind="stable")[:n]
        return list(zip(order.tolist(), self.weights[order].tolist()))


def _fit_box(points):
    centred = points - points.mean(axis=0)
    cov = centred.T @ centred / max(len(points), 1)
    _, vecs = np.linalg.eigh(cov)
    axes = vecs[:, ::-1].T  # rows, largest variance first
    proj = points @ axes.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    pad = 1e-9 * max(1.0, float(np.abs(proj).max()))
    center = axes.T @ ((lo + hi) / 2.0)
    return center, axes, (hi - lo) / 2.0 + pad


def build_obb_tree(mesh, leaf_size=LEAF_SIZE):
    """Top-down OBB tree; splits at the centroid mean along the main centroid axis."""
    if mesh.n_triangles == 0:
        raise EmptyMesh("cannot build a tree over an empty mesh")
    corners = mesh.corners()
    cents = corners.mean(axis=1)
    centers, axes_l, halves, left, right, start, count = [], [], [], [], [], [], []
    order = []
    stack = [(np.arange(mesh.n_triangles), -1, 0)]
    while stack:
        ids, parent, side = stack.pop()
        node = len(centers)
        if parent >= 0:
            (left if side == 0 else right)[parent] = node
        c, a, h = _fit_box(corners[ids].reshape(-1, 3))
        centers.append(c)
        axes_l.append(a)
        halves.append(h)
        left.append(-1)
        right.append(-1)
        if len(ids) <= leaf_size:
            start.append(len(order))
            count.append(len(ids))
            order.extend(ids.tolist())
            continue
        start.append(0)
        count.append(0)
        cc = cents[ids]
        centred = cc - cc.mean(axis=0)
        _, vecs = np.linalg.eigh(centred.T @ centred)
        proj = cc @ vecs[:, -1]
        mask = proj < proj.mean()
        if mask.all() or not mask.any():
            srt = np.argsort(proj, kind="stable")
            mask = np.zeros(len(ids), dtype=bool)
            mask[srt[: len(ids) // 2]] = True
        # push right first so the left subtree gets the lower node ids
        stack.append((ids[~mask], node, 1))
        stack.append((ids[mask], node, 0))
    return ObbTree(
        np.array(centers), np.array(axes_l), np.array(halves),
        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
        np.array(start, dtype=np.int64), np.array(count, dtype=np.int64),
        np.array(order, dtype=np.int64),
        np.ascontiguousarray(corners[:, 0]), np.ascontiguousarray(corners[:, 1]),
        np.ascontiguousarray(corners[:, 2]), cents,
    )


@numba.njit(cache=True, inline="always")
def _moller_trumbore(o, d, a, b, c):
    e1x, e1y, e1z = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    e2x, e2y, e2z = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    px = d[1] * e2z - d[2] * e2y
    py = d[2] * e2x - d[0] * e2z
    pz = d[0] * e2y - d[1] * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-300:
        return np.inf
    inv = 1.0 / det
    sx, sy, sz = o[0] - a[0], o[1] - a[1], o[2] - a[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= _T_MIN:
        return np.inf
    return t


@numba.njit(cache=True, inline="always")
def _slab(o, d, center, axes, half):
    tnear = -np.inf
    tfar = np.inf
    for a in range(3):
        oc = (o[0] - center[0]) * axes[a, 0] + (o[1] - center[1]) * axes[a, 1] + (o[2] - center[2]) * axes[a, 2]
        dc = d[0] * axes[a, 0] + d[1] * axes[a, 1] + d[2] * axes[a, 2]
        if abs(dc) < 1e-300:
            if oc < -half[a] or oc > half[a]:
                return np.inf
            continue
        t1 = (-half[a] - oc) / dc
        t2 = (half[a] - oc) / dc
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tnear:
            tnear = t1
        if t2 < tfar:
            tfar = t2
        if tnear > tfar:
            return np.inf
    if tfar < 0.0:
        return np.inf
    return max(tnear, 0.0)


@numba.njit(cache=True)
def _trace_one(o, d, centers, axes, half, left, right, start, count, tri_index, v0, v1, v2, stack, stack_t):
    best_t = np.inf
    best_tri = -1
    t_root = _slab(o, d, centers[0], axes[0], half[0])
    if t_root == np.inf:
        return best_tri, best_t
    stack[0] = 0
    stack_t[0] = t_root
    top = 1
    while top > 0:
        top -= 1
        n = stack[top]
        # entry distance re-checked on pop: best_t may have shrunk since the push
        if stack_t[top] > best_t:
            continue
        if count[n] > 0:
            for s in range(start[n], start[n] + count[n]):
                tri = tri_index[s]
                t = _moller_trumbore(o, d, v0[tri], v1[tri], v2[tri])
                if t < best_t or (t == best_t and t < np.inf and tri < best_tri):
                    best_t = t
                    best_tri = tri
            continue
        l, r = left[n], right[n]
        tl = _slab(o, d, centers[l], axes[l], half[l])
        tr = _slab(o, d, centers[r], axes[r], half[r])
        # far child first so the near child is popped next
        if tl <= tr:
            first, t_first, second, t_second = r, tr, l, tl
        else:
            first, t_first, second, t_second = l, tl, r, tr
        # slab misses are inf and must not pass while best_t is still inf
        if t_first < np.inf and t_first <= best_t:
            stack[top] = first
            stack_t[top] = t_first
            top += 1
        if t_second < np.inf and t_second <= best_t:
            stack[top] = second
            stack_t[top] = t_second
            top += 1
    return best_tri, best_t


@numba.njit(cache=True)
def _trace_batch(origins, dirs, centers, axes, half, left, right, start, count, tri_index, v0, v1, v2):
    n = origins.shape[0]
    tris = np.empty(n, np.int64)
    ts = np.empty(n)
    stack = np.empty(256, np.int64)
    stack_t = np.empty(256)
    for i in range(n):
        tri, t = _trace_one(origins[i], dirs[i], centers, axes, half, left, right, start, count, tri_index,
                            v0, v1, v2, stack, stack_t)
        tris[i] = tri
        ts[i] = t
    return tris, ts


@numba.njit(cache=True)
def _brute_batch(origins, dirs, v0, v1, v2):
    n = origins.shape[0]
    tris = np.full(n, -1, np.int64)
    ts = np.full(n, np.inf)
    for i in range(n):
        for tri in range(v0.shape[0]):
            t = _moller_trumbore(origins[i], dirs[i], v0[tri], v1[tri], v2[tri])
            if t < ts[i]:
                ts[i] = t
                tris[i] = tri
    return tris, ts


def _rays(origins, dirs):
    dirs = np.atleast_2d(np.asarray(dirs, float))
    origins = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, float), dirs.shape))
    dirs = np.ascontiguousarray(dirs / np.linalg.norm(dirs, axis=1, keepdims=True))
    return origins, dirs


def intersect_rays(tree, origins, dirs):
    """Nearest hits for a batch of rays: ``(triangle ids, distances)``; misses are (-1, inf)."""
    o, d = _rays(origins, dirs)
    if len(o) == 0:
        return np.empty(0, np.int64), np.empty(0)
    return _trace_batch(o, d, tree.centers, tree.axes, tree.half, tree.left, tree.right, tree.start,
                        tree.count, tree.tri_index, tree.v0, tree.v1, tree.v2)


def brute_force_intersect(tree, origins, dirs):
    """Exhaustive scan with the same triangle test (reference and benchmark baseline)."""
    o, d = _rays(origins, dirs)
    return _brute_batch(o, d, tree.v0, tree.v1, tree.v2)


def first_hit_distances(tree, origins, dirs):
    return intersect_rays(tree, origins, dirs)[1]


def intersect_ray(tree, ray):
    """Nearest positive-distance hit ``(triangle_id, point, distance)`` or ``None``."""
    tris, ts = intersect_rays(tree, ray.origin[None], ray.direction[None])
    if tris[0] < 0:
        return None
    return int(tris[0]), ray.origin + ts[0] * ray.direction, float(ts[0])


def recover_fixation(pose, k, sample, tree):
    """Fixation point of one gaze sample, or ``None`` when the ray leaves the scene."""
    if not sample.valid or not np.all(np.isfinite(sample.pixel)):
        raise InvalidSample(f"gaze sample at t={sample.timestamp} is not valid")
    d = pixel_rays(np.asarray(sample.pixel, float), pose, k)
    c = pose.center
    tris, ts = intersect_rays(tree, c[None], d[None])
    if tris[0] < 0:
        return None
    return FixationHit(float(sample.timestamp), int(tris[0]), c + ts[0] * d, float(ts[0]))


def recover_fixations(poses, k, samples, tree):
    """Batch version: ``poses[i]`` is the pose for ``samples[i]`` (``None`` = not localized)."""
    rows = [(s, p) for s, p in zip(samples, poses) if p is not None and s.valid]
    if not rows:
        return []
    dirs = np.stack([pixel_rays(np.asarray(s.pixel, float), p, k) for s, p in rows])
    origins = np.stack([p.center for _, p in rows])
    tris, ts = intersect_rays(tree, origins, dirs)
    return [
        FixationHit(float(s.timestamp), int(tri), origins[i] + t * dirs[i], float(t))
        for i, ((s, _), tri, t) in enumerate(zip(rows, tris, ts))
        if tri >= 0
    ]


# --- saliency ----------------------------------------------------------------

def gaussian_kernel(distance, sigma):
    distance = np.asarray(distance, float)
    return np.exp(-(distance**2) / (2.0 * sigma**2))


@numba.njit(cache=True)
def _centroids_within(p, radius, centers, axes, half, left, right, start, count, tri_index, cents, stack, out):
    n_out = 0
    top = 1
    stack[0] = 0
    r2 = radius * radius
    while top > 0:
        top -= 1
        n = stack[top]
        # squared distance from p to the oriented box
        dist2 = 0.0
        for a in range(3):
            x = (p[0] - centers[n, 0]) * axes[n, a, 0] + (p[1] - centers[n, 1]) * axes[n, a, 1] + (
                p[2] - centers[n, 2]) * axes[n, a, 2]
            ex = abs(x) - half[n, a]
            if ex > 0.0:
                dist2 += ex * ex
        if dist2 > r2:
            continue
        if count[n] > 0:
            for s in range(start[n], start[n] + count[n]):
                tri = tri_index[s]
                dx = cents[tri, 0] - p[0]
                dy = cents[tri, 1] - p[1]
                dz = cents[tri, 2] - p[2]
                if dx * dx + dy * dy + dz * dz <= r2:
                    out[n_out] = tri
                    n_out += 1
            continue
        stack[top] = left[n]
        stack[top + 1] = right[n]
        top += 2
    return n_out


def triangles_near(tree, point, radius):
    """Ids of triangles whose centroid lies within ``radius`` of ``point`` (sorted)."""
    out = np.empty(len(tree.tri_index), np.int64)
    stack = np.empty(512, np.int64)
    n = _centroids_within(np.asarray(point, float), float(radius), tree.centers, tree.axes, tree.half, tree.left,
                          tree.right, tree.start, tree.count, tree.tri_index, tree.centroids, stack, out)
    return np.sort(out[:n])


def accumulate_saliency(hits, mesh, sigma=0.02, tree=None):
    """Per-triangle saliency: each hit spreads unit mass over nearby triangles.

    Weights follow a Gaussian of the hit-to-centroid distance, truncated at
    3 sigma and normalised per hit, so the map's total equals the hit count.
    A hit with no centroid inside the cut-off puts its mass on the hit triangle.
    """
    if not sigma > 0:
        raise InputError("sigma must be positive")
    weights = np.zeros(mesh.n_triangles)
    hits = list(hits)
    if not hits:
        return SaliencyMap(weights, 0, float(sigma))
    if tree is None:
        tree = build_obb_tree(mesh)
    for hit in hits:
        near = triangles_near(tree, hit.point, 3.0 * sigma)
        if len(near) == 0:
            weights[hit.triangle_id] += 1.0
            continue
        w = gaussian_kernel(np.linalg.norm(tree.centroids[near] - hit.point, axis=1), sigma)
        weights[near] += w / w.sum()
    return SaliencyMap(weights, len(hits), float(sigma))


class GazeMapper(BaseEstimator):
    """Estimator front-end: ``fit(mesh)`` builds the tree, ``predict`` maps gaze to hits."""

    def __init__(self, sigma=0.02, leaf_size=LEAF_SIZE):
        self.sigma = sigma
        self.leaf_size = leaf_size

    def fit(self, mesh, y=None):
        self.mesh_ = mesh
        self.tree_ = build_obb_tree(mesh, self.leaf_size)
        return self

    def predict(self, samples, poses, intrinsics):
        return recover_fixations(poses, intrinsics, samples, self.tree_)

    def saliency(self, hits):
        return accumulate_saliency(hits, self.mesh_, self.sigma, self.tree_)


# --- file formats ------------------------------------------------------------

def read_gaze_csv(path):
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            samples.append(GazeSample(float(row["timestamp_s"]), (float(row["u_px"]), float(row["v_px"])),
                                      row["valid"].strip() in ("1", "true", "True")))
    return samples


def write_gaze_csv(path, samples):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_s", "u_px", "v_px", "valid"])
        for s in samples:
            w.writerow([repr(float(s.timestamp)), repr(float(s.pixel[0])), repr(float(s.pixel[1])), int(bool(s.valid))])


def write_hits_csv(path, hits):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_s", "triangle_id", "x", "y", "z", "distance_m"])
        for h in hits:
            w.writerow([repr(float(h.timestamp)), h.triangle_id] + [repr(float(x)) for x in h.point]
                       + [repr(float(h.distance))])


def read_hits_csv(path):
    hits = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            hits.append(FixationHit(float(row["timestamp_s"]), int(row["triangle_id"]),
                                    np.array([float(row["x"]), float(row["y"]), float(row["z"])]),
                                    float(row["distance_m"])))
    return hits


def write_saliency_csv(path, saliency):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["triangle_id", "weight"])
        for i in np.flatnonzero(saliency.weights):
            w.writerow([int(i), repr(float(saliency.weights[i]))])


def heat_colors(values):
    """Blue -> green -> red ramp for values normalised to [0, 1]."""
    v = np.clip(np.asarray(values, float), 0.0, 1.0)
    r = np.clip(2.0 * v - 1.0, 0.0, 1.0)
    b = np.clip(1.0 - 2.0 * v, 0.0, 1.0)
    g = 1.0 - r - b
    return np.stack([r, g, b], axis=1)


def write_saliency_ply(path, mesh, saliency):
    from .surface import write_ply

    vert = np.zeros(mesh.n_vertices)
    np.add.at(vert, mesh.triangles.ravel(), np.repeat(saliency.weights, 3) / 3.0)
    peak = vert.max()
    write_ply(path, mesh, vertex_colors=heat_colors(vert / peak if peak > 0 else vert),
              comments=[f"saliency sigma {saliency.sigma!r} hits {saliency.total_hits}"])
