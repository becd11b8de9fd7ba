"""Reference-logo detection in frames and projection of detections onto mesh triangles."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import shapely
from PIL import Image
from shapely.geometry import Polygon

from .errors import InputError, NoLocalizedDetections
from .features import extract_features, match_features
from .gaze import intersect_rays
from .geometry import project_points
from .metrics import Roi3D


@dataclass
class ReferenceLogo:
    logo_id: str
    image: np.ndarray
    features: object
    boundary: np.ndarray  # 4x2 corners in reference-image pixels

    @classmethod
    def from_image(cls, logo_id, image, boundary=None, extractor=None):
        image = np.asarray(image)
        h, w = image.shape[:2]
        if boundary is None:
            boundary = [(0, 0), (w - 1, 0), (w - 1, h - 1), (0, h - 1)]
        b = np.asarray(boundary, float)
        if b.shape == (4,):  # x0, y0, x1, y1 rectangle
            b = np.array([[b[0], b[1]], [b[2], b[1]], [b[2], b[3]], [b[0], b[3]]])
        feats = extractor.extract(image) if extractor is not None else extract_features(image)
        if len(feats) < 8:
            raise InputError(f"logo {logo_id} has only {len(feats)} keypoints (need 8)")
        return cls(str(logo_id), image, feats, b)


@dataclass
class Detection2D:
    frame_id: int
    logo_id: str
    polygon: np.ndarray  # 4x2
    homography: np.ndarray  # reference -> frame
    inlier_count: int


@dataclass
class NoDetection:
    reason: str
    inlier_count: int = 0

    def __bool__(self):
        return False


# -- homography ---------------------------------------------------------------

def _normalizer(p):
    c = p.mean(0)
    s = np.sqrt(2.0) / max(np.mean(np.linalg.norm(p - c, axis=1)), 1e-12)
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def fit_homography(src, dst):
    """Normalised DLT from >= 4 correspondences; returns H with H[2,2] scaled to 1 (when possible)."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    Ts, Td = _normalizer(src), _normalizer(dst)
    s = (Ts @ np.c_[src, np.ones(len(src))].T).T
    d = (Td @ np.c_[dst, np.ones(len(dst))].T).T
    A = np.zeros((2 * len(src), 9))
    A[0::2, 0:3] = s
    A[0::2, 6:9] = -d[:, [0]] * s
    A[1::2, 3:6] = s
    A[1::2, 6:9] = -d[:, [1]] * s
    _, _, vt = np.linalg.svd(A)
    H = np.linalg.solve(Td, vt[-1].reshape(3, 3) @ Ts)
    return H / H[2, 2] if abs(H[2, 2]) > 1e-15 else H


def apply_homography(H, pts):
    p = np.c_[np.asarray(pts, float), np.ones(len(pts))] @ H.T
    return p[:, :2] / p[:, 2:3]


def _transfer_errors(H, src, dst):
    p = np.c_[src, np.ones(len(src))] @ H.T
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.linalg.norm(p[:, :2] / p[:, 2:3] - dst, axis=1)
    return np.where(np.isfinite(e), e, np.inf)


def estimate_homography(src, dst, threshold=3.0, confidence=0.999, max_iterations=2000, seed=0):
    """4-point RANSAC, then least-squares refits on the inlier set until it stops changing."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    n = len(src)
    if n < 4:
        return None, np.zeros(n, bool)
    rng = np.random.default_rng(seed)
    best, best_mask = None, np.zeros(n, bool)
    needed, it = max_iterations, 0
    while it < min(needed, max_iterations):
        it += 1
        idx = rng.choice(n, 4, replace=False)
        if _collinear_any(src[idx]) or _collinear_any(dst[idx]):
            continue
        H = fit_homography(src[idx], dst[idx])
        mask = _transfer_errors(H, src, dst) < threshold
        if mask.sum() > best_mask.sum():
            best, best_mask = H, mask
            w = mask.mean()
            needed = int(np.ceil(np.log(1 - confidence) / np.log(max(1 - w**4, 1e-12)))) if w < 1 else 0
    if best is None:
        return None, best_mask
    for _ in range(5):
        H = fit_homography(src[best_mask], dst[best_mask])
        mask = _transfer_errors(H, src, dst) < threshold
        if mask.sum() < 4:
            break
        stable = np.array_equal(mask, best_mask)
        best, best_mask = H, mask
        if stable:
            break
    return best, best_mask


def _collinear_any(p):
    for i in range(4):
        q = np.delete(p, i, axis=0)
        a, b = q[1] - q[0], q[2] - q[0]
        if abs(a[0] * b[1] - a[1] * b[0]) < 1e-6:
            return True
    return False


def _valid_quad(poly):
    if not np.all(np.isfinite(poly)):
        return False
    q = Polygon(poly)
    if not q.is_valid or q.area <= 1e-9:
        return False
    return abs(q.convex_hull.area - q.area) <= 1e-9 * max(q.area, 1.0)


def detect_logo(frame_features, logo, frame_id=0, min_inliers=8, ratio=0.8, threshold=3.0, seed=0):
    """Detection2D of ``logo`` in a frame, or a NoDetection value."""
    matches = match_features(logo.features, frame_features, ratio)
    if len(matches) < max(4, min_inliers):
        return NoDetection("too-few-matches", 0)
    m = np.array(matches)
    src = logo.features.pixels[m[:, 0]]
    dst = frame_features.pixels[m[:, 1]]
    H, mask = estimate_homography(src, dst, threshold, seed=seed)
    if H is None or mask.sum() < min_inliers:
        return NoDetection("too-few-inliers", int(mask.sum()))
    if abs(np.linalg.det(H)) <= 1e-12:
        return NoDetection("singular-homography", int(mask.sum()))
    poly = apply_homography(H, logo.boundary)
    if not _valid_quad(poly):
        return NoDetection("degenerate-polygon", int(mask.sum()))
    return Detection2D(frame_id, logo.logo_id, poly, H, int(mask.sum()))


# -- temporal filter ------------------------------------------------------------

def _consistent(a, b, diagonal, max_shift, scale_range):
    T = fit_homography(a.polygon, b.polygon)  # = H_b H_a^-1 on the logo boundary
    moved = apply_homography(T, a.polygon)
    shift = np.max(np.linalg.norm(moved - a.polygon, axis=1))
    ratio = np.sqrt(Polygon(moved).area / Polygon(a.polygon).area)
    lo, hi = scale_range
    return shift <= max_shift * diagonal and lo <= ratio <= hi and lo <= 1.0 / ratio <= hi


def filter_detections(detections, image_size, max_shift=0.2, scale_range=(0.67, 1.5), window=10):
    """Drop detections that disagree with most neighbouring detections of the same logo.

    Two detections agree when the frame-to-frame transform between their
    polygons moves no corner by more than ``max_shift`` of the image diagonal
    and scales area by a factor within ``scale_range`` (tested both ways, so
    agreement is symmetric). A detection survives when it agrees with at least
    half of the detections within ``window`` frames; isolated ones pass. The
    vote is repeated until nothing changes, so the filter is idempotent.
    """
    w, h = image_size
    diagonal = float(np.hypot(w, h))
    by_logo = {}
    for d in detections:
        by_logo.setdefault(d.logo_id, []).append(d)
    keep = set()
    for seq in by_logo.values():
        seq = sorted(seq, key=lambda d: d.frame_id)
        agree = {}
        while True:
            drop = set()
            for i, d in enumerate(seq):
                near = [j for j, e in enumerate(seq) if j != i and abs(e.frame_id - d.frame_id) <= window]
                votes = 0
                for j in near:
                    key = (min(id(d), id(seq[j])), max(id(d), id(seq[j])))
                    if key not in agree:
                        agree[key] = _consistent(d, seq[j], diagonal, max_shift, scale_range)
                    votes += agree[key]
                if near and 2 * votes < len(near):
                    drop.add(i)
            if not drop:
                break
            seq = [d for i, d in enumerate(seq) if i not in drop]
        keep.update(id(d) for d in seq)
    return [d for d in detections if id(d) in keep]


# -- 3D mapping -------------------------------------------------------------------

def _inside(poly, uv):
    return shapely.contains_xy(Polygon(poly), uv[:, 0], uv[:, 1])


def map_roi_3d(detections, frame_poses, k, mesh, tree, vote_fraction=0.5, rule="all", roi_id=None):
    """Vote mesh triangles into an ROI from posed 2D detections.

    ``rule`` chooses the in-polygon test: ``"all"`` vertices, the ``"centroid"``
    or ``"any"`` vertex. A triangle is a member in a frame when it passes the
    rule and is visible there (in front, inside the image, facing the camera,
    centroid ray hitting it first). It joins the ROI when it is a member in at
    least ``vote_fraction`` of the detection frames in which it is visible.
    """
    posed = [d for d in detections if frame_poses.get(d.frame_id) is not None]
    if not posed:
        raise NoLocalizedDetections("no detection has a localized pose")
    if rule not in ("all", "centroid", "any"):
        raise InputError(f"unknown membership rule {rule!r}")
    tri = mesh.triangles
    cents = mesh.centroids()
    normals = mesh.face_normals()
    inpoly = []
    for d in posed:
        pose = frame_poses[d.frame_id]
        if rule == "centroid":
            uv, z = project_points(cents, pose, k)
            hit = _inside(d.polygon, uv) & (z > 0)
        else:
            uv, z = project_points(mesh.vertices, pose, k)
            vin = _inside(d.polygon, uv) & (z > 0)
            hit = vin[tri].all(1) if rule == "all" else vin[tri].any(1)
        inpoly.append(hit)
    cand = np.flatnonzero(np.any(inpoly, axis=0))
    if len(cand) == 0:
        return Roi3D(roi_id if roi_id is not None else posed[0].logo_id, frozenset(), 0.0, mesh.n_triangles)
    members = np.zeros(len(cand), int)
    visible = np.zeros(len(cand), int)
    for d, hit in zip(posed, inpoly):
        pose = frame_poses[d.frame_id]
        vis = _visible(cand, cents, normals, pose, k, tree)
        visible += vis
        members += vis & hit[cand]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = members / visible
    chosen = cand[(visible > 0) & (members > 0) & (frac >= vote_fraction)]
    return Roi3D.from_triangles(roi_id if roi_id is not None else posed[0].logo_id, chosen, mesh)


def _visible(cand, cents, normals, pose, k, tree):
    c = pose.center
    uv, z = project_points(cents[cand], pose, k)
    ok = (z > 0) & k.contains(uv) & (np.einsum("ij,ij->i", normals[cand], c - cents[cand]) > 0)
    idx = np.flatnonzero(ok)
    if len(idx):
        diff = cents[cand[idx]] - c
        dirs = diff / np.linalg.norm(diff, axis=1, keepdims=True)
        hit, _ = intersect_rays(tree, np.broadcast_to(c, dirs.shape), dirs)
        ok[idx] = hit == cand[idx]
    return ok


# -- files ---------------------------------------------------------------------------

def read_logos(directory, extractor=None):
    """Reference logos from ``logos.csv`` (``id, filename, x0, y0, x1, y1``)."""
    d = Path(directory)
    logos = []
    with open(d / "logos.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            img = np.asarray(Image.open(d / row["filename"]).convert("RGB"))
            box = [float(row[c]) for c in ("x0", "y0", "x1", "y1")]
            logos.append(ReferenceLogo.from_image(row["id"], img, box, extractor))
    return logos


def write_detections_csv(path, detections):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "logo_id", "x0", "y0", "x1", "y1", "x2", "y2", "x3", "y3", "inliers"])
        for d in sorted(detections, key=lambda d: (d.frame_id, d.logo_id)):
            w.writerow([d.frame_id, d.logo_id] + [repr(float(x)) for x in d.polygon.ravel()] + [d.inlier_count])


def read_detections_csv(path, logos=None):
    """Detections back from CSV; homographies are rebuilt from the logo boundary when ``logos`` is given."""
    bounds = {L.logo_id: L.boundary for L in (logos or [])}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            poly = np.array([float(row[c]) for c in ("x0", "y0", "x1", "y1", "x2", "y2", "x3", "y3")]).reshape(4, 2)
            lid = row["logo_id"]
            H = fit_homography(bounds[lid], poly) if lid in bounds else None
            out.append(Detection2D(int(row["frame_id"]), lid, poly, H, int(row.get("inliers") or 0)))
    return out


def read_polygons_csv(path):
    """Ground-truth polygons ``{logo_id: {frame_id: [4x2 array]}}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            poly = np.array([float(row[c]) for c in ("x0", "y0", "x1", "y1", "x2", "y2", "x3", "y3")]).reshape(4, 2)
            out.setdefault(row["logo_id"], {}).setdefault(int(row["frame_id"]), []).append(poly)
    return out


def polygons_as_detections(polygons, logo_id):
    """Wrap ground-truth polygons as detections so they can be mapped like automatic ones."""
    return [Detection2D(f, logo_id, p, None, 0) for f, ps in sorted(polygons.items()) for p in ps]
