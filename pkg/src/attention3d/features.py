"""Keypoint detection, description and matching.

The default extractor is a compact difference-of-Gaussians detector with a
4x4x8 gradient-orientation histogram descriptor. Any object with an
``extract(image) -> Features`` method can replace it; ``FeatureFileBackend``
serves precomputed ``frame_<id>.feat`` files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ImageTooSmall, InputError

DESCRIPTOR_SIZE = 128


@dataclass(frozen=True, eq=False)
class Keypoint:
    pixel: np.ndarray
    scale: float
    orientation: float
    descriptor: np.ndarray
    response: float = 0.0


class Features:
    """Column store for the keypoints of one image (sorted by response)."""

    def __init__(self, pixels, scales, orientations, descriptors, responses=None):
        self.pixels = np.asarray(pixels, float).reshape(-1, 2)
        self.scales = np.asarray(scales, float).reshape(-1)
        self.orientations = np.asarray(orientations, float).reshape(-1)
        self.descriptors = np.asarray(descriptors, float).reshape(-1, DESCRIPTOR_SIZE)
        self.responses = (np.zeros(len(self.pixels)) if responses is None
                          else np.asarray(responses, float).reshape(-1))

    def __len__(self):
        return len(self.pixels)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Keypoint(self.pixels[i], float(self.scales[i]), float(self.orientations[i]),
                            self.descriptors[i], float(self.responses[i]))
        return Features(self.pixels[i], self.scales[i], self.orientations[i], self.descriptors[i], self.responses[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def empty(cls):
        return cls(np.empty((0, 2)), [], [], np.empty((0, DESCRIPTOR_SIZE)))

    @classmethod
    def from_keypoints(cls, kps):
        kps = list(kps)
        if not kps:
            return cls.empty()
        return cls([k.pixel for k in kps], [k.scale for k in kps], [k.orientation for k in kps],
                   [k.descriptor for k in kps], [k.response for k in kps])

    def shifted(self, offset):
        return Features(self.pixels + np.asarray(offset, float), self.scales, self.orientations,
                        self.descriptors, self.responses)


def to_gray(image):
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(float) / 255.0
    elif img.dtype == np.uint16:
        img = img.astype(float) / 65535.0
    else:
        img = img.astype(float)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    return img


class DogExtractor:
    """Difference-of-Gaussians keypoints with orientation-normalised gradient histograms."""

    def __init__(self, n_octaves=None, intervals=3, sigma=1.6, contrast_threshold=0.03, edge_ratio=10.0,
                 max_features=1500, border=8):
        self.n_octaves = n_octaves
        self.intervals = intervals
        self.sigma = sigma
        self.contrast_threshold = contrast_threshold
        self.edge_ratio = edge_ratio
        self.max_features = max_features
        self.border = border

    def extract(self, image):
        gray = to_gray(image)
        if gray.ndim != 2 or min(gray.shape) < 32:
            raise ImageTooSmall(f"image {gray.shape} is smaller than 32x32")
        S = self.intervals
        n_oct = self.n_octaves or max(1, int(np.log2(min(gray.shape) / 16.0)))
        k = 2.0 ** (1.0 / S)
        sig = [self.sigma * k ** s for s in range(S + 3)]
        incr = [np.sqrt(max(sig[0] ** 2 - 0.5 ** 2, 0.01))] + [
            np.sqrt(sig[s] ** 2 - sig[s - 1] ** 2) for s in range(1, S + 3)]
        pts, scl, ori, desc, resp = [], [], [], [], []
        base = gray
        for o in range(n_oct):
            gauss = [ndimage.gaussian_filter(base, incr[0], mode="nearest") if o == 0 else base]
            for s in range(1, S + 3):
                gauss.append(ndimage.gaussian_filter(gauss[-1], incr[s], mode="nearest"))
            dog = np.stack([gauss[s + 1] - gauss[s] for s in range(S + 2)])
            found = self._extrema(dog)
            if len(found):
                kp = self._refine(dog, found)
                if len(kp):
                    gy = np.stack([np.gradient(g, axis=0) for g in gauss])
                    gx = np.stack([np.gradient(g, axis=1) for g in gauss])
                    layer = np.clip(np.round(kp[:, 0]).astype(int), 1, S)
                    kscale = self.sigma * 2.0 ** (kp[:, 0] / S)  # octave pixels
                    theta = self._orientation(gx, gy, layer, kp[:, 1:3], kscale)
                    d = self._describe(gx, gy, layer, kp[:, 1:3], kscale, theta)
                    factor = 2.0 ** o
                    pts.append(kp[:, [2, 1]] * factor)
                    scl.append(kscale * factor)
                    ori.append(theta)
                    desc.append(d)
                    resp.append(np.abs(kp[:, 3]))
            base = gauss[S][::2, ::2]
            if min(base.shape) < 2 * self.border + 4:
                break
        if not pts:
            return Features.empty()
        pixels = np.concatenate(pts)
        responses = np.concatenate(resp)
        keep = (pixels[:, 0] >= 0) & (pixels[:, 0] <= gray.shape[1] - 1) & (pixels[:, 1] >= 0) & (
            pixels[:, 1] <= gray.shape[0] - 1)
        order = np.lexsort((pixels[:, 0], pixels[:, 1], -responses))
        order = order[keep[order]][: self.max_features]
        return Features(pixels[order], np.concatenate(scl)[order], np.concatenate(ori)[order],
                        np.concatenate(desc)[order], responses[order])

    def _extrema(self, dog):
        thr = 0.5 * self.contrast_threshold / self.intervals
        mx = ndimage.maximum_filter(dog, size=3, mode="nearest")
        mn = ndimage.minimum_filter(dog, size=3, mode="nearest")
        cand = ((dog == mx) & (dog > thr)) | ((dog == mn) & (dog < -thr))
        b = self.border
        cand[0] = cand[-1] = False
        cand[:, :b] = cand[:, -b:] = False
        cand[:, :, :b] = cand[:, :, -b:] = False
        return np.argwhere(cand)

    def _refine(self, dog, idx):
        """One quadratic step in (layer, row, col); returns rows of (s, y, x, value)."""
        s, y, x = idx.T
        D = dog
        dx = (D[s, y, x + 1] - D[s, y, x - 1]) / 2
        dy = (D[s, y + 1, x] - D[s, y - 1, x]) / 2
        ds = (D[s + 1, y, x] - D[s - 1, y, x]) / 2
        v = D[s, y, x]
        dxx = D[s, y, x + 1] + D[s, y, x - 1] - 2 * v
        dyy = D[s, y + 1, x] + D[s, y - 1, x] - 2 * v
        dss = D[s + 1, y, x] + D[s - 1, y, x] - 2 * v
        dxy = (D[s, y + 1, x + 1] - D[s, y + 1, x - 1] - D[s, y - 1, x + 1] + D[s, y - 1, x - 1]) / 4
        dxs = (D[s + 1, y, x + 1] - D[s + 1, y, x - 1] - D[s - 1, y, x + 1] + D[s - 1, y, x - 1]) / 4
        dys = (D[s + 1, y + 1, x] - D[s + 1, y - 1, x] - D[s - 1, y + 1, x] + D[s - 1, y - 1, x]) / 4
        H = np.stack([np.stack([dxx, dxy, dxs], -1), np.stack([dxy, dyy, dys], -1), np.stack([dxs, dys, dss], -1)], -2)
        g = np.stack([dx, dy, ds], -1)
        det = np.linalg.det(H)
        ok = np.abs(det) > 1e-12
        off = np.zeros_like(g)
        off[ok] = -np.linalg.solve(H[ok], g[ok][..., None])[..., 0]
        ok &= np.all(np.abs(off) < 0.6, axis=1)
        val = v + 0.5 * (g * off).sum(1)
        ok &= np.abs(val) >= self.contrast_threshold / self.intervals
        tr = dxx + dyy
        det2 = dxx * dyy - dxy**2
        r = self.edge_ratio
        ok &= (det2 > 0) & (tr**2 * r < (r + 1) ** 2 * det2)
        return np.stack([s + off[:, 2], y + off[:, 1], x + off[:, 0], val], axis=1)[ok]

    @staticmethod
    def _sample(img_stack, layer, yy, xx):
        h, w = img_stack.shape[1:]
        yy = np.clip(yy, 0, h - 1.001)
        xx = np.clip(xx, 0, w - 1.001)
        y0 = np.floor(yy).astype(int)
        x0 = np.floor(xx).astype(int)
        fy = yy - y0
        fx = xx - x0
        L = layer.reshape((-1,) + (1,) * (yy.ndim - 1))
        return ((1 - fy) * (1 - fx) * img_stack[L, y0, x0] + (1 - fy) * fx * img_stack[L, y0, x0 + 1]
                + fy * (1 - fx) * img_stack[L, y0 + 1, x0] + fy * fx * img_stack[L, y0 + 1, x0 + 1])

    def _orientation(self, gx, gy, layer, yx, kscale):
        n = len(layer)
        r = np.arange(-8, 9, dtype=float)
        oy, ox = np.meshgrid(r, r, indexing="ij")
        step = (1.5 * kscale * 3.0 / 8.0)[:, None, None]
        sy = yx[:, 0, None, None] + oy * step
        sx = yx[:, 1, None, None] + ox * step
        ax = self._sample(gx, layer, sy, sx)
        ay = self._sample(gy, layer, sy, sx)
        w = np.exp(-(oy**2 + ox**2) * (3.0 / 8.0) ** 2 / (2 * 1.5**2)) * np.hypot(ax, ay)
        ang = np.arctan2(ay, ax)
        bins = np.floor((ang + np.pi) / (2 * np.pi) * 36).astype(int) % 36
        hist = np.zeros((n, 36))
        np.add.at(hist, (np.repeat(np.arange(n), bins[0].size), bins.reshape(-1)), w.reshape(-1))
        hist = (np.roll(hist, 1, 1) + 2 * hist + np.roll(hist, -1, 1)) / 4
        peak = np.argmax(hist, axis=1)
        left = hist[np.arange(n), (peak - 1) % 36]
        right = hist[np.arange(n), (peak + 1) % 36]
        mid = hist[np.arange(n), peak]
        denom = left - 2 * mid + right
        shift = np.where(np.abs(denom) > 1e-12, 0.5 * (left - right) / np.where(denom == 0, 1, denom), 0.0)
        return ((peak + 0.5 + shift) / 36.0) * 2 * np.pi - np.pi

    def _describe(self, gx, gy, layer, yx, kscale, theta):
        n = len(layer)
        d = 4
        cell = 3.0 * kscale  # histogram cell width in octave pixels
        grid = (np.arange(16) + 0.5) / 4.0 - 2.0  # sample positions in cell units
        cy, cx = np.meshgrid(grid, grid, indexing="ij")
        cos, sin = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
        # rotate the cell-unit sample grid into image coordinates
        px = (cx * cos - cy * sin) * cell[:, None, None] + yx[:, 1, None, None]
        py = (cx * sin + cy * cos) * cell[:, None, None] + yx[:, 0, None, None]
        ax = self._sample(gx, layer, py, px)
        ay = self._sample(gy, layer, py, px)
        mag = np.hypot(ax, ay) * np.exp(-(cx**2 + cy**2) / (2 * (d / 2.0) ** 2))
        rel = (np.arctan2(ay, ax) - theta[:, None, None]) % (2 * np.pi)
        ob = rel / (2 * np.pi) * 8
        o0 = np.floor(ob).astype(int)
        fo = ob - o0
        # bilinear spatial weights onto cell centres
        xb = cx + 2.0 - 0.5
        yb = cy + 2.0 - 0.5
        x0 = np.floor(xb).astype(int)
        y0 = np.floor(yb).astype(int)
        fx = xb - x0
        fy = yb - y0
        hist = np.zeros((n, d * d * 8))
        rows = np.repeat(np.arange(n), 256)
        for dyc, wy in ((0, 1 - fy), (1, fy)):
            for dxc, wx in ((0, 1 - fx), (1, fx)):
                yc = y0 + dyc
                xc = x0 + dxc
                inside = (yc >= 0) & (yc < d) & (xc >= 0) & (xc < d)
                for doc, wo in ((0, 1 - fo), (1, fo)):
                    ob_ = (o0 + doc) % 8
                    w = mag * (wy * wx * inside)[None] * wo
                    col = (np.clip(yc, 0, d - 1) * d + np.clip(xc, 0, d - 1))[None] * 8 + ob_
                    np.add.at(hist, (rows, col.reshape(-1)), w.reshape(-1))
        return _normalize_descriptors(hist)


def _normalize_descriptors(hist):
    norm = np.linalg.norm(hist, axis=1, keepdims=True)
    hist = hist / np.where(norm > 0, norm, 1)
    hist = np.minimum(hist, 0.2)
    norm = np.linalg.norm(hist, axis=1, keepdims=True)
    out = hist / np.where(norm > 0, norm, 1)
    out[norm[:, 0] == 0] = 1.0 / np.sqrt(DESCRIPTOR_SIZE)
    return out


_DEFAULT = DogExtractor()


def extract_features(image, extractor=None):
    """Keypoints of ``image`` sorted by decreasing response."""
    return (extractor or _DEFAULT).extract(image)


def match_features(query, target, ratio=0.8):
    """Lowe ratio-test matches with one-to-one enforcement.

    ``query`` and ``target`` are descriptor arrays (or ``Features``).
    Returns a list of ``(query_idx, target_idx)`` sorted by query index.
    """
    q = query.descriptors if isinstance(query, Features) else np.asarray(query, float).reshape(-1, DESCRIPTOR_SIZE)
    t = target.descriptors if isinstance(target, Features) else np.asarray(target, float).reshape(-1, DESCRIPTOR_SIZE)
    if len(q) == 0 or len(t) == 0:
        return []
    d2 = (q**2).sum(1)[:, None] + (t**2).sum(1)[None, :] - 2.0 * q @ t.T
    d2 = np.maximum(d2, 0.0)
    if len(t) == 1:
        best = np.zeros(len(q), dtype=int)
        d1 = np.sqrt(d2[:, 0])
        accept = np.ones(len(q), bool)
    else:
        part = np.argpartition(d2, 1, axis=1)[:, :2]
        a = d2[np.arange(len(q)), part[:, 0]]
        b = d2[np.arange(len(q)), part[:, 1]]
        swap = b < a
        best = np.where(swap, part[:, 1], part[:, 0])
        first = np.sqrt(np.minimum(a, b))
        second = np.sqrt(np.maximum(a, b))
        d1 = first
        accept = first < ratio * second
        accept |= (first == 0) & (second > 0)
    claims = {}
    for qi in np.flatnonzero(accept):
        ti = int(best[qi])
        if ti not in claims or d1[qi] < d1[claims[ti]]:
            claims[ti] = int(qi)
    return sorted((qi, ti) for ti, qi in claims.items())


# --- feature files -------------------------------------------------------------

_FEAT_HEADER = struct.Struct("<I")
_FEAT_DTYPE = np.dtype([("uv", "<f4", 2), ("scale", "<f4"), ("ori", "<f4"), ("desc", "<f4", DESCRIPTOR_SIZE)])


def write_feature_file(path, feats):
    rec = np.empty(len(feats), dtype=_FEAT_DTYPE)
    rec["uv"] = feats.pixels
    rec["scale"] = feats.scales
    rec["ori"] = feats.orientations
    rec["desc"] = feats.descriptors
    Path(path).write_bytes(_FEAT_HEADER.pack(len(feats)) + rec.tobytes())


def read_feature_file(path):
    raw = Path(path).read_bytes()
    (n,) = _FEAT_HEADER.unpack_from(raw)
    if len(raw) != _FEAT_HEADER.size + n * _FEAT_DTYPE.itemsize:
        raise InputError(f"{path}: truncated feature file")
    rec = np.frombuffer(raw, dtype=_FEAT_DTYPE, count=n, offset=_FEAT_HEADER.size)
    desc = rec["desc"].astype(float)
    desc /= np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
    return Features(rec["uv"].astype(float), rec["scale"].astype(float), rec["ori"].astype(float), desc,
                    -np.arange(n, dtype=float))


class FeatureFileBackend:
    """Serves precomputed ``frame_<id>.feat`` files; ``extract`` takes a frame id."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def extract(self, frame_id):
        return read_feature_file(self.directory / f"frame_{frame_id}.feat")
