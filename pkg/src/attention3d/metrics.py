"""Evaluation measures: detection precision/recall, overlaps, coverage, AOI hits and dwells."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon

from .errors import DegeneratePolygon, EmptyDenominator, EmptyGroundTruth, MeshMismatch, NonMonotoneTimestamps


@dataclass
class MatchResult:
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    overlaps: list = field(default_factory=list)
    tp_frames: set = field(default_factory=set)

    @property
    def n_detections(self):
        return self.true_positives + self.false_positives

    @property
    def n_ground_truth(self):
        return self.true_positives + self.false_negatives

    @property
    def mean_overlap(self):
        return float(np.mean(self.overlaps)) if self.overlaps else 0.0

    @property
    def std_overlap(self):
        return float(np.std(self.overlaps)) if self.overlaps else 0.0


@dataclass(frozen=True)
class DwellRecord:
    roi_id: object
    entry: float
    exit: float

    @property
    def duration(self):
        return self.exit - self.entry


@dataclass(frozen=True)
class Roi3D:
    roi_id: object
    triangle_ids: frozenset
    area: float
    n_mesh_triangles: int = -1

    @classmethod
    def from_triangles(cls, roi_id, triangle_ids, mesh):
        ids = frozenset(int(i) for i in triangle_ids)
        if ids and (min(ids) < 0 or max(ids) >= mesh.n_triangles):
            raise MeshMismatch(f"roi {roi_id} references triangles outside the mesh")
        areas = mesh.triangle_areas()
        return cls(roi_id, ids, float(areas[sorted(ids)].sum()) if ids else 0.0, mesh.n_triangles)


def _polygon(points):
    poly = Polygon(np.asarray(points, float))
    if not poly.is_valid:
        poly = poly.buffer(0)
    if poly.area <= 0:
        raise DegeneratePolygon("polygon has zero area")
    return poly


def spatial_overlap_2d(a, b):
    """Intersection over union of two simple polygons given as vertex lists."""
    pa, pb = _polygon(a), _polygon(b)
    inter = pa.intersection(pb).area
    union = pa.union(pb).area
    return float(min(max(inter / union, 0.0), 1.0))


def precision_recall(tp, fp, fn):
    if tp + fp <= 0:
        raise EmptyDenominator("precision undefined without detections")
    if tp + fn <= 0:
        raise EmptyDenominator("recall undefined without ground truth")
    return tp / (tp + fp), tp / (tp + fn)


def match_detections(detections, ground_truth, overlap_threshold=0.5):
    """Greedy per-frame matching by descending overlap.

    Both arguments map ``frame_id -> list of polygons``.
    """
    result = MatchResult()
    frames = sorted(set(detections) | set(ground_truth))
    for f in frames:
        dets = list(detections.get(f, []))
        gts = list(ground_truth.get(f, []))
        pairs = []
        for i, d in enumerate(dets):
            for j, g in enumerate(gts):
                o = spatial_overlap_2d(d, g)
                if o >= overlap_threshold:
                    pairs.append((-o, i, j))
        pairs.sort()
        used_d, used_g = set(), set()
        for neg_o, i, j in pairs:
            if i in used_d or j in used_g:
                continue
            used_d.add(i)
            used_g.add(j)
            result.overlaps.append(-neg_o)
            result.tp_frames.add(f)
        result.true_positives += len(used_d)
        result.false_positives += len(dets) - len(used_d)
        result.false_negatives += len(gts) - len(used_g)
    return result


def temporal_coverage(gt_frames, tp_frames):
    gt = set(gt_frames)
    if not gt:
        raise EmptyGroundTruth("temporal coverage needs ground-truth frames")
    return len(gt & set(tp_frames)) / len(gt)


def overlap_3d(a, b, mesh):
    """Area-weighted Jaccard index of two triangle sets on the same mesh."""
    for roi in (a, b):
        if roi.n_mesh_triangles not in (-1, mesh.n_triangles) or (
                roi.triangle_ids and max(roi.triangle_ids) >= mesh.n_triangles):
            raise MeshMismatch(f"roi {roi.roi_id} was built on a different mesh")
    areas = mesh.triangle_areas()
    inter = sorted(a.triangle_ids & b.triangle_ids)
    union = sorted(a.triangle_ids | b.triangle_ids)
    if not union:
        return 1.0
    return float(areas[inter].sum() / areas[union].sum())


def aoi_hits(hits, roi):
    """Hits whose triangle belongs to ``roi``, in their original order."""
    selected = [h for h in hits if h.triangle_id in roi.triangle_ids]
    return selected, len(selected)


def nominal_period(timestamps):
    ts = np.asarray(timestamps, float)
    return float(np.median(np.diff(ts))) if len(ts) > 1 else 0.0


def compute_dwells(timestamps, flags, roi_id, min_duration=0.0, period=None):
    """Maximal runs of consecutive in-ROI samples, each closed one period after its last sample."""
    ts = np.asarray(timestamps, float)
    flags = np.asarray(flags, bool)
    if len(ts) != len(flags):
        raise ValueError("timestamps and flags differ in length")
    if np.any(np.diff(ts) <= 0):
        raise NonMonotoneTimestamps("timestamps must be strictly increasing")
    if period is None:
        period = nominal_period(ts)
    dwells = []
    i = 0
    n = len(flags)
    while i < n:
        if not flags[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and flags[j + 1]:
            j += 1
        run = j - i + 1
        entry = float(ts[i])
        rec = DwellRecord(roi_id, entry, entry + run * period)
        if rec.duration >= min_duration:
            dwells.append(rec)
        i = j + 1
    return dwells


def format_ratio(count, total):
    """``"1512 (79.45%)"`` style localisation ratio."""
    if total <= 0:
        raise EmptyDenominator("ratio over zero frames")
    return f"{count} ({100.0 * count / total:.2f}%)"


def dwell_histogram(dwells, bin_width=0.0333333333333, max_duration=None):
    durations = np.array([d.duration for d in dwells])
    if len(durations) == 0:
        return []
    top = max_duration if max_duration is not None else durations.max() + bin_width
    edges = np.arange(0.0, top + bin_width, bin_width)
    counts, edges = np.histogram(durations, bins=edges)
    return [(float(lo), int(c)) for lo, c in zip(edges[:-1], counts)]


def write_histogram_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_start_s", "count"])
        for lo, c in rows:
            w.writerow([f"{lo:.4f}", c])


def write_roi_csv(path, rois):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["roi_id", "triangle_id"])
        for roi in rois:
            for t in sorted(roi.triangle_ids):
                w.writerow([roi.roi_id, t])


def read_roi_csv(path, mesh):
    groups = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(row["roi_id"], []).append(int(row["triangle_id"]))
    return [Roi3D.from_triangles(rid, ids, mesh) for rid, ids in groups.items()]


class MetricsReport:
    """Ordered key-value blocks, rendered as text and per-table CSV."""

    def __init__(self):
        self.blocks = []

    def add(self, name, values):
        self.blocks.append((name, dict(values)))

    def get(self, name):
        for n, v in self.blocks:
            if n == name:
                return v
        raise KeyError(name)

    def to_text(self):
        out = []
        for name, values in self.blocks:
            out.append(f"[{name}]")
            for k, v in values.items():
                out.append(f"{k} = {_fmt(v)}")
            out.append("")
        return "\n".join(out)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def parse(cls, text):
        rep = cls()
        name, values = None, {}
        for line in text.splitlines():
            line = line.strip()
            if line.startswith("[") and line.endswith("]"):
                if name is not None:
                    rep.add(name, values)
                name, values = line[1:-1], {}
            elif "=" in line:
                k, v = line.split("=", 1)
                values[k.strip()] = _unfmt(v.strip())
        if name is not None:
            rep.add(name, values)
        return rep

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.parse(fh.read())

    def write_table_csv(self, path, prefix):
        rows = [(n, v) for n, v in self.blocks if n.startswith(prefix)]
        keys = []
        for _, v in rows:
            keys += [k for k in v if k not in keys]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block"] + keys)
            for n, v in rows:
                w.writerow([n] + [_fmt(v.get(k, "")) for k in keys])


def _unfmt(text):
    """Numbers back to int/float; ratio strings like ``"193 (96.50%)"`` stay text."""
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
