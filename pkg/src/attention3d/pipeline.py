"""Stage driver: configuration, per-stage file contracts and manifests.

Every stage reads plain files from the dataset directory (``data``) and/or
the output directory (``out``) and writes plain files back into ``out``, so
stages can be run one by one or chained by :func:`run_pipeline`.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import Attention3DError, ConfigError, InputError, NoLocalizedDetections
from .features import extract_features, read_feature_file, write_feature_file
from .gaze import (accumulate_saliency, build_obb_tree, read_gaze_csv, read_hits_csv, recover_fixations,
                   write_hits_csv, write_saliency_csv, write_saliency_ply)
from .geometry import Pose6D, matrix_to_rotvec, read_intrinsics, read_poses_csv, rotvec_to_matrix, write_poses_csv
from .metrics import (MetricsReport, aoi_hits, compute_dwells, dwell_histogram, format_ratio, match_detections,
                      overlap_3d, precision_recall, read_roi_csv, temporal_coverage, write_histogram_csv,
                      write_roi_csv)
from .roi import (detect_logo, filter_detections, map_roi_3d, polygons_as_detections, read_detections_csv,
                  read_logos, read_polygons_csv, write_detections_csv)
from .slam import Failure, SparseMap, TrackingParams, build_map, localize_monocular
from .surface import colorize_mesh, extract_isosurface, read_ply, write_mesh
from .synth import (DEMO_SCAN_K, SceneSpec, SessionSpec, analytic_roi, demo_scan_trajectory, demo_scene,
                    demo_session, read_depth_png, write_dataset)
from .volumetric import IntegrationParams, VoxelGrid, integrate_depth

log = logging.getLogger("attention3d")

DEFAULTS = {
    "seed": 0,
    "integration": {"l_occ": 0.85, "l_free": -0.40, "l_min": -3.5, "l_max": 3.5, "max_range": 5.0,
                    "pixel_stride": 2},
    "grid": {"origin": [-1.6125, -1.2125, -0.6125], "voxel_size": 0.025, "dims": [128, 128, 128], "sub_volume_edge": 64,
             "page_budget": None},
    "surface": {"iso": 0.5, "color_stride": 5},
    "tracking": {"ratio": 0.8, "inlier_threshold_px": 2.0, "confidence": 0.999, "n_reference_keyframes": 3,
                 "keyframe_inlier_fraction": 0.6, "keyframe_translation": 0.3, "min_depth": 0.1,
                 "max_depth": 5.0, "depth_edge_ratio": 0.05, "window": 5, "huber_delta": 2.0},
    "vocabulary": {"branching": 10, "levels": 3},
    "localization": {"n_candidates": 5, "min_matches": 12, "min_inliers": 10},
    "gaze": {"sigma": 0.02, "max_pose_gap_s": 0.1},
    "roi": {"source": "scan", "frame_stride": 1, "min_inliers": 8, "ratio": 0.8, "ransac_threshold_px": 3.0,
            "max_shift": 0.2, "scale_range": [0.67, 1.5], "window": 10, "vote_fraction": 0.5, "rule": "all",
            "gt_tolerance_voxels": 2.0},
    "metrics": {"overlap_threshold": 0.5, "min_dwell_s": 0.035, "histogram_bin_s": 1.0 / 30.0},
    "synth": {"n_scan_frames": 200, "n_samples": 600, "supersample": 2},
}

# keys whose value may be null
_NULLABLE = {("grid", "page_budget")}
_CHOICES = {("roi", "source"): ("scan", "etg"), ("roi", "rule"): ("all", "centroid", "any")}


class PipelineConfig:
    """Nested settings with defaults; unknown keys and ill-typed values are rejected."""

    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS)
        if values:
            _merge(self.values, values, DEFAULTS, ())
        self._validate()

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls(raw)

    def __getitem__(self, key):
        return self.values[key]

    def with_seed(self, seed):
        cfg = copy.deepcopy(self)
        cfg.values["seed"] = int(seed)
        cfg._validate()
        return cfg

    def to_json(self):
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @property
    def seed(self):
        return self.values["seed"]

    def integration_params(self):
        c = dict(self["integration"])
        c.pop("pixel_stride")
        return IntegrationParams(**c)

    def tracking_params(self):
        return TrackingParams(**self["tracking"], seed=self.seed)

    def _validate(self):
        v = self.values
        if not (isinstance(v["seed"], int) and 0 <= v["seed"] < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        try:
            self.integration_params()
        except InputError as exc:
            raise ConfigError(f"integration: {exc}") from exc
        positive = [("integration", "pixel_stride"), ("grid", "voxel_size"), ("grid", "sub_volume_edge"),
                    ("surface", "color_stride"), ("vocabulary", "branching"), ("vocabulary", "levels"),
                    ("gaze", "sigma"), ("roi", "frame_stride"), ("roi", "min_inliers"),
                    ("roi", "ransac_threshold_px"), ("tracking", "window"), ("synth", "n_scan_frames"),
                    ("synth", "n_samples"), ("synth", "supersample")]
        for sec, key in positive:
            if not v[sec][key] > 0:
                raise ConfigError(f"{sec}.{key} must be positive")
        for sec, key in [("integration", "pixel_stride"), ("grid", "sub_volume_edge"), ("surface", "color_stride"),
                         ("vocabulary", "branching"), ("vocabulary", "levels"), ("roi", "frame_stride"),
                         ("roi", "min_inliers"), ("roi", "window"), ("tracking", "window"),
                         ("tracking", "n_reference_keyframes"), ("localization", "n_candidates"),
                         ("localization", "min_matches"), ("localization", "min_inliers"),
                         ("synth", "n_scan_frames"), ("synth", "n_samples"), ("synth", "supersample")]:
            if not isinstance(v[sec][key], int):
                raise ConfigError(f"{sec}.{key} must be an integer")
        g = v["grid"]
        if len(g["origin"]) != 3 or len(g["dims"]) != 3:
            raise ConfigError("grid.origin and grid.dims need three entries")
        if any(int(d) != d or d <= 0 or d % g["sub_volume_edge"] for d in g["dims"]):
            raise ConfigError("grid.dims must be positive multiples of grid.sub_volume_edge")
        if g["page_budget"] is not None and not (isinstance(g["page_budget"], int) and g["page_budget"] >= 1):
            raise ConfigError("grid.page_budget must be null or an integer >= 1")
        for (sec, key), allowed in _CHOICES.items():
            if v[sec][key] not in allowed:
                raise ConfigError(f"{sec}.{key} must be one of {', '.join(allowed)}")
        lo, hi = v["roi"]["scale_range"]
        if not 0 < lo <= 1 <= hi:
            raise ConfigError("roi.scale_range must satisfy 0 < lo <= 1 <= hi")
        if not 0 < v["roi"]["vote_fraction"] <= 1:
            raise ConfigError("roi.vote_fraction must lie in (0, 1]")
        if not 0 < v["metrics"]["overlap_threshold"] <= 1:
            raise ConfigError("metrics.overlap_threshold must lie in (0, 1]")


def _merge(dst, src, ref, path):
    for key, val in src.items():
        where = ".".join(path + (key,))
        if key not in ref:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(ref[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}' must be an object")
            _merge(dst[key], val, ref[key], path + (key,))
            continue
        expected = ref[key]
        if path + (key,) in _NULLABLE:
            if val is not None and not _is_number(val):
                raise ConfigError(f"'{where}' must be null or a number")
        elif isinstance(expected, list):
            if not isinstance(val, list) or not all(_is_number(x) for x in val):
                raise ConfigError(f"'{where}' must be a list of numbers")
        elif isinstance(expected, str):
            if not isinstance(val, str):
                raise ConfigError(f"'{where}' must be a string")
        elif not _is_number(val):
            raise ConfigError(f"'{where}' must be a number")
        dst[key] = val


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


# -- manifests ------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Context:
    data: Path
    out: Path
    config: PipelineConfig

    def __post_init__(self):
        self.data = Path(self.data) if self.data is not None else None
        self.out = Path(self.out)

    def need(self, path, what):
        if not Path(path).exists():
            raise InputError(f"missing {what}: {path}")
        return Path(path)


def _files(paths):
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out += sorted(q for q in p.rglob("*") if q.is_file())
        elif p.exists():
            out.append(p)
    return out


def write_manifest(ctx, stage, inputs, outputs):
    def rel(p):
        p = Path(p).resolve()
        for tag, root in (("out", ctx.out), ("data", ctx.data)):
            if root is None:
                continue
            try:
                return f"{tag}/{p.relative_to(root.resolve()).as_posix()}"
            except ValueError:
                pass
        return p.name

    manifest = {
        "stage": stage,
        "config_sha256": ctx.config.hash,
        "seed": ctx.config.seed,
        "inputs": {rel(p): sha256_file(p) for p in _files(inputs)},
        "outputs": {rel(p): sha256_file(p) for p in _files(outputs)},
    }
    mdir = ctx.out / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    path = mdir / f"{stage}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- dataset access -----------------------------------------------------------------

def _scan_frames(data):
    ids = sorted(int(p.stem.split("_")[1]) for p in (data / "scan").glob("color_*.png"))
    if not ids:
        raise InputError(f"no scan frames under {data / 'scan'}")
    return ids


def _rgb(path):
    return np.asarray(Image.open(path).convert("RGB"))


def _etg_frames(data):
    path = data / "etg" / "frames.csv"
    if not path.exists():
        raise InputError(f"missing frame index {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["frame_id"]), float(r["timestamp_s"]), r.get("blurred", "0").strip() == "1") for r in rows]


def _initial_pose(data):
    """World frame anchor: the first ground-truth/calibration pose when provided."""
    path = data / "scan" / "poses_gt.csv"
    if path.exists():
        poses = read_poses_csv(path)
        return poses[min(poses)]
    return Pose6D.identity()


# -- stages --------------------------------------------------------------------------

def stage_map_build(ctx):
    """Scan RGB-D frames -> sparse map, scan poses, occupancy grid and coloured mesh."""
    cfg, data, out = ctx.config, ctx.data, ctx.out
    k = read_intrinsics(ctx.need(data / "scan" / "intrinsics.txt", "scan intrinsics"))
    ids = _scan_frames(data)
    fdir = out / "features"
    fdir.mkdir(parents=True, exist_ok=True)

    def frames():
        for i in ids:
            feats = extract_features(_rgb(data / "scan" / f"color_{i:04d}.png"))
            write_feature_file(fdir / f"scan_{i:04d}.feat", feats)
            yield i, feats, read_depth_png(data / "scan" / f"depth_{i:04d}.png")

    voc = cfg["vocabulary"]
    smap, poses = build_map(frames(), k, _initial_pose(data), cfg.tracking_params(),
                            vocabulary=(voc["branching"], voc["levels"]), log=log.info)
    log.info("map: %d keyframes, %d landmarks, %d/%d frames tracked", len(smap.keyframes), len(smap.landmarks),
             len(poses), len(ids))
    smap.save(out / "map")
    write_poses_csv(out / "scan_poses.csv", poses)

    g = cfg["grid"]
    grid = VoxelGrid(g["origin"], g["voxel_size"], g["dims"], g["sub_volume_edge"], page_budget=g["page_budget"])
    params = cfg.integration_params()
    stride = cfg["integration"]["pixel_stride"]
    for i in sorted(poses):
        integrate_depth(grid, read_depth_png(data / "scan" / f"depth_{i:04d}.png"), poses[i], k, params, stride)
    grid.save(out / "grid")
    mesh = extract_isosurface(grid, cfg["surface"]["iso"])
    log.info("mesh: %d vertices, %d triangles", mesh.n_vertices, mesh.n_triangles)
    colour = [(_rgb(data / "scan" / f"color_{i:04d}.png"), poses[i],
               read_depth_png(data / "scan" / f"depth_{i:04d}.png"))
              for i in sorted(poses)[::cfg["surface"]["color_stride"]]]
    mesh = colorize_mesh(mesh, colour, k)
    write_mesh(out / "mesh.ply", mesh)
    return [data / "scan"], [out / "map", out / "scan_poses.csv", out / "features", out / "grid", out / "mesh.ply"]


def stage_localize(ctx):
    """Monocular eye-tracker frames -> poses plus the localization ratio."""
    cfg, data, out = ctx.config, ctx.data, ctx.out
    smap = SparseMap.load(ctx.need(out / "map", "sparse map (run map-build first)"))
    k = read_intrinsics(ctx.need(data / "etg" / "intrinsics.txt", "eye-tracker intrinsics"))
    frames = _etg_frames(data)
    loc = cfg["localization"]
    params = cfg.tracking_params()
    fdir = out / "features"
    fdir.mkdir(parents=True, exist_ok=True)
    poses, rows = {}, []
    for f, ts, blurred in frames:
        feats = extract_features(_rgb(ctx.need(data / "etg" / f"frame_{f:04d}.png", "eye-tracker frame")))
        write_feature_file(fdir / f"etg_{f:04d}.feat", feats)
        r = localize_monocular(smap, None, k, loc["n_candidates"], loc["min_matches"], loc["min_inliers"], params,
                               features=feats)
        if isinstance(r, Failure):
            rows.append([f, repr(ts), int(blurred), 0, r.reason])
        else:
            poses[f] = r
            rows.append([f, repr(ts), int(blurred), 1, ""])
    write_poses_csv(out / "etg_poses.csv", poses)
    with open(out / "localization.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "timestamp_s", "blurred", "localized", "reason"])
        w.writerows(rows)
    report = localization_report(rows)
    report.write(out / "localization.txt")
    log.info("localized %s", report.get("localization")["localized"])
    return ([out / "map", data / "etg" / "intrinsics.txt", data / "etg" / "frames.csv"]
            + [data / "etg" / f"frame_{f:04d}.png" for f, _, _ in frames],
            [out / "etg_poses.csv", out / "localization.csv", out / "localization.txt"]
            + [fdir / f"etg_{f:04d}.feat" for f, _, _ in frames])


def localization_report(rows):
    rep = MetricsReport()
    n = len(rows)
    ok = sum(r[3] for r in rows)
    clean = [r for r in rows if not r[2]]
    block = {"frames": n, "localized": format_ratio(ok, n)}
    if clean and len(clean) < n:
        block["localized_clean"] = format_ratio(sum(r[3] for r in clean), len(clean))
        blurred = [r for r in rows if r[2]]
        block["localized_blurred"] = format_ratio(sum(r[3] for r in blurred), len(blurred))
    reasons = {}
    for r in rows:
        if r[4]:
            reasons[r[4]] = reasons.get(r[4], 0) + 1
    for reason in sorted(reasons):
        block[f"failed_{reason}"] = reasons[reason]
    rep.add("localization", block)
    return rep


def interpolate_pose(a, b, s):
    """Pose a fraction ``s`` of the way from ``a`` to ``b`` (geodesic rotation, linear centre)."""
    R = rotvec_to_matrix(s * matrix_to_rotvec(b.rotation @ a.rotation.T)) @ a.rotation
    c = (1.0 - s) * a.center + s * b.center
    return Pose6D(R, -R @ c)


def sample_poses(sample_times, frame_times, frame_poses, max_gap):
    """Head pose per gaze sample from the localized scene-camera frames.

    A sample between two localized frames at most ``2 * max_gap`` apart gets
    the interpolated pose; otherwise the nearest localized frame within
    ``max_gap`` is used; otherwise ``None``.
    """
    known = sorted((t, f) for f, t in frame_times.items() if f in frame_poses)
    if not known:
        return [None] * len(sample_times)
    kt = np.array([t for t, _ in known])
    out = []
    for t in sample_times:
        j = int(np.searchsorted(kt, t, side="right"))
        left = known[j - 1] if j > 0 else None
        right = known[j] if j < len(known) else None
        if left and right and right[0] - left[0] <= 2 * max_gap:
            s = (t - left[0]) / (right[0] - left[0]) if right[0] > left[0] else 0.0
            out.append(interpolate_pose(frame_poses[left[1]], frame_poses[right[1]], s))
            continue
        near = [n for n in (left, right) if n and abs(n[0] - t) <= max_gap]
        out.append(frame_poses[min(near, key=lambda n: (abs(n[0] - t), n[0]))[1]] if near else None)
    return out


def stage_gaze_map(ctx):
    """Localized poses + gaze CSV -> fixation hits and per-triangle saliency."""
    cfg, data, out = ctx.config, ctx.data, ctx.out
    mesh = read_ply(ctx.need(out / "mesh.ply", "mesh (run map-build first)"))
    poses = read_poses_csv(ctx.need(out / "etg_poses.csv", "eye-tracker poses (run localize first)"))
    k = read_intrinsics(ctx.need(data / "etg" / "intrinsics.txt", "eye-tracker intrinsics"))
    samples = read_gaze_csv(ctx.need(data / "etg" / "gaze.csv", "gaze samples"))
    frame_times = {f: t for f, t, _ in _etg_frames(data)}
    g = cfg["gaze"]
    per_sample = sample_poses([s.timestamp for s in samples], frame_times, poses, g["max_pose_gap_s"])
    tree = build_obb_tree(mesh)
    hits = recover_fixations(per_sample, k, samples, tree)
    sal = accumulate_saliency(hits, mesh, g["sigma"], tree)
    write_hits_csv(out / "hits.csv", hits)
    write_saliency_csv(out / "saliency.csv", sal)
    write_saliency_ply(out / "saliency.ply", mesh, sal)
    log.info("gaze: %d samples, %d posed, %d hits", len(samples), sum(p is not None for p in per_sample), len(hits))
    return ([out / "mesh.ply", out / "etg_poses.csv", data / "etg" / "gaze.csv", data / "etg" / "frames.csv"],
            [out / "hits.csv", out / "saliency.csv", out / "saliency.ply"])


def _roi_source(ctx):
    """(feature file pattern, frame ids, intrinsics, poses file) of the ROI frame source."""
    data, out, cfg = ctx.data, ctx.out, ctx.config
    stride = cfg["roi"]["frame_stride"]
    if cfg["roi"]["source"] == "scan":
        ids = _scan_frames(data)[::stride]
        return "scan_{:04d}.feat", ids, data / "scan" / "intrinsics.txt", out / "scan_poses.csv"
    ids = [f for f, _, _ in _etg_frames(data)][::stride]
    return "etg_{:04d}.feat", ids, data / "etg" / "intrinsics.txt", out / "etg_poses.csv"


def stage_roi_detect(ctx):
    """Frames + reference logos -> raw and temporally filtered 2D detections."""
    cfg, data, out = ctx.config, ctx.data, ctx.out
    r = cfg["roi"]
    logos = read_logos(ctx.need(data / "logos", "logo directory"))
    pattern, ids, kpath, _ = _roi_source(ctx)
    k = read_intrinsics(ctx.need(kpath, "intrinsics"))
    raw = []
    for f in ids:
        feats = read_feature_file(ctx.need(out / "features" / pattern.format(f), "frame features"))
        for L in logos:
            det = detect_logo(feats, L, f, r["min_inliers"], r["ratio"], r["ransac_threshold_px"], cfg.seed)
            if det:
                raw.append(det)
    kept = filter_detections(raw, (k.width, k.height), r["max_shift"], tuple(r["scale_range"]), r["window"])
    write_detections_csv(out / "detections_raw.csv", raw)
    write_detections_csv(out / "detections.csv", kept)
    log.info("roi: %d raw detections, %d after filtering", len(raw), len(kept))
    return ([data / "logos"] + [out / "features" / pattern.format(f) for f in ids],
            [out / "detections_raw.csv", out / "detections.csv"])


def _map_rois(dets_by_logo, logo_ids, poses, k, mesh, tree, r):
    rois = []
    for lid in logo_ids:
        try:
            rois.append(map_roi_3d(dets_by_logo.get(lid, []), poses, k, mesh, tree, r["vote_fraction"], r["rule"],
                                   roi_id=lid))
        except NoLocalizedDetections:
            log.warning("roi %s: no localized detections, skipped", lid)
    return rois


def stage_roi_map(ctx):
    """Detections -> triangle-set ROIs on the mesh (and the same from ground-truth polygons when present)."""
    cfg, data, out = ctx.config, ctx.data, ctx.out
    r = cfg["roi"]
    mesh = read_ply(ctx.need(out / "mesh.ply", "mesh (run map-build first)"))
    _, ids, kpath, ppath = _roi_source(ctx)
    k = read_intrinsics(ctx.need(kpath, "intrinsics"))
    poses = read_poses_csv(ctx.need(ppath, "frame poses"))
    logo_ids = [L for L in _logo_ids(data)]
    tree = build_obb_tree(mesh)
    dets = {}
    for d in read_detections_csv(ctx.need(out / "detections.csv", "detections (run roi-detect first)")):
        dets.setdefault(d.logo_id, []).append(d)
    write_roi_csv(out / "rois.csv", _map_rois(dets, logo_ids, poses, k, mesh, tree, r))
    inputs = [out / "mesh.ply", ppath, out / "detections.csv"]
    outputs = [out / "rois.csv"]
    gt_path = _gt_polygon_path(ctx)
    if gt_path.exists():
        keep = set(ids)
        gt = {lid: polygons_as_detections({f: p for f, p in fr.items() if f in keep}, lid)
              for lid, fr in read_polygons_csv(gt_path).items()}
        write_roi_csv(out / "rois_gt2d.csv", _map_rois(gt, logo_ids, poses, k, mesh, tree, r))
        inputs.append(gt_path)
        outputs.append(out / "rois_gt2d.csv")
    return inputs, outputs


def _logo_ids(data):
    with open(data / "logos" / "logos.csv", newline="") as fh:
        return [row["id"] for row in csv.DictReader(fh)]


def _gt_polygon_path(ctx):
    name = "scan_polygons.csv" if ctx.config["roi"]["source"] == "scan" else "etg_polygons.csv"
    return ctx.data / "gt" / name


def _read_gaze_gt(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ts = np.array([float(r["timestamp_s"]) for r in rows])
    target = np.array([[float(r[f"target_{a}"]) for a in "xyz"] for r in rows])
    hit = np.array([[float(r[f"hit_{a}"]) for a in "xyz"] for r in rows])
    return ts, target, hit, [r["logo_id"] for r in rows]


def stage_analyze(ctx):
    """Everything -> MetricsReport (text), per-table CSVs and the dwell histogram."""
    cfg, data, out = ctx.config, ctx.data, ctx.out
    m = cfg["metrics"]
    rep = MetricsReport()
    inputs = []

    loc_csv = ctx.need(out / "localization.csv", "localization results (run localize first)")
    with open(loc_csv, newline="") as fh:
        rows = [[int(r["frame_id"]), r["timestamp_s"], int(r["blurred"]), int(r["localized"]), r["reason"]]
                for r in csv.DictReader(fh)]
    rep.blocks += localization_report(rows).blocks
    inputs.append(loc_csv)

    # 2D detection quality against ground-truth polygons
    gt_path = _gt_polygon_path(ctx)
    det_path = ctx.need(out / "detections.csv", "detections (run roi-detect first)")
    inputs.append(det_path)
    logo_ids = _logo_ids(data)
    if gt_path.exists():
        inputs.append(gt_path)
        _, ids, _, _ = _roi_source(ctx)
        keep = set(ids)
        gt = read_polygons_csv(gt_path)
        dets = {}
        for d in read_detections_csv(det_path):
            dets.setdefault(d.logo_id, {}).setdefault(d.frame_id, []).append(d.polygon)
        tot = [0, 0, 0]
        for lid in logo_ids:
            g = {f: p for f, p in gt.get(lid, {}).items() if f in keep}
            res = match_detections(dets.get(lid, {}), g, m["overlap_threshold"])
            tot = [tot[0] + res.true_positives, tot[1] + res.false_positives, tot[2] + res.false_negatives]
            rep.add(f"detection {lid}", _detection_block(res, g))
        rep.add("detection total", _pr_block(*tot))

    # 3D ROIs against the analytic patches
    mesh = read_ply(ctx.need(out / "mesh.ply", "mesh"))
    inputs.append(out / "mesh.ply")
    rois = {r.roi_id: r for r in read_roi_csv(ctx.need(out / "rois.csv", "rois (run roi-map first)"), mesh)}
    inputs.append(out / "rois.csv")
    gt2d = {}
    if (out / "rois_gt2d.csv").exists():
        gt2d = {r.roi_id: r for r in read_roi_csv(out / "rois_gt2d.csv", mesh)}
        inputs.append(out / "rois_gt2d.csv")
    scene = None
    if (data / "scene.json").exists():
        scene = SceneSpec.load(data / "scene.json")
        inputs.append(data / "scene.json")
        scan_poses = read_poses_csv(out / "scan_poses.csv")
        viewpoint = scan_poses[min(scan_poses)].center
        tol = cfg["roi"]["gt_tolerance_voxels"] * cfg["grid"]["voxel_size"]
    for lid in logo_ids:
        block = {}
        auto = rois.get(lid)
        block["triangles"] = len(auto.triangle_ids) if auto else 0
        block["area_m2"] = auto.area if auto else 0.0
        if scene is not None:
            truth = analytic_roi(scene, lid, mesh, viewpoint, tol)
            block["analytic_triangles"] = len(truth.triangle_ids)
            block["overlap_auto"] = overlap_3d(auto, truth, mesh) if auto else 0.0
            if lid in gt2d:
                block["overlap_gt_polygons"] = overlap_3d(gt2d[lid], truth, mesh)
        if auto and lid in gt2d:
            block["overlap_auto_vs_gt_polygons"] = overlap_3d(auto, gt2d[lid], mesh)
        rep.add(f"roi3d {lid}", block)

    # gaze: accuracy, AOI hits and dwells
    hits = read_hits_csv(ctx.need(out / "hits.csv", "hits (run gaze-map first)"))
    inputs.append(out / "hits.csv")
    samples = read_gaze_csv(ctx.need(data / "etg" / "gaze.csv", "gaze samples"))
    inputs.append(data / "etg" / "gaze.csv")
    block = {"samples": len(samples), "valid": sum(s.valid for s in samples), "hits": len(hits)}
    gaze_gt = data / "etg" / "gaze_gt.csv"
    gt_labels = None
    if gaze_gt.exists() and hits:
        inputs.append(gaze_gt)
        ts, target, hit_gt, gt_labels = _read_gaze_gt(gaze_gt)
        index = {float(t): i for i, t in enumerate(ts)}
        rows = [index[h.timestamp] for h in hits if h.timestamp in index]
        pts = np.array([h.point for h in hits if h.timestamp in index])
        e_target = np.linalg.norm(pts - target[rows], axis=1)
        e_ray = np.linalg.norm(pts - hit_gt[rows], axis=1)
        block["fixation_error_median_cm"] = 100.0 * float(np.nanmedian(e_target))
        block["surface_error_median_cm"] = 100.0 * float(np.nanmedian(e_ray))
    rep.add("gaze", block)

    times = np.array([s.timestamp for s in samples])
    period = float(np.median(np.diff(times))) if len(times) > 1 else 0.0
    all_dwells = []
    for lid in logo_ids:
        roi = rois.get(lid)
        sel, n = aoi_hits(hits, roi) if roi else ([], 0)
        in_roi = {h.timestamp for h in sel}
        flags = [s.timestamp in in_roi for s in samples]
        dwells = compute_dwells(times, flags, lid, m["min_dwell_s"], period) if len(times) else []
        all_dwells += dwells
        b = {"hits": n, "dwells": len(dwells),
             "longest_dwell_ms": 1000.0 * max((d.duration for d in dwells), default=0.0),
             "total_dwell_ms": 1000.0 * sum(d.duration for d in dwells)}
        if gt_labels is not None:
            b["true_hits"] = sum(1 for lab in gt_labels if lab == lid)
        rep.add(f"aoi {lid}", b)

    rep.write(out / "report.txt")
    rep.write_table_csv(out / "table_localization.csv", "localization")
    rep.write_table_csv(out / "table_detection.csv", "detection")
    rep.write_table_csv(out / "table_roi3d.csv", "roi3d")
    rep.write_table_csv(out / "table_aoi.csv", "aoi")
    write_histogram_csv(out / "dwell_histogram.csv", dwell_histogram(all_dwells, m["histogram_bin_s"]))
    outputs = [out / n for n in ("report.txt", "table_localization.csv", "table_detection.csv", "table_roi3d.csv",
                                 "table_aoi.csv", "dwell_histogram.csv")]
    return inputs, outputs


def _pr_block(tp, fp, fn):
    b = {"tp": tp, "fp": fp, "fn": fn}
    b["precision"] = tp / (tp + fp) if tp + fp else "undefined"
    b["recall"] = tp / (tp + fn) if tp + fn else "undefined"
    if tp + fp and tp + fn:
        b["precision"], b["recall"] = precision_recall(tp, fp, fn)
    return b


def _detection_block(res, gt):
    b = {"ground_truth": res.n_ground_truth, "detections": res.n_detections}
    b.update(_pr_block(res.true_positives, res.false_positives, res.false_negatives))
    b["overlap_mean"] = res.mean_overlap
    b["overlap_std"] = res.std_overlap
    b["temporal_coverage"] = temporal_coverage(gt, res.tp_frames) if gt else "undefined"
    return b


def stage_synth(ctx, scene_path=None, session_path=None):
    """Specs (or the bundled demo) -> a rendered dataset in ``ctx.out``."""
    s = ctx.config["synth"]
    scene = SceneSpec.load(scene_path) if scene_path else demo_scene()
    session = SessionSpec.load(session_path) if session_path else demo_session(s["n_samples"])
    if session.intrinsics is None:
        raise ConfigError("session spec needs intrinsics")
    ctx.out.mkdir(parents=True, exist_ok=True)
    write_dataset(ctx.out, scene, DEMO_SCAN_K, demo_scan_trajectory(s["n_scan_frames"]), session, ctx.config.seed,
                  s["supersample"], log=log.info)
    inputs = [p for p in (scene_path, session_path) if p]
    outputs = [ctx.out / d for d in ("scan", "etg", "logos", "gt")] + [ctx.out / "scene.json",
                                                                       ctx.out / "session.json"]
    return inputs, outputs


STAGES = {
    "map-build": stage_map_build,
    "localize": stage_localize,
    "gaze-map": stage_gaze_map,
    "roi-detect": stage_roi_detect,
    "roi-map": stage_roi_map,
    "analyze": stage_analyze,
}
PIPELINE_ORDER = ["map-build", "localize", "gaze-map", "roi-detect", "roi-map", "analyze"]


def run_stage(name, ctx, **kwargs):
    if name != "synth" and ctx.data is None:
        raise InputError("a dataset directory is required")
    if ctx.data is not None and name != "synth" and not ctx.data.is_dir():
        raise InputError(f"dataset directory {ctx.data} does not exist")
    ctx.out.mkdir(parents=True, exist_ok=True)
    fn = stage_synth if name == "synth" else STAGES[name]
    log.info("stage %s", name)
    inputs, outputs = fn(ctx, **kwargs)
    return write_manifest(ctx, name, inputs, outputs)


def run_pipeline(ctx):
    for name in PIPELINE_ORDER:
        run_stage(name, ctx)
    return ctx.out / "report.txt"


__all__ = ["PipelineConfig", "Context", "DEFAULTS", "STAGES", "PIPELINE_ORDER", "run_stage", "run_pipeline",
           "sample_poses", "interpolate_pose", "write_manifest", "Attention3DError"]
