import numpy as np
import pytest

from attention3d.errors import (DegeneratePolygon, EmptyDenominator, EmptyGroundTruth, MeshMismatch,
                                NonMonotoneTimestamps)
from attention3d.gaze import FixationHit
from attention3d.metrics import (MetricsReport, Roi3D, aoi_hits, compute_dwells, dwell_histogram, format_ratio,
                                 match_detections, overlap_3d, precision_recall, read_roi_csv,
                                 spatial_overlap_2d, temporal_coverage, write_roi_csv)

from conftest import grid_plane

SQ = [(0, 0), (1, 0), (1, 1), (0, 1)]


def shifted(poly, dx, dy):
    return [(x + dx, y + dy) for x, y in poly]


def test_overlap_2d_examples():
    assert spatial_overlap_2d(SQ, SQ) == 1.0
    assert spatial_overlap_2d(SQ, shifted(SQ, 3, 0)) == 0.0
    # clipping oracle: a 0.5 shift along x leaves a 0.5 x 1 lens over a 1.5 union
    assert spatial_overlap_2d(SQ, shifted(SQ, 0.5, 0)) == pytest.approx(1 / 3, abs=1e-12)
    # the 0.25 / 1.75 figure belongs to a diagonal half shift
    assert spatial_overlap_2d(SQ, shifted(SQ, 0.5, 0.5)) == pytest.approx(0.25 / 1.75, abs=1e-12)


def test_overlap_2d_properties(rng):
    for _ in range(50):
        a = shifted(SQ, *rng.uniform(-1, 1, 2))
        b = [(x * 1.3, y * 0.7) for x, y in shifted(SQ, *rng.uniform(-1, 1, 2))]
        o = spatial_overlap_2d(a, b)
        assert 0.0 <= o <= 1.0
        assert o == pytest.approx(spatial_overlap_2d(b, a), abs=1e-12)
    with pytest.raises(DegeneratePolygon):
        spatial_overlap_2d([(0, 0), (1, 0), (2, 0)], SQ)


def test_precision_recall_table_rows():
    # published counts: gt, detections, tp per ROI
    rows = [(21, 19, 19, 1.00, 0.90), (87, 184, 86, 0.47, 0.99), (95, 82, 70, 0.85, 0.74)]
    for gt, det, tp, p_ref, r_ref in rows:
        p, r = precision_recall(tp, det - tp, gt - tp)
        assert round(p, 2) == p_ref and round(r, 2) == r_ref
    p, r = precision_recall(175, 110, 28)
    assert (round(p, 2), round(r, 2)) == (0.61, 0.86)
    assert precision_recall(0, 5, 1)[0] == 0.0
    with pytest.raises(EmptyDenominator):
        precision_recall(0, 0, 3)
    with pytest.raises(EmptyDenominator):
        precision_recall(0, 3, 0)


def test_match_detections():
    gt = {0: [SQ], 1: [SQ], 2: [SQ]}
    res = match_detections(gt, gt)
    assert (res.true_positives, res.false_positives, res.false_negatives) == (3, 0, 0)
    assert res.mean_overlap == 1.0
    dets = {0: [SQ, shifted(SQ, 0.1, 0)], 1: [shifted(SQ, 0.8, 0)], 3: [SQ]}
    res = match_detections(dets, gt)
    # frame 0: best match wins, the duplicate is FP; frame 1 below threshold; frame 3 has no GT
    assert (res.true_positives, res.false_positives, res.false_negatives) == (1, 3, 2)
    assert res.tp_frames == {0}
    assert res.true_positives <= min(res.n_detections, res.n_ground_truth)


def test_temporal_coverage():
    gt = range(100)
    assert temporal_coverage(gt, gt) == 1.0
    assert temporal_coverage(gt, [200]) == 0.0
    assert temporal_coverage(gt, range(0, 74, 2)) == pytest.approx(0.37)
    with pytest.raises(EmptyGroundTruth):
        temporal_coverage([], [1])


def test_overlap_3d_grid_oracle():
    mesh = grid_plane(4, 4)  # 32 equal-area triangles
    a = Roi3D.from_triangles("a", [0, 1], mesh)
    b = Roi3D.from_triangles("b", [1, 2], mesh)
    assert overlap_3d(a, b, mesh) == pytest.approx(1 / 3, abs=1e-12)
    assert overlap_3d(a, a, mesh) == 1.0
    assert overlap_3d(a, Roi3D.from_triangles("c", [5, 6], mesh), mesh) == 0.0
    assert overlap_3d(a, b, mesh) == overlap_3d(b, a, mesh)
    other = grid_plane(2, 2)
    with pytest.raises(MeshMismatch):
        overlap_3d(a, b, other)
    with pytest.raises(MeshMismatch):
        Roi3D.from_triangles("x", [40], mesh)


def test_roi_csv_round_trip(tmp_path):
    mesh = grid_plane(4, 4)
    rois = [Roi3D.from_triangles("A", [3, 1, 2], mesh), Roi3D.from_triangles("B", [7], mesh)]
    write_roi_csv(tmp_path / "rois.csv", rois)
    back = {r.roi_id: r for r in read_roi_csv(tmp_path / "rois.csv", mesh)}
    assert back["A"] == rois[0] and back["B"] == rois[1]


def hit(t, tri):
    return FixationHit(t, tri, np.zeros(3), 1.0)


def test_aoi_hits():
    mesh = grid_plane(4, 4)
    roi = Roi3D.from_triangles("A", [1, 2], mesh)
    assert aoi_hits([], roi) == ([], 0)
    hits = [hit(0.0, 1), hit(0.1, 5), hit(0.2, 2), hit(0.3, 1)]
    sel, n = aoi_hits(hits, roi)
    assert n == 3 and [h.timestamp for h in sel] == [0.0, 0.2, 0.3]


def test_dwell_examples():
    period = 1 / 30
    ts = np.arange(30) * period
    assert compute_dwells(ts, np.zeros(30, bool), "A") == []
    flags = np.zeros(30, bool)
    flags[3:25] = True
    (d,) = compute_dwells(ts, flags, "A")
    assert 1000 * d.duration == pytest.approx(733.3, abs=0.1)
    ds = compute_dwells(ts[:4], [1, 1, 0, 1], "A", min_duration=0.035)
    assert len(ds) == 1 and 1000 * ds[0].duration == pytest.approx(66.7, abs=0.1)
    assert len(compute_dwells(ts[:4], [1, 1, 0, 1], "A")) == 2
    with pytest.raises(NonMonotoneTimestamps):
        compute_dwells([0.0, 0.1, 0.1], [1, 1, 1], "A")


def test_dwell_conservation(rng):
    ts = np.cumsum(rng.uniform(0.03, 0.036, 500))
    flags = rng.random(500) < 0.4
    ds = compute_dwells(ts, flags, "A", period=1 / 30)
    # runs cover exactly the hit samples, in order and disjoint
    assert round(sum(d.duration for d in ds) * 30) == flags.sum()
    assert all(a.exit <= b.entry for a, b in zip(ds, ds[1:]))


def test_format_ratio():
    assert format_ratio(1512, 1903) == "1512 (79.45%)"
    assert format_ratio(1088, 1306) == "1088 (83.31%)"
    with pytest.raises(EmptyDenominator):
        format_ratio(0, 0)


def test_histogram_and_report(tmp_path):
    ts = np.arange(40) / 30
    flags = np.zeros(40, bool)
    flags[[0, 1, 5, 10, 11, 12]] = True
    rows = dwell_histogram(compute_dwells(ts, flags, "A"), bin_width=1 / 30)
    assert sum(c for _, c in rows) == 3
    rep = MetricsReport()
    rep.add("detection A", {"tp": 3, "precision": 0.5})
    rep.add("gaze", {"hits": 10})
    back = MetricsReport.parse(rep.to_text())
    assert back.get("detection A")["tp"] == 3
    assert back.get("detection A")["precision"] == pytest.approx(0.5)
