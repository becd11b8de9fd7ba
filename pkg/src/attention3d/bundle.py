"""Sliding-window bundle adjustment (Levenberg-Marquardt, Schur complement on points)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientObservations
from .geometry import Pose6D, orthonormalize, rotvec_to_matrix, skew


@dataclass
class BundleReport:
    initial_cost: float
    final_cost: float
    iterations: int
    history: list = field(default_factory=list)


def huber_cost(errors, delta):
    e = np.asarray(errors, float)
    return np.where(e <= delta, e**2, 2.0 * delta * e - delta**2)


def _residuals(R, t, pts, cam_idx, pt_idx, uv, k):
    pc = np.einsum("nij,nj->ni", R[cam_idx], pts[pt_idx]) + t[cam_idx]
    z = pc[:, 2]
    proj = np.stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy], 1)
    return proj - uv, pc


def _robust_total(res, pc, delta):
    if np.any(pc[:, 2] <= 1e-9):
        return np.inf
    return float(huber_cost(np.linalg.norm(res, axis=1), delta).sum())


def solve_bundle(poses, points, cam_idx, pt_idx, uv, k, fixed_poses=(0,), fixed_points=(), huber_delta=2.0,
                 max_iter=50, rel_tol=1e-12):
    """Refine ``poses`` (list of Pose6D) and ``points`` (n, 3) against pixel observations.

    Observation ``i`` says camera ``cam_idx[i]`` saw point ``pt_idx[i]`` at ``uv[i]``.
    Returns ``(poses, points, BundleReport)``; the robust cost never increases.
    """
    R = np.array([p.rotation for p in poses])
    t = np.array([p.translation for p in poses])
    pts = np.array(points, dtype=float)
    cam_idx = np.asarray(cam_idx, dtype=np.int64)
    pt_idx = np.asarray(pt_idx, dtype=np.int64)
    uv = np.asarray(uv, dtype=float)
    n_cam, n_pt = len(poses), len(pts)
    var_cam = np.array([i not in set(fixed_poses) for i in range(n_cam)])
    var_pt = np.ones(n_pt, bool)
    var_pt[list(fixed_points)] = False
    cam_col = np.cumsum(var_cam) - 1  # variable-camera slot
    pt_col = np.cumsum(var_pt) - 1
    nc, npv = int(var_cam.sum()), int(var_pt.sum())

    res, pc = _residuals(R, t, pts, cam_idx, pt_idx, uv, k)
    cost = _robust_total(res, pc, huber_delta)
    report = BundleReport(cost, cost, 0, [cost])
    lam = None
    for it in range(max_iter):
        if cost == 0.0 or (nc == 0 and npv == 0):
            break
        err = np.linalg.norm(res, axis=1)
        w = np.where(err <= huber_delta, 1.0, huber_delta / np.maximum(err, 1e-300))
        x, y, z = pc.T
        dproj = np.zeros((len(uv), 2, 3))
        dproj[:, 0, 0] = k.fx / z
        dproj[:, 0, 2] = -k.fx * x / z**2
        dproj[:, 1, 1] = k.fy / z
        dproj[:, 1, 2] = -k.fy * y / z**2
        Jc = np.concatenate([-dproj @ np.array([skew(p) for p in pc]), dproj], axis=2)  # (n,2,6)
        Jp = dproj @ R[cam_idx]  # (n,2,3)
        wc = w[:, None, None]
        Hcc = np.zeros((nc, 6, 6))
        gc = np.zeros((nc, 6))
        Hpp = np.zeros((npv, 3, 3))
        gp = np.zeros((npv, 3))
        Hcp = np.zeros((nc, npv, 6, 3))
        oc = var_cam[cam_idx]
        op = var_pt[pt_idx]
        JcT_w = np.transpose(Jc, (0, 2, 1)) * wc.transpose(0, 2, 1)
        JpT_w = np.transpose(Jp, (0, 2, 1)) * wc.transpose(0, 2, 1)
        np.add.at(Hcc, cam_col[cam_idx[oc]], (JcT_w @ Jc)[oc])
        np.add.at(gc, cam_col[cam_idx[oc]], np.einsum("nij,nj->ni", JcT_w, res)[oc])
        np.add.at(Hpp, pt_col[pt_idx[op]], (JpT_w @ Jp)[op])
        np.add.at(gp, pt_col[pt_idx[op]], np.einsum("nij,nj->ni", JpT_w, res)[op])
        both = oc & op
        np.add.at(Hcp, (cam_col[cam_idx[both]], pt_col[pt_idx[both]]), (JcT_w @ Jp)[both])
        if lam is None:
            diag = np.concatenate([np.einsum("nii->ni", Hcc).ravel(), np.einsum("nii->ni", Hpp).ravel()])
            lam = 1e-4 * float(diag.max()) if diag.size else 1e-4
        accepted = False
        for _ in range(25):
            dc, dp = _schur_solve(Hcc, Hpp, Hcp, gc, gp, lam)
            R2, t2 = R.copy(), t.copy()
            for slot, ci in enumerate(np.flatnonzero(var_cam)):
                dR = rotvec_to_matrix(dc[slot, :3])
                R2[ci] = orthonormalize(dR @ R[ci])
                t2[ci] = dR @ t[ci] + dc[slot, 3:]
            pts2 = pts.copy()
            pts2[var_pt] += dp
            res2, pc2 = _residuals(R2, t2, pts2, cam_idx, pt_idx, uv, k)
            c2 = _robust_total(res2, pc2, huber_delta)
            if c2 <= cost:
                accepted = True
                lam = max(lam / 3.0, 1e-15)
                break
            lam *= 4.0
        if not accepted:
            break
        change = (cost - c2) / max(cost, 1e-300)
        R, t, pts, res, pc, cost = R2, t2, pts2, res2, pc2, c2
        report.history.append(cost)
        report.iterations = it + 1
        if change < rel_tol:
            break
    report.final_cost = cost
    out_poses = [Pose6D(orthonormalize(R[i]), t[i]) if var_cam[i] else poses[i] for i in range(n_cam)]
    return out_poses, pts, report


def _schur_solve(Hcc, Hpp, Hcp, gc, gp, lam):
    nc, npv = len(Hcc), len(Hpp)
    Hpp_d = Hpp + lam * np.einsum("nii->ni", Hpp)[:, :, None] * np.eye(3) + 1e-12 * np.eye(3)
    Hpp_inv = np.linalg.inv(Hpp_d) if npv else Hpp_d
    if nc == 0:
        dp = -np.einsum("nij,nj->ni", Hpp_inv, gp)
        return np.zeros((0, 6)), dp
    A = np.zeros((6 * nc, 6 * nc))
    for c in range(nc):
        blk = Hcc[c] + lam * np.diag(np.diag(Hcc[c])) + 1e-12 * np.eye(6)
        A[6 * c:6 * c + 6, 6 * c:6 * c + 6] = blk
    B = Hcp.transpose(0, 2, 1, 3).reshape(6 * nc, npv * 3)  # (6nc, 3np)
    if npv:
        # B Hpp^-1 without forming the block-diagonal inverse
        BHinv = np.einsum("cpj,pjk->cpk", B.reshape(6 * nc, npv, 3), Hpp_inv).reshape(6 * nc, 3 * npv)
        S = A - BHinv @ B.T
        rhs = -gc.ravel() + BHinv @ gp.ravel()
    else:
        S, rhs = A, -gc.ravel()
    dc = np.linalg.solve(S, rhs).reshape(nc, 6)
    if npv:
        back = gp + (B.T @ dc.ravel()).reshape(npv, 3)
        dp = -np.einsum("nij,nj->ni", Hpp_inv, back)
    else:
        dp = np.zeros((0, 3))
    return dc, dp


def bundle_adjust(smap, window=5, huber_delta=2.0, max_iter=50, k=None):
    """Refine the last ``window`` keyframes of ``smap`` and the landmarks they observe.

    The oldest keyframe in the window is the gauge anchor: its pose and the
    landmarks spawned at or before it stay fixed, which also pins the metric
    scale that RGB-D depth gave the map.
    """
    k = k or smap.intrinsics
    kfs = smap.keyframes[-window:]
    anchor_rank = smap.keyframe_rank(kfs[0].id)
    lm_ids = sorted({lid for kf in kfs for lid in kf.observations.values()})
    if len(lm_ids) < 10:
        raise InsufficientObservations(f"window shares only {len(lm_ids)} landmarks")
    col = {lid: i for i, lid in enumerate(lm_ids)}
    cam_idx, pt_idx, uv = [], [], []
    for ci, kf in enumerate(kfs):
        for kp, lid in sorted(kf.observations.items()):
            cam_idx.append(ci)
            pt_idx.append(col[lid])
            uv.append(kf.features.pixels[kp])
    cam_idx = np.array(cam_idx)
    pt_idx = np.array(pt_idx)
    counts = np.bincount(pt_idx, minlength=len(lm_ids))
    fixed_pts = [i for i, lid in enumerate(lm_ids)
                 if counts[i] < 2 or smap.keyframe_rank(smap.landmarks[lid].anchor_keyframe) <= anchor_rank]
    points = np.array([smap.landmarks[lid].position for lid in lm_ids])
    poses, points, report = solve_bundle([kf.pose for kf in kfs], points, cam_idx, pt_idx, np.array(uv), k,
                                         fixed_poses=(0,), fixed_points=fixed_pts, huber_delta=huber_delta,
                                         max_iter=max_iter)
    for kf, pose in zip(kfs, poses):
        kf.pose = pose
    for i, lid in enumerate(lm_ids):
        smap.landmarks[lid].position = points[i]
    return report
