"""Perspective-n-point: EPnP minimal/overdetermined solver, RANSAC and LM refinement."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import DegenerateConfiguration, NoConsensus, SingularNormalEquations
from .geometry import Pose6D, orthonormalize, skew

_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
PLANAR_RATIO = 1e-3


def _as_arrays(correspondences):
    """Accepts a list of ``(pixel, point)`` pairs or a ``(pixels, points)`` pair of arrays."""
    if isinstance(correspondences, tuple) and len(correspondences) == 2 and np.ndim(correspondences[0]) == 2:
        return (np.asarray(correspondences[0], float).reshape(-1, 2),
                np.asarray(correspondences[1], float).reshape(-1, 3))
    pix = np.array([c[0] for c in correspondences], dtype=float).reshape(-1, 2)
    pts = np.array([c[1] for c in correspondences], dtype=float).reshape(-1, 3)
    return pix, pts


def _rigid_align(src, dst):
    """R, t minimising ||R src + t - dst|| (Kabsch, no scale)."""
    cs, cd = src.mean(0), dst.mean(0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def reprojection_errors(pose, pix, pts, k):
    pc = pts @ pose.rotation.T + pose.translation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy], 1)
    err = np.linalg.norm(uv - pix, axis=1)
    err[~(z > 1e-9)] = np.inf
    return err


def _build_M(alphas, pix, k):
    n, nc = alphas.shape
    un = (pix[:, 0] - k.cx) / k.fx
    vn = (pix[:, 1] - k.cy) / k.fy
    M = np.zeros((2 * n, 3 * nc))
    for j in range(nc):
        M[0::2, 3 * j] = alphas[:, j]
        M[0::2, 3 * j + 2] = -alphas[:, j] * un
        M[1::2, 3 * j + 1] = alphas[:, j]
        M[1::2, 3 * j + 2] = -alphas[:, j] * vn
    return M


def _pose_from_ctrl(ccam, alphas, pts):
    pcs = alphas @ ccam
    if np.mean(pcs[:, 2]) < 0:
        pcs = -pcs
    R, t = _rigid_align(pts, pcs)
    return Pose6D(orthonormalize(R), t)


def _epnp_general(pts, pix, k, c0, axes, scale):
    ctrl = np.vstack([c0, c0 + axes * scale[:, None]])
    A = np.vstack([ctrl.T, np.ones(4)])
    alphas = np.linalg.solve(A, np.vstack([pts.T, np.ones(len(pts))])).T
    M = _build_M(alphas, pix, k)
    _, vecs = np.linalg.eigh(M.T @ M)
    V = [vecs[:, i] for i in range(4)]  # ascending eigenvalues
    dv = [[V[i].reshape(4, 3)[a] - V[i].reshape(4, 3)[b] for a, b in _PAIRS] for i in range(4)]
    L = np.zeros((6, 10))
    for r in range(6):
        d0, d1, d2, d3 = dv[0][r], dv[1][r], dv[2][r], dv[3][r]
        L[r] = [d0 @ d0, 2 * d0 @ d1, d1 @ d1, 2 * d0 @ d2, 2 * d1 @ d2, d2 @ d2,
                2 * d0 @ d3, 2 * d1 @ d3, 2 * d2 @ d3, d3 @ d3]
    rho = np.array([np.sum((ctrl[a] - ctrl[b]) ** 2) for a, b in _PAIRS])
    candidates = []
    # N = 1
    b4 = np.linalg.lstsq(L[:, [0, 1, 3, 6]], rho, rcond=None)[0]
    if b4[0] < 0:
        s = np.sqrt(-b4[0])
        betas = np.array([s, -b4[1] / s, -b4[2] / s, -b4[3] / s])
    else:
        s = np.sqrt(max(b4[0], 1e-300))
        betas = np.array([s, b4[1] / s, b4[2] / s, b4[3] / s])
    candidates.append(betas)
    # N = 2
    b3 = np.linalg.lstsq(L[:, [0, 1, 2]], rho, rcond=None)[0]
    betas = np.zeros(4)
    if b3[0] < 0:
        betas[0] = np.sqrt(-b3[0])
        betas[1] = np.sqrt(-b3[2]) if b3[2] < 0 else 0.0
    else:
        betas[0] = np.sqrt(b3[0])
        betas[1] = np.sqrt(b3[2]) if b3[2] > 0 else 0.0
    if b3[1] < 0:
        betas[0] = -betas[0]
    candidates.append(betas)
    # N = 3
    b5 = np.linalg.lstsq(L[:, [0, 1, 2, 3, 4]], rho, rcond=None)[0]
    betas = np.zeros(4)
    if b5[0] < 0:
        betas[0] = np.sqrt(-b5[0])
        betas[1] = np.sqrt(-b5[2]) if b5[2] < 0 else 0.0
    else:
        betas[0] = np.sqrt(b5[0])
        betas[1] = np.sqrt(b5[2]) if b5[2] > 0 else 0.0
    if b5[1] < 0:
        betas[0] = -betas[0]
    betas[2] = b5[3] / betas[0] if betas[0] != 0 else 0.0
    candidates.append(betas)
    poses = []
    for betas in candidates:
        betas = _gauss_newton_betas(L, rho, betas)
        ccam = sum(betas[i] * V[i] for i in range(4)).reshape(4, 3)
        poses.append(_pose_from_ctrl(ccam, alphas, pts))
    return poses


def _gauss_newton_betas(L, rho, betas, iters=30):
    """Gauss-Newton on the control-point distance constraints; keeps the best iterate."""

    def residual(b):
        b0, b1, b2, b3 = b
        quad = np.array([b0 * b0, b0 * b1, b1 * b1, b0 * b2, b1 * b2, b2 * b2, b0 * b3, b1 * b3, b2 * b3, b3 * b3])
        return rho - L @ quad

    b = betas.copy()
    r = residual(b)
    cost = r @ r
    for _ in range(iters):
        b0, b1, b2, b3 = b
        J = np.stack([
            2 * L[:, 0] * b0 + L[:, 1] * b1 + L[:, 3] * b2 + L[:, 6] * b3,
            L[:, 1] * b0 + 2 * L[:, 2] * b1 + L[:, 4] * b2 + L[:, 7] * b3,
            L[:, 3] * b0 + L[:, 4] * b1 + 2 * L[:, 5] * b2 + L[:, 8] * b3,
            L[:, 6] * b0 + L[:, 7] * b1 + L[:, 8] * b2 + 2 * L[:, 9] * b3,
        ], axis=1)
        try:
            step = np.linalg.solve(J.T @ J, J.T @ r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, r, rcond=None)[0]
        nb = b + step
        nr = residual(nb)
        ncost = nr @ nr
        if not ncost < cost:
            break
        b, r, cost = nb, nr, ncost
        if np.linalg.norm(step) <= 1e-15 * (1.0 + np.linalg.norm(b)):
            break
    return b


def _epnp_planar(pts, pix, k, c0, axes, scale):
    ctrl = np.vstack([c0, c0 + axes[:2] * scale[:2, None]])
    local = (pts - c0) @ axes[:2].T / scale[:2]
    alphas = np.column_stack([1.0 - local.sum(1), local])
    M = _build_M(alphas, pix, k)
    _, vecs = np.linalg.eigh(M.T @ M)
    pairs = [(0, 1), (0, 2), (1, 2)]
    rho = np.array([np.sum((ctrl[a] - ctrl[b]) ** 2) for a, b in pairs])
    poses = []
    v1 = vecs[:, 0].reshape(3, 3)
    d = np.array([v1[a] - v1[b] for a, b in pairs])
    beta = np.sum(np.linalg.norm(d, axis=1) * np.sqrt(rho)) / np.sum(d**2)
    poses.append(_pose_from_ctrl(beta * v1, alphas, pts))
    # N = 2 with Gauss-Newton on the three distance constraints
    v2 = vecs[:, 1].reshape(3, 3)
    d2 = np.array([v2[a] - v2[b] for a, b in pairs])
    L = np.stack([(d * d).sum(1), 2 * (d * d2).sum(1), (d2 * d2).sum(1)], 1)
    b = np.linalg.lstsq(L, rho, rcond=None)[0]
    betas = np.array([np.sqrt(abs(b[0])), np.sqrt(abs(b[2]))])
    if b[1] < 0:
        betas[1] = -betas[1]
    for _ in range(5):
        quad = np.array([betas[0] ** 2, betas[0] * betas[1], betas[1] ** 2])
        J = np.stack([2 * L[:, 0] * betas[0] + L[:, 1] * betas[1], L[:, 1] * betas[0] + 2 * L[:, 2] * betas[1]], 1)
        betas = betas + np.linalg.lstsq(J, rho - L @ quad, rcond=None)[0]
    poses.append(_pose_from_ctrl(betas[0] * v1 + betas[1] * v2, alphas, pts))
    return poses


def epnp(pix, pts, k):
    """EPnP pose from n >= 4 correspondences (planar configurations handled)."""
    pix = np.asarray(pix, float)
    pts = np.asarray(pts, float)
    if len(pts) < 4:
        raise DegenerateConfiguration(f"EPnP needs >= 4 correspondences, got {len(pts)}")
    c0 = pts.mean(0)
    cov = (pts - c0).T @ (pts - c0) / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    evals, axes = evals[::-1], evecs[:, ::-1].T
    if evals[0] <= 0 or evals[1] / evals[0] < 1e-12:
        raise DegenerateConfiguration("3D points are collinear")
    scale = np.sqrt(np.maximum(evals, 0.0))
    poses = []
    if evals[2] / evals[0] < PLANAR_RATIO:
        poses += _epnp_planar(pts, pix, k, c0, axes, scale)
    if evals[2] / evals[0] > 1e-12:
        # nearly planar sets get both parametrisations; the better reprojection wins
        poses += _epnp_general(pts, pix, k, c0, axes, scale)
    errs = [np.mean(np.minimum(reprojection_errors(p, pix, pts, k), 1e12)) for p in poses]
    if len(pts) == 4 and min(errs) > 1e-8:
        # the 4-point null space is 4-dimensional and Gauss-Newton on the betas
        # can stall; a closed-form P3P on three points, checked on the fourth, backs it up
        extra = _p3p(pix[:3], pts[:3], k)
        poses += extra
        errs += [np.mean(np.minimum(reprojection_errors(p, pix, pts, k), 1e12)) for p in extra]
    return poses[int(np.argmin(errs))]


def _p3p(pix, pts, k):
    """Grunert's P3P: up to four poses from three correspondences."""
    j = np.column_stack([(pix[:, 0] - k.cx) / k.fx, (pix[:, 1] - k.cy) / k.fy, np.ones(3)])
    j /= np.linalg.norm(j, axis=1, keepdims=True)
    a2 = np.sum((pts[1] - pts[2]) ** 2)
    b2 = np.sum((pts[0] - pts[2]) ** 2)
    c2 = np.sum((pts[0] - pts[1]) ** 2)
    if min(a2, b2, c2) <= 0:
        return []
    ca, cb, cg = j[1] @ j[2], j[0] @ j[2], j[0] @ j[1]
    p, q = (a2 - c2) / b2, (a2 + c2) / b2
    coeffs = [
        (p - 1) ** 2 - 4 * c2 / b2 * ca**2,
        4 * (p * (1 - p) * cb - (1 - q) * ca * cg + 2 * c2 / b2 * ca**2 * cb),
        2 * (p**2 - 1 + 2 * p**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2 - 4 * q * ca * cb * cg
             + 2 * (b2 - a2) / b2 * cg**2),
        4 * (-p * (1 + p) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - q) * ca * cg),
        (1 + p) ** 2 - 4 * a2 / b2 * cg**2,
    ]
    poses = []
    for v in np.roots(coeffs):
        if abs(v.imag) > 1e-8 * max(1.0, abs(v.real)) or v.real <= 0:
            continue
        v = v.real
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-15:
            continue
        u = ((p - 1) * v**2 - 2 * p * cb * v + 1 + p) / den
        d = 1 + u**2 - 2 * u * cg
        if u <= 0 or d <= 0:
            continue
        s1 = np.sqrt(c2 / d)
        pc = np.array([s1, u * s1, v * s1])[:, None] * j
        R, t = _rigid_align(pts, pc)
        poses.append(Pose6D(orthonormalize(R), t))
    return poses


# --- least squares refinement ---------------------------------------------------

def projection_jacobians(pose, pts, k):
    """Residual Jacobians for ``r = project(X) - x``.

    Returns ``(uv, J_pose, J_point)`` with ``J_pose`` of shape (n, 2, 6) for the
    left increment ``[rotvec, dt]`` and ``J_point`` (n, 2, 3).
    """
    pc = pts @ pose.rotation.T + pose.translation
    x, y, z = pc.T
    uv = np.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], 1)
    dproj = np.zeros((len(pts), 2, 3))
    dproj[:, 0, 0] = k.fx / z
    dproj[:, 0, 2] = -k.fx * x / z**2
    dproj[:, 1, 1] = k.fy / z
    dproj[:, 1, 2] = -k.fy * y / z**2
    dpc_drot = -np.array([skew(p) for p in pc])  # d(Xc)/d(rotvec) for left increment
    J_pose = np.concatenate([dproj @ dpc_drot, dproj], axis=2)
    J_point = dproj @ pose.rotation
    return uv, J_pose, J_point


def refine_pose(initial, correspondences, k, max_iter=100, rel_tol=1e-10, return_history=False):
    """Levenberg-Marquardt on the squared reprojection error."""
    pix, pts = _as_arrays(correspondences)
    if len(pts) < 4:
        raise DegenerateConfiguration("refine_pose needs >= 4 correspondences")

    def cost_of(pose):
        e = reprojection_errors(pose, pix, pts, k)
        return float(np.sum(e**2))

    pose = initial
    cost = cost_of(pose)
    history = [cost]
    if not np.isfinite(cost):
        raise SingularNormalEquations("points behind the initial camera")
    lam = None
    for _ in range(max_iter):
        if cost == 0.0:
            break
        uv, Jp, _ = projection_jacobians(pose, pts, k)
        r = (uv - pix).reshape(-1)
        J = Jp.reshape(-1, 6)
        H = J.T @ J
        g = J.T @ r
        if lam is None:
            if np.linalg.matrix_rank(H) < 6:
                raise SingularNormalEquations("reprojection normal equations are rank deficient")
            lam = 1e-3 * float(np.max(np.diag(H)))
        accepted = False
        for _ in range(20):
            step = np.linalg.solve(H + lam * np.diag(np.diag(H)), -g)
            cand = pose.perturb(step[:3], step[3:])
            c = cost_of(cand)
            if c <= cost:
                accepted = True
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 4.0
        if not accepted:
            break
        change = (cost - c) / max(cost, 1e-300)
        pose, cost = cand, c
        history.append(cost)
        if change < rel_tol:
            break
    return (pose, history) if return_history else pose


# --- RANSAC ---------------------------------------------------------------------

def estimate_pose_pnp(correspondences, k, inlier_threshold_px=2.0, confidence=0.999, max_iterations=2000, seed=0):
    """EPnP inside RANSAC, then LM refinement on the consensus set.

    Returns ``(pose, inlier_mask)``.
    """
    pix, pts = _as_arrays(correspondences)
    n = len(pts)
    if n < 4:
        raise DegenerateConfiguration(f"need >= 4 correspondences, got {n}")
    centred = pts - pts.mean(0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] == 0 or sv[1] / sv[0] < 1e-6:
        raise DegenerateConfiguration("3D points are collinear")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    best_err = np.inf
    needed = max_iterations
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        sample = rng.choice(n, 4, replace=False) if n > 4 else np.arange(4)
        try:
            pose = epnp(pix[sample], pts[sample], k)
        except (DegenerateConfiguration, np.linalg.LinAlgError):
            continue
        err = reprojection_errors(pose, pix, pts, k)
        mask = err < inlier_threshold_px
        count = int(mask.sum())
        serr = float(np.sum(np.minimum(err, inlier_threshold_px) ** 2))
        if count > best_count or (count == best_count and serr < best_err):
            best_mask, best_count, best_err = mask, count, serr
            w = count / n
            if w >= 1.0:
                needed = it
            elif w > 0:
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - w**4)))
        if n == 4:
            break
    if best_mask is None or best_count < 4:
        raise NoConsensus(f"best consensus has {best_count} inliers")
    inliers = np.flatnonzero(best_mask)
    try:
        pose = epnp(pix[inliers], pts[inliers], k)
    except DegenerateConfiguration:
        raise NoConsensus("consensus set is degenerate") from None
    pose = refine_pose(pose, list(zip(pix[inliers], pts[inliers])), k)
    mask = reprojection_errors(pose, pix, pts, k) < inlier_threshold_px
    if mask.sum() >= 4 and not np.array_equal(mask, best_mask):
        sel = np.flatnonzero(mask)
        pose = refine_pose(pose, list(zip(pix[sel], pts[sel])), k)
        mask = reprojection_errors(pose, pix, pts, k) < inlier_threshold_px
    if mask.sum() < 4:
        raise NoConsensus("refined pose lost its consensus")
    return pose, mask


class PnPRansac(BaseEstimator):
    """Estimator wrapper: ``fit(pixels, points)`` estimates ``pose_``; ``predict`` projects."""

    def __init__(self, intrinsics=None, inlier_threshold_px=2.0, confidence=0.999, seed=0):
        self.intrinsics = intrinsics
        self.inlier_threshold_px = inlier_threshold_px
        self.confidence = confidence
        self.seed = seed

    def fit(self, pixels, points):
        corr = list(zip(np.asarray(pixels, float), np.asarray(points, float)))
        self.pose_, self.inlier_mask_ = estimate_pose_pnp(corr, self.intrinsics, self.inlier_threshold_px,
                                                          self.confidence, seed=self.seed)
        return self

    def predict(self, points):
        pc = self.pose_.transform(np.asarray(points, float))
        k = self.intrinsics
        return np.stack([k.fx * pc[:, 0] / pc[:, 2] + k.cx, k.fy * pc[:, 1] / pc[:, 2] + k.cy], 1)
