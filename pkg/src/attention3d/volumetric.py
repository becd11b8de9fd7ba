"""Paged log-odds occupancy grid fused from posed depth images.

The volume is split into cubic sub-volumes ("pages"). Pages are created on
first write, can be evicted to a directory of raw little-endian float64
blocks, and are transparently reloaded on the next access. Writers must be
single-threaded; concurrent readers are fine while no writer runs.
"""

from __future__ import annotations

import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from sklearn.base import BaseEstimator

from .errors import BackingStoreFailure, EmptyDepthImage, InputError
from .geometry import backproject_points

_FREE, _OCC = 1, 2


@dataclass(frozen=True)
class IntegrationParams:
    l_occ: float = 0.85
    l_free: float = -0.40
    l_min: float = -3.5
    l_max: float = 3.5
    max_range: float = 5.0

    def __post_init__(self):
        if not (self.l_occ > 0 > self.l_free):
            raise InputError("need l_occ > 0 > l_free")
        if not (self.l_min < 0 < self.l_max):
            raise InputError("need l_min < 0 < l_max")
        if not self.max_range > 0:
            raise InputError("max_range must be positive")


class SubVolume:
    __slots__ = ("data", "resident", "last_access")

    def __init__(self, data, last_access=0):
        self.data = data
        self.resident = data is not None
        self.last_access = last_access


class VoxelGrid:
    """Log-odds occupancy volume with LRU page residency.

    ``page_budget`` caps the number of resident pages (``None`` = unlimited).
    Evicted pages live in ``store_dir``; a private temporary directory is used
    when none is given.
    """

    def __init__(self, origin, voxel_size, dims, sub_volume_edge=64, store_dir=None, page_budget=None):
        dims = tuple(int(d) for d in dims)
        if not voxel_size > 0:
            raise InputError("voxel_size must be positive")
        if len(dims) != 3 or any(d <= 0 or d % sub_volume_edge for d in dims):
            raise InputError(f"dims {dims} must be positive multiples of sub_volume_edge {sub_volume_edge}")
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = dims
        self.sub_volume_edge = int(sub_volume_edge)
        self.pages = {}
        self.page_budget = page_budget
        self._store_dir = Path(store_dir) if store_dir is not None else None
        self._owns_store = False
        self._clock = 0

    # -- page bookkeeping ----------------------------------------------------

    @property
    def page_dims(self):
        return tuple(d // self.sub_volume_edge for d in self.dims)

    @property
    def store_dir(self):
        if self._store_dir is None:
            self._store_dir = Path(tempfile.mkdtemp(prefix="voxelpages-"))
            self._owns_store = True
        elif not self._store_dir.is_dir():
            try:
                self._store_dir.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise BackingStoreFailure(str(exc)) from exc
        return self._store_dir

    def __del__(self):
        if getattr(self, "_owns_store", False) and self._store_dir is not None:
            shutil.rmtree(self._store_dir, ignore_errors=True)

    def _page_path(self, idx):
        return self.store_dir / f"page_{idx[0]}_{idx[1]}_{idx[2]}.bin"

    def resident_pages(self):
        return sorted(i for i, p in self.pages.items() if p.resident)

    def _write_page(self, idx, data):
        try:
            self._page_path(idx).write_bytes(data.astype("<f8").tobytes())
        except OSError as exc:
            raise BackingStoreFailure(str(exc)) from exc

    def _read_page(self, idx):
        e = self.sub_volume_edge
        try:
            raw = self._page_path(idx).read_bytes()
        except OSError as exc:
            raise BackingStoreFailure(str(exc)) from exc
        if len(raw) != 8 * e**3:
            raise BackingStoreFailure(f"page {idx} has wrong size {len(raw)}")
        return np.frombuffer(raw, dtype="<f8").astype(float).reshape(e, e, e)

    def page(self, idx, create=False):
        """Resident data block for page ``idx`` (``None`` if never written and not ``create``)."""
        sub = self.pages.get(idx)
        if sub is None:
            if not create:
                return None
            e = self.sub_volume_edge
            sub = self.pages[idx] = SubVolume(np.zeros((e, e, e)))
        elif not sub.resident:
            sub.data = self._read_page(idx)
            sub.resident = True
        self._clock += 1
        sub.last_access = self._clock
        if self.page_budget is not None:
            self._evict_to(self.page_budget, keep=idx)
        return sub.data

    def _evict_to(self, budget, keep=None):
        resident = [(p.last_access, i) for i, p in self.pages.items() if p.resident and i != keep]
        n_keep = budget - (1 if keep is not None and self.pages[keep].resident else 0)
        if len(resident) <= n_keep:
            return
        resident.sort()
        for _, idx in resident[: len(resident) - max(n_keep, 0)]:
            sub = self.pages[idx]
            self._write_page(idx, sub.data)
            sub.data = None
            sub.resident = False

    # -- voxel addressing ----------------------------------------------------

    def voxel_of(self, points):
        return np.floor((np.asarray(points, float) - self.origin) / self.voxel_size).astype(np.int64)

    def voxel_center(self, ijk):
        return self.origin + (np.asarray(ijk, float) + 0.5) * self.voxel_size

    def in_bounds(self, ijk):
        ijk = np.asarray(ijk)
        return np.all((ijk >= 0) & (ijk < np.array(self.dims)), axis=-1)

    def log_odds_at(self, ijk):
        ijk = np.atleast_2d(np.asarray(ijk, dtype=np.int64))
        out = np.zeros(len(ijk))
        inside = self.in_bounds(ijk)
        e = self.sub_volume_edge
        for n in np.flatnonzero(inside):
            i, j, k = ijk[n]
            data = self.page((i // e, j // e, k // e))
            if data is not None:
                out[n] = data[i % e, j % e, k % e]
        return out

    def read_block(self, lo, hi):
        """Log-odds of voxels ``lo <= ijk < hi`` (out-of-grid voxels read as 0)."""
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        out = np.zeros(tuple(hi - lo))
        e = self.sub_volume_edge
        plo = np.maximum(lo, 0) // e
        phi = (np.minimum(hi, self.dims) - 1) // e
        for pi in range(plo[0], phi[0] + 1):
            for pj in range(plo[1], phi[1] + 1):
                for pk in range(plo[2], phi[2] + 1):
                    data = self.page((pi, pj, pk))
                    if data is None:
                        continue
                    base = np.array([pi, pj, pk]) * e
                    a = np.maximum(lo, base)
                    b = np.minimum(hi, base + e)
                    if np.any(b <= a):
                        continue
                    out[tuple(slice(a[d] - lo[d], b[d] - lo[d]) for d in range(3))] = data[
                        tuple(slice(a[d] - base[d], b[d] - base[d]) for d in range(3))
                    ]
        return out

    def to_dense(self):
        return self.read_block((0, 0, 0), self.dims)

    def probabilities(self):
        return 1.0 / (1.0 + np.exp(-self.to_dense()))

    # -- persistence -----------------------------------------------------------

    def save(self, directory):
        """Write the manifest and every page (resident or not) to ``directory``."""
        directory = Path(directory)
        (directory / "pages").mkdir(parents=True, exist_ok=True)
        manifest = [
            f"origin={' '.join(repr(float(x)) for x in self.origin)}",
            f"voxel_size={self.voxel_size!r}",
            f"dims={' '.join(str(d) for d in self.dims)}",
            f"sub_volume_edge={self.sub_volume_edge}",
        ]
        (directory / "grid.manifest").write_text("\n".join(manifest) + "\n")
        for idx in sorted(self.pages):
            sub = self.pages[idx]
            data = sub.data if sub.resident else self._read_page(idx)
            (directory / "pages" / f"page_{idx[0]}_{idx[1]}_{idx[2]}.bin").write_bytes(data.astype("<f8").tobytes())

    @classmethod
    def load(cls, directory, page_budget=None):
        directory = Path(directory)
        try:
            text = (directory / "grid.manifest").read_text()
        except OSError as exc:
            raise InputError(f"cannot read grid manifest: {exc}") from exc
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        grid = cls(
            [float(x) for x in kv["origin"].split()],
            float(kv["voxel_size"]),
            [int(x) for x in kv["dims"].split()],
            int(kv["sub_volume_edge"]),
            page_budget=page_budget,
        )
        for f in sorted((directory / "pages").glob("page_*.bin")):
            idx = tuple(int(x) for x in f.stem.split("_")[1:])
            shutil.copyfile(f, grid._page_path(idx))
            grid.pages[idx] = SubVolume(None)
        return grid


@numba.njit(cache=True)
def _carve(cam, ends, g0, vs, nx, ny, nz, mark):
    """Amanatides-Woo traversal of every camera->endpoint segment.

    Marks traversed voxels FREE and endpoint voxels OCC in the dense ``mark``
    array (OCC wins); returns the linear indices that were touched, in first
    touch order.
    """
    cap = 1 << 16
    touched = np.empty(cap, np.int64)
    n_touched = 0
    dims = np.empty(3, np.int64)
    dims[0] = nx
    dims[1] = ny
    dims[2] = nz
    p0 = (cam - g0) / vs
    cell = np.empty(3, np.int64)
    end_cell = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    p1 = np.empty(3)
    d = np.empty(3)
    for r in range(ends.shape[0]):
        for a in range(3):
            p1[a] = (ends[r, a] - g0[a]) / vs
            d[a] = p1[a] - p0[a]
        t0 = 0.0
        t1 = 1.0
        skip = False
        for a in range(3):
            if d[a] == 0.0:
                if p0[a] < 0.0 or p0[a] >= dims[a]:
                    skip = True
            else:
                ta = (0.0 - p0[a]) / d[a]
                tb = (dims[a] - p0[a]) / d[a]
                t0 = max(t0, min(ta, tb))
                t1 = min(t1, max(ta, tb))
        if skip or t0 > t1:
            continue
        end_inside = True
        for a in range(3):
            end_cell[a] = np.int64(np.floor(p1[a]))
            if end_cell[a] < 0 or end_cell[a] >= dims[a]:
                end_inside = False
        for a in range(3):
            c = np.int64(np.floor(p0[a] + t0 * d[a]))
            cell[a] = min(max(c, 0), dims[a] - 1)
            if d[a] > 0.0:
                step[a] = 1
                tmax[a] = (cell[a] + 1 - p0[a]) / d[a]
                tdelta[a] = 1.0 / d[a]
            elif d[a] < 0.0:
                step[a] = -1
                tmax[a] = (cell[a] - p0[a]) / d[a]
                tdelta[a] = -1.0 / d[a]
            else:
                step[a] = 0
                tmax[a] = np.inf
                tdelta[a] = np.inf
        max_steps = 4 + abs(np.int64(np.floor(p1[0])) - cell[0]) + abs(np.int64(np.floor(p1[1])) - cell[1]) + abs(
            np.int64(np.floor(p1[2])) - cell[2]
        )
        for _ in range(max_steps):
            if end_inside and cell[0] == end_cell[0] and cell[1] == end_cell[1] and cell[2] == end_cell[2]:
                break
            lin = (cell[0] * ny + cell[1]) * nz + cell[2]
            if mark[lin] == 0:
                if n_touched == touched.shape[0]:
                    grown = np.empty(touched.shape[0] * 2, np.int64)
                    grown[:n_touched] = touched[:n_touched]
                    touched = grown
                touched[n_touched] = lin
                n_touched += 1
                mark[lin] = 1
            a = 0
            if tmax[1] < tmax[a]:
                a = 1
            if tmax[2] < tmax[a]:
                a = 2
            if tmax[a] > t1:
                break
            cell[a] += step[a]
            tmax[a] += tdelta[a]
            if cell[a] < 0 or cell[a] >= dims[a]:
                break
        if end_inside:
            lin = (end_cell[0] * ny + end_cell[1]) * nz + end_cell[2]
            if mark[lin] == 0:
                if n_touched == touched.shape[0]:
                    grown = np.empty(touched.shape[0] * 2, np.int64)
                    grown[:n_touched] = touched[:n_touched]
                    touched = grown
                touched[n_touched] = lin
                n_touched += 1
            mark[lin] = 2
    return touched[:n_touched]


def integrate_depth(grid, depth, pose, k, params=None, pixel_stride=1):
    """Fuse one depth image (meters, 0 = invalid) into ``grid`` in place.

    Per frame every voxel receives at most one update: ``l_occ`` if it holds a
    measured surface point, otherwise ``l_free`` if some measured ray passes
    through it. Values are clamped to ``[l_min, l_max]``. ``pixel_stride``
    casts rays from every n-th pixel row and column only.
    """
    params = params or IntegrationParams()
    depth = np.asarray(depth, dtype=float)
    if depth.size == 0:
        raise EmptyDepthImage("depth image has no pixels")
    if depth.shape != k.shape:
        raise InputError(f"depth shape {depth.shape} does not match intrinsics {k.shape}")
    valid = (depth > 0) & (depth <= params.max_range) & np.isfinite(depth)
    if pixel_stride > 1:
        keep = np.zeros_like(valid)
        keep[::pixel_stride, ::pixel_stride] = True
        valid &= keep
    vv, uu = np.nonzero(valid)
    if len(vv) == 0:
        return grid
    ends = backproject_points(np.stack([uu, vv], axis=1).astype(float), depth[vv, uu], pose, k)
    nx, ny, nz = grid.dims
    mark = np.zeros(nx * ny * nz, dtype=np.int8)
    touched = _carve(pose.center.astype(float), ends, grid.origin, grid.voxel_size, nx, ny, nz, mark)
    if len(touched) == 0:
        return grid
    delta = np.where(mark[touched] == _OCC, params.l_occ, params.l_free)
    i, rem = np.divmod(touched, ny * nz)
    j, kk = np.divmod(rem, nz)
    e = grid.sub_volume_edge
    page_lin = ((i // e) * (ny // e) + (j // e)) * (nz // e) + (kk // e)
    order = np.argsort(page_lin, kind="stable")
    page_lin, i, j, kk, delta = page_lin[order], i[order], j[order], kk[order], delta[order]
    bounds = np.flatnonzero(np.diff(page_lin)) + 1
    for s, t in zip(np.r_[0, bounds], np.r_[bounds, len(page_lin)]):
        idx = (int(i[s] // e), int(j[s] // e), int(kk[s] // e))
        data = grid.page(idx, create=True)
        li, lj, lk = i[s:t] % e, j[s:t] % e, kk[s:t] % e
        data[li, lj, lk] = np.clip(data[li, lj, lk] + delta[s:t], params.l_min, params.l_max)
    return grid


def occupancy_probability(grid, point):
    """Occupancy probability of the voxel holding ``point``; 0.5 when unknown."""
    ijk = grid.voxel_of(np.asarray(point, float).reshape(3))
    if not grid.in_bounds(ijk):
        return 0.5
    return float(1.0 / (1.0 + np.exp(-grid.log_odds_at(ijk)[0])))


def evict_pages(grid, budget):
    """Keep at most ``budget`` resident pages from now on, evicting LRU pages."""
    if budget < 1:
        raise InputError("page budget must be >= 1")
    grid.page_budget = int(budget)
    grid._evict_to(grid.page_budget)
    return grid


class OccupancyMapper(BaseEstimator):
    """Estimator wrapper: ``fit`` fuses posed depth frames, ``predict_proba`` queries.

    ``fit(frames, intrinsics)`` takes an iterable of ``(depth, pose)`` pairs.
    """

    def __init__(self, origin=(0.0, 0.0, 0.0), voxel_size=0.025, dims=(128, 128, 128), sub_volume_edge=64,
                 l_occ=0.85, l_free=-0.40, l_min=-3.5, l_max=3.5, max_range=5.0, page_budget=None):
        self.origin = origin
        self.voxel_size = voxel_size
        self.dims = dims
        self.sub_volume_edge = sub_volume_edge
        self.l_occ = l_occ
        self.l_free = l_free
        self.l_min = l_min
        self.l_max = l_max
        self.max_range = max_range
        self.page_budget = page_budget

    def _params(self):
        return IntegrationParams(self.l_occ, self.l_free, self.l_min, self.l_max, self.max_range)

    def fit(self, frames, intrinsics):
        params = self._params()
        self.grid_ = VoxelGrid(self.origin, self.voxel_size, self.dims, self.sub_volume_edge,
                               page_budget=self.page_budget)
        self.n_frames_ = 0
        for depth, pose in frames:
            integrate_depth(self.grid_, depth, pose, intrinsics, params)
            self.n_frames_ += 1
        return self

    def partial_fit(self, depth, pose, intrinsics):
        if not hasattr(self, "grid_"):
            return self.fit([(depth, pose)], intrinsics)
        integrate_depth(self.grid_, depth, pose, intrinsics, self._params())
        self.n_frames_ += 1
        return self

    def predict_proba(self, points):
        points = np.atleast_2d(np.asarray(points, float))
        return np.array([occupancy_probability(self.grid_, p) for p in points])

