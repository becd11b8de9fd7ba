import numpy as np
import pytest

from attention3d.errors import EmptyDepthImage, InputError
from attention3d.geometry import Intrinsics, Pose6D
from attention3d.volumetric import (IntegrationParams, OccupancyMapper, VoxelGrid, evict_pages, integrate_depth,
                                    occupancy_probability)

from conftest import sphere_views

K1 = Intrinsics(10.0, 10.0, 2.0, 2.0, 5, 5)


def one_ray_depth(d=1.0):
    depth = np.zeros(K1.shape)
    depth[2, 2] = d  # principal point: ray along +Z
    return depth


def small_grid(**kw):
    # camera at the origin sits in voxel (8, 8, 0)
    return VoxelGrid([-0.4, -0.4, 0.0], 0.05, (16, 16, 32), sub_volume_edge=16, **kw)


def test_single_ray():
    grid = integrate_depth(small_grid(), one_ray_depth(1.0), Pose6D.identity(), K1)
    L = grid.to_dense()
    p = IntegrationParams()
    surface = (8, 8, 20)  # z = 1.0 lies on the boundary -> voxel 20
    assert L[surface] == pytest.approx(p.l_occ)
    assert np.allclose(L[8, 8, :20], p.l_free)
    rest = L.copy()
    rest[8, 8, :21] = 0
    assert not rest.any()


def test_additive_and_clamped():
    grid = small_grid()
    for _ in range(2):
        integrate_depth(grid, one_ray_depth(1.0), Pose6D.identity(), K1)
    assert grid.to_dense()[8, 8, 20] == pytest.approx(1.7)
    for _ in range(10):
        integrate_depth(grid, one_ray_depth(1.0), Pose6D.identity(), K1)
    L = grid.to_dense()
    assert L.max() == pytest.approx(3.5) and L.min() == pytest.approx(-3.5)


def test_occupancy_probability():
    grid = small_grid()
    assert occupancy_probability(grid, [0, 0, 0.5]) == 0.5
    assert occupancy_probability(grid, [10, 10, 10]) == 0.5
    for _ in range(6):
        integrate_depth(grid, one_ray_depth(1.0), Pose6D.identity(), K1)
    assert occupancy_probability(grid, [0.0, 0.0, 1.01]) == pytest.approx(1 / (1 + np.exp(-3.5)))
    assert occupancy_probability(grid, [0.0, 0.0, 1.01]) == pytest.approx(0.97068776, abs=1e-8)


def test_empty_depth_and_shape_checks():
    with pytest.raises(EmptyDepthImage):
        integrate_depth(small_grid(), np.zeros((0, 0)), Pose6D.identity(), K1)
    with pytest.raises(InputError):
        integrate_depth(small_grid(), np.zeros((3, 3)), Pose6D.identity(), K1)
    with pytest.raises(InputError):
        IntegrationParams(l_occ=-1)


def test_rays_leaving_grid_are_clipped():
    grid = small_grid()
    pose = Pose6D.look_at([0, 0, -3.0], [0, 0, 0])  # camera outside the grid
    integrate_depth(grid, one_ray_depth(4.0), pose, K1)
    L = grid.to_dense()
    assert L[8, 8, 20] == pytest.approx(0.85)


def testsphere_surface_voxels_occupied():
    views, k = sphere_views()
    grid = VoxelGrid([-0.8] * 3, 0.025, (64, 64, 64), 32)
    for depth, pose in views:
        integrate_depth(grid, depth, pose, k)
    prob = grid.probabilities()
    idx = np.indices(grid.dims).reshape(3, -1).T
    centres = grid.voxel_center(idx)
    near = np.abs(np.linalg.norm(centres, axis=1) - 0.5) <= 0.5 * grid.voxel_size
    # voxels straddling the sphere surface: their centre is within half a voxel of it
    frac = (prob.reshape(-1)[near] > 0.5).mean()
    assert frac >= 0.95
    # free-space carving: nothing well outside the sphere is occupied
    outside = np.linalg.norm(centres, axis=1) > 0.5 + 2 * grid.voxel_size
    assert (prob.reshape(-1)[outside] > 0.5).sum() == 0


def test_free_space_never_occupied_after_one_frame():
    views, k = sphere_views(1)
    depth, pose = views[0]
    grid = VoxelGrid([-0.8] * 3, 0.025, (64, 64, 64), 32)
    integrate_depth(grid, depth, pose, k)
    v, u = np.nonzero(depth)
    from attention3d.geometry import backproject_points
    ends = backproject_points(np.stack([u, v], 1).astype(float), depth[v, u], pose, k)
    c = pose.center
    for s in (0.2, 0.5, 0.8):
        pts = c + s * (ends - c)
        # keep strictly-between points that are not in an endpoint voxel
        ijk = grid.voxel_of(pts)
        end_vox = {tuple(x) for x in grid.voxel_of(ends)}
        keep = [i for i, x in enumerate(map(tuple, ijk)) if x not in end_vox and grid.in_bounds(np.array(x))]
        assert np.all(grid.log_odds_at(ijk[keep]) <= 0)


def test_eviction_invariance(tmp_path):
    views, k = sphere_views(8)
    grids = []
    for budget in (None, 1, 4):
        g = VoxelGrid([-0.8] * 3, 0.025, (64, 64, 64), 16, store_dir=tmp_path / f"s{budget}", page_budget=budget)
        for depth, pose in views:
            integrate_depth(g, depth, pose, k)
        g.save(tmp_path / f"out{budget}")
        grids.append(g)
    ref = grids[0].to_dense().tobytes()
    for g in grids[1:]:
        assert g.to_dense().tobytes() == ref
    files = sorted(p.name for p in (tmp_path / "outNone" / "pages").iterdir())
    for budget in (1, 4):
        assert sorted(p.name for p in (tmp_path / f"out{budget}" / "pages").iterdir()) == files
        for name in files:
            assert (tmp_path / f"out{budget}" / "pages" / name).read_bytes() == \
                   (tmp_path / "outNone" / "pages" / name).read_bytes()


def test_budget_capacity(tmp_path):
    g = VoxelGrid([0, 0, 0], 1.0, (4, 4, 4), 2, store_dir=tmp_path)
    for idx in [(0, 0, 0), (1, 0, 0), (0, 1, 0)]:
        g.page(idx, create=True)[:] = sum(idx) + 1
    assert len(g.resident_pages()) == 3
    evict_pages(g, 3)  # budget = total pages: no-op
    assert len(g.resident_pages()) == 3
    evict_pages(g, 1)
    assert len(g.resident_pages()) == 1
    for idx in [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 0)]:
        assert g.page(idx)[0, 0, 0] == sum(idx) + 1
        assert g.resident_pages() == [idx]
    with pytest.raises(InputError):
        evict_pages(g, 0)


def test_order_independence_without_clamping():
    views, k = sphere_views(2)
    a = VoxelGrid([-0.8] * 3, 0.025, (64, 64, 64), 32)
    b = VoxelGrid([-0.8] * 3, 0.025, (64, 64, 64), 32)
    for depth, pose in views:
        integrate_depth(a, depth, pose, k)
    for depth, pose in views[::-1]:
        integrate_depth(b, depth, pose, k)
    assert np.allclose(a.to_dense(), b.to_dense(), atol=1e-12)


def test_save_load(tmp_path):
    views, k = sphere_views(2)
    g = VoxelGrid([-0.8] * 3, 0.025, (64, 64, 64), 32)
    for depth, pose in views:
        integrate_depth(g, depth, pose, k)
    g.save(tmp_path / "g")
    h = VoxelGrid.load(tmp_path / "g")
    assert h.dims == g.dims and h.voxel_size == g.voxel_size
    assert h.to_dense().tobytes() == g.to_dense().tobytes()


def test_mapper_estimator():
    views, k = sphere_views(4)
    m = OccupancyMapper(origin=(-0.8, -0.8, -0.8), dims=(64, 64, 64), sub_volume_edge=32)
    assert m.get_params()["voxel_size"] == 0.025
    m.fit([(d, p) for d, p in views], k)
    assert m.n_frames_ == 4
    free_point = 0.6 * views[0][1].center  # between camera 0 and the sphere
    p = m.predict_proba([free_point, [5, 5, 5]])
    assert p[0] < 0.5 and p[1] == 0.5
