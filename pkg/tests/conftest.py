import time

import numpy as np
import pytest

from attention3d.geometry import Intrinsics, Pose6D, project_points
from attention3d.surface import TriangleMesh
from attention3d.synth import SceneSpec, render_depth
from attention3d.volumetric import VoxelGrid


def uv_sphere(radius=0.5, n_lat=50, n_lon=51, center=(0.0, 0.0, 0.0)):
    """Closed latitude/longitude sphere with outward (CCW) triangles."""
    theta = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1).reshape(-1, 3)
    verts = np.vstack([[0, 0, 1], ring, [0, 0, -1]]) * radius + np.asarray(center)
    tris = []
    idx = lambda i, j: 1 + i * n_lon + (j % n_lon)
    for j in range(n_lon):
        tris.append([0, idx(0, j), idx(0, j + 1)])
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a, b, c, d = idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1)
            tris += [[a, c, b], [b, c, d]]
    south = len(verts) - 1
    for j in range(n_lon):
        tris.append([south, idx(n_lat - 2, j + 1), idx(n_lat - 2, j)])
    mesh = TriangleMesh(verts, np.array(tris))
    inward = np.einsum("ij,ij->i", mesh.face_normals(), mesh.centroids() - center) < 0
    mesh.triangles[inward] = mesh.triangles[inward][:, ::-1]
    return mesh


def grid_plane(nx=50, ny=50, size=1.0, z=0.0, jitter=0.0, seed=0):
    """Square plane z = const tiled into 2*nx*ny triangles."""
    rng = np.random.default_rng(seed)
    xs = np.linspace(-size / 2, size / 2, nx + 1)
    ys = np.linspace(-size / 2, size / 2, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    Z = np.full_like(X, z) + jitter * rng.standard_normal(X.shape)
    verts = np.stack([X, Y, Z], -1).reshape(-1, 3)
    tris = []
    for i in range(nx):
        for j in range(ny):
            a = i * (ny + 1) + j
            b, c, d = a + ny + 1, a + 1, a + ny + 2
            tris += [[a, c, b], [b, c, d]]
    return TriangleMesh(verts, np.array(tris))


def triangle_soup(n=5000, seed=0, extent=1.0, size=0.08):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-extent, extent, (n, 1, 3))
    verts = (centers + rng.normal(scale=size, size=(n, 3, 3))).reshape(-1, 3)
    return TriangleMesh(verts, np.arange(3 * n).reshape(n, 3))


def random_pose(rng, scale=1.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0, np.pi) / np.linalg.norm(w)
    return Pose6D.from_rotvec(w, rng.normal(scale=scale, size=3))


@pytest.fixture
def k640():
    return Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fill_grid(grid, logodds):
    e = grid.sub_volume_edge
    for idx in np.ndindex(*grid.page_dims):
        block = logodds[idx[0] * e:(idx[0] + 1) * e, idx[1] * e:(idx[1] + 1) * e, idx[2] * e:(idx[2] + 1) * e]
        if block.any():
            grid.page(idx, create=True)[:] = block
    return grid


def sphere_grid(edge=64, radius=0.5, voxel=0.025, n=64, center=(0.013, -0.007, 0.004)):
    origin = np.full(3, -n * voxel / 2)
    grid = VoxelGrid(origin, voxel, (n, n, n), edge)
    c = grid.voxel_center(np.indices((n, n, n)).reshape(3, -1).T)
    sdf = np.linalg.norm(c - np.asarray(center), axis=1) - radius
    # smooth log-odds profile: +3.5 deep inside, -3.5 outside
    L = np.clip(-sdf / voxel * 2.0, -3.5, 3.5).reshape(n, n, n)
    return fill_grid(grid, L)


def scene_points(rng, pose, k, n, depth=(1.0, 6.0), planar=False):
    """Points visible from ``pose``: random pixels back-projected at random depths."""
    uv = rng.uniform([20, 20], [k.width - 20, k.height - 20], (n, 2))
    z = rng.uniform(*depth, n) if not planar else None
    if planar:
        # a tilted world plane in front of the camera
        n_c = np.array([0.2, -0.1, -1.0])
        n_c /= np.linalg.norm(n_c)
        rays = np.column_stack([(uv[:, 0] - k.cx) / k.fx, (uv[:, 1] - k.cy) / k.fy, np.ones(n)])
        z = -3.0 / (rays @ n_c)
    pc = np.column_stack([(uv[:, 0] - k.cx) / k.fx * z, (uv[:, 1] - k.cy) / k.fy * z, z])
    return pose.inverse().transform(pc), uv


def pose_err(a, b):
    return max(a.rotation_distance(b), np.abs(a.translation - b.translation).max())


def ba_problem(rng, k, n_cam=5, n_pt=150):
    pts = rng.uniform([-1, -1, 3], [1, 1, 5], (n_pt, 3))
    poses = [Pose6D.look_at([0.3 * i - 0.6, 0.1 * np.sin(i), 0.0], [0, 0, 4]) for i in range(n_cam)]
    cam, pid, uv = [], [], []
    for c, p in enumerate(poses):
        proj, _ = project_points(pts, p, k)
        cam += [c] * n_pt
        pid += list(range(n_pt))
        uv.append(proj)
    return poses, pts, np.array(cam), np.array(pid), np.concatenate(uv)


def sphere_scene():
    return SceneSpec.from_dict({"bounds": [[-2, -2, -2], [2, 2, 2]],
                                "primitives": [{"type": "sphere", "center": [0, 0, 0], "radius": 0.5}]})


def sphere_views(n=20):
    k = Intrinsics(60.0, 60.0, 39.5, 29.5, 80, 60)
    scene = sphere_scene()
    golden = np.pi * (3 - np.sqrt(5))
    views = []
    for i in range(n):
        y = 1 - 2 * (i + 0.5) / n
        r = np.sqrt(1 - y * y)
        eye = 1.5 * np.array([r * np.cos(golden * i), y, r * np.sin(golden * i)])
        up = (0, -1, 0) if abs(y) < 0.9 else (1, 0, 0)
        pose = Pose6D.look_at(eye, [0, 0, 0], up)
        views.append((render_depth(scene, pose, k), pose))
    return views, k


# -- shared end-to-end runs ---------------------------------------------------------
# One synth + pipeline run is shared by the pipeline and acceptance tests; a
# second run chains the individual subcommands over the same dataset.

@pytest.fixture(scope="session")
def demo_run(tmp_path_factory):
    from attention3d.cli import main

    root = tmp_path_factory.mktemp("demo")
    data, out = root / "data", root / "run1"
    t0 = time.perf_counter()
    assert main(["synth", "--out", str(data)]) == 0
    t_synth = time.perf_counter() - t0
    assert main(["pipeline", "--data", str(data), "--out", str(out)]) == 0
    return {"data": data, "out": out, "synth_s": t_synth, "total_s": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def demo_rerun(demo_run):
    from attention3d.cli import main
    from attention3d.pipeline import PIPELINE_ORDER

    out = demo_run["out"].parent / "run2"
    for stage in PIPELINE_ORDER:
        assert main([stage, "--data", str(demo_run["data"]), "--out", str(out)]) == 0
    return out


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
