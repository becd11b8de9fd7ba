import numpy as np
import pytest

from attention3d.errors import BehindCamera, InputError, NonPositiveDepth
from attention3d.geometry import (Intrinsics, Pose6D, backproject, matrix_to_rotvec, pixel_ray, project,
                                  read_intrinsics, read_poses_csv, rotvec_to_matrix, write_intrinsics,
                                  write_poses_csv)

from conftest import random_pose


def test_project_optical_axis(k640):
    assert np.allclose(project([0, 0, 1], Pose6D.identity(), k640), [320, 240])
    assert np.allclose(project([0.1, 0, 1], Pose6D.identity(), k640), [370, 240])


def test_project_behind_camera(k640):
    with pytest.raises(BehindCamera):
        project([0, 0, -1], Pose6D.identity(), k640)


def test_backproject_examples(k640):
    assert np.allclose(backproject([320, 240], 2.0, Pose6D.identity(), k640), [0, 0, 2])
    assert np.allclose(backproject([370, 240], 1.0, Pose6D.identity(), k640), [0.1, 0, 1])
    with pytest.raises(NonPositiveDepth):
        backproject([1, 1], 0.0, Pose6D.identity(), k640)


def test_round_trips(k640, rng):
    for _ in range(200):
        pose = random_pose(rng)
        X = pose.inverse().transform(rng.uniform([-1, -1, 0.5], [1, 1, 5]))
        uv = project(X, pose, k640)
        z = pose.transform(X)[2]
        X2 = backproject(uv, z, pose, k640)
        assert np.abs(X2 - X).max() < 1e-9
        assert np.abs(project(X2, pose, k640) - uv).max() < 1e-9


def test_pixel_ray(k640, rng):
    r = pixel_ray([320, 240], Pose6D.identity(), k640)
    assert np.allclose(r.origin, 0) and np.allclose(r.direction, [0, 0, 1])
    r = pixel_ray([820, 240], Pose6D.identity(), k640)
    assert np.allclose(r.direction, np.array([1, 0, 1]) / np.sqrt(2))
    for _ in range(100):
        pose = random_pose(rng)
        px = rng.uniform([0, 0], [640, 480])
        ray = pixel_ray(px, pose, k640)
        assert abs(np.linalg.norm(ray.direction) - 1) < 1e-12
        assert np.allclose(ray.origin, -pose.rotation.T @ pose.translation)
        assert ray.distance_to(backproject(px, 3.7, pose, k640)) < 1e-9


def test_pose_algebra(rng):
    a, b, c = (random_pose(rng) for _ in range(3))
    lhs = (a @ b) @ c
    rhs = a @ (b @ c)
    assert np.allclose(lhs.matrix(), rhs.matrix(), atol=1e-12)
    ident = a @ a.inverse()
    assert np.allclose(ident.matrix(), np.eye(4), atol=1e-9)


def test_pose_invariants():
    with pytest.raises(InputError):
        Pose6D(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InputError):
        Pose6D(np.eye(3) * 1.01, np.zeros(3))


def test_rotvec_round_trip(rng):
    for _ in range(100):
        w = rng.normal(size=3)
        w *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(w)
        assert np.allclose(matrix_to_rotvec(rotvec_to_matrix(w)), w, atol=1e-9)


def test_look_at_keeps_image_upright():
    # world y points down: a point above the target (smaller y) lands in the upper image half
    k = Intrinsics(100, 100, 50, 50, 100, 100)
    pose = Pose6D.look_at([0, 0, 0], [0, 0, 1])
    assert np.allclose(pose.rotation, np.eye(3))
    assert project([0, -0.1, 1], pose, k)[1] < 50
    assert project([0.1, 0, 1], pose, k)[0] > 50


def test_intrinsics_validation():
    with pytest.raises(InputError):
        Intrinsics(0, 1, 1, 1, 10, 10)
    with pytest.raises(InputError):
        Intrinsics(1, 1, 10, 1, 10, 10)


def test_file_round_trips(tmp_path, rng, k640):
    poses = {i: random_pose(rng) for i in range(5)}
    write_poses_csv(tmp_path / "p.csv", poses)
    back = read_poses_csv(tmp_path / "p.csv")
    assert sorted(back) == list(range(5))
    for i in poses:
        assert np.allclose(back[i].matrix(), poses[i].matrix(), atol=1e-12)
    write_intrinsics(tmp_path / "k.txt", k640)
    assert read_intrinsics(tmp_path / "k.txt") == k640
