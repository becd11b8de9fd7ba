import copy

import numpy as np
import pytest

from attention3d.bundle import bundle_adjust
from attention3d.errors import InsufficientObservations, LocalizationFailed, VocabularyMissing
from attention3d.features import Features
from attention3d.geometry import Pose6D, project_points
from attention3d.slam import (SparseMap, build_map, initialize_map, localize_monocular, retrieve_candidates,
                              spawn_landmarks, track_frame)
from attention3d.synth import DEMO_SCAN_K, blur_image, demo_scan_trajectory, demo_scene, render_color, render_depth

K = DEMO_SCAN_K


@pytest.fixture(scope="module")
def scene():
    return demo_scene()


@pytest.fixture(scope="module")
def sequence(scene):
    traj = demo_scan_trajectory(30)
    return [(i, render_color(scene, p, K, 1), render_depth(scene, p, K)) for i, p in enumerate(traj)], traj


@pytest.fixture(scope="module")
def built(sequence):
    frames, traj = sequence
    smap, poses = build_map(frames, K, initial_pose=traj[0])
    return smap, poses


def test_build_map_tracks_every_frame(built, sequence):
    smap, poses = built
    _, traj = sequence
    assert len(poses) == len(traj)
    err = [poses[i].center_distance(traj[i]) for i in poses]
    assert np.median(err) < 0.01
    assert len(smap.keyframes) >= 2
    # every observation references an existing landmark, at most once per keyframe
    for kf in smap.keyframes:
        lids = list(kf.observations.values())
        assert len(lids) == len(set(lids))
        assert all(lid in smap.landmarks for lid in lids)


def test_landmarks_reproject_in_spawning_frame(sequence):
    frames, traj = sequence
    _, img, depth = frames[0]
    smap = initialize_map(img, depth, K, traj[0])
    kf = smap.keyframes[0]
    assert len(kf.observations) > 50
    kp = np.array(list(kf.observations))
    pts = np.array([smap.landmarks[kf.observations[i]].position for i in kp])
    uv, _ = project_points(pts, kf.pose, K)
    assert np.abs(uv - kf.features.pixels[kp]).max() < 1e-6
    # landmarks sit on the rendered surface
    assert np.median(np.abs(demo_scene().surface_distance(pts))) < 5e-3


def test_spawn_skips_matched_and_single_keypoint():
    one = Features([[32.0, 32.0]], [2.0], [0.0], np.eye(128)[:1])
    smap = SparseMap(K)
    kf = smap.add_keyframe(Pose6D.identity(), one)
    depth = np.full((K.height, K.width), 2.0)
    new = spawn_landmarks(smap, kf, depth, K)
    assert len(new) == 1
    lm = smap.landmarks[new[0]]
    assert np.allclose(lm.position, [(32 - K.cx) / K.fx * 2, (32 - K.cy) / K.fy * 2, 2.0])
    assert spawn_landmarks(smap, kf, depth, K) == []


def test_track_own_keyframe_image(built, sequence):
    smap = copy.deepcopy(built[0])
    frames, _ = sequence
    kf = smap.keyframes[1]
    _, img, _ = frames[kf.frame_id]
    pose, _ = track_frame(smap, img, None, K, prior=kf.pose)
    assert pose.center_distance(kf.pose) < 1e-3


def test_blurred_frame_fails(built, sequence):
    smap = copy.deepcopy(built[0])
    frames, _ = sequence
    img = blur_image(frames[5][1], 12.0)
    with pytest.raises(LocalizationFailed):
        track_frame(smap, img, None, K)


def test_self_retrieval(built):
    smap, _ = built
    for kf in smap.keyframes:
        assert retrieve_candidates(smap, kf.features, 1)[0] == kf.id


def test_localize_rendered_view(built, scene):
    smap, _ = built
    pose = demo_scan_trajectory(30)[12].perturb([0.0, 0.01, 0.0], [0.02, 0.0, 0.0])
    img = render_color(scene, pose, K, 1)
    est = localize_monocular(smap, img, K)
    assert est and est.center_distance(pose) < 1e-2
    # the floor seen from above is not in the map
    away = Pose6D.look_at([0.0, -0.5, 0.6], [0.0, 1.0, 0.8])
    fail = localize_monocular(smap, render_color(scene, away, K, 1), K)
    assert not fail and fail.reason in ("too-few-matches", "no-consensus")


def test_localize_needs_vocabulary(sequence):
    frames, traj = sequence
    smap = initialize_map(frames[0][1], frames[0][2], K, traj[0])
    with pytest.raises(VocabularyMissing):
        localize_monocular(smap, frames[0][1], K)


def test_bundle_adjust_window(built):
    smap = copy.deepcopy(built[0])
    before = [kf.pose for kf in smap.keyframes]
    try:
        bundle_adjust(smap, window=3)
    except InsufficientObservations:
        pytest.skip("window too small")
    # the gauge anchor does not move
    anchor = smap.keyframes[-3] if len(smap.keyframes) >= 3 else smap.keyframes[0]
    idx = smap.keyframe_rank(anchor.id)
    assert anchor.pose is before[idx]


def test_map_save_load(built, tmp_path):
    smap, _ = built
    smap.save(tmp_path / "map")
    for name in ("landmarks.bin", "keyframes.csv", "observations.csv", "vocab.bin"):
        assert (tmp_path / "map" / name).exists()
    back = SparseMap.load(tmp_path / "map")
    assert len(back.landmarks) == len(smap.landmarks)
    assert [kf.id for kf in back.keyframes] == [kf.id for kf in smap.keyframes]
    kf = smap.keyframes[0]
    assert retrieve_candidates(back, kf.features, 1)[0] == kf.id
