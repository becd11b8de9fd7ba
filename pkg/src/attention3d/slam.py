"""Sparse landmark map: tracking, landmark spawning, keyframes and monocular localisation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import bundle_adjust
from .errors import (InputError, InsufficientObservations, LocalizationFailed, NoConsensus,
                     DegenerateConfiguration, VocabularyMissing)
from .features import DESCRIPTOR_SIZE, Features, extract_features, match_features, read_feature_file, \
    write_feature_file
from .geometry import Pose6D, backproject_points, read_intrinsics, write_intrinsics
from .pnp import estimate_pose_pnp
from .vocabulary import Vocabulary, build_vocabulary, retrieve_candidates


@dataclass
class Landmark:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    observation_count: int = 1
    anchor_keyframe: int = -1  # keyframe that spawned it


@dataclass
class KeyFrame:
    id: int
    pose: Pose6D
    features: Features
    observations: dict = field(default_factory=dict)  # keypoint index -> landmark id
    word_histogram: dict = field(default_factory=dict)
    frame_id: object = None
    n_tracked: int = 0

    @property
    def keypoints(self):
        return list(self.features)


@dataclass
class Failure:
    reason: str
    n_matches: int = 0

    def __bool__(self):
        return False


@dataclass
class TrackingParams:
    ratio: float = 0.8
    inlier_threshold_px: float = 2.0
    confidence: float = 0.999
    n_reference_keyframes: int = 3
    keyframe_inlier_fraction: float = 0.6
    keyframe_translation: float = 0.3
    min_depth: float = 0.1
    max_depth: float = 5.0
    depth_edge_ratio: float = 0.05
    window: int = 5
    huber_delta: float = 2.0
    seed: int = 0


class SparseMap:
    def __init__(self, intrinsics=None):
        self.intrinsics = intrinsics
        self.landmarks = {}
        self.keyframes = []
        self.vocabulary = None
        self._next_landmark = 0

    def __repr__(self):
        return f"SparseMap({len(self.landmarks)} landmarks, {len(self.keyframes)} keyframes)"

    def keyframe_rank(self, kf_id):
        for i, kf in enumerate(self.keyframes):
            if kf.id == kf_id:
                return i
        return -1

    def keyframe(self, kf_id):
        return self.keyframes[self.keyframe_rank(kf_id)]

    def add_keyframe(self, pose, features, frame_id=None):
        kid = self.keyframes[-1].id + 1 if self.keyframes else 0
        kf = KeyFrame(kid, pose, features, frame_id=frame_id)
        self.keyframes.append(kf)
        return kf

    def add_landmark(self, position, descriptor, keyframe):
        lm = Landmark(self._next_landmark, np.asarray(position, float), np.asarray(descriptor, float), 0,
                      keyframe.id)
        self.landmarks[lm.id] = lm
        self._next_landmark += 1
        return lm

    def observe(self, keyframe, kp_index, landmark_id):
        if landmark_id in keyframe.observations.values() or kp_index in keyframe.observations:
            return False
        keyframe.observations[int(kp_index)] = int(landmark_id)
        self.landmarks[landmark_id].observation_count += 1
        return True

    def landmark_table(self, keyframes):
        ids = sorted({lid for kf in keyframes for lid in kf.observations.values()})
        if not ids:
            return [], np.empty((0, 3)), np.empty((0, DESCRIPTOR_SIZE))
        pos = np.array([self.landmarks[i].position for i in ids])
        desc = np.array([self.landmarks[i].descriptor for i in ids])
        return ids, pos, desc

    def build_vocabulary(self, branching=10, levels=3, seed=0):
        docs = {kf.id: kf.features.descriptors for kf in self.keyframes}
        corpus = np.vstack([d for d in docs.values() if len(d)])
        while levels > 1 and len(corpus) < branching**levels:
            levels -= 1
        self.vocabulary = build_vocabulary(corpus, branching, levels, seed, documents=docs)
        for kf in self.keyframes:
            kf.word_histogram = self.vocabulary.documents_.get(kf.id, {})
        return self.vocabulary

    # -- serialisation ------------------------------------------------------
    _LM_DTYPE = np.dtype([("id", "<i8"), ("xyz", "<f8", 3), ("desc", "<f4", DESCRIPTOR_SIZE),
                          ("count", "<i4"), ("anchor", "<i8")])

    def save(self, directory):
        d = Path(directory)
        (d / "keyframes").mkdir(parents=True, exist_ok=True)
        ids = sorted(self.landmarks)
        rec = np.zeros(len(ids), dtype=self._LM_DTYPE)
        for i, lid in enumerate(ids):
            lm = self.landmarks[lid]
            rec[i] = (lm.id, lm.position, lm.descriptor, lm.observation_count, lm.anchor_keyframe)
        (d / "landmarks.bin").write_bytes(rec.tobytes())
        with open(d / "keyframes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["keyframe_id", "frame_id", "n_tracked"] + [f"r{i}{j}" for i in range(3) for j in range(3)]
                       + ["tx", "ty", "tz"])
            for kf in self.keyframes:
                w.writerow([kf.id, "" if kf.frame_id is None else kf.frame_id, kf.n_tracked]
                           + [repr(float(x)) for x in kf.pose.rotation.ravel()]
                           + [repr(float(x)) for x in kf.pose.translation])
                write_feature_file(d / "keyframes" / f"frame_{kf.id}.feat", kf.features)
        with open(d / "observations.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["keyframe_id", "keypoint_index", "landmark_id"])
            for kf in self.keyframes:
                for kp, lid in sorted(kf.observations.items()):
                    w.writerow([kf.id, kp, lid])
        if self.vocabulary is not None:
            self.vocabulary.save(d / "vocab.bin")
        if self.intrinsics is not None:
            write_intrinsics(d / "intrinsics.txt", self.intrinsics)

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        if not (d / "landmarks.bin").exists():
            raise InputError(f"{d}: no landmarks.bin")
        k = read_intrinsics(d / "intrinsics.txt") if (d / "intrinsics.txt").exists() else None
        smap = cls(k)
        rec = np.frombuffer((d / "landmarks.bin").read_bytes(), dtype=cls._LM_DTYPE)
        for r in rec:
            smap.landmarks[int(r["id"])] = Landmark(int(r["id"]), r["xyz"].astype(float),
                                                    r["desc"].astype(float), int(r["count"]), int(r["anchor"]))
        smap._next_landmark = max(smap.landmarks, default=-1) + 1
        with open(d / "keyframes.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                R = np.array([float(row[f"r{i}{j}"]) for i in range(3) for j in range(3)]).reshape(3, 3)
                t = np.array([float(row[c]) for c in ("tx", "ty", "tz")])
                kid = int(row["keyframe_id"])
                fid = row["frame_id"]
                feats = read_feature_file(d / "keyframes" / f"frame_{kid}.feat")
                smap.keyframes.append(KeyFrame(kid, Pose6D(R, t), feats, frame_id=int(fid) if fid else None,
                                               n_tracked=int(row["n_tracked"])))
        by_id = {kf.id: kf for kf in smap.keyframes}
        with open(d / "observations.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                by_id[int(row["keyframe_id"])].observations[int(row["keypoint_index"])] = int(row["landmark_id"])
        if (d / "vocab.bin").exists():
            smap.vocabulary = Vocabulary.load(d / "vocab.bin")
            for kf in smap.keyframes:
                kf.word_histogram = smap.vocabulary.documents_.get(kf.id, {})
        return smap


# -- depth sampling ---------------------------------------------------------

def sample_depth(depth, pixels, min_depth=0.1, max_depth=5.0, edge_ratio=0.05):
    """Bilinear depth at sub-pixel positions; NaN where any tap is invalid or straddles a depth edge."""
    depth = np.asarray(depth, float)
    h, w = depth.shape
    px = np.asarray(pixels, float).reshape(-1, 2)
    x0 = np.floor(px[:, 0]).astype(int)
    y0 = np.floor(px[:, 1]).astype(int)
    ok = (x0 >= 0) & (y0 >= 0) & (x0 + 1 < w) & (y0 + 1 < h)
    x0c, y0c = np.clip(x0, 0, w - 2), np.clip(y0, 0, h - 2)
    taps = np.stack([depth[y0c, x0c], depth[y0c, x0c + 1], depth[y0c + 1, x0c], depth[y0c + 1, x0c + 1]], 1)
    fx, fy = px[:, 0] - x0c, px[:, 1] - y0c
    val = (taps[:, 0] * (1 - fx) * (1 - fy) + taps[:, 1] * fx * (1 - fy)
           + taps[:, 2] * (1 - fx) * fy + taps[:, 3] * fx * fy)
    ok &= np.all((taps >= min_depth) & (taps <= max_depth), axis=1)
    ok &= (taps.max(1) - taps.min(1)) <= edge_ratio * taps.min(1)
    return np.where(ok, val, np.nan)


def spawn_landmarks(smap, keyframe, depth, k, params=None, exclude=()):
    """Turn keyframe keypoints without a landmark into landmarks at their back-projected depth."""
    params = params or TrackingParams()
    feats = keyframe.features
    taken = set(keyframe.observations) | set(int(i) for i in exclude)
    idx = np.array([i for i in range(len(feats)) if i not in taken], dtype=int)
    if len(idx) == 0:
        return []
    z = sample_depth(depth, feats.pixels[idx], params.min_depth, params.max_depth, params.depth_edge_ratio)
    good = np.isfinite(z)
    idx, z = idx[good], z[good]
    if len(idx) == 0:
        return []
    pts = backproject_points(feats.pixels[idx], z, keyframe.pose, k)
    new = []
    for i, p in zip(idx, pts):
        lm = smap.add_landmark(p, feats.descriptors[i], keyframe)
        smap.observe(keyframe, int(i), lm.id)
        new.append(lm.id)
    return new


def initialize_map(image, depth, k, pose=None, params=None, features=None, frame_id=0):
    """First keyframe: every keypoint with valid depth becomes a landmark."""
    smap = SparseMap(k)
    feats = features if features is not None else extract_features(image)
    kf = smap.add_keyframe(pose or Pose6D.identity(), feats, frame_id)
    spawn_landmarks(smap, kf, depth, k, params)
    kf.n_tracked = len(kf.observations)
    return smap


def _reference_keyframes(smap, prior, n):
    if prior is None:
        return smap.keyframes[-n:]
    c = prior.center
    order = sorted(range(len(smap.keyframes)),
                   key=lambda i: (np.linalg.norm(smap.keyframes[i].pose.center - c), -i))
    return [smap.keyframes[i] for i in sorted(order[:n])]


def _solve_against(smap, feats, keyframes, k, params, min_matches=4):
    ids, pos, desc = smap.landmark_table(keyframes)
    matches = match_features(feats.descriptors, desc, params.ratio)
    if len(matches) < min_matches:
        raise LocalizationFailed(f"{len(matches)} matches", "too-few-matches")
    qi = np.array([m[0] for m in matches])
    li = np.array([m[1] for m in matches])
    corr = (feats.pixels[qi], pos[li])
    try:
        pose, inliers = estimate_pose_pnp(corr, k, params.inlier_threshold_px, params.confidence, seed=params.seed)
    except (NoConsensus, DegenerateConfiguration) as exc:
        raise LocalizationFailed(str(exc), "no-consensus") from exc
    return pose, qi[inliers], np.asarray(ids)[li[inliers]], len(matches)


def track_frame(smap, image, depth, k, prior=None, params=None, features=None, frame_id=None):
    """Estimate the pose of one RGB-D frame against the map.

    Returns ``(pose, keyframe)`` where ``keyframe`` is the newly created
    KeyFrame or None. Landmarks are spawned only into new keyframes.
    """
    params = params or TrackingParams()
    if not smap.keyframes:
        raise InputError("map has no keyframes")
    feats = features if features is not None else extract_features(image)
    refs = _reference_keyframes(smap, prior, params.n_reference_keyframes)
    pose, q_in, lm_in, _ = _solve_against(smap, feats, refs, k, params)
    last = smap.keyframes[-1]
    need = (len(q_in) < params.keyframe_inlier_fraction * max(last.n_tracked, 1)
            or pose.center_distance(last.pose) > params.keyframe_translation)
    if not need:
        return pose, None
    kf = smap.add_keyframe(pose, feats, frame_id)
    for q, lid in zip(q_in, lm_in):
        smap.observe(kf, int(q), int(lid))
    kf.n_tracked = len(kf.observations)
    if depth is not None:
        spawn_landmarks(smap, kf, depth, k, params)
    return pose, kf


def localize_monocular(smap, image, k, n_candidates=5, min_matches=12, min_inliers=10, params=None,
                       features=None):
    """Pose of a monocular frame from retrieval + matching + PnP, or a Failure value."""
    params = params or TrackingParams()
    if smap.vocabulary is None:
        raise VocabularyMissing("map has no vocabulary")
    feats = features if features is not None else extract_features(image)
    if len(feats) == 0:
        return Failure("too-few-matches")
    cands = retrieve_candidates(smap, feats, n_candidates)
    if not cands:
        return Failure("retrieval-empty")
    kfs = [smap.keyframe(c) for c in cands]
    try:
        pose, q_in, _, n_matches = _solve_against(smap, feats, kfs, k, params, min_matches)
    except LocalizationFailed as exc:
        return Failure(exc.reason)
    if len(q_in) < min_inliers:
        return Failure("no-consensus", n_matches)
    return pose


def build_map(frames, k, initial_pose=None, params=None, extractor=None, vocabulary=(10, 3), log=None):
    """Run tracking, spawning and windowed BA over ``(frame_id, image, depth)`` triples.

    ``image`` may already be a ``Features`` object. Returns ``(smap, poses)``
    with ``poses[frame_id]`` for every tracked frame.
    """
    params = params or TrackingParams()
    extract = extractor.extract if extractor is not None else extract_features
    smap, poses, prior = None, {}, initial_pose
    for frame_id, image, depth in frames:
        feats = image if isinstance(image, Features) else extract(image)
        if smap is None:
            smap = initialize_map(image, depth, k, initial_pose, params, feats, frame_id)
            poses[frame_id] = smap.keyframes[0].pose
            prior = poses[frame_id]
            continue
        try:
            pose, kf = track_frame(smap, image, depth, k, prior, params, feats, frame_id)
        except LocalizationFailed as exc:
            if log:
                log(f"frame {frame_id}: tracking lost ({exc.reason})")
            continue
        if kf is not None and len(smap.keyframes) >= 2:
            try:
                bundle_adjust(smap, params.window, params.huber_delta, k=k)
            except InsufficientObservations:
                pass
            pose = kf.pose
        poses[frame_id] = pose
        prior = pose
    if smap is None:
        raise InputError("no frames to map")
    for kf in smap.keyframes:
        if kf.frame_id is not None:
            poses[kf.frame_id] = kf.pose
    if vocabulary:
        smap.build_vocabulary(*vocabulary, seed=params.seed)
    return smap, poses
