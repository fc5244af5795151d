import numpy as np
import pytest

from hybridslam.errors import InsufficientTracks
from hybridslam.features import CircularTracks, FeatureSet
from hybridslam.geometry import Pose, quat_from_rotvec, rotation_angle
from hybridslam.stereo_odometer import (
    OdometerConfig,
    StereoFrame,
    StereoTracks,
    estimate_ego_motion,
    reprojection_errors,
    reverse_tracks,
    track_circular,
)
from hybridslam.synthetic import render_frame

from conftest import scene_points


def _tracks(rig, X, motion):
    obs, _ = rig.project_batch(motion.transform(X))
    idx = np.arange(len(X))
    return StereoTracks(CircularTracks(idx, idx, idx, idx), X, obs)


def _frame(world, i):
    r = render_frame(world, i)
    return StereoFrame(r.features, r.right, r.timestamp)


def test_zero_motion(rig, rng):
    res = estimate_ego_motion(_tracks(rig, scene_points(rng, 80), Pose.identity()), rig)
    assert res.motion.almost_equal(Pose.identity(), 1e-6)


def test_known_motion_noiseless(rig, rng):
    T = Pose(quat_from_rotvec([0, np.radians(2), 0]), [0.1, 0.0, 0.0])
    res = estimate_ego_motion(_tracks(rig, scene_points(rng, 100), T), rig)
    assert np.linalg.norm(res.motion.t - T.t) < 1e-5
    assert rotation_angle(res.motion.R @ T.R.T) < 1e-5
    assert len(res.inliers) == 100


def test_outlier_tracks_excluded(rig, rng):
    T = Pose(quat_from_rotvec([0.01, 0.03, -0.02]), [0.08, -0.02, 0.05])
    tr = _tracks(rig, scene_points(rng, 150), T)
    bad = rng.random(150) < 0.4
    tr.observed[bad, 0] += rng.uniform(10, 60, bad.sum()) * rng.choice([-1, 1], bad.sum())
    tr.observed[bad, 2] = tr.observed[bad, 0] - rng.uniform(5, 30, bad.sum())
    res = estimate_ego_motion(tr, rig)
    assert np.linalg.norm(res.motion.t - T.t) < 1e-3
    assert rotation_angle(res.motion.R @ T.R.T) < 1e-3
    assert not set(np.nonzero(bad)[0]) & set(res.inliers.tolist())
    assert np.all(reprojection_errors(res.motion, tr, rig)[res.inliers] <= 1.5)


def test_guards_and_determinism(rig, rng):
    tr = _tracks(rig, scene_points(rng, 5), Pose.identity())
    with pytest.raises(InsufficientTracks):
        estimate_ego_motion(tr, rig)
    tr = _tracks(rig, scene_points(rng, 60), Pose(quat_from_rotvec([0, 0.02, 0]), [0.05, 0, 0]))
    tr.observed += rng.normal(scale=0.5, size=tr.observed.shape)
    a = estimate_ego_motion(tr, rig, OdometerConfig(seed=4))
    b = estimate_ego_motion(tr, rig, OdometerConfig(seed=4))
    assert np.array_equal(a.motion.t, b.motion.t) and np.array_equal(a.inliers, b.inliers)


def test_track_circular_cases(clean_line_world):
    w = clean_line_world
    f0, f1 = _frame(w, 0), _frame(w, 1)
    same = track_circular(f0, f0, w.rig)
    assert len(same) > 0.8 * len(f0.left)
    tr = track_circular(f0, f1, w.rig)
    r0, r1 = render_frame(w, 0), render_frame(w, 1)
    common = np.intersect1d(np.intersect1d(r0.labels, r0.right_labels), np.intersect1d(r1.labels, r1.right_labels))
    assert len(tr) >= 0.9 * len(common)
    empty = StereoFrame(FeatureSet.empty(), FeatureSet.empty())
    assert len(track_circular(f0, empty, w.rig)) == 0


def test_reverse_motion_is_inverse(clean_line_world):
    w = clean_line_world
    f0, f1 = _frame(w, 2), _frame(w, 3)
    tr = track_circular(f0, f1, w.rig)
    fwd = estimate_ego_motion(tr, w.rig).motion
    back = estimate_ego_motion(reverse_tracks(tr, f0, f1, w.rig), w.rig).motion
    assert fwd.compose(back).almost_equal(Pose.identity(), 1e-4)
    gt = w.stereo.poses[3].compose(w.stereo.poses[2].inverse())
    assert np.linalg.norm(fwd.t - gt.t) < 1e-5
