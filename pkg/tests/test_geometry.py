import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridslam.errors import (
    DegenerateDisparity,
    InsufficientCorrespondences,
    InsufficientParallax,
    NegativeDepth,
    NoConsensus,
    TooFewAssociations,
)
from hybridslam.geometry import (
    Pose,
    RansacConfig,
    Trajectory,
    associate,
    estimate_relative_pose_ransac,
    horn_align,
    quat_from_rotvec,
    random_pose,
    rotation_angle,
    se3_compose,
    se3_inverse,
    transform_point,
    triangulate_stereo,
    triangulate_two_view,
    triangulate_two_view_batch,
)

from conftest import scene_points

seeds = st.integers(0, 2**32 - 1)


def _rand(seed):
    return random_pose(np.random.default_rng(seed), trans_scale=2.0)


def test_identity_compose():
    assert se3_compose(Pose.identity(), Pose.identity()).almost_equal(Pose.identity(), 1e-15)


def test_translation_composition_by_hand():
    a = Pose([0, 0, 0, 1], [1, 0, 0])
    b = Pose([0, 0, 0, 1], [0, 2, 0])
    np.testing.assert_allclose(se3_compose(a, b).t, [1, 2, 0])


def test_inverse_of_translation():
    np.testing.assert_allclose(se3_inverse(Pose([0, 0, 0, 1], [1, 2, 3])).t, [-1, -2, -3])
    assert se3_inverse(Pose.identity()).almost_equal(Pose.identity())


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_compose_with_inverse_is_identity(seed):
    T = _rand(seed)
    assert se3_compose(T, se3_inverse(T)).almost_equal(Pose.identity(), 1e-9)
    assert se3_compose(se3_inverse(T), T).almost_equal(Pose.identity(), 1e-9)


@settings(max_examples=50, deadline=None)
@given(seeds, seeds, seeds)
def test_compose_is_associative(s1, s2, s3):
    a, b, c = _rand(s1), _rand(s2), _rand(s3)
    assert se3_compose(se3_compose(a, b), c).almost_equal(se3_compose(a, se3_compose(b, c)), 1e-9)


@settings(max_examples=50, deadline=None)
@given(seeds, seeds)
def test_quaternion_stays_unit(s1, s2):
    p = se3_compose(_rand(s1), _rand(s2))
    for _ in range(20):
        p = se3_compose(p, _rand(s2))
    assert abs(np.linalg.norm(p.q) - 1) < 1e-9


def test_transform_point_cases():
    np.testing.assert_allclose(transform_point(Pose.identity(), [1, 2, 3]), [1, 2, 3])
    yaw = Pose(quat_from_rotvec([0, 0, np.pi]), np.zeros(3))
    np.testing.assert_allclose(transform_point(yaw, [1, 0, 0]), [-1, 0, 0], atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_transform_point_matches_homogeneous_oracle(seed):
    rng = np.random.default_rng(seed)
    T = _rand(seed)
    p = rng.normal(size=3) * 5
    hom = T.matrix() @ np.append(p, 1.0)
    np.testing.assert_allclose(transform_point(T, p), hom[:3], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds, seeds)
def test_transform_of_composition(s1, s2):
    a, b = _rand(s1), _rand(s2)
    p = np.random.default_rng(s1).normal(size=3)
    np.testing.assert_allclose(transform_point(se3_compose(a, b), p), transform_point(a, transform_point(b, p)), atol=1e-9)


def test_triangulate_stereo_hand_value(rig):
    # z = fx*b/d = 400*0.1/20 = 2; x = (520-320)*2/400 = 1
    np.testing.assert_allclose(triangulate_stereo(520, 240, 500, rig), [1.0, 0.0, 2.0], atol=1e-12)


def test_triangulate_stereo_degenerate(rig):
    with pytest.raises(DegenerateDisparity):
        triangulate_stereo(320, 240, 320, rig)
    with pytest.raises(DegenerateDisparity):
        triangulate_stereo(300, 240, 310, rig)
    with pytest.raises(DegenerateDisparity):
        triangulate_stereo(320.1, 240, 320, rig)


def test_triangulate_stereo_round_trip(rig, rng):
    for p in scene_points(rng, 200):
        u, v, ur = rig.project(p)
        np.testing.assert_allclose(triangulate_stereo(u, v, ur, rig), p, atol=1e-9)


def test_two_view_symmetric_crossing():
    # cameras at x=0 and x=1, rays at +-45 degrees meet on the bisector x=0.5
    a = np.array([1.0, 0.0, 1.0]) / np.sqrt(2)
    b = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2)
    X = triangulate_two_view(a, b, Pose([0, 0, 0, 1], [1.0, 0, 0]))
    np.testing.assert_allclose(X, [0.5, 0.0, 0.5], atol=1e-12)


def test_two_view_parallel_and_behind():
    pose = Pose([0, 0, 0, 1], [1.0, 0, 0])
    with pytest.raises(InsufficientParallax):
        triangulate_two_view([0, 0, 1], [0, 0, 1], pose)
    with pytest.raises(NegativeDepth):
        triangulate_two_view([-1, 0, -1], [1, 0, -1], pose)


def test_two_view_synthetic_round_trip(rng):
    T_b = random_pose(rng, 0.3, 0.2)  # world(a) -> b
    X = scene_points(rng, 100)
    ra = X / np.linalg.norm(X, axis=1, keepdims=True)
    Xb = T_b.transform(X)
    rb = Xb / np.linalg.norm(Xb, axis=1, keepdims=True)
    pts, valid = triangulate_two_view_batch(ra, rb, T_b.inverse())
    np.testing.assert_allclose(pts[valid], X[valid], atol=1e-8)
    for i in np.nonzero(valid)[0][:10]:
        np.testing.assert_allclose(triangulate_two_view(ra[i], rb[i], T_b.inverse()), X[i], atol=1e-8)


def _bearing_pairs(rng, T, n):
    X = scene_points(rng, n)
    b1 = X / np.linalg.norm(X, axis=1, keepdims=True)
    X2 = T.transform(X)
    return b1, X2 / np.linalg.norm(X2, axis=1, keepdims=True)


def test_relative_pose_noiseless(rng):
    T = Pose(quat_from_rotvec([0.05, -0.1, 0.02]), [0.3, 0.05, -0.1])
    b1, b2 = _bearing_pairs(rng, T, 50)
    est = estimate_relative_pose_ransac(b1, b2)
    assert rotation_angle(est.rotation @ T.R.T) < 1e-6
    d = T.t / np.linalg.norm(T.t)
    assert np.arccos(np.clip(est.direction @ d, -1, 1)) < 1e-6
    assert est.inliers.all()


def test_relative_pose_outliers_recall(rng):
    T = Pose(quat_from_rotvec([0.02, 0.1, 0.0]), [0.4, 0.0, 0.1])
    b1, b2 = _bearing_pairs(rng, T, 200)
    bad = rng.random(200) < 0.3
    b2[bad] = rng.normal(size=(bad.sum(), 3))
    b2[bad, 2] = np.abs(b2[bad, 2])
    b2 /= np.linalg.norm(b2, axis=1, keepdims=True)
    est = estimate_relative_pose_ransac(b1, b2, RansacConfig(seed=3))
    assert est.inliers[~bad].mean() >= 0.99
    assert rotation_angle(est.rotation @ T.R.T) < 1e-6


def test_relative_pose_zero_motion(rng):
    b1, b2 = _bearing_pairs(rng, Pose.identity(), 60)
    try:
        est = estimate_relative_pose_ransac(b1, b2)
    except NoConsensus:
        return
    assert not est.translation_defined
    assert rotation_angle(est.rotation) < 1e-6


def test_relative_pose_guards_and_determinism(rng):
    b1, b2 = _bearing_pairs(rng, Pose(quat_from_rotvec([0, 0.1, 0]), [0.3, 0, 0]), 40)
    with pytest.raises(InsufficientCorrespondences):
        estimate_relative_pose_ransac(b1[:7], b2[:7])
    noisy = b2 + rng.normal(scale=2e-3, size=b2.shape)
    a = estimate_relative_pose_ransac(b1, noisy, RansacConfig(seed=9))
    b = estimate_relative_pose_ransac(b1, noisy, RansacConfig(seed=9))
    assert np.array_equal(a.rotation, b.rotation) and np.array_equal(a.inliers, b.inliers)


def _traj(rng, n=30):
    return Trajectory([0.1 * i for i in range(n)], [random_pose(rng, 3.0) for _ in range(n)])


def test_horn_identity(rng):
    tr = _traj(rng)
    g, res = horn_align(tr, tr)
    assert g.almost_equal(Pose.identity(), 1e-9)
    assert np.all(res < 1e-12)


def test_horn_recovers_known_transform(rng):
    est = _traj(rng)
    G = random_pose(rng, 5.0)
    ref = est.transformed(G)
    g, res = horn_align(est, ref)
    assert g.almost_equal(G, 1e-9)
    assert res.max() < 1e-9


def test_horn_three_points_exact(rng):
    est = _traj(rng, 3)
    ref = est.transformed(random_pose(rng))
    assert horn_align(est, ref)[1].max() < 1e-9
    with pytest.raises(TooFewAssociations):
        horn_align(_traj(rng, 2), _traj(rng, 2))


def test_horn_residuals_invariant_to_rigid_motion(rng):
    est, ref = _traj(rng), _traj(rng)
    _, r0 = horn_align(est, ref)
    _, r1 = horn_align(est.transformed(random_pose(rng, 4.0)), ref)
    assert abs(np.sqrt(np.mean(r0**2)) - np.sqrt(np.mean(r1**2))) < 1e-9


def test_association_tolerance():
    assert associate([0.0, 1.0, 2.0], [0.005, 1.02, 2.0]) == [(0, 0), (2, 2)]
    assert associate([0.0], [0.0, 0.001]) == [(0, 0)]


def test_trajectory_requires_increasing_timestamps():
    with pytest.raises(ValueError):
        Trajectory([1.0, 1.0], [Pose.identity(), Pose.identity()])
