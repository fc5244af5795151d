import numpy as np
import pytest

from hybridslam.errors import EmptyErrors, NoRegisteredPairs, TooFewAssociations
from hybridslam.evaluation import (
    AteReport,
    FeatureEvalConfig,
    HybridSample,
    ate_rmse,
    auc_curve,
    evaluate_pair,
    format_report,
    hybrid_pose_error,
    parse_report,
    report_items,
    run_feature_eval,
    stereo_to_fisheye,
    synthetic_samples,
    write_csv,
)
from hybridslam.geometry import Pose, Trajectory, quat_from_rotvec


def _traj(rng, n=20):
    poses = [Pose(quat_from_rotvec(rng.normal(scale=0.3, size=3)), rng.normal(size=3)) for _ in range(n)]
    return Trajectory([0.1 * i for i in range(n)], poses)


def _rigid(rng):
    return Pose(quat_from_rotvec(rng.normal(scale=1.0, size=3)), rng.normal(scale=5.0, size=3))


def _moved(traj, g):
    """Same camera motion expressed in a world frame moved by ``g``."""
    return Trajectory(traj.timestamps, [p.compose(g) for p in traj.poses])


# -- ATE ----------------------------------------------------------------------------


def test_identical_trajectories(rng):
    t = _traj(rng)
    r = ate_rmse(t, t)
    assert r.rmse == pytest.approx(0.0, abs=1e-12) and r.pairs == 20


def test_rigid_offset_is_removed(rng):
    t = _traj(rng)
    g = Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 0.0, 0.01]))
    assert ate_rmse(_moved(t, g), t).rmse < 1e-12


def test_ate_reflects_non_rigid_error(rng):
    t = _traj(rng)
    bumps = rng.normal(scale=0.01, size=(20, 3))
    # camera centers shifted by the bumps
    est = Trajectory(t.timestamps, [Pose(p.q, p.t - p.R @ b) for p, b in zip(t.poses, bumps)])
    r = ate_rmse(est, t)
    centered = bumps - bumps.mean(axis=0)
    assert 0 < r.rmse <= np.sqrt(np.mean(np.sum(centered**2, axis=1))) + 1e-12
    assert r.max >= r.median and r.rmse >= r.mean


def test_ate_rigid_invariance(rng):
    t, est = _traj(rng), _traj(rng)
    base = ate_rmse(est, t).rmse
    for _ in range(3):
        assert ate_rmse(_moved(est, _rigid(rng)), t).rmse == pytest.approx(base, abs=1e-9)


def test_ate_needs_three_pairs(rng):
    t = _traj(rng, 2)
    with pytest.raises(TooFewAssociations):
        ate_rmse(t, t)


def test_noiseless_slam_ate(clean_line_run, clean_line_world):
    r = ate_rmse(clean_line_run.stereo, clean_line_world.stereo)
    assert r.pairs == len(clean_line_world)
    assert r.rmse < 1e-5


# -- hybrid relative pose ----------------------------------------------------------------


def _pairs(rng, n=6):
    out = []
    for i in range(n):
        s = _rigid(rng)
        rel = Pose(quat_from_rotvec([0.0, 0.3, 0.1]), np.array([0.4, 0.0, 0.1]))
        out.append((0.2 * i, s, rel.compose(s)))
    return out


def test_hybrid_identity(rng):
    p = _pairs(rng)
    r = hybrid_pose_error(p, p)
    assert max(r.dt_cm) < 1e-10 and max(r.dq_deg) < 1e-6
    assert r.registered == 6 and r.registered_fraction == 1.0


@pytest.mark.parametrize("axis", [[1, 0, 0], [0, 1, 0], [0.6, 0, 0.8]])
def test_hybrid_one_degree(rng, axis):
    p = _pairs(rng)
    rot = Pose(quat_from_rotvec(np.radians(1.0) * np.array(axis)), np.zeros(3))
    est = [(t, s, rot.compose(f)) for t, s, f in p]
    r = hybrid_pose_error(est, p)
    assert np.allclose(r.dq_deg, 1.0, atol=1e-9)


def test_hybrid_common_motion_invariance(rng):
    p = _pairs(rng)
    noisy = [(t, s, Pose(quat_from_rotvec(rng.normal(scale=0.01, size=3)), rng.normal(scale=0.01, size=3)).compose(f))
             for t, s, f in p]
    base = hybrid_pose_error(noisy, p)
    g = _rigid(rng)
    moved = [(t, s.compose(g), f.compose(g)) for t, s, f in noisy]
    r = hybrid_pose_error(moved, p)
    assert np.allclose(r.dt_cm, base.dt_cm, atol=1e-9) and np.allclose(r.dq_deg, base.dq_deg, atol=1e-7)


def test_hybrid_counts_unregistered(rng):
    p = _pairs(rng)
    r = hybrid_pose_error(p[:3], p, total=6)
    assert r.registered == 3 and r.registered_fraction == 0.5


def test_hybrid_no_pairs(rng):
    with pytest.raises(NoRegisteredPairs):
        hybrid_pose_error([], _pairs(rng))
    with pytest.raises(NoRegisteredPairs):
        hybrid_pose_error([(99.0, Pose.identity(), Pose.identity())], _pairs(rng))


def test_stereo_to_fisheye_maps_fisheye_points_to_left(rng):
    s, f = _rigid(rng), _rigid(rng)
    X = rng.normal(size=3)
    assert np.allclose(stereo_to_fisheye(s, f).transform(f.transform(X)), s.transform(X))


# -- AUC ------------------------------------------------------------------------------------


def test_auc_extremes():
    assert auc_curve([0.0, 0.0]) == 1.0
    # only the last grid cell sees the jump to full accuracy
    assert auc_curve([180.0] * 4) == pytest.approx(0.5 / 180.0)
    assert auc_curve([np.nan, 200.0]) == auc_curve([180.0, 180.0])


def test_auc_hand_value():
    # accuracy 0.5 below 90 and 1 from 90 on; the trapezoid over [89, 90] averages 0.75
    assert auc_curve([0.0, 90.0]) == pytest.approx((89 * 0.5 + 0.75 + 90 * 1.0) / 180.0)


def test_auc_monotone(rng):
    e = rng.uniform(0, 180, 50)
    base = auc_curve(e)
    for _ in range(20):
        bumped = e.copy()
        i = rng.integers(50)
        bumped[i] = min(180.0, bumped[i] + rng.uniform(0, 30))
        assert auc_curve(bumped) <= base + 1e-15


def test_auc_errors():
    with pytest.raises(EmptyErrors):
        auc_curve([])
    with pytest.raises(ValueError):
        auc_curve([1.0], max_angle=0)


# -- feature harness -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def samples(arm_world):
    return synthetic_samples(arm_world, frames=range(0, 12, 2))


def test_noiseless_pairs_score_high(samples):
    r = run_feature_eval(samples)
    assert r.pairs == 6 and r.failed == 0
    assert r.auc_rot >= 0.99 and r.auc_trans >= 0.99
    assert r.mean_inliers > 100


def test_scrambled_pairs_score_low(arm_world):
    r = run_feature_eval(synthetic_samples(arm_world, frames=range(0, 12, 2), scramble=True, seed=1))
    assert r.auc_rot <= 0.1


def test_stride_subsamples(samples):
    assert run_feature_eval(samples, FeatureEvalConfig(stride=5)).pairs == 2


def test_zero_baseline_pair_excluded(samples):
    s = samples[0]
    still = HybridSample(s.left, s.left_camera, s.fisheye, s.fisheye_camera, Pose(s.relative.q, np.zeros(3)))
    r = run_feature_eval([still, samples[1]])
    assert r.translation_excluded == 1 and len(r.trans_errors) == 1


def test_failed_pair_counts_as_max_error(samples):
    s = samples[0]
    empty = HybridSample(s.left.subset(np.arange(3)), s.left_camera, s.fisheye, s.fisheye_camera, s.relative)
    rot, trans, inl, failed = evaluate_pair(empty, FeatureEvalConfig())
    assert failed and rot == 180.0 and trans == 180.0 and inl == 0


# -- report emission ---------------------------------------------------------------------------


def test_report_round_trip(rng, tmp_path):
    t = _traj(rng)
    items = report_items(ate_rmse(t, t))
    assert set(items) == {"rmse", "mean", "median", "max", "pairs"}
    text = format_report("ate", items) + format_report("extra", {"name": "x", "n": 3})
    back = parse_report(text)
    assert back["ate"] == items and back["extra"] == {"name": "x", "n": 3}
    write_csv(tmp_path / "r.csv", [items, items])
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "rmse,mean,median,max,pairs"
    with pytest.raises(ValueError):
        write_csv(tmp_path / "e.csv", [])
    assert isinstance(ate_rmse(t, t), AteReport)
