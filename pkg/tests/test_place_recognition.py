import numpy as np
import pytest

from hybridslam.features import FeatureSet
from hybridslam.geometry import Pose, quat_from_rotvec
from hybridslam.place_recognition import (
    LoopCandidate,
    LoopConfig,
    LoopDetector,
    close_loop,
    optimize_pose_graph,
    query_database,
)
from hybridslam.vocabulary import train_vocabulary
from hybridslam.world_map import Frame, WorldMap

from conftest import independent_audit, make_map


def _unit(x):
    return (x / np.linalg.norm(x, axis=-1, keepdims=True)).astype(np.float32)


@pytest.fixture(scope="module")
def vocab():
    rng = np.random.default_rng(2)
    return train_vocabulary([_unit(np.abs(rng.normal(size=(80, 128)))) for _ in range(8)], k=5, depth=2, seed=0)


def _copy_frame(m, kid, pose, kind="stereo"):
    kf = m.keyframes[kid]
    return Frame(kind, kf.timestamp + 100.0, kf.features.copy(), kf.camera, pose)


def _drift(k):
    return Pose(quat_from_rotvec([0.0, 0.004 * k, 0.002 * k]), np.array([0.01 * k, 0.0, 0.005 * k]))


def _loop_map(pinhole, n=10, per=30):
    """Chain of keyframes on a circle with accumulated drift; the last one revisits the first."""
    rng = np.random.default_rng(11)
    m = WorldMap()
    gt = []
    for k in range(n):
        a = 2 * np.pi * k / (n - 1)
        c = np.array([np.cos(a) - 1.0, np.sin(a), 0.0])
        gt.append(Pose(quat_from_rotvec([0.0, 0.0, 0.0]), -c))
    first = None
    prev_ids, prev_X = [], np.zeros((0, 3))
    for k in range(n):
        if k == n - 1:
            X_new = first  # same landmarks as the first keyframe, mapped again
        else:
            X_new = gt[k].inverse().transform(np.column_stack([rng.uniform(-1, 1, (per, 2)), rng.uniform(3, 5, per)]))
        X_all = np.vstack([prev_X, X_new])
        z, _ = pinhole.project_batch(gt[k].transform(X_all))
        nf = len(X_all)
        fs = FeatureSet(z[:, 0], z[:, 1], np.ones(nf), np.zeros(nf), _unit(rng.normal(size=(nf, 128))))
        pose = _drift(k).compose(gt[k])
        fr = Frame("stereo", float(k), fs, pinhole, pose)
        fr.point_ids[: len(prev_ids)] = prev_ids
        kid = m.insert_keyframe(fr)
        Xd = pose.inverse().transform(gt[k].transform(X_new))
        ids = [m.add_point(x, kid, len(prev_ids) + j) for j, x in enumerate(Xd)]
        m.update_covisibility(kid)
        if k == 0:
            first = X_new
            first_ids = ids
        prev_ids, prev_X = ids, X_new
    return m, gt, first_ids


def _center_rmse(m, gt):
    err = [np.linalg.norm(m.keyframes[k].center() - gt[k].center()) for k in m.keyframes]
    return float(np.sqrt(np.mean(np.square(err))))


# -- database ---------------------------------------------------------------------


def _distinct_map(rng, vocab, n=5):
    m = WorldMap(vocab)
    sets = [_unit(np.abs(rng.normal(size=(60, 128)))) for _ in range(n)]
    for i, d in enumerate(sets):
        fs = FeatureSet(np.zeros(60), np.zeros(60), np.ones(60), np.zeros(60), d)
        m.insert_keyframe(Frame("stereo", float(i), fs, None, Pose.identity()))
    return m, sets


def test_query_returns_self_first(rng, vocab):
    m, _ = _distinct_map(rng, vocab)
    hits = m.index.query(m.keyframes[1].bow)
    assert hits[0][0] == 1 and hits[0][1] == pytest.approx(1.0)
    assert all(s < 1.0 for k, s in hits[1:])


def test_query_database_excludes_covisible_keyframes(rng, vocab):
    m, _, _ = make_map(rng, n_frames=3, vocabulary=vocab)
    assert query_database(m, m.keyframes[0].bow, 0) == []


def test_revisit_ranks_first(rng, vocab):
    m, sets = _distinct_map(rng, vocab)
    noisy = _unit(sets[2] + rng.normal(scale=0.005, size=sets[2].shape))
    hits = query_database(m, vocab.transform(noisy))
    assert hits[0][0] == 2


# -- detection and verification -------------------------------------------------------


def test_no_loop_in_tiny_map(rng, vocab):
    m, _, _ = make_map(rng, n_frames=3, vocabulary=vocab)
    det = LoopDetector()
    assert all(det.detect(m, k) is None for k in m.keyframes)


def test_exact_revisit_verifies(rng, vocab, rig):
    m, poses, _ = make_map(rng, n_frames=2, kinds=("stereo", "stereo"), vocabulary=vocab)
    drifted = Pose(quat_from_rotvec([0.02, 0.0, 0.01]), np.array([0.1, 0.05, 0.0])).compose(poses[0])
    q = m.insert_keyframe(_copy_frame(m, 0, drifted))
    loop = LoopDetector(LoopConfig(min_inliers=20)).verify(m, q, 0)
    assert loop is not None and loop.inliers >= 60
    assert np.allclose(loop.pose.matrix(), poses[0].matrix(), atol=1e-6)


def test_aliased_scene_is_rejected(rng, vocab, rig):
    m, poses, _ = make_map(rng, n_frames=2, kinds=("stereo", "stereo"), vocabulary=vocab)
    fr = _copy_frame(m, 0, poses[0])
    perm = rng.permutation(len(fr.features))
    fr.features.u = fr.features.u[perm]
    fr.features.v = fr.features.v[perm]
    q = m.insert_keyframe(fr)
    assert LoopDetector().verify(m, q, 0) is None


# -- pose graph and loop correction ----------------------------------------------------


def test_pose_graph_consistent_edges_are_a_fixed_point():
    rng = np.random.default_rng(3)
    poses = {k: Pose(quat_from_rotvec(rng.normal(scale=0.2, size=3)), rng.normal(size=3)) for k in range(5)}
    edges = [(i, i + 1, poses[i + 1].compose(poses[i].inverse())) for i in range(4)]
    edges.append((0, 4, poses[4].compose(poses[0].inverse())))
    out = optimize_pose_graph(poses, edges, fixed={0})
    for k in poses:
        assert np.allclose(out[k].matrix(), poses[k].matrix(), atol=1e-9)


def test_zero_drift_loop_leaves_map_unchanged(rng):
    m, _, _ = make_map(rng, n_frames=4)
    poses = {k: kf.pose.matrix() for k, kf in m.keyframes.items()}
    pts = {p: mp.position.copy() for p, mp in m.points.items()}
    close_loop(m, LoopCandidate(3, 0, m.keyframes[3].pose))
    for k, T in poses.items():
        assert np.allclose(m.keyframes[k].pose.matrix(), T, atol=1e-9)
    for p, X in pts.items():
        assert np.allclose(m.points[p].position, X, atol=1e-9)


def test_drifted_loop_correction(pinhole):
    m, gt, first_ids = _loop_map(pinhole)
    last = max(m.keyframes)
    assert m.keyframes[last].parent == last - 1
    before = _center_rmse(m, gt)
    last_before = np.linalg.norm(m.keyframes[last].center() - gt[last].center())
    kq = m.keyframes[last]
    dup = {int(i): int(kq.point_ids[i]) for i in np.nonzero(kq.point_ids >= 0)[0]}
    dup = {i: p for i, p in dup.items() if m.points[p].ref_kf == last}
    matches = dict(zip(sorted(dup), first_ids))
    want_obs = {pid: set(m.points[pid].observations) | {last} for pid in first_ids}
    called = []
    close_loop(m, LoopCandidate(last, 0, gt[last], matches), run_full_ba=lambda: called.append(1))
    assert _center_rmse(m, gt) < 0.5 * before
    assert np.linalg.norm(m.keyframes[last].center() - gt[last].center()) < 0.2 * last_before
    for pid in first_ids:
        assert set(m.points[pid].observations) == want_obs[pid]
    assert not set(dup.values()) & set(m.points)
    assert 0 in m.keyframes[last].loop_edges and called == [1]
    seen = [(k, i) for p in m.points.values() for k, i in p.observations.items()]
    assert len(seen) == len(set(seen))
    assert m.audit() == [] and independent_audit(m) == []
