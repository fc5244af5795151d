import numpy as np
import pytest

from hybridslam.evaluation import ate_rmse, hybrid_pose_error
from hybridslam.system import SlamSystem, pose_pairs, synthetic_frames
from hybridslam.tracking import PipelineConfig


def _gt_pairs(world):
    return [(t, s, f) for t, s, f in zip(world.stereo.timestamps, world.stereo.poses, world.fisheye.poses)]


@pytest.fixture(scope="module")
def hybrid_output(arm_world, arm_vocab):
    cfg = PipelineConfig(deterministic=True, max_features=1000)
    return SlamSystem(arm_world.rig, arm_world.fisheye_model, arm_vocab, cfg).run(synthetic_frames(arm_world, hybrid=True))


def test_stream_interleaves_stereo_first(arm_world):
    kinds = [(f.index, f.kind) for f in synthetic_frames(arm_world, hybrid=True, frames=range(3))]
    assert kinds == [(0, "stereo"), (0, "fisheye"), (1, "stereo"), (1, "fisheye"), (2, "stereo"), (2, "fisheye")]


def test_sync_tolerance_defaults_to_half_period(arm_world):
    s = SlamSystem(arm_world.rig, arm_world.fisheye_model, None, PipelineConfig())
    assert s.sync_tolerance(0.2) == pytest.approx(0.1)
    s = SlamSystem(arm_world.rig, arm_world.fisheye_model, None, PipelineConfig(sync_tolerance=0.03))
    assert s.sync_tolerance(0.2) == 0.03


def test_hybrid_output_report(hybrid_output, arm_world):
    out = hybrid_output
    rep = out.report()
    assert rep["stereo_frames"] == rep["fisheye_frames"] == rep["fisheye_registered"] == len(arm_world)
    assert rep["keyframes"] == rep["stereo_keyframes"] + rep["fisheye_keyframes"]
    assert rep["lost_frames"] == 0 and rep["map_points"] > 0
    assert out.map_dump.startswith("# hybridslam map")


def test_hybrid_relative_pose_is_exact_on_noiseless_input(hybrid_output, arm_world):
    pairs = pose_pairs(hybrid_output)
    assert len(pairs) == len(arm_world)
    r = hybrid_pose_error(pairs, _gt_pairs(arm_world))
    assert r.dt_median < 1e-4 and r.dq_median < 1e-4


def test_stereo_only_mode_ignores_fisheye(arm_world, arm_vocab):
    cfg = PipelineConfig(deterministic=True, max_features=1000, hybrid=False)
    out = SlamSystem(arm_world.rig, arm_world.fisheye_model, arm_vocab, cfg).run(synthetic_frames(arm_world, hybrid=True))
    assert out.fisheye_total == 0 and len(out.fisheye) == 0 and out.n_fisheye_keyframes == 0


def test_threaded_pipeline_completes(clean_line_world, clean_line_run):
    from hybridslam.synthetic import descriptor_corpus
    from hybridslam.vocabulary import train_vocabulary

    w = clean_line_world
    voc = train_vocabulary(descriptor_corpus(w, range(0, len(w), 4)), k=10, depth=2, seed=0)
    system = SlamSystem(w.rig, None, voc, PipelineConfig(deterministic=False))
    assert len(system._threads) == 2
    out = system.run(synthetic_frames(w))
    assert system._threads == []
    assert len(out.stereo) == len(w)
    assert ate_rmse(out.stereo, w.stereo).rmse < 1e-4
    assert system.map.audit() == []


def test_deterministic_runs_match(clean_line_world, clean_line_run):
    from hybridslam.synthetic import descriptor_corpus
    from hybridslam.vocabulary import train_vocabulary

    w = clean_line_world
    voc = train_vocabulary(descriptor_corpus(w, range(0, len(w), 4)), k=10, depth=2, seed=0)
    again = SlamSystem(w.rig, None, voc, PipelineConfig(deterministic=True)).run(synthetic_frames(w))
    assert again.map_dump == clean_line_run.map_dump
    for a, b in zip(again.stereo.poses, clean_line_run.stereo.poses):
        assert np.array_equal(a.q, b.q) and np.array_equal(a.t, b.t)
