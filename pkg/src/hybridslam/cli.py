"""``hybridslam`` command-line entry point.

Exit status: 0 on success, 2 on usage errors (including missing input
files), 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import dataset_io as dio
from . import evaluation as ev
from .errors import SlamError
from .geometry import Trajectory
from .system import FrameInput, SlamSystem
from .tracking import PipelineConfig
from .vocabulary import Vocabulary, train_vocabulary

VOCAB_FILE = "vocabulary.bin"


class UsageError(Exception):
    pass


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _yaml(path, section: str) -> dict:
    doc = yaml.safe_load(_existing(path, "config").read_text()) or {}
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a mapping")
    return doc.get(section, doc)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _calibration(args, manifest) -> dio.Calibration:
    path = args.calib or manifest.calibration
    if path is None:
        raise UsageError("no calibration given (--calib) and none referenced by the manifest")
    return dio.load_calibration(_existing(path, "calibration"))


def _limit(fs, n):
    # feature files are expected in descending detector-response order
    return fs if n is None or fs is None or len(fs) <= n else fs.subset(slice(0, n))


def _frames(manifest, n_features):
    for f in dio.iter_frames(manifest):
        yield FrameInput(f.index, f.timestamp, f.kind, _limit(f.left, n_features), _limit(f.right, n_features))


def _train_from_manifest(manifest, k, depth, stride, seed, hybrid=True, adapt=False) -> Vocabulary:
    """Train on every ``stride``-th image; ``adapt`` lowers the depth to what the corpus supports."""
    corpus = []
    counts = {"stereo": 0, "fisheye": 0}
    for entry in manifest.frames:
        i = counts[entry.kind]
        counts[entry.kind] += 1
        if i % stride or (entry.kind == "fisheye" and not hybrid):
            continue
        corpus.append(dio.load_features(entry.files[0]).desc)
    if adapt:
        n = sum(len(c) for c in corpus)
        while depth > 1 and k**depth > n:
            depth -= 1
    return train_vocabulary(corpus, k=k, depth=depth, seed=seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_run_slam(args) -> int:
    manifest = dio.load_manifest(_existing(args.manifest, "manifest"))
    cal = _calibration(args, manifest)
    if cal.stereo is None:
        raise UsageError("calibration has no stereo rig")
    overrides = _yaml(args.config, "pipeline") if args.config else {}
    cfg = PipelineConfig.from_dict(overrides)
    cfg.deterministic = args.deterministic
    cfg.hybrid = args.hybrid
    if args.seed is not None:
        cfg.ransac_seed = args.seed
    if args.features_per_frame is not None:
        cfg.max_features = args.features_per_frame
    if args.hybrid and cal.fisheye is None:
        raise UsageError("--hybrid needs a fisheye calibration")
    vocab = (Vocabulary.load(_existing(args.vocab, "vocabulary")) if args.vocab
             else _train_from_manifest(manifest, 10, 4, max(1, len(manifest.frames) // 40), cfg.ransac_seed,
                                       args.hybrid, adapt=True))
    out = _out_dir(args)

    system = SlamSystem(cal.stereo, cal.fisheye if args.hybrid else None, vocab, cfg)
    result = system.run(_frames(manifest, args.features_per_frame))

    dio.write_trajectory(out / "trajectory_stereo.txt", result.stereo)
    if args.hybrid:
        dio.write_trajectory(out / "trajectory_fisheye.txt", result.fisheye)
    (out / "map.txt").write_text(result.map_dump)
    items = result.report()
    timing = {"mean_tracking_ms": items.pop("mean_tracking_ms"), "frames": len(system.tracker.timings)}
    text = ev.format_report("slam", items)
    if manifest.groundtruth is not None and len(result.stereo) >= 3:
        ate = ev.ate_rmse(result.stereo, dio.read_trajectory(manifest.groundtruth))
        text += ev.format_report("ate", ev.report_items(ate))
    (out / "report.txt").write_text(text)
    (out / "timing.txt").write_text(ev.format_report("timing", timing))
    sys.stdout.write(text)
    return 0


def cmd_eval_ate(args) -> int:
    est = dio.read_trajectory(_existing(args.estimate, "estimate"))
    ref = dio.read_trajectory(_existing(args.reference, "reference"))
    rep = ev.ate_rmse(est, ref, tolerance=args.tolerance)
    text = ev.format_report("ate", ev.report_items(rep))
    (_out_dir(args) / "ate.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def _pose_triples(stereo: Trajectory, fisheye: Trajectory, tolerance: float):
    s_t = np.asarray(stereo.timestamps, dtype=float)
    out = []
    for t, pf in zip(fisheye.timestamps, fisheye.poses):
        if len(s_t) == 0:
            break
        k = int(np.argmin(np.abs(s_t - t)))
        if abs(s_t[k] - t) <= tolerance:
            out.append((t, stereo.poses[k], pf))
    return out


def cmd_eval_hybrid(args) -> int:
    ref_s, ref_f = args.reference_stereo, args.reference_fisheye
    if args.manifest and not (ref_s and ref_f):
        man = dio.load_manifest(_existing(args.manifest, "manifest"))
        ref_s, ref_f = man.groundtruth, man.groundtruth_fisheye
    if not (ref_s and ref_f):
        raise UsageError("reference stereo and fisheye trajectories are required")
    est = _pose_triples(dio.read_trajectory(_existing(args.estimate_stereo, "estimate")),
                        dio.read_trajectory(_existing(args.estimate_fisheye, "estimate")), args.tolerance)
    ref_fish = dio.read_trajectory(_existing(ref_f, "reference"))
    ref = _pose_triples(dio.read_trajectory(_existing(ref_s, "reference")), ref_fish, args.tolerance)
    rep = ev.hybrid_pose_error(est, ref, total=len(ref_fish), tolerance=args.tolerance)
    text = ev.format_report("hybrid", ev.report_items(rep))
    out = _out_dir(args)
    (out / "hybrid.txt").write_text(text)
    ev.write_csv(out / "hybrid.csv", [{"dt_cm": a, "dq_deg": b} for a, b in zip(rep.dt_cm, rep.dq_deg)])
    sys.stdout.write(text)
    return 0


def _manifest_samples(manifest, cal, tolerance):
    gs = dio.read_trajectory(manifest.groundtruth)
    gf = dio.read_trajectory(manifest.groundtruth_fisheye)
    stereo = [e for e in manifest.frames if e.kind == "stereo"]
    fish = [e for e in manifest.frames if e.kind == "fisheye"]
    s_t = np.array([e.timestamp for e in stereo])
    samples = []
    for e in fish:
        k = int(np.argmin(np.abs(s_t - e.timestamp))) if len(s_t) else -1
        if k < 0 or abs(s_t[k] - e.timestamp) > tolerance:
            continue
        ps = _nearest(gs, e.timestamp, tolerance)
        pf = _nearest(gf, e.timestamp, tolerance)
        if ps is None or pf is None:
            continue
        samples.append(ev.HybridSample(dio.load_features(stereo[k].files[0]), cal.stereo.left,
                                       dio.load_features(e.files[0]), cal.fisheye,
                                       pf.compose(ps.inverse()), e.timestamp))
    return samples


def _nearest(traj: Trajectory, t, tolerance):
    ts = np.asarray(traj.timestamps)
    if len(ts) == 0:
        return None
    k = int(np.argmin(np.abs(ts - t)))
    return traj.poses[k] if abs(ts[k] - t) <= tolerance else None


def cmd_eval_features(args) -> int:
    manifest = dio.load_manifest(_existing(args.manifest, "manifest"))
    cal = _calibration(args, manifest)
    if cal.stereo is None or cal.fisheye is None:
        raise UsageError("feature evaluation needs stereo and fisheye calibration")
    if manifest.groundtruth is None or manifest.groundtruth_fisheye is None:
        raise UsageError("feature evaluation needs stereo and fisheye ground truth")
    config = ev.FeatureEvalConfig(ratio=args.ratio, stride=args.stride)
    if args.seed is not None:
        config.ransac.seed = args.seed
    rep = ev.run_feature_eval(_manifest_samples(manifest, cal, args.tolerance), config)
    text = ev.format_report("features", ev.report_items(rep))
    out = _out_dir(args)
    (out / "features.txt").write_text(text)
    ev.write_csv(out / "features.csv", [{"method": "input", "auc_rot": rep.auc_rot, "auc_trans": rep.auc_trans,
                                         "mean_inliers": rep.mean_inliers}])
    sys.stdout.write(text)
    return 0


def cmd_synth_gen(args) -> int:
    from .synthetic import SceneSpec, generate_world

    scene = _yaml(args.config, "scene") if args.config else {}
    if args.seed is not None:
        scene["seed"] = args.seed
    if args.hybrid:
        scene["hybrid"] = True
    if args.features_per_frame is not None:
        scene["max_features"] = args.features_per_frame
    spec = SceneSpec.from_dict(scene)
    out = _out_dir(args)
    world = generate_world(spec)
    path = dio.export_synthetic(world, out, hybrid=bool(len(world.fisheye)))
    (out / "scene.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True))
    print(f"manifest = {path}")
    return 0


def cmd_train_vocab(args) -> int:
    manifest = dio.load_manifest(_existing(args.manifest, "manifest"))
    vocab = _train_from_manifest(manifest, args.k, args.depth, args.stride, args.seed or 0)
    path = _out_dir(args) / VOCAB_FILE
    vocab.save(path)
    print(f"vocabulary = {path}\nwords = {vocab.n_words}")
    return 0


def cmd_map_export(args) -> int:
    dump = dio.read_map_dump(_existing(args.map, "map dump"))
    out = _out_dir(args)
    dio.write_ply(out / "points.ply", dump.points)
    for kind in ("stereo", "fisheye"):
        kfs = sorted((k for k in dump.keyframes if k[1] == kind), key=lambda k: k[2])
        if kfs:
            dio.write_trajectory(out / f"keyframes_{kind}.txt", Trajectory([k[2] for k in kfs], [k[3] for k in kfs]))
    print(f"points = {len(dump.points)}\nkeyframes = {len(dump.keyframes)}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridslam", description="Stereo and hybrid stereo/fisheye SLAM on precomputed features.")
    sub = p.add_subparsers(dest="command", required=True, metavar="subcommand")

    def common(sp, out=True):
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("run-slam", help="run stereo-only or hybrid SLAM on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--calib", help="calibration YAML (defaults to the manifest's)")
    sp.add_argument("--config", help="pipeline YAML")
    sp.add_argument("--vocab", help="vocabulary file (trained from the sequence when omitted)")
    sp.add_argument("--hybrid", action="store_true")
    sp.add_argument("--deterministic", action="store_true", help="single-threaded round-robin schedule")
    sp.add_argument("--features-per-frame", type=int)
    common(sp)
    sp.set_defaults(func=cmd_run_slam)

    sp = sub.add_parser("eval-ate", help="ATE RMSE between two trajectory files")
    sp.add_argument("--estimate", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--tolerance", type=float, default=0.01, help="timestamp association tolerance (s)")
    common(sp)
    sp.set_defaults(func=cmd_eval_ate)

    sp = sub.add_parser("eval-hybrid", help="stereo-to-fisheye relative pose error")
    sp.add_argument("--estimate-stereo", required=True)
    sp.add_argument("--estimate-fisheye", required=True)
    sp.add_argument("--reference-stereo")
    sp.add_argument("--reference-fisheye")
    sp.add_argument("--manifest", help="take reference trajectories from this manifest")
    sp.add_argument("--tolerance", type=float, default=1e-3)
    common(sp)
    sp.set_defaults(func=cmd_eval_hybrid)

    sp = sub.add_parser("eval-features", help="feature-matching AUC on hybrid pairs")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--calib")
    sp.add_argument("--ratio", type=float, default=0.8)
    sp.add_argument("--stride", type=int, default=1, help="use every n-th hybrid pair")
    sp.add_argument("--tolerance", type=float, default=1e-3)
    common(sp)
    sp.set_defaults(func=cmd_eval_features)

    sp = sub.add_parser("synth-gen", help="write a synthetic sequence")
    sp.add_argument("--config", help="scene YAML")
    sp.add_argument("--hybrid", action="store_true")
    sp.add_argument("--features-per-frame", type=int)
    common(sp)
    sp.set_defaults(func=cmd_synth_gen)

    sp = sub.add_parser("train-vocab", help="train a vocabulary from a sequence")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--depth", type=int, default=4)
    sp.add_argument("--stride", type=int, default=5)
    common(sp)
    sp.set_defaults(func=cmd_train_vocab)

    sp = sub.add_parser("map-export", help="convert a map dump to PLY points and keyframe trajectories")
    sp.add_argument("--map", required=True)
    common(sp)
    sp.set_defaults(func=cmd_map_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hybridslam: error: {exc}", file=sys.stderr)
        return 2
    except (SlamError, OSError, ValueError) as exc:
        print(f"hybridslam: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
