"""Trajectory, hybrid relative-pose and feature-matching metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields

import numpy as np

from .camera_models import unproject_batch
from .errors import EmptyErrors, InsufficientCorrespondences, NoConsensus, NoRegisteredPairs
from .features import FeatureSet, match_descriptors
from .geometry import Pose, RansacConfig, Trajectory, estimate_relative_pose_ransac, horn_align, rotation_angle


@dataclass
class AteReport:
    rmse: float
    mean: float
    median: float
    max: float
    pairs: int
    alignment: Pose
    residuals: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def ate_rmse(estimate: Trajectory, reference: Trajectory, tolerance: float = 0.01) -> AteReport:
    """Absolute trajectory error after rigid (unscaled) alignment of ``estimate`` onto ``reference``."""
    g, res = horn_align(estimate, reference, tolerance)
    return AteReport(
        rmse=float(np.sqrt(np.mean(res**2))),
        mean=float(np.mean(res)),
        median=float(np.median(res)),
        max=float(np.max(res)),
        pairs=len(res),
        alignment=g,
        residuals=res,
    )


@dataclass
class HybridPoseReport:
    dt_cm: list
    dq_deg: list
    dt_mean: float
    dt_median: float
    dq_mean: float
    dq_median: float
    registered: int
    total: int

    @property
    def registered_fraction(self) -> float:
        return self.registered / self.total if self.total else 0.0


def stereo_to_fisheye(stereo: Pose, fisheye: Pose) -> Pose:
    """Transform taking fisheye-camera coordinates into stereo-left coordinates."""
    return stereo.compose(fisheye.inverse())


def hybrid_pose_error(estimated, reference, total: int | None = None, tolerance: float = 1e-3) -> HybridPoseReport:
    """Compare per-pair stereo-left to fisheye transforms.

    ``estimated`` and ``reference`` are sequences of ``(timestamp, stereo_pose,
    fisheye_pose)``; only estimated pairs (registered frames) are scored.
    """
    estimated = list(estimated)
    if not estimated:
        raise NoRegisteredPairs("no registered hybrid pairs")
    ref_t = np.array([r[0] for r in reference], dtype=float)
    dt, dq = [], []
    for t, s, f in estimated:
        if len(ref_t) == 0:
            break
        k = int(np.argmin(np.abs(ref_t - t)))
        if abs(ref_t[k] - t) > tolerance:
            continue
        _, rs, rf = reference[k]
        est = stereo_to_fisheye(s, f)
        gt = stereo_to_fisheye(rs, rf)
        dt.append(100.0 * float(np.linalg.norm(est.t - gt.t)))
        dq.append(float(np.degrees(rotation_angle(est.R @ gt.R.T))))
    if not dt:
        raise NoRegisteredPairs("no registered pair has a ground-truth match")
    return HybridPoseReport(
        dt_cm=dt,
        dq_deg=dq,
        dt_mean=float(np.mean(dt)),
        dt_median=float(np.median(dt)),
        dq_mean=float(np.mean(dq)),
        dq_median=float(np.median(dq)),
        registered=len(dt),
        total=len(estimated) if total is None else int(total),
    )


def auc_curve(errors, max_angle: float = 180.0) -> float:
    """Normalized area under the fraction-below-threshold curve on a 1 degree grid."""
    if max_angle <= 0:
        raise ValueError("max_angle must be positive")
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise EmptyErrors("no errors to integrate")
    e = np.where(np.isfinite(e), np.minimum(e, max_angle), max_angle)
    grid = np.arange(0.0, max_angle, 1.0)
    grid = np.append(grid, max_angle)
    acc = (e[None, :] <= grid[:, None]).mean(axis=1)
    return float(np.trapezoid(acc, grid) / max_angle)


# ---------------------------------------------------------------------------
# Feature-matching harness
# ---------------------------------------------------------------------------


@dataclass
class HybridSample:
    """One stereo-left / fisheye image pair with its ground-truth relative pose.

    ``relative`` maps stereo-left camera coordinates into fisheye coordinates.
    """

    left: FeatureSet
    left_camera: object
    fisheye: FeatureSet
    fisheye_camera: object
    relative: Pose
    timestamp: float = 0.0


@dataclass
class FeatureEvalConfig:
    ratio: float = 0.8
    max_angle: float = 180.0
    stride: int = 1
    min_baseline: float = 1e-3
    ransac: RansacConfig = field(default_factory=RansacConfig)


@dataclass
class AucReport:
    auc_rot: float
    auc_trans: float
    mean_inliers: float
    pairs: int
    failed: int
    translation_excluded: int
    rot_errors: list = field(repr=False, default_factory=list)
    trans_errors: list = field(repr=False, default_factory=list)


def _angle_deg(a, b) -> float:
    c = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def evaluate_pair(sample: HybridSample, config: FeatureEvalConfig):
    """Return ``(rot_err_deg, trans_err_deg or None, inliers, failed)`` for one pair."""
    ia, ib, _ = match_descriptors(sample.left.desc, sample.fisheye.desc, ratio=config.ratio)
    gt_t = sample.relative.t
    degenerate = np.linalg.norm(gt_t) < config.min_baseline
    worst = config.max_angle
    try:
        b1 = unproject_batch(sample.left_camera, sample.left.uv[ia])
        b2 = unproject_batch(sample.fisheye_camera, sample.fisheye.uv[ib])
        est = estimate_relative_pose_ransac(b1, b2, config.ransac)
    except (NoConsensus, InsufficientCorrespondences):
        return worst, None if degenerate else worst, 0, True
    rot = float(np.degrees(rotation_angle(est.rotation @ sample.relative.R.T)))
    if degenerate:
        trans = None
    elif not est.translation_defined:
        trans = worst
    else:
        trans = _angle_deg(est.direction, gt_t)
    return rot, trans, int(np.sum(est.inliers)), False


def run_feature_eval(samples, config: FeatureEvalConfig | None = None) -> AucReport:
    config = config or FeatureEvalConfig()
    samples = list(samples)[:: max(1, config.stride)]
    rot, trans, inl = [], [], []
    failed = excluded = 0
    for s in samples:
        r, t, n, bad = evaluate_pair(s, config)
        rot.append(r)
        inl.append(n)
        failed += bad
        if t is None:
            excluded += 1
        else:
            trans.append(t)
    return AucReport(
        auc_rot=auc_curve(rot, config.max_angle),
        auc_trans=auc_curve(trans, config.max_angle) if trans else float("nan"),
        mean_inliers=float(np.mean(inl)),
        pairs=len(samples),
        failed=failed,
        translation_excluded=excluded,
        rot_errors=rot,
        trans_errors=trans,
    )


def synthetic_samples(world, frames=None, scramble: bool = False, seed: int = 0) -> list[HybridSample]:
    """Hybrid pairs rendered from a synthetic world; ``scramble`` shuffles fisheye descriptors."""
    from .synthetic import render_frame

    rng = np.random.default_rng(seed)
    frames = range(len(world.fisheye)) if frames is None else frames
    out = []
    for i in frames:
        left = render_frame(world, i, "stereo")
        fish = render_frame(world, i, "fisheye")
        feats = fish.features
        if scramble:
            feats = feats.copy()
            feats.desc = feats.desc[rng.permutation(len(feats))]
        rel = world.fisheye.poses[i].compose(world.stereo.poses[i].inverse())
        out.append(HybridSample(left.features, world.rig.left, feats, world.fisheye_model, rel, left.timestamp))
    return out


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def report_items(report) -> dict:
    """Scalar fields of a report dataclass (lists and arrays are left out)."""
    out = {}
    for f in fields(report):
        v = getattr(report, f.name)
        if isinstance(v, (bool, int, float, np.integer, np.floating, str)):
            out[f.name] = v.item() if isinstance(v, np.generic) else v
    return out


def format_report(name: str, items: dict) -> str:
    """``[name]`` header followed by ``key = value`` lines."""
    lines = [f"[{name}]"]
    for k, v in items.items():
        lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    """Inverse of :func:`format_report` for one or more blocks."""
    out, cur = {}, None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            cur = out.setdefault(line[1:-1], {})
            continue
        k, _, v = line.partition("=")
        k, v = k.strip(), v.strip()
        try:
            val = int(v)
        except ValueError:
            try:
                val = float(v)
            except ValueError:
                val = v
        cur[k] = val
    return out


def write_csv(path, rows: list[dict]):
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
