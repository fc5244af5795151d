"""Calibration, feature-file, manifest and trajectory I/O.

Features enter the system from files so that any external extractor can be
plugged in. The binary feature format is little-endian::

    magic    8 bytes  b"HSFEAT\\0\\0"
    version  u32
    count    u32
    dim      u32      (must be 128)
    flags    u32      (bit 0: right_u column present)
    records  count x [u f64, v f64, scale_sigma f64, orientation f64,
                      (right_u f64, NaN when unmatched), desc dim x f32]
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .camera_models import FisheyeModel, PinholeModel, RectifiedStereoRig
from .errors import DimensionMismatch, InvalidCalibration, ParseError
from .features import DESCRIPTOR_DIM, FeatureSet
from .geometry import Pose, Trajectory

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"HSFEAT\0\0"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<IIII")
_FLAG_RIGHT = 1

STEREO_KIND = "pinhole_stereo"
FISHEYE_KIND = "kannala_brandt"


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass
class Calibration:
    """Cameras of one rig. Either camera may be absent."""

    stereo: RectifiedStereoRig | None = None
    fisheye: FisheyeModel | None = None
    extrinsic: Pose | None = None  # stereo-left to vehicle, carried through unused


def _number(doc: dict, key: str, required: bool = True, default=None) -> float:
    if key not in doc:
        if required:
            raise InvalidCalibration(key, "missing")
        return default
    val = doc[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise InvalidCalibration(key, f"expected a finite number, got {val!r}")
    return float(val)


def camera_from_dict(doc: dict):
    """Build a rig or fisheye model from one calibration block."""
    if not isinstance(doc, dict):
        raise ParseError("calibration block must be a mapping")
    kind = doc.get("camera_kind")
    w, h = _number(doc, "width"), _number(doc, "height")
    if w <= 0 or w != int(w):
        raise InvalidCalibration("width", "must be a positive integer")
    if h <= 0 or h != int(h):
        raise InvalidCalibration("height", "must be a positive integer")
    fx, fy, cx, cy = (_number(doc, k) for k in ("fx", "fy", "cx", "cy"))
    if kind == STEREO_KIND:
        left = PinholeModel(fx, fy, cx, cy, int(w), int(h))
        return RectifiedStereoRig(left, _number(doc, "baseline"))
    if kind == FISHEYE_KIND:
        ks = [_number(doc, f"k{i}") for i in range(1, 5)]
        theta = _number(doc, "theta_max_deg", required=False, default=95.0)
        return FisheyeModel(fx, fy, cx, cy, *ks, int(w), int(h), math.radians(theta))
    raise InvalidCalibration("camera_kind", f"expected {STEREO_KIND} or {FISHEYE_KIND}, got {kind!r}")


def camera_to_dict(camera) -> dict:
    if isinstance(camera, RectifiedStereoRig):
        m = camera.left
        return {"camera_kind": STEREO_KIND, "fx": m.fx, "fy": m.fy, "cx": m.cx, "cy": m.cy,
                "width": m.width, "height": m.height, "baseline": camera.baseline}
    if isinstance(camera, FisheyeModel):
        return {"camera_kind": FISHEYE_KIND, "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
                "width": camera.width, "height": camera.height, "k1": camera.k1, "k2": camera.k2,
                "k3": camera.k3, "k4": camera.k4, "theta_max_deg": math.degrees(camera.theta_max)}
    raise TypeError(f"unsupported camera type {type(camera).__name__}")


def _pose_from_list(values, key) -> Pose:
    try:
        v = [float(x) for x in values]
    except (TypeError, ValueError):
        raise InvalidCalibration(key, "expected [tx, ty, tz, qx, qy, qz, qw]") from None
    if len(v) != 7:
        raise InvalidCalibration(key, "expected [tx, ty, tz, qx, qy, qz, qw]")
    return Pose(np.array(v[3:]), np.array(v[:3]))


def load_calibration(path) -> Calibration:
    """Read a YAML calibration.

    The document is either a single camera block (with ``camera_kind``) or a
    mapping with optional ``stereo`` and ``fisheye`` blocks and an optional
    ``extrinsic`` list ``[tx, ty, tz, qx, qy, qz, qw]``.
    """
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"malformed calibration: {exc}", line=mark.line + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise ParseError("calibration document must be a mapping")
    cal = Calibration()
    blocks = [doc] if "camera_kind" in doc else [doc[k] for k in ("stereo", "fisheye") if k in doc]
    if not blocks:
        raise InvalidCalibration("camera_kind", "no camera block found")
    for block in blocks:
        cam = camera_from_dict(block)
        if isinstance(cam, RectifiedStereoRig):
            cal.stereo = cam
        else:
            cal.fisheye = cam
    if "extrinsic" in doc:
        cal.extrinsic = _pose_from_list(doc["extrinsic"], "extrinsic")
    return cal


def save_calibration(path, calibration: Calibration):
    doc = {}
    if calibration.stereo is not None:
        doc["stereo"] = camera_to_dict(calibration.stereo)
    if calibration.fisheye is not None:
        doc["fisheye"] = camera_to_dict(calibration.fisheye)
    if calibration.extrinsic is not None:
        e = calibration.extrinsic
        doc["extrinsic"] = [float(x) for x in (*e.t, *e.q)]
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_features(path, features: FeatureSet):
    n = len(features)
    dim = features.desc.shape[1] if n else DESCRIPTOR_DIM
    has_right = bool(np.isfinite(features.right_u).any())
    cols = [("u", "<f8"), ("v", "<f8"), ("sigma", "<f8"), ("angle", "<f8")]
    if has_right:
        cols.append(("right_u", "<f8"))
    cols.append(("desc", "<f4", (dim,)))
    rec = np.zeros(n, dtype=np.dtype(cols))
    rec["u"], rec["v"], rec["sigma"], rec["angle"] = features.u, features.v, features.sigma, features.angle
    if has_right:
        rec["right_u"] = features.right_u
    rec["desc"] = features.desc
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(_HEADER.pack(FEATURE_VERSION, n, dim, _FLAG_RIGHT if has_right else 0))
        fh.write(rec.tobytes())


def load_features(path) -> FeatureSet:
    data = Path(path).read_bytes()
    if len(data) < len(FEATURE_MAGIC) + _HEADER.size:
        raise ParseError("truncated feature header", offset=len(data))
    if data[:8] != FEATURE_MAGIC:
        raise ParseError("bad feature file magic", offset=0)
    version, n, dim, flags = _HEADER.unpack_from(data, 8)
    if version != FEATURE_VERSION:
        raise ParseError(f"unsupported feature file version {version}", offset=8)
    if dim != DESCRIPTOR_DIM:
        raise DimensionMismatch(f"descriptor dimension {dim}, expected {DESCRIPTOR_DIM}")
    has_right = bool(flags & _FLAG_RIGHT)
    cols = [("u", "<f8"), ("v", "<f8"), ("sigma", "<f8"), ("angle", "<f8")]
    if has_right:
        cols.append(("right_u", "<f8"))
    cols.append(("desc", "<f4", (dim,)))
    dt = np.dtype(cols)
    off = 8 + _HEADER.size
    need = off + n * dt.itemsize
    if len(data) < need:
        complete = (len(data) - off) // dt.itemsize
        raise ParseError(f"truncated feature record {complete}", offset=off + complete * dt.itemsize)
    if len(data) > need:
        raise ParseError("trailing bytes after feature records", offset=need)
    rec = np.frombuffer(data, dtype=dt, count=n, offset=off)
    desc = rec["desc"].astype(np.float32)
    if n:
        norms = np.linalg.norm(desc, axis=1)
        off_norm = np.abs(norms - 1.0) > 1e-3
        if off_norm.any():
            log.warning("%s: renormalizing %d descriptors", path, int(off_norm.sum()))
            desc[off_norm] /= np.maximum(norms[off_norm, None], 1e-12)
    right = rec["right_u"].copy() if has_right else None
    return FeatureSet(rec["u"].copy(), rec["v"].copy(), rec["sigma"].copy(), rec["angle"].copy(), desc, right)


# ---------------------------------------------------------------------------
# trajectories (TUM-style text)
# ---------------------------------------------------------------------------


def write_trajectory(path, trajectory: Trajectory):
    """TUM lines: camera position and camera-to-world orientation per pose."""
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, p in zip(trajectory.timestamps, trajectory.poses):
        c = p.inverse()
        vals = (ts, *c.t, *c.q)
        lines.append(" ".join(repr(float(x)) for x in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> Trajectory:
    """Inverse of :func:`write_trajectory`; returns world-to-camera poses."""
    ts, poses = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"expected 8 fields, got {len(parts)}", line=lineno)
        try:
            vals = [float(x) for x in parts]
        except ValueError:
            raise ParseError("non-numeric field", line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite field", line=lineno)
        q = np.array(vals[4:])
        if np.linalg.norm(q) < 1e-12:
            raise ParseError("zero quaternion", line=lineno)
        if ts and vals[0] <= ts[-1]:
            raise ParseError("timestamps not strictly increasing", line=lineno)
        ts.append(vals[0])
        poses.append(Pose(q / np.linalg.norm(q), np.array(vals[1:4])).inverse())
    return Trajectory(ts, poses)


# ---------------------------------------------------------------------------
# sequence manifest
# ---------------------------------------------------------------------------


@dataclass
class FrameEntry:
    timestamp: float
    kind: str  # "stereo" or "fisheye"
    files: tuple  # (left, right) for stereo, (image,) for fisheye


@dataclass
class SequenceManifest:
    """Frame records in stream order plus calibration and optional ground truth.

    Text format, one directive per line, ``#`` comments::

        calibration calib.yaml
        groundtruth gt_stereo.txt [gt_fisheye.txt]
        stereo 0.000 f/000_l.feat f/000_r.feat
        fisheye 0.000 f/000_f.feat
    """

    frames: list = field(default_factory=list)
    calibration: Path | None = None
    groundtruth: Path | None = None
    groundtruth_fisheye: Path | None = None
    root: Path = field(default_factory=Path)

    def write(self, path):
        path = Path(path)
        base = path.parent

        def rel(p):
            p = Path(p)
            try:
                return str(p.relative_to(base))
            except ValueError:
                return str(p)

        lines = []
        if self.calibration is not None:
            lines.append(f"calibration {rel(self.calibration)}")
        if self.groundtruth is not None:
            gt = [rel(self.groundtruth)] + ([rel(self.groundtruth_fisheye)] if self.groundtruth_fisheye else [])
            lines.append("groundtruth " + " ".join(gt))
        for f in self.frames:
            lines.append(" ".join([f.kind, repr(float(f.timestamp))] + [rel(x) for x in f.files]))
        path.write_text("\n".join(lines) + "\n")


def load_manifest(path, check_files: bool = True) -> SequenceManifest:
    path = Path(path)
    base = path.parent
    man = SequenceManifest(root=base)
    last = -math.inf
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        key = parts[0]
        if key == "calibration" and len(parts) == 2:
            man.calibration = base / parts[1]
        elif key == "groundtruth" and len(parts) in (2, 3):
            man.groundtruth = base / parts[1]
            man.groundtruth_fisheye = base / parts[2] if len(parts) == 3 else None
        elif key in ("stereo", "fisheye"):
            n_files = 2 if key == "stereo" else 1
            if len(parts) != 2 + n_files:
                raise ParseError(f"{key} record needs a timestamp and {n_files} file(s)", line=lineno)
            try:
                ts = float(parts[1])
            except ValueError:
                raise ParseError("non-numeric timestamp", line=lineno) from None
            if ts < last:
                raise ParseError("timestamps must be non-decreasing", line=lineno)
            last = ts
            man.frames.append(FrameEntry(ts, key, tuple(base / p for p in parts[2:])))
        else:
            raise ParseError(f"unknown manifest directive '{key}'", line=lineno)
    if check_files:
        refs = [p for f in man.frames for p in f.files]
        refs += [p for p in (man.calibration, man.groundtruth, man.groundtruth_fisheye) if p is not None]
        for p in refs:
            if not p.exists():
                raise FileNotFoundError(f"manifest references missing file {p}")
    return man


def iter_frames(manifest: SequenceManifest):
    """Stream manifest records as pipeline frame inputs, loading features lazily."""
    from .system import FrameInput

    counters = {"stereo": 0, "fisheye": 0}
    for entry in manifest.frames:
        i = counters[entry.kind]
        counters[entry.kind] += 1
        left = load_features(entry.files[0])
        right = load_features(entry.files[1]) if entry.kind == "stereo" else None
        yield FrameInput(i, entry.timestamp, entry.kind, left, right)


def export_synthetic(world, out_dir, hybrid: bool | None = None) -> Path:
    """Write a rendered synthetic world as a manifest, feature files, calibration and ground truth."""
    from .synthetic import render_frame

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    hybrid = bool(len(world.fisheye)) if hybrid is None else hybrid
    cal = Calibration(world.rig, world.fisheye_model if hybrid else None)
    save_calibration(out / "calibration.yaml", cal)
    write_trajectory(out / "groundtruth_stereo.txt", world.stereo)
    man = SequenceManifest(calibration=out / "calibration.yaml", groundtruth=out / "groundtruth_stereo.txt")
    if hybrid:
        write_trajectory(out / "groundtruth_fisheye.txt", world.fisheye)
        man.groundtruth_fisheye = out / "groundtruth_fisheye.txt"
    for i in range(len(world.stereo)):
        r = render_frame(world, i, "stereo")
        lf, rf = out / "features" / f"{i:06d}_left.feat", out / "features" / f"{i:06d}_right.feat"
        write_features(lf, r.features)
        write_features(rf, r.right)
        man.frames.append(FrameEntry(r.timestamp, "stereo", (lf, rf)))
        if hybrid:
            f = render_frame(world, i, "fisheye")
            ff = out / "features" / f"{i:06d}_fisheye.feat"
            write_features(ff, f.features)
            man.frames.append(FrameEntry(f.timestamp, "fisheye", (ff,)))
    man.write(out / "manifest.txt")
    return out / "manifest.txt"


# ---------------------------------------------------------------------------
# map dumps
# ---------------------------------------------------------------------------


@dataclass
class MapDump:
    keyframes: list  # (id, kind, timestamp, Pose, parent)
    points: np.ndarray  # (n, 3)
    point_ids: np.ndarray
    n_obs: np.ndarray


def read_map_dump(path) -> MapDump:
    kfs, pts, ids, nobs = [], [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "keyframe" and len(parts) == 12:
                v = [float(x) for x in parts[4:11]]
                kfs.append((int(parts[1]), parts[2], float(parts[3]), Pose(np.array(v[3:]), np.array(v[:3])), int(parts[11])))
            elif parts[0] == "point" and len(parts) >= 6:
                ids.append(int(parts[1]))
                pts.append([float(x) for x in parts[2:5]])
                nobs.append(int(parts[5]))
            else:
                raise ParseError(f"unrecognized map record '{parts[0]}'", line=lineno)
        except ValueError:
            raise ParseError("malformed map record", line=lineno) from None
    return MapDump(kfs, np.array(pts, dtype=float).reshape(-1, 3), np.array(ids, dtype=int), np.array(nobs, dtype=int))


def write_ply(path, points: np.ndarray):
    """ASCII point cloud."""
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
              "property double x", "property double y", "property double z", "end_header"]
    body = [" ".join(repr(float(c)) for c in p) for p in points]
    Path(path).write_text("\n".join(header + body) + "\n")
