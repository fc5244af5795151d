import logging
import struct

import numpy as np
import pytest
import yaml

from hybridslam.dataset_io import (
    Calibration,
    FrameEntry,
    SequenceManifest,
    export_synthetic,
    iter_frames,
    load_calibration,
    load_features,
    load_manifest,
    read_map_dump,
    read_trajectory,
    save_calibration,
    write_features,
    write_ply,
    write_trajectory,
)
from hybridslam.errors import DimensionMismatch, InvalidCalibration, ParseError
from hybridslam.features import FeatureSet
from hybridslam.geometry import Pose, Trajectory, quat_from_rotvec

from conftest import make_map

STEREO_DOC = {"camera_kind": "pinhole_stereo", "fx": 600.0, "fy": 600.0, "cx": 511.5, "cy": 383.5,
              "width": 1024, "height": 768, "baseline": 0.25}
FISHEYE_DOC = {"camera_kind": "kannala_brandt", "fx": 280.0, "fy": 280.0, "cx": 511.5, "cy": 383.5,
               "width": 1024, "height": 768, "k1": 0.02, "k2": -0.005, "k3": 0.001, "k4": -0.0002,
               "theta_max_deg": 90.0}


def _features(rng, n=50, right=True):
    d = rng.normal(size=(n, 128))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(0, 600, n) if right else None
    if right:
        r[::3] = np.nan
    return FeatureSet(rng.uniform(0, 640, n), rng.uniform(0, 480, n), rng.uniform(1, 3, n), rng.uniform(-3, 3, n), d, r)


def _yaml(tmp_path, doc, name="calib.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return p


# -- calibration -------------------------------------------------------------------


def test_stereo_calibration(tmp_path):
    cal = load_calibration(_yaml(tmp_path, STEREO_DOC))
    assert cal.stereo.baseline == 0.25 and cal.fisheye is None


def test_calibration_round_trip(tmp_path, rig, fisheye):
    ext = Pose(quat_from_rotvec([0.1, 0.0, 0.0]), np.array([0.0, 0.1, 0.2]))
    save_calibration(tmp_path / "c.yaml", Calibration(rig, fisheye, ext))
    back = load_calibration(tmp_path / "c.yaml")
    assert back.stereo == rig
    assert back.fisheye.k1 == fisheye.k1 and back.fisheye.theta_max == pytest.approx(fisheye.theta_max)
    assert np.allclose(back.extrinsic.matrix(), ext.matrix())


def test_negative_focal_names_key(tmp_path):
    with pytest.raises(InvalidCalibration) as exc:
        load_calibration(_yaml(tmp_path, {**STEREO_DOC, "fx": -1.0}))
    assert exc.value.key == "fx"


def test_non_monotone_fisheye_rejected(tmp_path):
    doc = {"fisheye": {**FISHEYE_DOC, "k1": -0.5, "theta_max_deg": 120.0}}
    with pytest.raises(InvalidCalibration) as exc:
        load_calibration(_yaml(tmp_path, doc))
    assert exc.value.key == "k1"


@pytest.mark.parametrize("doc,key", [
    ({**STEREO_DOC, "camera_kind": "orthographic"}, "camera_kind"),
    ({k: v for k, v in STEREO_DOC.items() if k != "baseline"}, "baseline"),
    ({**STEREO_DOC, "width": 10.5}, "width"),
    ({**STEREO_DOC, "cx": "middle"}, "cx"),
])
def test_calibration_guards(tmp_path, doc, key):
    with pytest.raises(InvalidCalibration) as exc:
        load_calibration(_yaml(tmp_path, doc))
    assert exc.value.key == key


def test_malformed_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("stereo: [1, 2\n")
    with pytest.raises(ParseError):
        load_calibration(p)


# -- feature files -----------------------------------------------------------------


@pytest.mark.parametrize("right", [True, False])
def test_feature_round_trip_is_bitwise(tmp_path, rng, right):
    f = _features(rng, right=right)
    write_features(tmp_path / "a.feat", f)
    g = load_features(tmp_path / "a.feat")
    for name in ("u", "v", "sigma", "angle"):
        assert np.array_equal(getattr(f, name), getattr(g, name))
    assert np.array_equal(f.desc, g.desc)
    assert np.array_equal(np.isnan(f.right_u), np.isnan(g.right_u))
    assert np.array_equal(np.nan_to_num(f.right_u), np.nan_to_num(g.right_u))


def test_empty_feature_file(tmp_path):
    write_features(tmp_path / "e.feat", FeatureSet.empty())
    assert len(load_features(tmp_path / "e.feat")) == 0


def test_wrong_descriptor_dimension(tmp_path, rng):
    write_features(tmp_path / "a.feat", _features(rng))
    data = bytearray((tmp_path / "a.feat").read_bytes())
    struct.pack_into("<I", data, 16, 64)
    (tmp_path / "a.feat").write_bytes(bytes(data))
    with pytest.raises(DimensionMismatch):
        load_features(tmp_path / "a.feat")


def test_truncated_file_reports_offset(tmp_path, rng):
    write_features(tmp_path / "a.feat", _features(rng, n=10, right=False))
    data = (tmp_path / "a.feat").read_bytes()
    record = 4 * 8 + 128 * 4
    (tmp_path / "a.feat").write_bytes(data[: 24 + 3 * record + 17])
    with pytest.raises(ParseError) as exc:
        load_features(tmp_path / "a.feat")
    assert exc.value.offset == 24 + 3 * record


def test_bad_magic_and_trailing_bytes(tmp_path, rng):
    write_features(tmp_path / "a.feat", _features(rng, n=3))
    data = (tmp_path / "a.feat").read_bytes()
    (tmp_path / "b.feat").write_bytes(b"X" + data[1:])
    with pytest.raises(ParseError):
        load_features(tmp_path / "b.feat")
    (tmp_path / "c.feat").write_bytes(data + b"\0")
    with pytest.raises(ParseError):
        load_features(tmp_path / "c.feat")


def test_descriptors_renormalized_with_warning(tmp_path, rng, caplog):
    f = _features(rng, n=5)
    f.desc = f.desc * 2.0
    write_features(tmp_path / "a.feat", f)
    with caplog.at_level(logging.WARNING):
        g = load_features(tmp_path / "a.feat")
    assert "renormalizing 5" in caplog.text
    assert np.allclose(np.linalg.norm(g.desc, axis=1), 1.0, atol=1e-6)


# -- trajectories -------------------------------------------------------------------


def _trajectory(rng, n=10):
    poses = [Pose(quat_from_rotvec(rng.normal(scale=0.5, size=3)), rng.normal(size=3)) for _ in range(n)]
    return Trajectory([0.2 * i for i in range(n)], poses)


def test_trajectory_round_trip(tmp_path, rng):
    t = _trajectory(rng)
    write_trajectory(tmp_path / "t.txt", t)
    back = read_trajectory(tmp_path / "t.txt")
    assert back.timestamps == t.timestamps
    for a, b in zip(t.poses, back.poses):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-12)


def test_trajectory_file_stores_camera_positions(tmp_path, rng):
    t = _trajectory(rng, 3)
    write_trajectory(tmp_path / "t.txt", t)
    rows = np.loadtxt(tmp_path / "t.txt")
    assert np.allclose(rows[:, 1:4], [p.center() for p in t.poses])


def test_malformed_line_reports_number(tmp_path, rng):
    write_trajectory(tmp_path / "t.txt", _trajectory(rng, 8))
    lines = (tmp_path / "t.txt").read_text().splitlines()
    lines[6] = "0.5 1 2 3 oops 0 0 1"
    (tmp_path / "t.txt").write_text("\n".join(lines))
    with pytest.raises(ParseError) as exc:
        read_trajectory(tmp_path / "t.txt")
    assert exc.value.line == 7


def test_comments_ignored_and_quaternion_normalized(tmp_path):
    (tmp_path / "t.txt").write_text("# header\n\n0.0 1 2 3 0 0 0 2\n# note\n1.0 1 2 3 0 0 0 1\n")
    t = read_trajectory(tmp_path / "t.txt")
    assert len(t) == 2 and np.allclose(t.poses[0].q, [0, 0, 0, 1])


def test_non_increasing_timestamps_rejected(tmp_path):
    (tmp_path / "t.txt").write_text("1.0 0 0 0 0 0 0 1\n1.0 0 0 0 0 0 0 1\n")
    with pytest.raises(ParseError) as exc:
        read_trajectory(tmp_path / "t.txt")
    assert exc.value.line == 2


# -- manifests, export and map dumps --------------------------------------------------


def test_manifest_round_trip(tmp_path, rng):
    files = []
    for name in ("l.feat", "r.feat", "f.feat"):
        write_features(tmp_path / name, _features(rng, n=4))
        files.append(tmp_path / name)
    man = SequenceManifest([FrameEntry(0.0, "stereo", tuple(files[:2])), FrameEntry(0.0, "fisheye", (files[2],))])
    man.write(tmp_path / "m.txt")
    back = load_manifest(tmp_path / "m.txt")
    assert [(f.kind, f.timestamp, f.files) for f in back.frames] == [(f.kind, f.timestamp, f.files) for f in man.frames]
    assert "stereo 0.0 l.feat r.feat" in (tmp_path / "m.txt").read_text()


@pytest.mark.parametrize("text,line", [
    ("stereo 0.0 a.feat\n", 1),
    ("# c\nstereo 1.0 a b\nstereo 0.5 a b\n", 3),
    ("camera x\n", 1),
    ("fisheye zero a\n", 1),
])
def test_manifest_errors(tmp_path, text, line):
    (tmp_path / "m.txt").write_text(text)
    with pytest.raises(ParseError) as exc:
        load_manifest(tmp_path / "m.txt", check_files=False)
    assert exc.value.line == line


def test_manifest_missing_file(tmp_path):
    (tmp_path / "m.txt").write_text("fisheye 0.0 nowhere.feat\n")
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "m.txt")


def test_export_synthetic_round_trip(tmp_path, arm_world):
    path = export_synthetic(arm_world, tmp_path / "seq")
    man = load_manifest(path)
    assert len(man.frames) == 2 * len(arm_world)
    cal = load_calibration(man.calibration)
    assert cal.stereo == arm_world.rig and cal.fisheye is not None
    gt = read_trajectory(man.groundtruth)
    assert np.allclose(gt.poses[3].matrix(), arm_world.stereo.poses[3].matrix(), atol=1e-12)
    frames = list(iter_frames(man))
    assert [f.kind for f in frames[:2]] == ["stereo", "fisheye"]
    assert frames[2].index == 1 and frames[1].right is None


def test_map_dump_round_trip(tmp_path, rng):
    m, _, X = make_map(rng, n_frames=3)
    (tmp_path / "map.txt").write_text(m.dump())
    dump = read_map_dump(tmp_path / "map.txt")
    assert [k[0] for k in dump.keyframes] == [0, 1, 2]
    assert [k[4] for k in dump.keyframes] == [-1, 0, 0]
    assert np.allclose(dump.keyframes[1][3].matrix(), m.keyframes[1].pose.matrix())
    assert np.allclose(dump.points, X) and np.all(dump.n_obs == 3)


def test_map_dump_rejects_unknown_record(tmp_path):
    (tmp_path / "map.txt").write_text("# x\nkeyframe 0 stereo\n")
    with pytest.raises(ParseError) as exc:
        read_map_dump(tmp_path / "map.txt")
    assert exc.value.line == 2


def test_write_ply(tmp_path):
    write_ply(tmp_path / "p.ply", np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]))
    lines = (tmp_path / "p.ply").read_text().splitlines()
    assert lines[2] == "element vertex 2" and lines[-1] == "3.0 4.0 5.0"
