"""Synthetic seafloor scenes with ground-truth trajectories and labeled renders.

The generator is the reference every derived test value is computed from:
landmarks sit on a rugose height field, cameras follow one of three
trajectory families, and :func:`render_frame` projects landmarks through the
exact camera models, optionally adding pixel noise, descriptor perturbation
and labeled descriptor-swap outliers.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .camera_models import FisheyeModel, PinholeModel, RectifiedStereoRig
from .errors import InvalidSpec
from .features import DESCRIPTOR_DIM, FeatureSet
from .geometry import Pose, Trajectory

TRAJECTORY_KINDS = ("spiral_survey", "static_vehicle_arm_sweep", "straight_line")


@dataclass
class NoiseModel:
    pixel_sigma: float = 0.0
    outlier_rate: float = 0.0
    descriptor_sigma: float = 0.0


@dataclass
class SceneSpec:
    """Everything needed to regenerate a synthetic world bit-for-bit."""

    trajectory: str = "straight_line"
    n_landmarks: int = 5000
    extent: tuple = (10.0, 10.0)
    relief: float = 2.0
    n_frames: int = 50
    seed: int = 0
    frame_rate: float = 5.0
    altitude: float = 2.0
    # straight_line
    step: float = 0.05
    # spiral_survey
    spiral_radius: float = 7.0
    spiral_spacing: float = 2.0
    revisit_fraction: float = 0.15
    # static_vehicle_arm_sweep
    arm_reach: float = 1.5
    stereo_jitter: float = 0.0
    # water turbidity limits how far anything can be seen
    visibility_range: float = 6.0
    max_features: int = 4000
    # landmark appearance
    size_range: tuple = (0.006, 0.03)
    descriptor_floor: float = 0.3
    # cameras
    image_size: tuple = (1024, 768)
    focal: float = 600.0
    baseline: float = 0.25
    fisheye_focal: float = 280.0
    fisheye_k: tuple = (0.02, -0.005, 0.001, -0.0002)
    hybrid: bool = False
    noise: NoiseModel = field(default_factory=NoiseModel)

    def validate(self):
        if self.trajectory not in TRAJECTORY_KINDS:
            raise InvalidSpec(f"unknown trajectory kind '{self.trajectory}'")
        if self.n_landmarks <= 0:
            raise InvalidSpec("n_landmarks must be positive")
        if self.n_frames <= 0:
            raise InvalidSpec("n_frames must be positive")
        if min(self.extent) <= 0 or self.relief < 0:
            raise InvalidSpec("extent must be positive and relief non-negative")
        if self.frame_rate <= 0 or self.altitude <= 0:
            raise InvalidSpec("frame_rate and altitude must be positive")
        if not 0 <= self.noise.outlier_rate < 1:
            raise InvalidSpec("outlier_rate must lie in [0, 1)")
        if self.trajectory == "static_vehicle_arm_sweep" and self.arm_reach <= 0:
            raise InvalidSpec("arm_reach must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidSpec(f"unknown scene keys: {sorted(unknown)}")
        noise = d.pop("noise", None) or {}
        if not isinstance(noise, NoiseModel):
            noise = NoiseModel(**noise)
        for key in ("extent", "size_range", "image_size", "fisheye_k"):
            if key in d:
                d[key] = tuple(d[key])
        spec = cls(noise=noise, **d)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class SyntheticWorld:
    spec: SceneSpec
    landmarks: np.ndarray
    descriptors: np.ndarray
    sizes: np.ndarray
    orientations: np.ndarray
    responses: np.ndarray
    stereo: Trajectory
    fisheye: Trajectory
    rig: RectifiedStereoRig
    fisheye_model: FisheyeModel

    @property
    def noise(self) -> NoiseModel:
        return self.spec.noise

    @property
    def seed(self) -> int:
        return self.spec.seed

    def __len__(self):
        return len(self.stereo)


@dataclass
class RenderedFrame:
    kind: str
    index: int
    timestamp: float
    features: FeatureSet
    labels: np.ndarray
    outlier: np.ndarray
    right: FeatureSet | None = None
    right_labels: np.ndarray | None = None
    right_outlier: np.ndarray | None = None


# ---------------------------------------------------------------------------


def height_field(x, y, relief: float, seed: int):
    """Deterministic rugose surface with amplitude ``relief``."""
    rng = np.random.default_rng([seed, 7])
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h = np.zeros(np.broadcast(x, y).shape)
    waves = 6
    for k in range(waves):
        freq = rng.uniform(0.3, 2.5)
        ang = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        h += np.sin(freq * (np.cos(ang) * x + np.sin(ang) * y) + phase) / (1 + k)
    norm = sum(1.0 / (1 + k) for k in range(waves))
    return 0.5 * relief * h / norm


def _downward_pose(position, heading, roll=0.0, pitch=0.0) -> Pose:
    """World->camera pose of a nadir-looking camera whose image x axis points along ``heading``."""
    c, s = np.cos(heading), np.sin(heading)
    x = np.array([c, s, 0.0])
    z = np.array([0.0, 0.0, -1.0])
    y = np.cross(z, x)
    R_wc = np.stack([x, y, z], axis=1)
    if roll or pitch:
        cr, sr, cp, sp = np.cos(roll), np.sin(roll), np.cos(pitch), np.sin(pitch)
        Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
        Ry = np.array([[cr, 0, sr], [0, 1, 0], [-sr, 0, cr]])
        R_wc = R_wc @ Rx @ Ry
    R = R_wc.T
    return Pose.from_rt(R, -R @ np.asarray(position, dtype=float))


def _pose_looking_at(position, target, heading) -> Pose:
    pos = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - pos
    z /= np.linalg.norm(z)
    x = np.array([np.cos(heading), np.sin(heading), 0.0])
    x = x - (x @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1).T
    return Pose.from_rt(R, -R @ pos)


def _unit_descriptors_fast(rng, n, dim, floor):
    desc = np.abs(rng.normal(size=(n, dim)))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    # rejection pass in blocks: redraw any vector too close to an earlier one
    for _ in range(10):
        bad = []
        for s in range(0, n, 1024):
            blk = desc[s : s + 1024]
            d2 = np.sum(blk**2, 1)[:, None] + np.sum(desc[: s + len(blk)] ** 2, 1)[None] - 2 * blk @ desc[: s + len(blk)].T
            for i in range(len(blk)):
                d2[i, s + i :] = np.inf
            close = np.nonzero(np.min(d2, axis=1) < floor**2)[0]
            bad.extend((s + close).tolist())
        if not bad:
            break
        fresh = np.abs(rng.normal(size=(len(bad), dim)))
        desc[bad] = fresh / np.linalg.norm(fresh, axis=1, keepdims=True)
    return desc


def _spiral_positions(spec: SceneSpec):
    n = spec.n_frames
    n_back = int(round(spec.revisit_fraction * n))
    n_sp = n - n_back
    a = spec.spiral_spacing / (2 * np.pi)
    phi_end = spec.spiral_radius / a
    # arc length of r = a*phi, numerically
    phi = np.linspace(0.0, phi_end, 20000)
    ds = a * np.sqrt(1 + phi**2)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (ds[1:] + ds[:-1]) * np.diff(phi))])
    s_sp = np.linspace(0, s[-1], n_sp)
    ph = np.interp(s_sp, s, phi)
    r = a * ph
    pts = np.stack([r * np.cos(ph), r * np.sin(ph)], 1)
    headings = np.arctan2(np.gradient(pts[:, 1]), np.gradient(pts[:, 0]))
    if n_back > 0:
        step = s[-1] / max(n_sp - 1, 1)
        end = pts[-1]
        direction = -end / np.linalg.norm(end)
        back_len = min(np.linalg.norm(end), step * n_back)
        steps = np.linspace(back_len / n_back, back_len, n_back)
        back = end[None] + steps[:, None] * direction[None]
        pts = np.vstack([pts, back])
        headings = np.concatenate([headings, np.full(n_back, np.arctan2(direction[1], direction[0]))])
    return pts, headings


def generate_world(spec: SceneSpec) -> SyntheticWorld:
    """Build a deterministic world from ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ex, ey = spec.extent
    xy = np.column_stack([rng.uniform(-ex / 2, ex / 2, spec.n_landmarks), rng.uniform(-ey / 2, ey / 2, spec.n_landmarks)])
    z = height_field(xy[:, 0], xy[:, 1], spec.relief, spec.seed)
    landmarks = np.column_stack([xy, z])
    descriptors = _unit_descriptors_fast(rng, spec.n_landmarks, DESCRIPTOR_DIM, spec.descriptor_floor)
    sizes = rng.uniform(spec.size_range[0], spec.size_range[1], spec.n_landmarks)
    orientations = rng.uniform(-np.pi, np.pi, spec.n_landmarks)
    responses = np.random.default_rng([spec.seed, 7]).random(spec.n_landmarks)

    w, h = spec.image_size
    left = PinholeModel(spec.focal, spec.focal, w / 2 - 0.5, h / 2 - 0.5, w, h)
    rig = RectifiedStereoRig(left, spec.baseline)
    fisheye = FisheyeModel.clamped(spec.fisheye_focal, spec.fisheye_focal, w / 2 - 0.5, h / 2 - 0.5, *spec.fisheye_k, w, h)

    n = spec.n_frames
    ts = [i / spec.frame_rate for i in range(n)]
    trng = np.random.default_rng([spec.seed, 11])
    stereo_poses, fish_poses = [], []
    if spec.trajectory == "straight_line":
        x0 = -ex / 2 + 2.0
        for i in range(n):
            wob = trng.normal(scale=np.radians(0.5), size=2)
            pos = np.array([x0 + i * spec.step, 0.0, spec.altitude])
            stereo_poses.append(_downward_pose(pos, 0.0, *wob))
    elif spec.trajectory == "spiral_survey":
        pts, headings = _spiral_positions(spec)
        for i in range(n):
            wob = trng.normal(scale=np.radians(1.0), size=2)
            alt = spec.altitude + 0.1 * np.sin(0.05 * i)
            stereo_poses.append(_downward_pose([pts[i, 0], pts[i, 1], alt], headings[i] + np.pi / 2, *wob))
    else:
        base = np.array([0.0, 0.0, spec.altitude])
        ground = height_field(0.0, 0.0, spec.relief, spec.seed)
        for i in range(n):
            jit = trng.normal(scale=spec.stereo_jitter, size=3) if spec.stereo_jitter > 0 else np.zeros(3)
            stereo_poses.append(_downward_pose(base + jit, 0.0))
            tau = 2 * np.pi * i / max(n, 1)
            reach = spec.arm_reach
            off = np.array([0.75 * reach * np.sin(tau), 0.55 * reach * np.sin(2 * tau), -0.45 * reach - 0.15 * reach * np.cos(3 * tau)])
            off *= min(1.0, 0.98 * reach / np.linalg.norm(off))
            target = np.array([1.2 * np.sin(tau + 0.6), 1.0 * np.sin(2 * tau + 0.3), float(ground)])
            fish_poses.append(_pose_looking_at(base + off, target, tau))
    if spec.hybrid and not fish_poses:
        # fisheye rides along with a fixed lever arm when the family has no arm motion
        lever = Pose.exp([0.4, 0.0, 0.0, 0.0, np.radians(20), 0.0])
        fish_poses = [lever.compose(p) for p in stereo_poses]
    stereo = Trajectory(ts, stereo_poses)
    fish = Trajectory(ts if fish_poses else [], fish_poses)
    return SyntheticWorld(spec, landmarks, descriptors, sizes, orientations, responses, stereo, fish, rig, fisheye)


# ---------------------------------------------------------------------------


def _kind_code(kind: str) -> int:
    return zlib.crc32(kind.encode())


def _observe(world, pose, model, rng, kind, extra_right=False):
    """Visible landmark observations for one camera."""
    spec = world.spec
    pc = pose.transform(world.landmarks)
    uv, valid = model.project_batch(pc)
    depth = np.linalg.norm(pc, axis=1)
    valid &= pc[:, 2] > 0.05 if kind != "fisheye" else depth > 0.05
    valid &= model.in_image(uv, margin=2.0)
    sigma = model.focal * world.sizes / np.maximum(depth if kind == "fisheye" else pc[:, 2], 1e-9)
    valid &= (sigma >= 0.8) & (sigma <= 40.0)
    valid &= depth <= spec.visibility_range
    idx = np.nonzero(valid)[0]
    if len(idx) > spec.max_features:
        # keep the strongest responses so both stereo views and nearby frames pick the same landmarks
        keep = np.argsort(-world.responses[idx], kind="stable")[: spec.max_features]
        idx = np.sort(idx[keep])
    return idx, uv[idx], sigma[idx], pc[idx]


def _perturb(desc, rng, sigma):
    if sigma <= 0:
        return desc.astype(np.float32)
    d = np.abs(desc + rng.normal(scale=sigma, size=desc.shape))
    return (d / np.linalg.norm(d, axis=1, keepdims=True)).astype(np.float32)


def _inject_outliers(world, labels, desc, rng):
    rate = world.noise.outlier_rate
    outlier = rng.random(len(labels)) < rate if rate > 0 else np.zeros(len(labels), bool)
    if outlier.any():
        other = rng.integers(0, len(world.landmarks), size=int(outlier.sum()))
        same = other == labels[outlier]
        other[same] = (other[same] + 1) % len(world.landmarks)
        desc[outlier] = _perturb(world.descriptors[other], rng, world.noise.descriptor_sigma)
    return outlier


def render_frame(world: SyntheticWorld, index: int, kind: str = "stereo") -> RenderedFrame:
    """Render the features one camera sees at ``index`` with ground-truth labels.

    Stereo renders carry the left image in ``features`` and the right image in
    ``right``; their ``right_u`` columns are left empty for the pipeline to fill.
    """
    if kind not in ("stereo", "fisheye", "left"):
        raise ValueError(f"unknown camera kind '{kind}'")
    traj = world.fisheye if kind == "fisheye" else world.stereo
    if not 0 <= index < len(traj):
        raise IndexError(f"frame index {index} out of range")
    noise = world.noise
    rng = np.random.default_rng([world.spec.seed, index, _kind_code(kind)])
    pose = traj.poses[index]
    model = world.fisheye_model if kind == "fisheye" else world.rig.left
    idx, uv, sigma, pc = _observe(world, pose, model, rng, kind)
    order = rng.permutation(len(idx))
    idx, uv, sigma = idx[order], uv[order], sigma[order]
    if noise.pixel_sigma > 0:
        uv = uv + rng.normal(scale=noise.pixel_sigma, size=uv.shape)
    desc = _perturb(world.descriptors[idx], rng, noise.descriptor_sigma)
    outlier = _inject_outliers(world, idx, desc, rng)
    feats = FeatureSet(uv[:, 0], uv[:, 1], sigma, world.orientations[idx], desc)
    out = RenderedFrame(kind, index, traj.timestamps[index], feats, idx, outlier)
    if kind == "stereo":
        right_pose = Pose(np.array([0.0, 0.0, 0.0, 1.0]), [-world.rig.baseline, 0.0, 0.0]).compose(pose)
        ridx, ruv, rsig, _ = _observe(world, right_pose, world.rig.left, rng, "right")
        order = rng.permutation(len(ridx))
        ridx, ruv, rsig = ridx[order], ruv[order], rsig[order]
        if noise.pixel_sigma > 0:
            ruv = ruv + rng.normal(scale=noise.pixel_sigma, size=ruv.shape)
        rdesc = _perturb(world.descriptors[ridx], rng, noise.descriptor_sigma)
        routl = _inject_outliers(world, ridx, rdesc, rng)
        out.right = FeatureSet(ruv[:, 0], ruv[:, 1], rsig, world.orientations[ridx], rdesc)
        out.right_labels = ridx
        out.right_outlier = routl
    return out


def oracle_right_u(world: SyntheticWorld, rendered: RenderedFrame) -> np.ndarray:
    """Ground-truth right columns for a stereo render (NaN where the right view misses)."""
    pos = {int(l): k for k, l in enumerate(rendered.right_labels)}
    out = np.full(len(rendered.labels), np.nan)
    for i, l in enumerate(rendered.labels):
        k = pos.get(int(l))
        if k is not None and not rendered.outlier[i] and not rendered.right_outlier[k]:
            out[i] = rendered.right.u[k]
    return out


def descriptor_corpus(world: SyntheticWorld, frames=None, kind: str = "stereo") -> list[np.ndarray]:
    """Per-image descriptor arrays for vocabulary training."""
    traj = world.fisheye if kind == "fisheye" else world.stereo
    frames = range(len(traj)) if frames is None else frames
    return [render_frame(world, i, kind).features.desc for i in frames]
