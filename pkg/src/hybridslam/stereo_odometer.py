"""Frame-to-frame stereo ego-motion from circularly matched feature tracks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .camera_models import RectifiedStereoRig
from .errors import InsufficientTracks, NoConsensus
from .features import CircularTracks, FeatureSet, match_circular
from .geometry import Pose, RansacConfig, hat, triangulate_stereo_batch


@dataclass
class StereoFrame:
    """Left and right feature sets of one rectified stereo exposure."""

    left: FeatureSet
    right: FeatureSet
    timestamp: float = 0.0


@dataclass
class StereoTracks:
    """Circular tracks with the previous-frame 3-D point and current stereo observation."""

    indices: CircularTracks
    points: np.ndarray  # (n, 3) in the previous left camera frame
    observed: np.ndarray  # (n, 3) current (u_l, v, u_r)

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> StereoTracks:
        return StereoTracks(self.indices.subset(idx), self.points[idx], self.observed[idx])


@dataclass
class OdometryResult:
    motion: Pose
    inliers: np.ndarray
    mean_error: float


@dataclass
class OdometerConfig:
    iterations: int = 200
    threshold: float = 1.5
    early_exit_ratio: float = 0.8
    min_inliers: int = 6
    gn_iterations: int = 20
    step_tol: float = 1e-9
    seed: int = 0

    @classmethod
    def from_ransac(cls, cfg: RansacConfig) -> OdometerConfig:
        return cls(iterations=cfg.max_iterations, threshold=cfg.threshold, seed=cfg.seed)


def track_circular(prev: StereoFrame, cur: StereoFrame, rig: RectifiedStereoRig, ratio: float = 0.8,
                   epipolar_tol: float = 1.0, min_disparity: float = 0.25) -> StereoTracks:
    """Four-way match two stereo frames and attach triangulated previous-frame points.

    Tracks whose previous disparity is degenerate are dropped.
    """
    idx = match_circular(prev.left, prev.right, cur.right, cur.left, ratio=ratio, epipolar_tol=epipolar_tol)
    pl, pr = prev.left, prev.right
    pts, ok = triangulate_stereo_batch(pl.u[idx.prev_left], pl.v[idx.prev_left], pr.u[idx.prev_right], rig, min_disparity)
    cl, cr = cur.left, cur.right
    obs = np.column_stack([cl.u[idx.cur_left], cl.v[idx.cur_left], cr.u[idx.cur_right]])
    ok &= (obs[:, 0] - obs[:, 2]) > min_disparity
    return StereoTracks(idx.subset(ok), pts[ok].reshape(-1, 3), obs[ok].reshape(-1, 3))


def _residuals(R, t, X, obs, fx, fy, cx, cy, b):
    pc = X @ R.T + t
    z = pc[:, 2]
    iz = 1.0 / z
    pred = np.column_stack([fx * pc[:, 0] * iz + cx, fy * pc[:, 1] * iz + cy, fx * (pc[:, 0] - b) * iz + cx])
    e = pred - obs
    Jp = np.zeros((len(X), 3, 3))
    Jp[:, 0, 0] = fx * iz
    Jp[:, 0, 2] = -fx * pc[:, 0] * iz * iz
    Jp[:, 1, 1] = fy * iz
    Jp[:, 1, 2] = -fy * pc[:, 1] * iz * iz
    Jp[:, 2, 0] = fx * iz
    Jp[:, 2, 2] = -fx * (pc[:, 0] - b) * iz * iz
    dpc = np.zeros((len(X), 3, 6))
    dpc[:, :, :3] = np.eye(3)
    dpc[:, :, 3:] = -hat(pc)
    return e, Jp @ dpc, z


def _gauss_newton(pose: Pose, X, obs, rig: RectifiedStereoRig, iterations: int, step_tol: float) -> Pose:
    m = rig.left
    args = (m.fx, m.fy, m.cx, m.cy, rig.baseline)
    for _ in range(iterations):
        e, J, z = _residuals(pose.R, pose.t, X, obs, *args)
        if np.any(z <= 0):
            break
        Jf = J.reshape(-1, 6)
        H = Jf.T @ Jf
        g = Jf.T @ e.reshape(-1)
        try:
            dx = -np.linalg.solve(H + 1e-12 * np.eye(6), g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(dx)):
            break
        pose = pose.retract(dx)
        if np.linalg.norm(dx) < step_tol:
            break
    return pose


def _batch_gauss_newton(X, obs, rig: RectifiedStereoRig, iterations: int, step_tol: float):
    """Gauss-Newton from identity for a stack of minimal samples; X and obs are (S, m, 3)."""
    m = rig.left
    fx, fy, cx, cy, b = m.fx, m.fy, m.cx, m.cy, rig.baseline
    S, k = X.shape[:2]
    R = np.tile(np.eye(3), (S, 1, 1))
    t = np.zeros((S, 3))
    active = np.ones(S, dtype=bool)
    for _ in range(iterations):
        if not active.any():
            break
        pc = np.einsum("sij,snj->sni", R, X) + t[:, None]
        z = pc[..., 2]
        active &= np.all(z > 0, axis=1)
        iz = 1.0 / np.where(z > 0, z, 1.0)
        x, y = pc[..., 0], pc[..., 1]
        e = np.stack([fx * x * iz + cx, fy * y * iz + cy, fx * (x - b) * iz + cx], -1) - obs
        Jp = np.zeros((S, k, 3, 3))
        Jp[..., 0, 0] = fx * iz
        Jp[..., 0, 2] = -fx * x * iz * iz
        Jp[..., 1, 1] = fy * iz
        Jp[..., 1, 2] = -fy * y * iz * iz
        Jp[..., 2, 0] = fx * iz
        Jp[..., 2, 2] = -fx * (x - b) * iz * iz
        dpc = np.zeros((S, k, 3, 6))
        dpc[..., :3] = np.eye(3)
        dpc[..., 3:] = -hat(pc.reshape(-1, 3)).reshape(S, k, 3, 3)
        J = (Jp @ dpc).reshape(S, 3 * k, 6)
        H = np.einsum("sai,saj->sij", J, J) + 1e-12 * np.eye(6)
        g = np.einsum("sai,sa->si", J, e.reshape(S, -1))
        try:
            dx = -np.linalg.solve(H, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            dx = -np.einsum("sij,sj->si", np.linalg.pinv(H), g)
        good = np.all(np.isfinite(dx), axis=1)
        active &= good
        dx[~active] = 0.0
        dR = Rotation.from_rotvec(dx[:, 3:]).as_matrix()
        R = dR @ R
        t = np.einsum("sij,sj->si", dR, t) + dx[:, :3]
        active &= np.linalg.norm(dx, axis=1) >= step_tol
    return R, t


def _batch_errors(R, t, tracks: StereoTracks, rig: RectifiedStereoRig) -> np.ndarray:
    """(S, n) max-abs reprojection errors of every track under every hypothesis."""
    m = rig.left
    pc = np.einsum("sij,nj->sni", R, tracks.points) + t[:, None]
    z = pc[..., 2]
    iz = 1.0 / np.where(z > 0, z, 1.0)
    o = tracks.observed
    err = np.maximum.reduce([
        np.abs(m.fx * pc[..., 0] * iz + m.cx - o[:, 0]),
        np.abs(m.fy * pc[..., 1] * iz + m.cy - o[:, 1]),
        np.abs(m.fx * (pc[..., 0] - rig.baseline) * iz + m.cx - o[:, 2]),
    ])
    return np.where(z > 0, err, np.inf)


def reprojection_errors(motion: Pose, tracks: StereoTracks, rig: RectifiedStereoRig) -> np.ndarray:
    """Per-track maximum absolute stereo reprojection error in pixels (inf behind the camera)."""
    m = rig.left
    e, _, z = _residuals(motion.R, motion.t, tracks.points, tracks.observed, m.fx, m.fy, m.cx, m.cy, rig.baseline)
    err = np.abs(e).max(axis=1)
    return np.where(z > 0, err, np.inf)


def estimate_ego_motion(tracks: StereoTracks, rig: RectifiedStereoRig, config: OdometerConfig | None = None) -> OdometryResult:
    """RANSAC over 3-track samples followed by Gauss-Newton refinement on the consensus set.

    Returns the previous-to-current camera motion.
    """
    config = config or OdometerConfig()
    n = len(tracks)
    if n < max(config.min_inliers, 3):
        raise InsufficientTracks(f"{n} tracks, need >= {max(config.min_inliers, 3)}")
    rng = np.random.default_rng(config.seed)
    samples = np.array([rng.choice(n, 3, replace=False) for _ in range(config.iterations)])
    R, t = _batch_gauss_newton(tracks.points[samples], tracks.observed[samples], rig, config.gn_iterations, config.step_tol)
    counts = (_batch_errors(R, t, tracks, rig) <= config.threshold).sum(axis=1)
    # same winner as a sequential loop that stops at the first early-exit hypothesis
    hit = np.nonzero(counts >= config.early_exit_ratio * n)[0]
    j = int(hit[0]) if len(hit) else int(np.argmax(counts))
    best_count = int(counts[j])
    best = reprojection_errors(Pose.from_rt(R[j], t[j]), tracks, rig) <= config.threshold
    if best_count < config.min_inliers:
        raise NoConsensus(f"best consensus {best_count} < {config.min_inliers}")
    pose = Pose.identity()
    inl = best
    for _ in range(3):
        pose = _gauss_newton(pose, tracks.points[inl], tracks.observed[inl], rig, config.gn_iterations, config.step_tol)
        new = reprojection_errors(pose, tracks, rig) <= config.threshold
        if new.sum() < config.min_inliers or np.array_equal(new, inl):
            break
        inl = new
    err = reprojection_errors(pose, tracks, rig)
    inl &= err <= config.threshold
    if inl.sum() < config.min_inliers:
        raise NoConsensus("consensus lost during refinement")
    return OdometryResult(pose, np.nonzero(inl)[0], float(err[inl].mean()))


def reverse_tracks(tracks: StereoTracks, prev: StereoFrame, cur: StereoFrame, rig: RectifiedStereoRig) -> StereoTracks:
    """The same tracks viewed backwards in time (current frame becomes previous)."""
    i = tracks.indices
    rev = CircularTracks(i.cur_left, i.cur_right, i.prev_right, i.prev_left)
    pts, ok = triangulate_stereo_batch(cur.left.u[rev.prev_left], cur.left.v[rev.prev_left], cur.right.u[rev.prev_right], rig)
    obs = np.column_stack([prev.left.u[rev.cur_left], prev.left.v[rev.cur_left], prev.right.u[rev.cur_right]])
    return StereoTracks(rev.subset(ok), pts[ok], obs[ok])
