"""Rigid-body algebra, triangulation, two-view relative pose and trajectory alignment.

Conventions
-----------
A :class:`Pose` maps world coordinates into camera coordinates
(``p_cam = R @ p_world + t``). Quaternions are stored ``(x, y, z, w)`` and
kept unit-norm with ``w >= 0``. Tangent vectors are ordered
``(translation, rotation)`` and applied on the left: ``T <- exp(delta) * T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateDisparity,
    InsufficientCorrespondences,
    InsufficientParallax,
    NegativeDepth,
    NoConsensus,
    TooFewAssociations,
)

# ---------------------------------------------------------------------------
# SO(3) helpers
# ---------------------------------------------------------------------------


def hat(w):
    """Skew-symmetric matrix of a 3-vector (or a stack of them)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    q = quat_from_matrix(R)
    return quat_to_rotvec(q)


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, radians in [0, pi]."""
    c = (np.trace(R) - 1.0) / 2.0
    s = np.linalg.norm(np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])) / 2.0
    return float(np.arctan2(s, c))


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s])
    return quat_normalize(q)


def quat_from_rotvec(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return quat_normalize(np.array([0.5 * w[0], 0.5 * w[1], 0.5 * w[2], 1.0]))
    axis = w / theta
    return quat_normalize(np.concatenate([axis * np.sin(theta / 2), [np.cos(theta / 2)]]))


def quat_to_rotvec(q) -> np.ndarray:
    q = quat_normalize(q)
    v = q[:3]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    theta = 2.0 * np.arctan2(s, q[3])
    return v / s * theta


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform world -> camera stored as unit quaternion + translation."""

    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.q, dtype=float).reshape(4))
        t = np.array(self.t, dtype=float).reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> Pose:
        return Pose()

    @staticmethod
    def from_rt(R, t) -> Pose:
        return Pose(quat_from_matrix(R), t)

    @staticmethod
    def from_matrix(T) -> Pose:
        T = np.asarray(T, dtype=float)
        return Pose(quat_from_matrix(T[:3, :3]), T[:3, 3])

    @staticmethod
    def exp(xi) -> Pose:
        """Exponential map of a (translation, rotation) 6-vector.

        Uses the decoupled retraction ``R = Exp(w)``, ``t = rho`` which is what
        the optimizer linearizes around.
        """
        xi = np.asarray(xi, dtype=float)
        return Pose(quat_from_rotvec(xi[3:]), xi[:3])

    @cached_property
    def R(self) -> np.ndarray:
        R = quat_to_matrix(self.q)
        R.setflags(write=False)
        return R

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> Pose:
        qi = np.array([-self.q[0], -self.q[1], -self.q[2], self.q[3]])
        return Pose(qi, -(self.R.T @ self.t))

    def compose(self, other: Pose) -> Pose:
        """``self * other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.q, other.q)
        return Pose(q, self.R @ other.t + self.t)

    __matmul__ = compose

    def transform(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -(self.R.T @ self.t)

    def retract(self, delta) -> Pose:
        """Left-multiplicative update ``exp(delta) * self``."""
        delta = np.asarray(delta, dtype=float)
        dq = quat_from_rotvec(delta[3:])
        q = quat_multiply(dq, self.q)
        R = quat_to_matrix(dq)
        return Pose(q, R @ self.t + delta[:3])

    def log(self) -> np.ndarray:
        return np.concatenate([self.t, quat_to_rotvec(self.q)])

    def almost_equal(self, other: Pose, tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R, other.R, atol=tol, rtol=0) and np.allclose(self.t, other.t, atol=tol, rtol=0)
        )

    def __repr__(self):
        return f"Pose(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def se3_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def se3_inverse(a: Pose) -> Pose:
    return a.inverse()


def transform_point(t: Pose, p) -> np.ndarray:
    return t.transform(p)


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation (m, between camera centers) and rotation (rad) difference."""
    dt = float(np.linalg.norm(a.center() - b.center()))
    dr = rotation_angle(a.R @ b.R.T)
    return dt, dr


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------


def triangulate_stereo(u_l, v, u_r, rig, min_disparity: float = 0.25) -> np.ndarray:
    """Back-project a rectified stereo observation into the left camera frame."""
    d = float(u_l) - float(u_r)
    if not np.isfinite(d) or d <= min_disparity:
        raise DegenerateDisparity(f"disparity {d:.4g} px below threshold {min_disparity}")
    cam = rig.left
    z = cam.fx * rig.baseline / d
    return np.array([(u_l - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])


def triangulate_stereo_batch(u_l, v, u_r, rig, min_disparity: float = 0.25):
    """Vectorized stereo back-projection. Returns ``(points, valid)``."""
    u_l = np.asarray(u_l, dtype=float)
    v = np.asarray(v, dtype=float)
    d = u_l - np.asarray(u_r, dtype=float)
    valid = np.isfinite(d) & (d > min_disparity)
    cam = rig.left
    z = np.where(valid, cam.fx * rig.baseline / np.where(valid, d, 1.0), np.nan)
    pts = np.stack([(u_l - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=-1)
    return pts, valid


def _midpoint(ray_a, ray_b_in_a, center_b):
    # minimize |la*a - (c + lb*d)|^2
    a = ray_a
    d = ray_b_in_a
    c = center_b
    aa = np.sum(a * a, -1)
    dd = np.sum(d * d, -1)
    ad = np.sum(a * d, -1)
    ac = np.sum(a * c, -1)
    dc = np.sum(d * c, -1)
    den = aa * dd - ad * ad
    den_safe = np.where(np.abs(den) < 1e-300, 1e-300, den)
    la = (ac * dd - ad * dc) / den_safe
    lb = (ad * ac - aa * dc) / den_safe
    pa = la[..., None] * a
    pb = c + lb[..., None] * d
    return 0.5 * (pa + pb), la, lb


def triangulate_two_view(ray_a, ray_b, pose_ab: Pose, min_parallax_deg: float = 1.0) -> np.ndarray:
    """Midpoint triangulation of two bearing rays.

    ``pose_ab`` maps frame-b coordinates into frame a (the pose of camera b
    expressed in frame a). The result is expressed in frame a.
    """
    a = np.asarray(ray_a, dtype=float)
    a = a / np.linalg.norm(a)
    b = np.asarray(ray_b, dtype=float)
    d = pose_ab.R @ (b / np.linalg.norm(b))
    cos_par = float(np.clip(a @ d, -1.0, 1.0))
    if np.degrees(np.arccos(cos_par)) < min_parallax_deg:
        raise InsufficientParallax(f"parallax {np.degrees(np.arccos(cos_par)):.3f} deg")
    X, la, lb = _midpoint(a, d, pose_ab.t)
    if la <= 0 or lb <= 0:
        raise NegativeDepth("triangulated point behind one of the cameras")
    return X


def triangulate_two_view_batch(rays_a, rays_b, pose_ab: Pose, min_parallax_deg: float = 1.0):
    """Vectorized midpoint triangulation. Returns ``(points_a, valid)``."""
    a = np.asarray(rays_a, dtype=float)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = np.asarray(rays_b, dtype=float)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    d = b @ pose_ab.R.T
    cos_par = np.clip(np.sum(a * d, 1), -1.0, 1.0)
    X, la, lb = _midpoint(a, d, np.broadcast_to(pose_ab.t, a.shape))
    valid = (cos_par < np.cos(np.radians(min_parallax_deg))) & (la > 0) & (lb > 0)
    return X, valid


# ---------------------------------------------------------------------------
# Two-view relative pose (essential matrix on bearing vectors)
# ---------------------------------------------------------------------------


@dataclass
class RansacConfig:
    max_iterations: int = 1000
    threshold: float = 1e-3
    confidence: float = 0.999
    min_inliers: int = 15
    seed: int = 0


@dataclass
class RelativePose:
    """Rotation and unit translation direction mapping frame-1 points into frame 2."""

    rotation: np.ndarray
    direction: np.ndarray
    inliers: np.ndarray
    translation_defined: bool = True


def _eight_point(b1, b2):
    A = np.einsum("ni,nj->nij", b2, b1).reshape(-1, 9)
    _, _, Vt = np.linalg.svd(A, full_matrices=A.shape[0] < 9)
    E = Vt[-1].reshape(3, 3)
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def epipolar_angular_error(E, b1, b2):
    """Symmetric angle (rad) of each bearing pair to its epipolar plane."""
    n2 = b1 @ E.T
    n1 = b2 @ E
    s2 = np.abs(np.sum(b2 * n2, 1)) / np.maximum(np.linalg.norm(n2, axis=1), 1e-15)
    s1 = np.abs(np.sum(b1 * n1, 1)) / np.maximum(np.linalg.norm(n1, axis=1), 1e-15)
    return np.arcsin(np.clip(np.maximum(s1, s2), 0.0, 1.0))


def decompose_essential(E, b1, b2):
    """Pick the (R, t) of the four decompositions with most points in front."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best = None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            # point in frame 2: la2*b2 = R*(la1*b1) + t
            pose_21 = Pose.from_rt(R, t)
            # triangulate in frame 1 with camera 2 pose expressed in frame 1
            X1, la, lb = _midpoint(b1, b2 @ pose_21.inverse().R.T, np.broadcast_to(pose_21.inverse().t, b1.shape))
            good = int(np.sum((la > 0) & (lb > 0)))
            if best is None or good > best[0]:
                best = (good, R, t)
    return best[1], best[2] / np.linalg.norm(best[2])


def _kabsch(a, b):
    """Rotation R minimizing |b - R a|."""
    H = a.T @ b
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    return Vt.T @ D @ U.T


def estimate_relative_pose_ransac(b1, b2, config: RansacConfig | None = None) -> RelativePose:
    """Essential-matrix RANSAC on unit bearing correspondences ``b1[i] <-> b2[i]``."""
    config = config or RansacConfig()
    b1 = np.asarray(b1, dtype=float)
    b2 = np.asarray(b2, dtype=float)
    n = len(b1)
    if n < 8:
        raise InsufficientCorrespondences(f"{n} correspondences, need >= 8")
    b1 = b1 / np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = b2 / np.linalg.norm(b2, axis=1, keepdims=True)
    rng = np.random.default_rng(config.seed)
    best_inl = None
    best_count = 0
    max_it = config.max_iterations
    it = 0
    while it < max_it:
        it += 1
        idx = rng.choice(n, 8, replace=False)
        E = _eight_point(b1[idx], b2[idx])
        inl = epipolar_angular_error(E, b1, b2) < config.threshold
        c = int(inl.sum())
        if c > best_count:
            best_count, best_inl = c, inl
            ratio = c / n
            if ratio >= 1.0:
                break
            denom = np.log(max(1e-12, 1.0 - ratio**8))
            if denom < 0:
                max_it = min(config.max_iterations, int(np.ceil(np.log(1 - config.confidence) / denom)))
    if best_inl is None or best_count < max(8, config.min_inliers):
        raise NoConsensus(f"best consensus {best_count} < {config.min_inliers}")
    # refit on the consensus set, then re-gate
    for _ in range(2):
        E = _eight_point(b1[best_inl], b2[best_inl])
        inl = epipolar_angular_error(E, b1, b2) < config.threshold
        if inl.sum() < best_count:
            break
        best_inl, best_count = inl, int(inl.sum())
    E = _eight_point(b1[best_inl], b2[best_inl])

    # pure rotation leaves the translation direction unobservable
    Rk = _kabsch(b1[best_inl], b2[best_inl])
    rot_res = np.arccos(np.clip(np.sum((b1[best_inl] @ Rk.T) * b2[best_inl], 1), -1, 1))
    if np.median(rot_res) < config.threshold:
        return RelativePose(Rk, np.full(3, np.nan), best_inl, translation_defined=False)
    R, t = decompose_essential(E, b1[best_inl], b2[best_inl])
    return RelativePose(R, t, best_inl, True)


# ---------------------------------------------------------------------------
# Trajectories and Horn alignment
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Timestamped world->camera poses, timestamps strictly increasing."""

    timestamps: list[float] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)

    def __post_init__(self):
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        ts = np.asarray(self.timestamps, dtype=float)
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.timestamps, self.poses))

    def append(self, timestamp: float, pose: Pose):
        if self.timestamps and timestamp <= self.timestamps[-1]:
            raise ValueError("trajectory timestamps must be strictly increasing")
        self.timestamps.append(float(timestamp))
        self.poses.append(pose)

    def positions(self) -> np.ndarray:
        return np.array([p.center() for p in self.poses]).reshape(-1, 3)

    def transformed(self, g: Pose) -> Trajectory:
        """Move the world frame by ``g`` (centers map through ``g``)."""
        gi = g.inverse()
        return Trajectory(list(self.timestamps), [p.compose(gi) for p in self.poses])


def associate(ts_a: Sequence[float], ts_b: Sequence[float], tolerance: float = 0.01) -> list[tuple[int, int]]:
    """One-to-one nearest-timestamp association within ``tolerance`` seconds."""
    a = np.asarray(ts_a, dtype=float)
    b = np.asarray(ts_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        return []
    order = np.argsort(b)
    bs = b[order]
    cands = []
    for i, t in enumerate(a):
        k = np.searchsorted(bs, t)
        for j in (k - 1, k):
            if 0 <= j < len(bs) and abs(bs[j] - t) <= tolerance:
                cands.append((abs(bs[j] - t), i, int(order[j])))
    cands.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    pairs.sort()
    return pairs


def horn_align_points(est, ref) -> Pose:
    """Closed-form rigid (scale 1) transform ``g`` minimizing ``|g(est) - ref|``."""
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    me, mr = est.mean(0), ref.mean(0)
    R = _kabsch(est - me, ref - mr)
    return Pose.from_rt(R, mr - R @ me)


def horn_align(estimate: Trajectory, reference: Trajectory, tolerance: float = 0.01):
    """Align ``estimate`` onto ``reference`` without scaling.

    Returns the alignment pose (applied to estimated camera centers) and
    per-pose position residuals in meters.
    """
    pairs = associate(estimate.timestamps, reference.timestamps, tolerance)
    if len(pairs) < 3:
        raise TooFewAssociations(f"{len(pairs)} associated poses, need >= 3")
    est = estimate.positions()[[i for i, _ in pairs]]
    ref = reference.positions()[[j for _, j in pairs]]
    g = horn_align_points(est, ref)
    residuals = np.linalg.norm(g.transform(est) - ref, axis=1)
    return g, residuals


def random_pose(rng: np.random.Generator, trans_scale: float = 1.0, rot_scale: float = np.pi) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-rot_scale, rot_scale)
    return Pose(quat_from_rotvec(axis * angle), rng.normal(size=3) * trans_scale)


def look_at(eye: Iterable[float], target: Iterable[float], up=(0.0, 0.0, 1.0)) -> Pose:
    """World->camera pose for a camera at ``eye`` with +z toward ``target``."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    if abs(z @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_wc = np.stack([x, y, z], axis=1)
    R = R_wc.T
    return Pose.from_rt(R, -R @ eye)
