"""Maximum-likelihood PnP on unit bearing vectors.

Each bearing ``f`` contributes two residuals ``r^T p / |p|`` and ``s^T p / |p|``
where ``(r, s)`` span the tangent plane of ``f`` and ``p = R X + t`` is the
world point in the camera frame. Because only rays are used, any central
camera model (pinhole or fisheye) plugs in unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientCorrespondences, NoConsensus
from .geometry import Pose, hat

MIN_POINTS = 6


@dataclass
class PnPConfig:
    max_iterations: int = 300
    threshold: float = 2e-3  # tangent-space residual norm, radians
    confidence: float = 0.999
    min_inliers: int = 12
    refine_iterations: int = 10
    seed: int = 0


@dataclass
class PnPResult:
    pose: Pose
    inliers: np.ndarray
    residual: float


def tangent_basis(f) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal ``(r, s)`` spanning the plane perpendicular to each bearing."""
    f = np.asarray(f, dtype=float).reshape(-1, 3)
    # pick the axis least aligned with f to avoid degeneracy
    a = np.zeros_like(f)
    a[np.arange(len(f)), np.argmin(np.abs(f), axis=1)] = 1.0
    r = np.cross(f, a)
    r /= np.linalg.norm(r, axis=1, keepdims=True)
    s = np.cross(f, r)
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    return r, s


def _nearest_rotation(M):
    U, S, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt, S


def _linear_general(r, s, X):
    n = len(X)
    A = np.zeros((2 * n, 12))
    for k, v in enumerate((r, s)):
        A[k::2, 0:3] = v[:, :1] * X
        A[k::2, 3:6] = v[:, 1:2] * X
        A[k::2, 6:9] = v[:, 2:3] * X
        A[k::2, 9:12] = v
    _, _, Vt = np.linalg.svd(A)
    x = Vt[-1]
    M = x[:9].reshape(3, 3)
    t = x[9:]
    return M, t


def _linear_planar(r, s, f, X):
    """Planar scenes: points with zero third coordinate, so only two columns of R enter."""
    n = len(X)
    A = np.zeros((2 * n, 9))
    for k, v in enumerate((r, s)):
        A[k::2, 0:3] = v * X[:, :1]
        A[k::2, 3:6] = v * X[:, 1:2]
        A[k::2, 6:9] = v
    _, _, Vt = np.linalg.svd(A)
    x = Vt[-1]
    c1, c2, t = x[0:3], x[3:6], x[6:9]
    lam = np.sqrt(np.linalg.norm(c1) * np.linalg.norm(c2))
    if lam <= 1e-300:
        return None
    c1, c2, t = c1 / lam, c2 / lam, t / lam
    if np.sum(np.einsum("ij,ij->i", (X[:, :1] * c1 + X[:, 1:2] * c2 + t), f)) < 0:
        c1, c2, t = -c1, -c2, -t
    R, _ = _nearest_rotation(np.column_stack([c1, c2, np.cross(c1, c2)]))
    return R, t


def _fix_scale_and_sign(M, t, f, X):
    R, S = _nearest_rotation(M)
    scale = np.mean(S)
    if scale <= 1e-300:
        return None
    t = t / scale
    # the null vector has arbitrary sign: choose the one putting points in front
    p = X @ (M / scale).T + t
    if np.sum(np.einsum("ij,ij->i", p, f)) < 0:
        R, _ = _nearest_rotation(-M)
        t = -t
    return R, t


def linear_pnp(f, X) -> Pose:
    """Closed-form initialization from the stacked tangent-space constraints."""
    f = np.asarray(f, dtype=float).reshape(-1, 3)
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    if len(f) < MIN_POINTS:
        raise InsufficientCorrespondences(f"{len(f)} correspondences, need >= {MIN_POINTS}")
    r, s = tangent_basis(f)
    mean = X.mean(axis=0)
    Xc = X - mean
    _, sv, Vt = np.linalg.svd(Xc, full_matrices=False)
    planar = sv[2] < 1e-6 * max(sv[0], 1e-300)
    if planar:
        # express points in the plane frame, solve, map back
        Rp = Vt.copy()
        if np.linalg.det(Rp) < 0:
            Rp[2] *= -1
        Xp = Xc @ Rp.T
        out = _linear_planar(r, s, f, Xp)
        if out is None:
            raise NoConsensus("degenerate linear system")
        R, t = out
        # p = R (Rp (X - mean)) + t
        Rw = R @ Rp
        return Pose.from_rt(Rw, t - Rw @ mean)
    M, t = _linear_general(r, s, Xc)
    out = _fix_scale_and_sign(M, t, f, Xc)
    if out is None:
        raise NoConsensus("degenerate linear system")
    R, t = out
    return Pose.from_rt(R, t - R @ mean)


def tangent_residuals(pose: Pose, f, X, r=None, s=None):
    """Residuals ``(n, 2)`` and pose Jacobians ``(n, 2, 6)``."""
    if r is None:
        r, s = tangent_basis(f)
    p = X @ pose.R.T + pose.t
    nrm = np.linalg.norm(p, axis=1)
    pn = p / nrm[:, None]
    e = np.column_stack([np.einsum("ij,ij->i", r, pn), np.einsum("ij,ij->i", s, pn)])
    P = (np.eye(3)[None] - pn[:, :, None] * pn[:, None, :]) / nrm[:, None, None]
    dp = np.zeros((len(X), 3, 6))
    dp[:, :, :3] = np.eye(3)
    dp[:, :, 3:] = -hat(p)
    B = np.stack([r, s], axis=1)  # (n, 2, 3)
    J = B @ P @ dp
    # a point behind the camera has pn opposite to f: mark with a large residual
    back = np.einsum("ij,ij->i", pn, f) <= 0
    e[back] = 1.0
    return e, J


def refine_pnp(pose: Pose, f, X, iterations: int = 10, tol: float = 1e-12) -> Pose:
    """Gauss-Newton on the tangent-space residuals."""
    f = np.asarray(f, dtype=float).reshape(-1, 3)
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    r, s = tangent_basis(f)
    cost = np.inf
    for _ in range(iterations):
        e, J = tangent_residuals(pose, f, X, r, s)
        c = float(np.sum(e * e))
        if c > cost:
            break
        cost = c
        Jf = J.reshape(-1, 6)
        try:
            dx = -np.linalg.solve(Jf.T @ Jf + 1e-15 * np.eye(6), Jf.T @ e.reshape(-1))
        except np.linalg.LinAlgError:
            break
        cand = pose.retract(dx)
        ec, _ = tangent_residuals(cand, f, X, r, s)
        if np.sum(ec * ec) > c:
            break
        pose = cand
        if np.linalg.norm(dx) < tol:
            break
    return pose


def solve_mlpnp(f, X, refine_iterations: int = 10) -> Pose:
    """Linear initialization followed by Gauss-Newton refinement."""
    pose = linear_pnp(f, X)
    return refine_pnp(pose, f, X, refine_iterations)


def angular_errors(pose: Pose, f, X) -> np.ndarray:
    e, _ = tangent_residuals(pose, np.asarray(f, float).reshape(-1, 3), np.asarray(X, float).reshape(-1, 3))
    return np.linalg.norm(e, axis=1)


def solve_mlpnp_ransac(f, X, config: PnPConfig | None = None) -> PnPResult:
    """Robust wrapper: 6-point samples, adaptive iteration count, refit on the consensus set."""
    config = config or PnPConfig()
    f = np.asarray(f, dtype=float).reshape(-1, 3)
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    n = len(f)
    if n < MIN_POINTS:
        raise InsufficientCorrespondences(f"{n} correspondences, need >= {MIN_POINTS}")
    rng = np.random.default_rng(config.seed)
    best = None
    best_count = 0
    needed = config.max_iterations
    it = 0
    while it < min(needed, config.max_iterations):
        it += 1
        sample = rng.choice(n, MIN_POINTS, replace=False)
        try:
            pose = linear_pnp(f[sample], X[sample])
        except (NoConsensus, np.linalg.LinAlgError):
            continue
        inl = angular_errors(pose, f, X) < config.threshold
        c = int(inl.sum())
        if c > best_count:
            best, best_count = inl, c
            w = c / n
            denom = np.log(max(1 - w**MIN_POINTS, 1e-12))
            needed = int(np.ceil(np.log(1 - config.confidence) / denom)) if denom < 0 else 0
    if best is None or best_count < max(config.min_inliers, MIN_POINTS):
        raise NoConsensus(f"best consensus {best_count}")
    inl = best
    pose = solve_mlpnp(f[inl], X[inl], config.refine_iterations)
    for _ in range(3):
        new = angular_errors(pose, f, X) < config.threshold
        if new.sum() < MIN_POINTS or np.array_equal(new, inl):
            break
        inl = new
        pose = refine_pnp(pose, f[inl], X[inl], config.refine_iterations)
    if inl.sum() < max(config.min_inliers, MIN_POINTS):
        raise NoConsensus(f"consensus {int(inl.sum())} after refinement")
    err = angular_errors(pose, f, X)
    return PnPResult(pose, np.nonzero(inl)[0], float(np.sqrt(np.mean(err[inl] ** 2))))
