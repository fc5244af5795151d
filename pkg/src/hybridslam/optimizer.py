"""Robust reprojection least squares: pose-only refinement and bundle adjustment.

Residuals are predicted-minus-observed pixel vectors weighted by the
information of the keypoint's pyramid level (``1 / sigma**2``) and wrapped in
a Huber kernel. Three kinds exist: monocular pinhole (2-d), rectified stereo
``(u_l, v, u_r)`` (3-d) and Kannala-Brandt fisheye (2-d). Internally every
residual is padded to three rows with the unused row masked out so the
whole problem vectorizes.

Pose updates are left-multiplicative, ``T <- exp(delta) T`` with ``delta =
(translation, rotation)``; the camera-frame point Jacobian is therefore
``[I, -[p_c]x]``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .camera_models import FisheyeModel, PinholeModel, RectifiedStereoRig
from .errors import Diverged, EmptyWindow, TooFewResiduals
from .geometry import Pose, hat

MONO, STEREO, FISHEYE = 0, 1, 2
KIND_NAMES = {"mono_pinhole": MONO, "stereo": STEREO, "fisheye": FISHEYE}
CHI2_2DOF = 5.991
CHI2_3DOF = 7.815


@dataclass
class Residual:
    kind: str
    observed: np.ndarray
    point: int
    frame: int
    weight: float = 1.0


@dataclass
class ResidualBlock:
    """Column-wise storage of many residuals.

    ``observed`` is ``(n, 3)``; the third column is NaN for 2-d residuals.
    ``frame`` and ``point`` index into the pose and point arrays of the
    problem being solved.
    """

    kind: np.ndarray
    observed: np.ndarray
    frame: np.ndarray
    point: np.ndarray
    info: np.ndarray

    def __post_init__(self):
        self.kind = np.asarray(self.kind, dtype=np.int8).reshape(-1)
        n = len(self.kind)
        self.observed = np.asarray(self.observed, dtype=float).reshape(n, 3)
        self.frame = np.asarray(self.frame, dtype=np.int64).reshape(n)
        self.point = np.asarray(self.point, dtype=np.int64).reshape(n)
        self.info = np.asarray(self.info, dtype=float).reshape(n)
        if np.any(self.info <= 0):
            raise ValueError("residual weights must be positive")

    @classmethod
    def from_residuals(cls, residuals: list[Residual]) -> ResidualBlock:
        obs = np.full((len(residuals), 3), np.nan)
        for i, r in enumerate(residuals):
            o = np.asarray(r.observed, dtype=float).reshape(-1)
            obs[i, : len(o)] = o
        return cls(
            [KIND_NAMES[r.kind] for r in residuals],
            obs,
            [r.frame for r in residuals],
            [r.point for r in residuals],
            [r.weight for r in residuals],
        )

    @classmethod
    def concatenate(cls, blocks: list[ResidualBlock]) -> ResidualBlock:
        if not blocks:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0))
        return cls(
            np.concatenate([b.kind for b in blocks]),
            np.concatenate([b.observed for b in blocks]),
            np.concatenate([b.frame for b in blocks]),
            np.concatenate([b.point for b in blocks]),
            np.concatenate([b.info for b in blocks]),
        )

    def __len__(self):
        return len(self.kind)

    def subset(self, idx) -> ResidualBlock:
        return ResidualBlock(self.kind[idx], self.observed[idx], self.frame[idx], self.point[idx], self.info[idx])

    @property
    def dims(self) -> np.ndarray:
        return np.where(self.kind == STEREO, 3, 2)


@dataclass
class RobustConfig:
    huber_delta_mono: float = float(np.sqrt(CHI2_2DOF))
    huber_delta_stereo: float = float(np.sqrt(CHI2_3DOF))
    max_iterations: int = 10
    rounds: int = 4
    lm_lambda: float = 1e-4
    lm_up: float = 10.0
    lm_down: float = 0.1
    rel_tol: float = 1e-8
    robust: bool = True

    def __post_init__(self):
        if self.huber_delta_mono <= 0 or self.huber_delta_stereo <= 0:
            raise ValueError("Huber deltas must be positive")

    @property
    def chi2_mono(self):
        return self.huber_delta_mono**2

    @property
    def chi2_stereo(self):
        return self.huber_delta_stereo**2


# ---------------------------------------------------------------------------
# Camera parameter tables
# ---------------------------------------------------------------------------

_NPARAM = 10  # fx fy cx cy baseline k1 k2 k3 k4 theta_max


def camera_params(camera) -> np.ndarray:
    out = np.zeros(_NPARAM)
    if isinstance(camera, RectifiedStereoRig):
        m = camera.left
        out[:5] = (m.fx, m.fy, m.cx, m.cy, camera.baseline)
    elif isinstance(camera, PinholeModel):
        out[:4] = (camera.fx, camera.fy, camera.cx, camera.cy)
    elif isinstance(camera, FisheyeModel):
        out[:4] = (camera.fx, camera.fy, camera.cx, camera.cy)
        out[5:9] = (camera.k1, camera.k2, camera.k3, camera.k4)
        out[9] = camera.theta_max
    else:
        raise TypeError(f"unsupported camera {type(camera).__name__}")
    return out


def project_residuals(kind, params, pc, with_jacobian=True):
    """Predicted measurements and d(pred)/d(p_cam) for a residual batch.

    Returns ``pred (n, 3)``, ``J (n, 3, 3)`` and a validity mask (point in
    front of a pinhole camera / inside the fisheye field of view).
    """
    n = len(kind)
    pred = np.zeros((n, 3))
    J = np.zeros((n, 3, 3)) if with_jacobian else None
    valid = np.ones(n, dtype=bool)
    fx, fy, cx, cy, b = params[:, 0], params[:, 1], params[:, 2], params[:, 3], params[:, 4]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]

    pin = kind != FISHEYE
    if np.any(pin):
        zi = z[pin]
        ok = zi > 1e-6
        valid[pin] = ok
        iz = 1.0 / np.where(ok, zi, 1e-6)
        xi, yi = x[pin], y[pin]
        pred[pin, 0] = fx[pin] * xi * iz + cx[pin]
        pred[pin, 1] = fy[pin] * yi * iz + cy[pin]
        pred[pin, 2] = pred[pin, 0] - fx[pin] * b[pin] * iz
        if with_jacobian:
            Jp = np.zeros((int(pin.sum()), 3, 3))
            Jp[:, 0, 0] = fx[pin] * iz
            Jp[:, 0, 2] = -fx[pin] * xi * iz * iz
            Jp[:, 1, 1] = fy[pin] * iz
            Jp[:, 1, 2] = -fy[pin] * yi * iz * iz
            Jp[:, 2, 0] = fx[pin] * iz
            Jp[:, 2, 2] = -fx[pin] * (xi - b[pin]) * iz * iz
            J[pin] = Jp

    fish = ~pin
    if np.any(fish):
        k1, k2, k3, k4, thmax = (params[fish, i] for i in range(5, 10))
        xf, yf, zf = x[fish], y[fish], z[fish]
        r2 = xf * xf + yf * yf
        r = np.sqrt(r2)
        th = np.arctan2(r, zf)
        valid[fish] = th <= thmax
        t2 = th * th
        d = th * (1 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
        small = r < 1e-9
        rs = np.where(small, 1.0, r)
        zs = np.where(np.abs(zf) > 1e-12, zf, 1e-12)
        psi = np.where(small, 1.0 / zs, d / rs)
        pred[fish, 0] = fx[fish] * psi * xf + cx[fish]
        pred[fish, 1] = fy[fish] * psi * yf + cy[fish]
        if with_jacobian:
            dd = 1 + t2 * (3 * k1 + t2 * (5 * k2 + t2 * (7 * k3 + t2 * 9 * k4)))
            rho2 = r2 + zf * zf
            dth_dx = xf * zf / (rs * rho2)
            dth_dy = yf * zf / (rs * rho2)
            dth_dz = -r / rho2
            dpx = dd * dth_dx / rs - d * xf / rs**3
            dpy = dd * dth_dy / rs - d * yf / rs**3
            dpz = dd * dth_dz / rs
            Jf = np.zeros((int(fish.sum()), 3, 3))
            fxf, fyf = fx[fish], fy[fish]
            Jf[:, 0, 0] = fxf * (psi + xf * dpx)
            Jf[:, 0, 1] = fxf * xf * dpy
            Jf[:, 0, 2] = fxf * xf * dpz
            Jf[:, 1, 0] = fyf * yf * dpx
            Jf[:, 1, 1] = fyf * (psi + yf * dpy)
            Jf[:, 1, 2] = fyf * yf * dpz
            if np.any(small):
                Jf[small] = 0.0
                Jf[small, 0, 0] = fxf[small] / zs[small]
                Jf[small, 1, 1] = fyf[small] / zs[small]
                Jf[small, 0, 2] = -fxf[small] * xf[small] / zs[small] ** 2
                Jf[small, 1, 2] = -fyf[small] * yf[small] / zs[small] ** 2
            J[fish] = Jf
    return pred, J, valid


def residual_errors(block: ResidualBlock, params, R, t, X, with_jacobian=True):
    """Errors and Jacobians for every residual.

    ``params`` is ``(n_frames, 10)``, ``R``/``t`` are per-frame rotation and
    translation stacks and ``X`` is ``(n_points, 3)``. Returns ``e (n, 3)``
    (masked row zeroed), ``J_pose (n, 3, 6)``, ``J_point (n, 3, 3)``, valid.
    """
    Rf = R[block.frame]
    pc = np.einsum("nij,nj->ni", Rf, X[block.point]) + t[block.frame]
    pred, Jproj, valid = project_residuals(block.kind, params[block.frame], pc, with_jacobian)
    e = pred - np.nan_to_num(block.observed)
    e[block.kind != STEREO, 2] = 0.0
    if not with_jacobian:
        return e, None, None, valid
    Jproj[block.kind != STEREO, 2, :] = 0.0
    dpc = np.zeros((len(block), 3, 6))
    dpc[:, :, :3] = np.eye(3)
    dpc[:, :, 3:] = -hat(pc)
    J_pose = Jproj @ dpc
    J_point = Jproj @ Rf
    return e, J_pose, J_point, valid


def chi2_values(block: ResidualBlock, e) -> np.ndarray:
    return block.info * np.sum(e * e, axis=1)


def chi2_thresholds(block: ResidualBlock, config: RobustConfig) -> np.ndarray:
    return np.where(block.kind == STEREO, config.chi2_stereo, config.chi2_mono)


def robust_cost_and_weights(chi2, thresholds, robust=True):
    """Huber cost and IRLS weights on the normalized error ``sqrt(chi2)``."""
    if not robust:
        return chi2.copy(), np.ones_like(chi2)
    delta = np.sqrt(thresholds)
    en = np.sqrt(chi2)
    inl = en <= delta
    cost = np.where(inl, chi2, 2 * delta * en - delta * delta)
    w = np.where(inl, 1.0, delta / np.maximum(en, 1e-300))
    return cost, w


# ---------------------------------------------------------------------------
# Pose-only optimization
# ---------------------------------------------------------------------------


@dataclass
class PoseOptResult:
    pose: Pose
    inliers: np.ndarray
    cost: float
    iterations: int


def optimize_pose_only(pose: Pose, camera, points, block: ResidualBlock, config: RobustConfig | None = None) -> PoseOptResult:
    """Refine one camera pose against fixed world points.

    Runs ``config.rounds`` rounds of ``config.max_iterations`` damped Gauss-Newton
    steps; between rounds each residual is re-classified inlier/outlier by
    the chi-square gate and outliers are excluded from the next round.
    ``block.frame`` is ignored (all residuals belong to ``camera``).
    """
    config = config or RobustConfig()
    n = len(block)
    if n < 3:
        raise TooFewResiduals(f"{n} residuals, need >= 3")
    points = np.asarray(points, dtype=float)
    blk = ResidualBlock(block.kind, block.observed, np.zeros(n, int), block.point, block.info)
    params = camera_params(camera)[None]
    thr = chi2_thresholds(blk, config)
    active = np.ones(n, dtype=bool)
    total_it = 0

    def cost_of(p):
        e, _, _, valid = residual_errors(blk, params, p.R[None], p.t[None], points, with_jacobian=False)
        chi2 = chi2_values(blk, e)
        c, _ = robust_cost_and_weights(chi2, thr, config.robust)
        c = np.where(valid, c, 0.0)
        return float(np.sum(c[active])), chi2, valid

    for rnd in range(config.rounds):
        lam = config.lm_lambda
        cost, _, _ = cost_of(pose)
        for _ in range(config.max_iterations):
            total_it += 1
            e, Jp, _, valid = residual_errors(blk, params, pose.R[None], pose.t[None], points)
            chi2 = chi2_values(blk, e)
            _, w = robust_cost_and_weights(chi2, thr, config.robust)
            w = w * blk.info * (active & valid)
            H = np.einsum("n,nki,nkj->ij", w, Jp, Jp)
            g = np.einsum("n,nki,nk->i", w, Jp, e)
            if not np.all(np.isfinite(H)):
                raise Diverged("non-finite normal equations")
            improved = False
            for _ in range(8):
                Hd = H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(6)
                try:
                    dx = -np.linalg.solve(Hd, g)
                except np.linalg.LinAlgError:
                    lam *= config.lm_up
                    continue
                cand = pose.retract(dx)
                new_cost, _, _ = cost_of(cand)
                if np.isfinite(new_cost) and new_cost <= cost:
                    rel = (cost - new_cost) / max(cost, 1e-300)
                    pose, cost = cand, new_cost
                    lam *= config.lm_down
                    improved = True
                    break
                lam *= config.lm_up
            if not improved or rel < config.rel_tol or cost < 1e-24 or np.linalg.norm(dx) < 1e-12:
                break
        _, chi2, valid = cost_of(pose)
        active = valid & (chi2 <= thr)
        if active.sum() < 3:
            break
    if not np.all(np.isfinite(pose.t)):
        raise Diverged("pose became non-finite")
    final_cost, chi2, valid = cost_of(pose)
    inliers = valid & (chi2 <= thr)
    return PoseOptResult(pose, inliers, final_cost, total_it)


# ---------------------------------------------------------------------------
# Bundle adjustment
# ---------------------------------------------------------------------------


@dataclass
class BAResult:
    poses: list
    points: np.ndarray
    inliers: np.ndarray
    cost_history: list = field(default_factory=list)
    accepted_costs: list = field(default_factory=list)
    iterations: int = 0
    aborted: bool = False

    def rmse(self, block: ResidualBlock, cameras) -> float:
        return reprojection_rmse(self.poses, cameras, self.points, block)


def _block_diag_sparse(blocks, dim):
    n = len(blocks)
    rows = (dim * np.arange(n))[:, None, None] + np.arange(dim)[None, :, None]
    cols = (dim * np.arange(n))[:, None, None] + np.arange(dim)[None, None, :]
    rows = np.broadcast_to(rows, blocks.shape).ravel()
    cols = np.broadcast_to(cols, blocks.shape).ravel()
    return sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(dim * n, dim * n))


def _inv3(A):
    try:
        return np.linalg.inv(A)
    except np.linalg.LinAlgError:
        out = np.zeros_like(A)
        for i in range(len(A)):
            out[i] = np.linalg.pinv(A[i])
        return out


def bundle_adjust(
    poses: list[Pose],
    cameras: list,
    fixed,
    points,
    block: ResidualBlock,
    config: RobustConfig | None = None,
    max_iterations: int | None = None,
    abort: threading.Event | None = None,
    outlier_pass: bool = True,
) -> BAResult:
    """Levenberg-Marquardt over free poses and all points with a point Schur complement.

    ``fixed[i]`` keeps pose ``i`` constant (it still contributes residuals).
    When nothing is fixed the first pose anchors the gauge. After
    convergence residuals failing the chi-square gate are excluded and the
    problem is re-solved once; ``BAResult.inliers`` reports the final split.
    """
    config = config or RobustConfig()
    max_iterations = max_iterations or config.max_iterations
    n_frames = len(poses)
    if n_frames == 0:
        raise EmptyWindow("no keyframes to optimize")
    fixed = np.asarray(fixed, dtype=bool).copy()
    if not fixed.any():
        fixed[0] = True
    free_idx = np.full(n_frames, -1)
    free_idx[~fixed] = np.arange(int((~fixed).sum()))
    n_free = int((~fixed).sum())
    X = np.array(points, dtype=float).reshape(-1, 3)
    n_pts = len(X)
    params = np.array([camera_params(c) for c in cameras]).reshape(n_frames, _NPARAM)
    thr = chi2_thresholds(block, config)
    poses = list(poses)
    active = np.ones(len(block), dtype=bool)
    history: list[float] = []
    accepted: list[float] = []
    total_it = 0
    aborted = False

    def stack(ps):
        return np.array([p.R for p in ps]).reshape(-1, 3, 3), np.array([p.t for p in ps]).reshape(-1, 3)

    def cost_of(ps, Xc):
        R, t = stack(ps)
        e, _, _, valid = residual_errors(block, params, R, t, Xc, with_jacobian=False)
        chi2 = chi2_values(block, e)
        c, _ = robust_cost_and_weights(chi2, thr, config.robust)
        return float(np.sum(np.where(valid & active, c, 0.0))), chi2, valid

    passes = 2 if outlier_pass else 1
    for pass_no in range(passes):
        lam = config.lm_lambda
        cost, _, _ = cost_of(poses, X)
        history.append(cost)
        accepted.append(cost)
        for _ in range(max_iterations):
            if abort is not None and abort.is_set():
                aborted = True
                break
            total_it += 1
            R, t = stack(poses)
            e, Jc, Jp, valid = residual_errors(block, params, R, t, X)
            chi2 = chi2_values(block, e)
            _, w = robust_cost_and_weights(chi2, thr, config.robust)
            w = w * block.info * (active & valid)
            fi = free_idx[block.frame]
            onc = fi >= 0
            # point blocks
            WJp = Jp * w[:, None, None]
            Hll = np.zeros((n_pts, 3, 3))
            np.add.at(Hll, block.point, np.einsum("nki,nkj->nij", WJp, Jp))
            bl = np.zeros((n_pts, 3))
            np.add.at(bl, block.point, -np.einsum("nki,nk->ni", WJp, e))
            # camera blocks
            Hcc = np.zeros((n_free, 6, 6))
            bc = np.zeros((n_free, 6))
            if n_free:
                WJc = Jc[onc] * w[onc, None, None]
                np.add.at(Hcc, fi[onc], np.einsum("nki,nkj->nij", WJc, Jc[onc]))
                np.add.at(bc, fi[onc], -np.einsum("nki,nk->ni", WJc, e[onc]))
                Hcl_blocks = np.einsum("nki,nkj->nij", WJc, Jp[onc])
                rows = (6 * fi[onc])[:, None, None] + np.arange(6)[None, :, None]
                cols = (3 * block.point[onc])[:, None, None] + np.arange(3)[None, None, :]
                Hcl = sp.csr_matrix(
                    (Hcl_blocks.ravel(), (np.broadcast_to(rows, Hcl_blocks.shape).ravel(), np.broadcast_to(cols, Hcl_blocks.shape).ravel())),
                    shape=(6 * n_free, 3 * n_pts),
                )
            improved = False
            for _ in range(10):
                Hll_d = Hll + lam * Hll * np.eye(3)[None] + 1e-9 * np.eye(3)[None]
                Hll_inv = _inv3(Hll_d)
                if n_free:
                    Hcc_d = Hcc + lam * Hcc * np.eye(6)[None] + 1e-9 * np.eye(6)[None]
                    Linv = _block_diag_sparse(Hll_inv, 3)
                    Y = Hcl @ Linv
                    S = _block_diag_sparse(Hcc_d, 6).toarray() - (Y @ Hcl.T).toarray()
                    rhs = bc.ravel() - Y @ bl.ravel()
                    try:
                        dc = cho_solve(cho_factor(S), rhs)
                    except (LinAlgError, ValueError):
                        try:
                            dc = np.linalg.lstsq(S, rhs, rcond=None)[0]
                        except np.linalg.LinAlgError:
                            lam *= config.lm_up
                            continue
                    dl = np.einsum("nij,nj->ni", Hll_inv, bl - (Hcl.T @ dc).reshape(-1, 3))
                    dcb = dc.reshape(-1, 6)
                else:
                    dl = np.einsum("nij,nj->ni", Hll_inv, bl)
                    dcb = np.zeros((0, 6))
                new_poses = list(poses)
                for i in np.nonzero(~fixed)[0]:
                    new_poses[i] = poses[i].retract(dcb[free_idx[i]])
                X_new = X + dl
                new_cost, _, _ = cost_of(new_poses, X_new)
                history.append(new_cost)
                if np.isfinite(new_cost) and new_cost <= cost:
                    rel = (cost - new_cost) / max(cost, 1e-300)
                    poses, X, cost = new_poses, X_new, new_cost
                    accepted.append(cost)
                    lam = max(lam * config.lm_down, 1e-12)
                    improved = True
                    break
                lam *= config.lm_up
            if not improved or rel < config.rel_tol or cost < 1e-24:
                break
        if aborted:
            break
        _, chi2, valid = cost_of(poses, X)
        new_active = valid & (chi2 <= thr)
        if pass_no + 1 < passes and np.array_equal(new_active, active):
            break
        active = new_active
    _, chi2, valid = cost_of(poses, X)
    inliers = valid & (chi2 <= thr)
    return BAResult(poses, X, inliers, history, accepted, total_it, aborted)


def reprojection_rmse(poses, cameras, points, block: ResidualBlock, mask=None) -> float:
    """Root-mean-square pixel error over all residual components."""
    if len(block) == 0:
        return 0.0
    params = np.array([camera_params(c) for c in cameras]).reshape(len(poses), _NPARAM)
    R = np.array([p.R for p in poses]).reshape(-1, 3, 3)
    t = np.array([p.t for p in poses]).reshape(-1, 3)
    e, _, _, _ = residual_errors(block, params, R, t, np.asarray(points, dtype=float), with_jacobian=False)
    if mask is not None:
        e = e[mask]
        dims = block.dims[mask]
    else:
        dims = block.dims
    return float(np.sqrt(np.sum(e * e) / max(np.sum(dims), 1)))


# ---------------------------------------------------------------------------
# Map-level wrappers
# ---------------------------------------------------------------------------


def _constrained(block: ResidualBlock, n_pts: int) -> np.ndarray:
    """Points with enough observations to be determined (two views or one stereo view)."""
    nobs = np.bincount(block.point, minlength=n_pts)
    nst = np.bincount(block.point, weights=(block.kind == STEREO).astype(float), minlength=n_pts)
    return (nobs >= 2) | (nst >= 1)


def _snapshot(world_map, kf_ids, pids):
    with world_map.lock:
        kf_ids = [k for k in kf_ids if k in world_map.keyframes]
        pids = [p for p in pids if p in world_map.points]
        poses = [world_map.keyframes[k].pose for k in kf_ids]
        cameras = [world_map.keyframes[k].camera for k in kf_ids]
        X = world_map.point_array(pids)
        block, links = world_map.residual_block(kf_ids, pids)
    ok = _constrained(block, len(pids))
    keep_r = ok[block.point]
    block = block.subset(keep_r)
    links = [l for l, k in zip(links, keep_r) if k]
    return kf_ids, pids, poses, cameras, X, block, links, ok


def bundle_adjust_local(world_map, K_L, K_F, P_L, config: RobustConfig | None = None,
                        abort: threading.Event | None = None, iterations: int = 10) -> BAResult:
    """Optimize the poses of ``K_L`` and points ``P_L``; ``K_F`` only contributes residuals.

    Observations failing the chi-square gate after convergence are erased
    from the map.
    """
    if not K_L:
        raise EmptyWindow("local window has no keyframes")
    kf_ids, pids, poses, cameras, X, block, links, ok = _snapshot(world_map, list(K_L) + list(K_F), P_L)
    if not kf_ids:
        raise EmptyWindow("local window keyframes vanished")
    K_L = set(K_L)
    fixed = np.array([k not in K_L or k == world_map.origin_id for k in kf_ids])
    if not fixed.any():
        fixed[int(np.argmin(kf_ids))] = True
    res = bundle_adjust(poses, cameras, fixed, X, block, config, max_iterations=iterations, abort=abort)
    with world_map.lock:
        for k, p, f in zip(kf_ids, res.poses, fixed):
            if not f and k in world_map.keyframes:
                world_map.keyframes[k].pose = p
        for j, pid in enumerate(pids):
            if ok[j] and pid in world_map.points:
                world_map.points[pid].position = res.points[j].copy()
        touched = set()
        for (pid, k), inl in zip(links, res.inliers):
            if not inl and pid in world_map.points:
                world_map.remove_observation(pid, k, refresh=False)
                touched.add(k)
        world_map._refresh_edges(touched | set(kf_ids))
        for pid in pids:
            if pid in world_map.points:
                world_map._update_point_geometry(world_map.points[pid])
        world_map._bump()
    return res


def bundle_adjust_full(world_map, config: RobustConfig | None = None, abort: threading.Event | None = None,
                       iterations: int = 20, apply: bool = True) -> BAResult:
    """Optimize every keyframe and point with the origin keyframe fixed.

    The result is merged through the spanning tree so keyframes inserted
    while the optimizer ran move with their parents.
    """
    with world_map.lock:
        kf_ids = world_map.keyframe_ids()
        pids = world_map.point_ids()
    kf_ids, pids, poses, cameras, X, block, links, ok = _snapshot(world_map, kf_ids, pids)
    if not kf_ids:
        raise EmptyWindow("map has no keyframes")
    fixed = np.array([k == world_map.origin_id for k in kf_ids])
    res = bundle_adjust(poses, cameras, fixed, X, block, config, max_iterations=iterations, abort=abort)
    if apply and not res.aborted:
        pose_map = {k: p for k, p, f in zip(kf_ids, res.poses, fixed) if not f}
        point_map = {pid: res.points[j] for j, pid in enumerate(pids) if ok[j]}
        world_map.apply_corrections(pose_map, point_map)
    return res
