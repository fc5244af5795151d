"""Pinhole, rectified-stereo and Kannala-Brandt fisheye camera models.

All models are immutable. Scalar entry points raise on invalid input;
the ``*_batch`` variants work on ``(N, 3)`` arrays and report validity
masks instead, which is what the tracking and optimization code uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, InvalidCalibration, NoConvergence, OutsideFov


@dataclass(frozen=True)
class PinholeModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    kind = "pinhole"

    def __post_init__(self):
        for key in ("fx", "fy"):
            if not getattr(self, key) > 0:
                raise InvalidCalibration(key, "focal length must be positive")
        if not 0 < self.cx < self.width:
            raise InvalidCalibration("cx", "principal point outside image")
        if not 0 < self.cy < self.height:
            raise InvalidCalibration("cy", "principal point outside image")

    @property
    def focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def in_image(self, uv, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= margin)
            & (uv[..., 0] < self.width - margin)
            & (uv[..., 1] >= margin)
            & (uv[..., 1] < self.height - margin)
        )

    def project(self, p):
        return project_pinhole(self, p)

    def project_batch(self, p):
        p = np.asarray(p, dtype=float)
        z = p[:, 2]
        valid = z > 0
        zs = np.where(valid, z, 1.0)
        uv = np.stack([self.fx * p[:, 0] / zs + self.cx, self.fy * p[:, 1] / zs + self.cy], axis=1)
        return uv, valid

    def unproject(self, pix):
        return unproject_pinhole(self, pix)

    def unproject_batch(self, uv):
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        rays = np.stack(
            [(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy, np.ones(len(uv))], axis=1
        )
        return rays / np.linalg.norm(rays, axis=1, keepdims=True)

    def jacobian(self, p):
        """d(u, v)/d(x, y, z), shape ``(N, 2, 3)``."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        iz = 1.0 / z
        J = np.zeros((len(p), 2, 3))
        J[:, 0, 0] = self.fx * iz
        J[:, 0, 2] = -self.fx * x * iz * iz
        J[:, 1, 1] = self.fy * iz
        J[:, 1, 2] = -self.fy * y * iz * iz
        return J

    def bearing_jacobian(self, uv):
        """d(unit bearing)/d(u, v), shape ``(N, 3, 2)``; used for MLPnP covariances."""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        m = np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy, np.ones(len(uv))], 1)
        n = np.linalg.norm(m, axis=1)
        f = m / n[:, None]
        dm = np.zeros((len(uv), 3, 2))
        dm[:, 0, 0] = 1.0 / self.fx
        dm[:, 1, 1] = 1.0 / self.fy
        P = (np.eye(3)[None] - f[:, :, None] * f[:, None, :]) / n[:, None, None]
        return P @ dm


@dataclass(frozen=True)
class RectifiedStereoRig:
    left: PinholeModel
    baseline: float

    kind = "stereo"

    def __post_init__(self):
        if not self.baseline > 0:
            raise InvalidCalibration("baseline", "stereo baseline must be positive")

    @property
    def fx(self):
        return self.left.fx

    @property
    def focal(self):
        return self.left.focal

    @property
    def bf(self) -> float:
        return self.left.fx * self.baseline

    def project(self, p):
        return project_stereo(self, p)

    def project_batch(self, p):
        uv, valid = self.left.project_batch(p)
        z = np.where(valid, np.asarray(p)[:, 2], 1.0)
        ur = uv[:, 0] - self.bf / z
        return np.column_stack([uv, ur]), valid

    def jacobian(self, p):
        """d(u_l, v, u_r)/d(x, y, z), shape ``(N, 3, 3)``."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        J = np.zeros((len(p), 3, 3))
        J[:, :2] = self.left.jacobian(p)
        iz = 1.0 / p[:, 2]
        J[:, 2, 0] = self.left.fx * iz
        J[:, 2, 2] = -self.left.fx * (p[:, 0] - self.baseline) * iz * iz
        return J


@dataclass(frozen=True)
class FisheyeModel:
    """Kannala-Brandt: ``r = d(theta) = theta + k1 theta^3 + k2 theta^5 + k3 theta^7 + k4 theta^9``."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float
    k2: float
    k3: float
    k4: float
    width: int
    height: int
    theta_max: float = np.radians(95.0)

    kind = "fisheye"

    def __post_init__(self):
        for key in ("fx", "fy"):
            if not getattr(self, key) > 0:
                raise InvalidCalibration(key, "focal length must be positive")
        if not 0 < self.theta_max < np.pi:
            raise InvalidCalibration("theta_max_deg", "field-of-view limit must lie in (0, 180) deg")
        # the Newton unprojection needs d(theta) strictly increasing on [0, theta_max]
        th = np.linspace(0.0, self.theta_max, 2001)
        if np.any(self.dd(th) <= 0):
            raise InvalidCalibration("k1", "distortion polynomial is not monotone over [0, theta_max]")

    @classmethod
    def clamped(cls, fx, fy, cx, cy, k1, k2, k3, k4, width, height, theta_max=np.radians(95.0)):
        """Build a model with ``theta_max`` clamped to the monotone range of d(theta)."""
        th = np.linspace(0.0, theta_max, 4001)
        dd = 1 + 3 * k1 * th**2 + 5 * k2 * th**4 + 7 * k3 * th**6 + 9 * k4 * th**8
        bad = np.nonzero(dd <= 0)[0]
        if len(bad):
            theta_max = th[max(bad[0] - 1, 1)]
        return cls(fx, fy, cx, cy, k1, k2, k3, k4, width, height, float(theta_max))

    @property
    def focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def d(self, th):
        t2 = th * th
        return th * (1 + t2 * (self.k1 + t2 * (self.k2 + t2 * (self.k3 + t2 * self.k4))))

    def dd(self, th):
        t2 = th * th
        return 1 + t2 * (3 * self.k1 + t2 * (5 * self.k2 + t2 * (7 * self.k3 + t2 * 9 * self.k4)))

    def in_image(self, uv, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= margin)
            & (uv[..., 0] < self.width - margin)
            & (uv[..., 1] >= margin)
            & (uv[..., 1] < self.height - margin)
        )

    def project(self, p):
        return project_fisheye(self, p)

    def project_batch(self, p):
        p = np.asarray(p, dtype=float)
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        r = np.hypot(x, y)
        th = np.arctan2(r, z)
        valid = th <= self.theta_max
        dth = self.d(th)
        rs = np.where(r > 1e-12, r, 1.0)
        # near the axis d(theta)/r -> 1/z
        scale = np.where(r > 1e-12, dth / rs, 1.0 / np.where(z != 0, z, 1.0))
        uv = np.stack([self.fx * scale * x + self.cx, self.fy * scale * y + self.cy], axis=1)
        return uv, valid

    def unproject(self, pix):
        return unproject_fisheye(self, pix)

    def _solve_theta(self, r, tol=1e-12, max_iter=20):
        r = np.asarray(r, dtype=float)
        th = r.copy()
        converged = np.zeros(r.shape, dtype=bool)
        for _ in range(max_iter):
            f = self.d(th) - r
            step = f / self.dd(th)
            th = th - step
            converged = np.abs(step) < tol
            if np.all(converged):
                break
        ok = converged & (th >= 0) & (th <= self.theta_max + 1e-12)
        return th, ok

    def unproject_batch(self, uv):
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        mx = (uv[:, 0] - self.cx) / self.fx
        my = (uv[:, 1] - self.cy) / self.fy
        r = np.hypot(mx, my)
        th, ok = self._solve_theta(r)
        rs = np.where(r > 1e-15, r, 1.0)
        s = np.sin(th)
        rays = np.stack([s * mx / rs, s * my / rs, np.cos(th)], axis=1)
        rays[r <= 1e-15] = (0.0, 0.0, 1.0)
        return rays, ok

    def jacobian(self, p):
        """d(u, v)/d(x, y, z), shape ``(N, 2, 3)``."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        r2 = x * x + y * y
        r = np.sqrt(r2)
        rho2 = r2 + z * z
        th = np.arctan2(r, z)
        J = np.zeros((len(p), 2, 3))
        small = r < 1e-9
        rs = np.where(small, 1.0, r)
        dth = self.d(th)
        ddth = self.dd(th)
        psi = dth / rs
        # d theta / d(x, y, z)
        dth_dx = x * z / (rs * rho2)
        dth_dy = y * z / (rs * rho2)
        dth_dz = -r / rho2
        # d psi = d'(th) dth / r - d(th) dr / r^2
        dpsi_dx = ddth * dth_dx / rs - dth * x / rs**3
        dpsi_dy = ddth * dth_dy / rs - dth * y / rs**3
        dpsi_dz = ddth * dth_dz / rs
        J[:, 0, 0] = self.fx * (psi + x * dpsi_dx)
        J[:, 0, 1] = self.fx * x * dpsi_dy
        J[:, 0, 2] = self.fx * x * dpsi_dz
        J[:, 1, 0] = self.fy * y * dpsi_dx
        J[:, 1, 1] = self.fy * (psi + y * dpsi_dy)
        J[:, 1, 2] = self.fy * y * dpsi_dz
        if np.any(small):
            zs = z[small]
            J[small, 0, 0] = self.fx / zs
            J[small, 1, 1] = self.fy / zs
            J[small, 0, 2] = -self.fx * x[small] / zs**2
            J[small, 1, 2] = -self.fy * y[small] / zs**2
            J[small, 0, 1] = 0.0
            J[small, 1, 0] = 0.0
        return J

    def bearing_jacobian(self, uv, eps: float = 1e-6):
        """d(unit bearing)/d(u, v) by central differences, shape ``(N, 3, 2)``."""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        J = np.zeros((len(uv), 3, 2))
        for k in range(2):
            d = np.zeros(2)
            d[k] = eps
            fp, _ = self.unproject_batch(uv + d)
            fm, _ = self.unproject_batch(uv - d)
            J[:, :, k] = (fp - fm) / (2 * eps)
        return J


# ---------------------------------------------------------------------------
# Scalar entry points
# ---------------------------------------------------------------------------


def project_pinhole(model: PinholeModel, p_cam) -> np.ndarray:
    p = np.asarray(p_cam, dtype=float)
    if not p[2] > 0:
        raise BehindCamera(f"point depth {p[2]:.4g} <= 0")
    return np.array([model.fx * p[0] / p[2] + model.cx, model.fy * p[1] / p[2] + model.cy])


def unproject_pinhole(model: PinholeModel, pix) -> np.ndarray:
    return model.unproject_batch(np.asarray(pix, dtype=float).reshape(1, 2))[0]


def project_stereo(rig: RectifiedStereoRig, p_cam) -> np.ndarray:
    uv = project_pinhole(rig.left, p_cam)
    return np.array([uv[0], uv[1], uv[0] - rig.bf / float(p_cam[2])])


def project_fisheye(model: FisheyeModel, p_cam) -> np.ndarray:
    p = np.asarray(p_cam, dtype=float).reshape(1, 3)
    uv, valid = model.project_batch(p)
    if not valid[0]:
        th = np.degrees(np.arctan2(np.hypot(p[0, 0], p[0, 1]), p[0, 2]))
        raise OutsideFov(f"incidence angle {th:.2f} deg exceeds field of view")
    return uv[0]


def unproject_fisheye(model: FisheyeModel, pix) -> np.ndarray:
    rays, ok = model.unproject_batch(np.asarray(pix, dtype=float).reshape(1, 2))
    if not ok[0]:
        raise NoConvergence("pixel radius outside the calibrated fisheye domain")
    return rays[0]


def focal_of(camera) -> float:
    """Focal length used for scale normalization of any supported model."""
    return float(camera.focal)


def intrinsic_model(camera):
    """Return the monocular model that measures pixels for a camera or rig."""
    return camera.left if isinstance(camera, RectifiedStereoRig) else camera


def unproject_batch(camera, uv):
    """Unit bearings for a batch of pixels under any supported camera."""
    model = intrinsic_model(camera)
    if isinstance(model, FisheyeModel):
        rays, _ = model.unproject_batch(uv)
        return rays
    return model.unproject_batch(uv)
