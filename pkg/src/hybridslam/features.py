"""Keypoint/descriptor containers and the matching primitives built on them.

Features are stored structure-of-arrays in :class:`FeatureSet`; a single
:class:`Feature` record exists for I/O and readability. Descriptors are
unit-norm, non-negative 128-d float32 vectors compared with L2 distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.spatial import cKDTree

DESCRIPTOR_DIM = 128
SCALE_FACTOR = 1.2


@dataclass
class Feature:
    u: float
    v: float
    scale_sigma: float
    orientation: float
    descriptor: np.ndarray
    right_u: float | None = None


@dataclass(frozen=True)
class MatchPair:
    index_a: int
    index_b: int
    distance: float


class FeatureSet:
    """Keypoints of one image as parallel arrays.

    ``right_u`` holds the matched right-image column for rectified stereo
    features and NaN where no stereo match exists.
    """

    __slots__ = ("u", "v", "sigma", "angle", "desc", "right_u")

    def __init__(self, u, v, sigma, angle, desc, right_u=None):
        self.u = np.asarray(u, dtype=np.float64).reshape(-1)
        n = len(self.u)
        self.v = np.asarray(v, dtype=np.float64).reshape(n)
        self.sigma = np.asarray(sigma, dtype=np.float64).reshape(n)
        self.angle = np.asarray(angle, dtype=np.float64).reshape(n)
        desc = np.asarray(desc, dtype=np.float32)
        self.desc = desc.reshape(n, desc.shape[-1] if desc.ndim == 2 else -1)
        if right_u is None:
            right_u = np.full(n, np.nan)
        self.right_u = np.asarray(right_u, dtype=np.float64).reshape(n)

    @classmethod
    def empty(cls, dim: int = DESCRIPTOR_DIM) -> FeatureSet:
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, dim), np.float32))

    @classmethod
    def from_features(cls, feats: list[Feature]) -> FeatureSet:
        if not feats:
            return cls.empty()
        return cls(
            [f.u for f in feats],
            [f.v for f in feats],
            [f.scale_sigma for f in feats],
            [f.orientation for f in feats],
            np.stack([np.asarray(f.descriptor, dtype=np.float32) for f in feats]),
            [np.nan if f.right_u is None else f.right_u for f in feats],
        )

    def to_features(self) -> list[Feature]:
        return [
            Feature(
                float(self.u[i]),
                float(self.v[i]),
                float(self.sigma[i]),
                float(self.angle[i]),
                self.desc[i].copy(),
                None if np.isnan(self.right_u[i]) else float(self.right_u[i]),
            )
            for i in range(len(self))
        ]

    def __len__(self):
        return len(self.u)

    @property
    def uv(self) -> np.ndarray:
        return np.column_stack([self.u, self.v])

    @property
    def has_stereo(self) -> np.ndarray:
        return np.isfinite(self.right_u)

    def subset(self, idx) -> FeatureSet:
        return FeatureSet(self.u[idx], self.v[idx], self.sigma[idx], self.angle[idx], self.desc[idx], self.right_u[idx])

    def copy(self) -> FeatureSet:
        return self.subset(slice(None))

    def levels(self) -> np.ndarray:
        return scale_level(self.sigma)


class FeatureProvider(Protocol):
    """Source of per-frame features; must be deterministic per frame id."""

    def features(self, frame_id) -> FeatureSet: ...


# ---------------------------------------------------------------------------
# Scale handling
# ---------------------------------------------------------------------------


def scale_level(sigma) -> np.ndarray:
    """Discrete pyramid level of a continuous detection scale (factor 1.2/level)."""
    s = np.maximum(np.asarray(sigma, dtype=float), 1e-12)
    return np.round(np.log(s) / math.log(SCALE_FACTOR)).astype(int)


def level_sigma(level) -> np.ndarray:
    """Standard deviation in pixels assigned to a pyramid level."""
    return SCALE_FACTOR ** np.asarray(level, dtype=float)


def normalize_scale(scale_sigma, focal):
    """Detection scale divided by the focal length of the observing camera."""
    focal = np.asarray(focal, dtype=float)
    if np.any(focal <= 0):
        raise ValueError("focal length must be positive")
    return np.asarray(scale_sigma, dtype=float) / focal


# ---------------------------------------------------------------------------
# Descriptor distances and matching
# ---------------------------------------------------------------------------


def descriptor_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise L2 distances between two descriptor arrays."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    d2 = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(d2, 0.0))


def _best_two(D):
    n, m = D.shape
    if m == 1:
        return np.zeros(n, int), D[:, 0], np.full(n, np.inf)
    part = np.argpartition(D, 1, axis=1)[:, :2]
    rows = np.arange(n)
    d0 = D[rows, part[:, 0]]
    d1 = D[rows, part[:, 1]]
    swap = d1 < d0
    best = np.where(swap, part[:, 1], part[:, 0])
    bd = np.minimum(d0, d1)
    sd = np.maximum(d0, d1)
    return best, bd, sd


def match_descriptors(
    desc_a, desc_b, ratio: float = 0.8, mutual: bool = False, max_distance: float = np.inf, mask=None
):
    """Nearest-neighbour matching with Lowe's ratio test.

    Returns arrays ``(idx_a, idx_b, distance)``. ``mask`` (shape ``(len(a),
    len(b))``) excludes pairs by setting them to infinite distance.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    na, nb = len(desc_a), len(desc_b)
    empty = (np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    if na == 0 or nb == 0:
        return empty
    if desc_a.shape[1] != desc_b.shape[1]:
        raise ValueError("descriptor dimensions differ")
    D = descriptor_distances(desc_a, desc_b).astype(np.float64)
    if mask is not None:
        D = np.where(mask, D, np.inf)
    best, bd, sd = _best_two(D)
    keep = np.isfinite(bd) & (bd <= max_distance) & ((bd < ratio * sd) | ~np.isfinite(sd))
    if mutual:
        back = np.argmin(D, axis=0)
        keep &= back[best] == np.arange(na)
    ia = np.nonzero(keep)[0]
    return ia, best[ia], bd[ia]


def match_brute_force(a: FeatureSet, b: FeatureSet, ratio: float = 0.8, mutual: bool = False) -> list[MatchPair]:
    ia, ib, d = match_descriptors(a.desc, b.desc, ratio=ratio, mutual=mutual)
    return [MatchPair(int(i), int(j), float(x)) for i, j, x in zip(ia, ib, d)]


def _pair_map(fa: FeatureSet, fb: FeatureSet, ratio, epipolar_tol=None, stereo_order=None):
    """Best-match map a->b as an int array (-1 = none)."""
    mask = None
    if epipolar_tol is not None:
        dv = np.abs(fa.v[:, None] - fb.v[None, :])
        mask = dv <= epipolar_tol
        if stereo_order == "lr":
            mask &= fa.u[:, None] > fb.u[None, :]
        elif stereo_order == "rl":
            mask &= fa.u[:, None] < fb.u[None, :]
    ia, ib, _ = match_descriptors(fa.desc, fb.desc, ratio=ratio, mask=mask)
    out = np.full(len(fa), -1, dtype=int)
    out[ia] = ib
    return out


@dataclass
class CircularTracks:
    """Index quadruples of features that survive the four-way match cycle."""

    prev_left: np.ndarray
    prev_right: np.ndarray
    cur_right: np.ndarray
    cur_left: np.ndarray

    def __len__(self):
        return len(self.prev_left)

    def subset(self, idx) -> CircularTracks:
        return CircularTracks(self.prev_left[idx], self.prev_right[idx], self.cur_right[idx], self.cur_left[idx])


def match_circular(
    prev_left: FeatureSet,
    prev_right: FeatureSet,
    cur_right: FeatureSet,
    cur_left: FeatureSet,
    ratio: float = 0.8,
    epipolar_tol: float = 1.0,
) -> CircularTracks:
    """Brute-force match around prev_left -> prev_right -> cur_right -> cur_left -> prev_left.

    A track is kept only when the closing match lands on the starting
    feature. Left/right pairs must share the image row within
    ``epipolar_tol`` pixels and have positive disparity.
    """
    lists = (prev_left, prev_right, cur_right, cur_left)
    if any(len(x) == 0 for x in lists):
        z = np.zeros(0, int)
        return CircularTracks(z, z, z, z)
    m01 = _pair_map(prev_left, prev_right, ratio, epipolar_tol, "lr")
    m12 = _pair_map(prev_right, cur_right, ratio)
    m23 = _pair_map(cur_right, cur_left, ratio, epipolar_tol, "rl")
    m30 = _pair_map(cur_left, prev_left, ratio)
    start = np.arange(len(prev_left))
    i1 = m01
    ok = i1 >= 0
    i2 = np.where(ok, m12[np.where(ok, i1, 0)], -1)
    ok &= i2 >= 0
    i3 = np.where(ok, m23[np.where(ok, i2, 0)], -1)
    ok &= i3 >= 0
    i0 = np.where(ok, m30[np.where(ok, i3, 0)], -1)
    ok &= i0 == start
    keep = np.nonzero(ok)[0]
    return CircularTracks(keep, i1[keep], i2[keep], i3[keep])


def match_stereo(left: FeatureSet, right: FeatureSet, ratio: float = 0.8, epipolar_tol: float = 1.0,
                 min_disparity: float = 0.25, max_disparity: float | None = None) -> np.ndarray:
    """Row-constrained left/right matching; returns right columns (NaN = unmatched)."""
    out = np.full(len(left), np.nan)
    if len(left) == 0 or len(right) == 0:
        return out
    dv = np.abs(left.v[:, None] - right.v[None, :])
    disp = left.u[:, None] - right.u[None, :]
    mask = (dv <= epipolar_tol) & (disp > min_disparity)
    if max_disparity is not None:
        mask &= disp < max_disparity
    ia, ib, _ = match_descriptors(left.desc, right.desc, ratio=ratio, mask=mask, mutual=True)
    out[ia] = right.u[ib]
    return out


def match_projection_window(
    predicted_uv,
    predicted_level,
    point_desc,
    frame: FeatureSet,
    radius: float = 15.0,
    ratio: float = 0.8,
    max_distance: float = 0.7,
    level_gate: int = 1,
    available=None,
):
    """Guided matching of projected map points against frame features.

    For every projected point the candidate features lie within
    ``radius * 1.2**level`` pixels and within ``level_gate`` pyramid levels of
    the predicted level. The best candidate must pass the ratio test against
    the runner-up in the same window. When several points claim one feature
    the lowest-distance claim wins.

    Returns ``(point_idx, feature_idx, distance)`` arrays.
    """
    predicted_uv = np.asarray(predicted_uv, dtype=float).reshape(-1, 2)
    m = len(predicted_uv)
    empty = (np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    if m == 0 or len(frame) == 0:
        return empty
    if radius <= 0:
        raise ValueError("radius must be positive")
    predicted_level = np.broadcast_to(np.asarray(predicted_level, dtype=int), (m,))
    radii = radius * SCALE_FACTOR ** np.maximum(predicted_level, 0)
    tree = cKDTree(frame.uv)
    hits = tree.query_ball_point(predicted_uv, radii)
    counts = np.fromiter((len(h) for h in hits), dtype=int, count=m)
    if counts.sum() == 0:
        return empty
    pi = np.repeat(np.arange(m), counts)
    fi = np.fromiter((j for h in hits for j in h), dtype=int, count=int(counts.sum()))
    flev = scale_level(frame.sigma)
    ok = np.abs(flev[fi] - predicted_level[pi]) <= level_gate
    if available is not None:
        ok &= np.asarray(available, dtype=bool)[fi]
    pi, fi = pi[ok], fi[ok]
    if len(pi) == 0:
        return empty
    pd = np.asarray(point_desc, dtype=np.float32)[pi]
    dist = np.linalg.norm(pd - frame.desc[fi], axis=1).astype(np.float64)
    # best and second best per point
    order = np.lexsort((dist, pi))
    pi, fi, dist = pi[order], fi[order], dist[order]
    first = np.ones(len(pi), dtype=bool)
    first[1:] = pi[1:] != pi[:-1]
    starts = np.nonzero(first)[0]
    second = np.full(len(starts), np.inf)
    has2 = np.append(starts[1:], len(pi)) - starts > 1
    second[has2] = dist[starts[has2] + 1]
    bp, bf, bd = pi[starts], fi[starts], dist[starts]
    keep = (bd <= max_distance) & (bd < ratio * second)
    bp, bf, bd = bp[keep], bf[keep], bd[keep]
    # resolve features claimed twice
    order = np.lexsort((bd, bf))
    bp, bf, bd = bp[order], bf[order], bd[order]
    first = np.ones(len(bf), dtype=bool)
    first[1:] = bf[1:] != bf[:-1]
    bp, bf, bd = bp[first], bf[first], bd[first]
    order = np.argsort(bp, kind="stable")
    return bp[order], bf[order], bd[order]
