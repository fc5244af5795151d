"""Keyframes, map points, covisibility graph and spanning tree.

All mutating methods take the map lock and bump ``version``. Observation
links are kept bidirectional: ``point.observations[kf] == idx`` iff
``keyframe.point_ids[idx] == point.id``. Covisibility weights are exact
shared-point counts, stored only when they reach ``covis_threshold``.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .camera_models import FisheyeModel, focal_of, intrinsic_model, unproject_batch
from .features import SCALE_FACTOR, FeatureSet, match_descriptors, scale_level
from .geometry import Pose, triangulate_stereo_batch, triangulate_two_view_batch
from .optimizer import CHI2_2DOF, CHI2_3DOF, FISHEYE, MONO, STEREO, ResidualBlock, camera_params, project_residuals

N_LEVELS = 24  # pyramid levels spanned by a point's distance bounds


@dataclass
class Frame:
    """A tracked (or to-be-tracked) image with its feature-to-point associations."""

    kind: str
    timestamp: float
    features: FeatureSet
    camera: object
    pose: Pose | None = None
    point_ids: np.ndarray | None = None
    index: int = 0
    right: FeatureSet | None = None
    bow: object = None

    def __post_init__(self):
        if self.point_ids is None:
            self.point_ids = np.full(len(self.features), -1, dtype=np.int64)


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    normal: np.ndarray
    d_min: float
    d_max: float
    observations: dict = field(default_factory=dict)
    ref_kf: int = -1
    created_kf: int = 0
    visible: int = 1
    found: int = 1
    bad: bool = False

    @property
    def found_ratio(self) -> float:
        return self.found / max(self.visible, 1)

    def max_distance(self, focal: float) -> float:
        """Largest viewing distance at which the point is detectable by a camera of this focal."""
        return 1.2 * self.d_max * focal

    def min_distance(self, focal: float) -> float:
        return 0.8 * self.d_min * focal

    def predict_level(self, distance, focal) -> np.ndarray:
        sigma = self.d_max * focal / np.maximum(np.asarray(distance, dtype=float), 1e-12)
        return scale_level(sigma)


@dataclass
class KeyFrame:
    id: int
    kind: str
    pose: Pose
    features: FeatureSet
    camera: object
    point_ids: np.ndarray
    timestamp: float = 0.0
    frame_index: int = 0
    bow: object = None
    covisibility: dict = field(default_factory=dict)
    parent: int | None = None
    children: set = field(default_factory=set)
    loop_edges: set = field(default_factory=set)
    bad: bool = False

    @property
    def focal(self) -> float:
        return focal_of(self.camera)

    def center(self) -> np.ndarray:
        return self.pose.center()

    def tracked_points(self, min_obs: int = 1, points: dict | None = None) -> int:
        ids = self.point_ids[self.point_ids >= 0]
        if points is None or min_obs <= 1:
            return len(ids)
        return sum(1 for p in ids if len(points[int(p)].observations) >= min_obs)

    def best_covisibles(self, n: int | None = None) -> list[int]:
        order = sorted(self.covisibility.items(), key=lambda kv: (-kv[1], kv[0]))
        ids = [k for k, _ in order]
        return ids[:n] if n else ids

    def residual_kinds(self) -> np.ndarray:
        if self.kind == "fisheye":
            return np.full(len(self.features), FISHEYE, dtype=np.int8)
        has_r = np.isfinite(self.features.right_u)
        return np.where(has_r, STEREO, MONO).astype(np.int8)

    def observations(self, idx) -> np.ndarray:
        f = self.features
        idx = np.asarray(idx, dtype=int)
        return np.column_stack([f.u[idx], f.v[idx], f.right_u[idx]])


def distance_bounds(distance: float, sigma: float, focal: float) -> tuple[float, float]:
    """Focal-normalized ``(d_min, d_max)`` from one observation.

    ``d_max`` is the physical-size proxy ``distance * sigma / focal``; a camera
    of focal ``f`` sees the point at one-pixel scale at ``d_max * f``.
    """
    d_max = float(distance) * float(sigma) / float(focal)
    return d_max / SCALE_FACTOR ** (N_LEVELS - 1), d_max


class WorldMap:
    """Shared map state. Use ``with map.lock:`` for multi-step read consistency."""

    def __init__(self, vocabulary=None, covis_threshold: int = 15, window_cap: int = 20):
        from .vocabulary import InvertedIndex

        self.keyframes: dict[int, KeyFrame] = {}
        self.points: dict[int, MapPoint] = {}
        self.vocabulary = vocabulary
        self.index = InvertedIndex()
        self.version = 0
        self.lock = threading.RLock()
        self.covis_threshold = covis_threshold
        self.window_cap = window_cap
        self.reference = {"stereo": None, "fisheye": None}
        self._next_kf = 0
        self._next_pt = 0
        self.origin_id: int | None = None
        self.keyframe_count = 0  # insertions ever (for point grace periods)
        self.recent_points: list[int] = []
        # removed keyframe -> (parent id, pose relative to parent) for trajectory recovery
        self.retired: dict[int, tuple[int, Pose]] = {}

    # -- bookkeeping --------------------------------------------------------

    def _bump(self):
        self.version += 1

    def __len__(self):
        return len(self.keyframes)

    def keyframe_ids(self) -> list[int]:
        return sorted(self.keyframes)

    def point_ids(self) -> list[int]:
        return sorted(self.points)

    # -- keyframes ----------------------------------------------------------

    def insert_keyframe(self, frame: Frame) -> int:
        """Add a tracked frame as keyframe, link its matched points, connect it to the graph."""
        with self.lock:
            kid = self._next_kf
            self._next_kf += 1
            pose = frame.pose if frame.pose is not None else Pose.identity()
            kf = KeyFrame(kid, frame.kind, pose, frame.features, frame.camera,
                          np.full(len(frame.features), -1, dtype=np.int64), frame.timestamp, frame.index)
            if self.vocabulary is not None:
                kf.bow = frame.bow if frame.bow is not None else self.vocabulary.transform(frame.features.desc)
            self.keyframes[kid] = kf
            if self.origin_id is None:
                self.origin_id = kid
            for i, pid in enumerate(frame.point_ids):
                pid = int(pid)
                if pid >= 0 and pid in self.points and kf.point_ids[i] < 0:
                    p = self.points[pid]
                    if kid not in p.observations:
                        self._link(p, kf, i)
            counts = self._shared_counts(kid)
            if kid != self.origin_id:
                if counts:
                    kf.parent = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))[0]
                else:
                    kf.parent = max(k for k in self.keyframes if k != kid)
                self.keyframes[kf.parent].children.add(kid)
            self._set_edges(kid, counts)
            for pid in set(int(p) for p in kf.point_ids if p >= 0):
                self._update_point_geometry(self.points[pid])
            if kf.bow is not None:
                self.index.add(kid, kf.bow)
            self.reference[kf.kind] = kid
            self.keyframe_count += 1
            self._bump()
            return kid

    def _shared_counts(self, kid) -> dict:
        kf = self.keyframes[kid]
        c = Counter()
        for pid in kf.point_ids[kf.point_ids >= 0]:
            for other in self.points[int(pid)].observations:
                if other != kid:
                    c[other] += 1
        return dict(c)

    def _set_edges(self, kid, counts):
        kf = self.keyframes[kid]
        for other in list(kf.covisibility):
            self.keyframes[other].covisibility.pop(kid, None)
        kf.covisibility = {}
        for other, w in counts.items():
            if w >= self.covis_threshold:
                kf.covisibility[other] = w
                self.keyframes[other].covisibility[kid] = w

    def update_covisibility(self, kid: int):
        """Recompute edges of one keyframe from current observations; parent unchanged."""
        with self.lock:
            if kid in self.keyframes:
                self._set_edges(kid, self._shared_counts(kid))
                self._bump()

    def _refresh_edges(self, kf_ids):
        for k in set(kf_ids):
            if k in self.keyframes:
                self._set_edges(k, self._shared_counts(k))

    def remove_keyframe(self, kid: int):
        """Drop a keyframe, its observations, and reattach its children to its parent."""
        with self.lock:
            if kid == self.origin_id or kid not in self.keyframes:
                return False
            kf = self.keyframes[kid]
            affected = set(kf.covisibility)
            for i in np.nonzero(kf.point_ids >= 0)[0]:
                p = self.points[int(kf.point_ids[i])]
                self._unlink(p, kf, int(i))
                if not p.observations:
                    self._drop_point(p)
            for other in list(kf.covisibility):
                self.keyframes[other].covisibility.pop(kid, None)
            parent = kf.parent
            self.retired[kid] = (parent, kf.pose.compose(self.keyframes[parent].pose.inverse()))
            for c in kf.children:
                self.keyframes[c].parent = parent
                self.keyframes[parent].children.add(c)
            self.keyframes[parent].children.discard(kid)
            for l in kf.loop_edges:
                if l in self.keyframes:
                    self.keyframes[l].loop_edges.discard(kid)
            self.index.remove(kid)
            kf.bad = True
            del self.keyframes[kid]
            for kind, ref in self.reference.items():
                if ref == kid:
                    self.reference[kind] = parent
            self._refresh_edges(affected)
            self._bump()
            return True

    # -- map points ---------------------------------------------------------

    def _link(self, p: MapPoint, kf: KeyFrame, idx: int):
        p.observations[kf.id] = idx
        kf.point_ids[idx] = p.id

    def _unlink(self, p: MapPoint, kf: KeyFrame, idx: int):
        if p.observations.get(kf.id) == idx:
            del p.observations[kf.id]
        if kf.point_ids[idx] == p.id:
            kf.point_ids[idx] = -1

    def _drop_point(self, p: MapPoint):
        for k, i in list(p.observations.items()):
            kf = self.keyframes.get(k)
            if kf is not None and kf.point_ids[i] == p.id:
                kf.point_ids[i] = -1
        p.observations.clear()
        p.bad = True
        self.points.pop(p.id, None)

    def add_point(self, position, kid: int, idx: int) -> int:
        """Create a point observed by feature ``idx`` of keyframe ``kid``."""
        with self.lock:
            kf = self.keyframes[kid]
            pid = self._next_pt
            self._next_pt += 1
            position = np.asarray(position, dtype=float).copy()
            ray = position - kf.center()
            dist = float(np.linalg.norm(ray))
            d_min, d_max = distance_bounds(dist, kf.features.sigma[idx], kf.focal)
            p = MapPoint(pid, position, kf.features.desc[idx].copy(), ray / max(dist, 1e-12), d_min, d_max,
                         ref_kf=kid, created_kf=self.keyframe_count)
            self.points[pid] = p
            self._link(p, kf, idx)
            self.recent_points.append(pid)
            self._bump()
            return pid

    def add_observation(self, pid: int, kid: int, idx: int, refresh: bool = True):
        with self.lock:
            p = self.points[pid]
            kf = self.keyframes[kid]
            if kid in p.observations or kf.point_ids[idx] >= 0:
                return False
            self._link(p, kf, idx)
            if refresh:
                self._update_point_geometry(p)
                self._refresh_edges([kid])
            self._bump()
            return True

    def remove_observation(self, pid: int, kid: int, refresh: bool = True):
        with self.lock:
            p = self.points.get(pid)
            if p is None or kid not in p.observations:
                return False
            self._unlink(p, self.keyframes[kid], p.observations[kid])
            if not p.observations:
                self._drop_point(p)
            else:
                if p.ref_kf == kid:
                    p.ref_kf = min(p.observations)
                self._update_point_geometry(p)
            if refresh:
                self._refresh_edges([kid] + list(p.observations))
            self._bump()
            return True

    def remove_point(self, pid: int):
        with self.lock:
            p = self.points.get(pid)
            if p is None:
                return False
            affected = list(p.observations)
            self._drop_point(p)
            self._refresh_edges(affected)
            self._bump()
            return True

    def replace_point(self, old: int, new: int):
        """Merge ``old`` into ``new``; observations of ``old`` move over unless ``new`` already has that keyframe."""
        with self.lock:
            if old == new or old not in self.points or new not in self.points:
                return False
            po, pn = self.points[old], self.points[new]
            affected = set(po.observations) | set(pn.observations)
            for k, i in list(po.observations.items()):
                kf = self.keyframes[k]
                self._unlink(po, kf, i)
                if k not in pn.observations:
                    self._link(pn, kf, i)
            pn.visible += po.visible
            pn.found += po.found
            self._drop_point(po)
            self._update_point_geometry(pn)
            self._refresh_edges(affected)
            self._bump()
            return True

    def set_point_position(self, pid: int, position):
        with self.lock:
            self.points[pid].position = np.asarray(position, dtype=float).copy()
            self._update_point_geometry(self.points[pid])
            self._bump()

    def _update_point_geometry(self, p: MapPoint):
        """Refresh normal, distance bounds and representative descriptor from observations."""
        if not p.observations:
            return
        if p.ref_kf not in p.observations:
            p.ref_kf = min(p.observations)
        normals = []
        descs = []
        for k, i in p.observations.items():
            kf = self.keyframes[k]
            v = p.position - kf.center()
            normals.append(v / max(np.linalg.norm(v), 1e-12))
            descs.append(kf.features.desc[i])
        n = np.sum(normals, axis=0)
        p.normal = n / max(np.linalg.norm(n), 1e-12)
        ref = self.keyframes[p.ref_kf]
        i = p.observations[p.ref_kf]
        dist = float(np.linalg.norm(p.position - ref.center()))
        p.d_min, p.d_max = distance_bounds(dist, ref.features.sigma[i], ref.focal)
        if len(descs) <= 2:
            p.descriptor = np.asarray(descs[0], dtype=np.float32).copy()
            return
        D = np.asarray(descs, dtype=np.float32)
        dd = np.linalg.norm(D[:, None, :] - D[None, :, :], axis=2)
        p.descriptor = D[int(np.argmin(np.median(dd, axis=1)))].copy()

    def increase_visible(self, pids, n: int = 1):
        for pid in pids:
            p = self.points.get(int(pid))
            if p is not None:
                p.visible += n

    def increase_found(self, pids, n: int = 1):
        for pid in pids:
            p = self.points.get(int(pid))
            if p is not None:
                p.found += n

    # -- geometry queries ---------------------------------------------------

    def resolve_pose(self, kid: int) -> Pose | None:
        """Current pose of a keyframe, following retired keyframes up to a live ancestor."""
        rel = Pose.identity()
        seen = set()
        while kid not in self.keyframes:
            if kid in seen or kid not in self.retired:
                return None
            seen.add(kid)
            parent, r = self.retired[kid]
            rel = rel.compose(r)
            kid = parent
        return rel.compose(self.keyframes[kid].pose)

    def project_points(self, pose: Pose, camera, pids):
        """Pixel predictions ``(uv, predicted level, visible mask)`` for map points seen from ``pose``."""
        pids = np.asarray(pids, dtype=np.int64)
        if len(pids) == 0:
            return np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, bool)
        X = np.array([self.points[int(p)].position for p in pids])
        pc = pose.transform(X)
        model = intrinsic_model(camera)
        uv, ok = model.project_batch(pc)
        if not isinstance(model, FisheyeModel):
            ok &= pc[:, 2] > 0
        ok &= model.in_image(uv)
        dist = np.linalg.norm(pc, axis=1)
        f = focal_of(camera)
        dmax = np.array([self.points[int(p)].d_max for p in pids])
        dmin = np.array([self.points[int(p)].d_min for p in pids])
        ok &= (dist <= 1.2 * dmax * f) & (dist >= 0.8 * dmin * f)
        normals = np.array([self.points[int(p)].normal for p in pids])
        view = (X - pose.center()) / np.maximum(dist, 1e-12)[:, None]
        ok &= np.sum(view * normals, axis=1) >= 0.5
        level = scale_level(dmax * f / np.maximum(dist, 1e-12))
        return uv, level, ok

    def point_array(self, pids) -> np.ndarray:
        return np.array([self.points[int(p)].position for p in pids]).reshape(-1, 3)

    def descriptor_array(self, pids) -> np.ndarray:
        return np.array([self.points[int(p)].descriptor for p in pids], dtype=np.float32).reshape(-1, 128)

    # -- windows ------------------------------------------------------------

    def local_window(self, kid: int, cap: int | None = None):
        """``(K_L, K_F, P_L)``: keyframe plus best covisibles, their points, and fixed observers."""
        with self.lock:
            cap = self.window_cap if cap is None else cap
            kf = self.keyframes[kid]
            K_L = [kid] + [k for k in kf.best_covisibles(cap - 1 if cap else None) if k in self.keyframes]
            pset = set()
            for k in K_L:
                pk = self.keyframes[k].point_ids
                pset.update(int(p) for p in pk[pk >= 0])
            P_L = sorted(pset)
            kl = set(K_L)
            kfix = set()
            for p in P_L:
                kfix.update(k for k in self.points[p].observations if k not in kl)
            return K_L, sorted(kfix), P_L

    def covisible_group(self, kid: int) -> list[int]:
        return [kid] + self.keyframes[kid].best_covisibles()

    def shared_points(self, a: int, b: int) -> int:
        pa = self.keyframes[a].point_ids
        pb = self.keyframes[b].point_ids
        return len(set(pa[pa >= 0].tolist()) & set(pb[pb >= 0].tolist()))

    # -- residual assembly --------------------------------------------------

    def residual_block(self, kf_ids, pids):
        """Residuals of points ``pids`` in keyframes ``kf_ids`` (indices into those lists)."""
        kpos = {k: i for i, k in enumerate(kf_ids)}
        kinds, obs, fr, pt, info, links = [], [], [], [], [], []
        for j, pid in enumerate(pids):
            for k, idx in self.points[pid].observations.items():
                i = kpos.get(k)
                if i is None:
                    continue
                kf = self.keyframes[k]
                kinds.append(kf.residual_kinds()[idx] if kf.kind != "fisheye" else FISHEYE)
                obs.append((kf.features.u[idx], kf.features.v[idx], kf.features.right_u[idx]))
                fr.append(i)
                pt.append(j)
                info.append(1.0 / kf.features.sigma[idx] ** 2)
                links.append((pid, k))
        block = ResidualBlock(np.array(kinds, dtype=np.int8), np.array(obs, dtype=float).reshape(-1, 3), fr, pt, info)
        return block, links

    # -- map point creation -------------------------------------------------

    def create_stereo_points(self, kid: int) -> int:
        """Back-project every unmatched valid-disparity feature of a stereo keyframe."""
        with self.lock:
            kf = self.keyframes[kid]
            if kf.kind != "stereo":
                return 0
            n = self._create_stereo_points(kf)
            self._refresh_edges([kid])
            self._bump()
            return n

    def create_map_points(self, kid: int, n_neighbors: int = 10, ratio: float = 0.8,
                          max_distance: float = 0.7, min_parallax_deg: float = 1.0, stereo: bool = True) -> int:
        """Triangulate new points for a fresh keyframe; returns the count created."""
        with self.lock:
            kf = self.keyframes[kid]
            created = 0
            if stereo and kf.kind == "stereo":
                created += self._create_stereo_points(kf)
            neighbors = kf.best_covisibles(n_neighbors)
            if len(neighbors) < n_neighbors:
                # include recent keyframes of either kind so fresh cross-kind views can triangulate
                extra = [k for k in sorted(self.keyframes, reverse=True) if k != kid and k not in neighbors]
                shared = [(self.shared_points(kid, k), -k, k) for k in extra[: 3 * n_neighbors]]
                shared = [s for s in shared if s[0] > 0]
                neighbors += [k for _, _, k in sorted(shared, reverse=True)[: n_neighbors - len(neighbors)]]
            for nb in neighbors:
                created += self._create_two_view_points(kf, self.keyframes[nb], ratio, max_distance, min_parallax_deg)
            self._refresh_edges([kid] + neighbors)
            self._bump()
            return created

    def _create_stereo_points(self, kf: KeyFrame) -> int:
        f = kf.features
        rig = kf.camera
        free = (kf.point_ids < 0) & np.isfinite(f.right_u)
        idx = np.nonzero(free)[0]
        if len(idx) == 0:
            return 0
        pts, ok = triangulate_stereo_batch(f.u[idx], f.v[idx], f.right_u[idx], rig)
        # depth beyond 40 baselines is too uncertain to seed the map
        ok &= pts[:, 2] < 40 * rig.baseline
        inv = kf.pose.inverse()
        Xw = inv.transform(pts[ok])
        for i, X in zip(idx[ok], Xw):
            self.add_point(X, kf.id, int(i))
        return int(ok.sum())

    def _create_two_view_points(self, a: KeyFrame, b: KeyFrame, ratio, max_distance, min_parallax_deg) -> int:
        fa, fb = a.features, b.features
        ia = np.nonzero(a.point_ids < 0)[0]
        ib = np.nonzero(b.point_ids < 0)[0]
        if len(ia) == 0 or len(ib) == 0:
            return 0
        baseline = np.linalg.norm(a.center() - b.center())
        if baseline < 1e-3:
            return 0
        ra = unproject_batch(a.camera, fa.uv[ia])
        rb = unproject_batch(b.camera, fb.uv[ib])
        # pose of b expressed in a
        T_ab = a.pose.compose(b.pose.inverse())
        t = T_ab.t
        rb_in_a = rb @ T_ab.R.T
        nrm = np.cross(t[None, :], rb_in_a)
        nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
        sin_err = np.abs(ra @ nrm.T)  # (na, nb)
        # angular tolerance of three pixel sigmas in the coarser camera
        tol = 3.0 * np.maximum(fa.sigma[ia][:, None] / a.focal, fb.sigma[ib][None, :] / b.focal)
        mask = sin_err <= tol
        if not mask.any():
            return 0
        ma, mb, _ = match_descriptors(fa.desc[ia], fb.desc[ib], ratio=ratio, max_distance=max_distance,
                                      mask=mask, mutual=True)
        if len(ma) == 0:
            return 0
        Xa, ok = triangulate_two_view_batch(ra[ma], rb[mb], T_ab, min_parallax_deg)
        Xw = a.pose.inverse().transform(Xa)
        ok &= self._reprojection_ok(a, ia[ma], Xw) & self._reprojection_ok(b, ib[mb], Xw)
        # scale consistency via focal-normalized size
        da = np.linalg.norm(Xw - a.center(), axis=1) * fa.sigma[ia[ma]] / a.focal
        db = np.linalg.norm(Xw - b.center(), axis=1) * fb.sigma[ib[mb]] / b.focal
        ratio_ab = da / np.maximum(db, 1e-12)
        ok &= (ratio_ab < 1.5 * SCALE_FACTOR) & (ratio_ab > 1.0 / (1.5 * SCALE_FACTOR))
        n = 0
        for k in np.nonzero(ok)[0]:
            i, j = int(ia[ma[k]]), int(ib[mb[k]])
            if a.point_ids[i] >= 0 or b.point_ids[j] >= 0:
                continue
            pid = self.add_point(Xw[k], a.id, i)
            self._link(self.points[pid], b, j)
            self._update_point_geometry(self.points[pid])
            n += 1
        return n

    def _reprojection_ok(self, kf: KeyFrame, idx, Xw) -> np.ndarray:
        kinds = kf.residual_kinds()[idx]
        params = np.tile(camera_params(kf.camera), (len(idx), 1))
        pred, _, valid = project_residuals(kinds, params, kf.pose.transform(Xw), with_jacobian=False)
        obs = kf.observations(idx)
        e = pred - np.nan_to_num(obs)
        e[kinds != STEREO, 2] = 0.0
        chi2 = np.sum(e * e, axis=1) / kf.features.sigma[idx] ** 2
        thr = np.where(kinds == STEREO, CHI2_3DOF, CHI2_2DOF)
        return valid & (chi2 <= thr)

    def fuse(self, kid: int, targets, radius: float = 3.0, ratio: float = 1.0, max_distance: float = 0.7,
             pids=None) -> int:
        """Project points (default: those of ``kid``) into each target keyframe and merge duplicates.

        A projected point landing on a feature that already has a different
        point is merged into whichever has more observations (ties keep the
        older id); a free feature gains the observation.
        """
        from .features import match_projection_window

        with self.lock:
            if pids is None:
                pk = self.keyframes[kid].point_ids
                pids = pk[pk >= 0]
            pids = np.array(sorted(set(int(p) for p in pids)), dtype=np.int64)
            fused = 0
            for t in targets:
                if t not in self.keyframes:
                    continue
                kf = self.keyframes[t]
                cand = np.array([p for p in pids if p in self.points and t not in self.points[p].observations], dtype=np.int64)
                if len(cand) == 0:
                    continue
                uv, lev, ok = self.project_points(kf.pose, kf.camera, cand)
                cand, uv, lev = cand[ok], uv[ok], lev[ok]
                if len(cand) == 0:
                    continue
                pi, fi, _ = match_projection_window(uv, lev, self.descriptor_array(cand), kf.features, radius=radius,
                                                    ratio=ratio, max_distance=max_distance, level_gate=2)
                if len(pi) == 0:
                    continue
                good = self._reprojection_ok(kf, fi, self.point_array(cand[pi]))
                for a, b in zip(cand[pi][good], fi[good]):
                    a, b = int(a), int(b)
                    if a not in self.points or t in self.points[a].observations:
                        continue
                    other = int(kf.point_ids[b])
                    if other >= 0:
                        if other == a or other not in self.points:
                            continue
                        na, no = len(self.points[a].observations), len(self.points[other].observations)
                        keep, drop = (a, other) if (na, -a) > (no, -other) else (other, a)
                        self.replace_point(drop, keep)
                    else:
                        self._link(self.points[a], kf, b)
                        self._update_point_geometry(self.points[a])
                    fused += 1
            self._refresh_edges(set(targets) | {kid})
            self._bump()
            return fused

    # -- culling ------------------------------------------------------------

    def cull_points(self, current_kf: int | None = None, grace: int = 3, min_ratio: float = 0.25, min_obs: int = 3) -> int:
        """Remove recent points that are rarely re-found or weakly observed after the grace period."""
        with self.lock:
            removed = 0
            keep = []
            now = self.keyframe_count
            for pid in self.recent_points:
                p = self.points.get(pid)
                if p is None:
                    continue
                age = now - p.created_kf
                if p.found_ratio < min_ratio:
                    self.remove_point(pid)
                    removed += 1
                elif age >= grace and len(p.observations) < min_obs:
                    self.remove_point(pid)
                    removed += 1
                elif age < grace:
                    keep.append(pid)
            self.recent_points = keep
            if removed:
                self._bump()
            return removed

    def cull_keyframes(self, kid: int, redundancy: float = 0.9, min_observers: int = 3, protected=()) -> list[int]:
        """Remove covisible neighbors of ``kid`` whose points are mostly seen elsewhere at same-or-finer scale."""
        with self.lock:
            removed = []
            protect = {self.origin_id, kid, *self.reference.values(), *protected}
            for nb in list(self.keyframes[kid].best_covisibles()):
                if nb in protect or nb not in self.keyframes:
                    continue
                kf = self.keyframes[nb]
                idx = np.nonzero(kf.point_ids >= 0)[0]
                if len(idx) == 0:
                    continue
                redundant = 0
                for i in idx:
                    p = self.points[int(kf.point_ids[i])]
                    if len(p.observations) <= min_observers:
                        continue
                    lev = scale_level(kf.features.sigma[i])
                    seen = 0
                    for k, j in p.observations.items():
                        if k == nb:
                            continue
                        if scale_level(self.keyframes[k].features.sigma[j]) <= lev + 1:
                            seen += 1
                            if seen >= min_observers:
                                break
                    if seen >= min_observers:
                        redundant += 1
                if redundant >= redundancy * len(idx):
                    if self.remove_keyframe(nb):
                        removed.append(nb)
            return removed

    def cull(self, kid: int | None = None):
        """Point culling followed by keyframe culling around ``kid``; returns both removal counts."""
        with self.lock:
            pts = self.cull_points()
            kfs = self.cull_keyframes(kid) if kid is not None and kid in self.keyframes else []
            return pts, len(kfs)

    # -- spanning tree ------------------------------------------------------

    def apply_corrections(self, poses: dict, points: dict | None = None):
        """Write optimized poses/points and propagate the change to keyframes not in ``poses``.

        Keyframes missing from ``poses`` (created while the optimizer ran) are
        moved rigidly with their nearest optimized ancestor so the
        parent-relative pose is preserved. Points not in ``points`` follow
        their reference keyframe's correction.
        """
        with self.lock:
            before = {k: kf.pose for k, kf in self.keyframes.items()}
            moved = set()
            for k in self._tree_order():
                kf = self.keyframes[k]
                if k in poses:
                    kf.pose = poses[k]
                    moved.add(k)
                elif kf.parent in moved:
                    # keep the parent-relative pose: T_new = T_old * T_parent_old^-1 * T_parent_new
                    pk = kf.parent
                    kf.pose = before[k].compose(before[pk].inverse().compose(self.keyframes[pk].pose))
                    moved.add(k)
            points = points or {}
            for pid, p in self.points.items():
                if pid in points:
                    p.position = np.asarray(points[pid], dtype=float).copy()
                elif p.ref_kf in moved and p.ref_kf not in poses:
                    old, new = before[p.ref_kf], self.keyframes[p.ref_kf].pose
                    p.position = new.inverse().transform(old.transform(p.position))
            for p in self.points.values():
                self._update_point_geometry(p)
            self._bump()

    def propagate_spanning_tree(self, optimized: dict, points: dict | None = None):
        """Alias with the name used by the back end."""
        self.apply_corrections(optimized, points)

    def _tree_order(self) -> list[int]:
        out = []
        if self.origin_id is None:
            return out
        stack = [self.origin_id]
        while stack:
            k = stack.pop()
            out.append(k)
            stack.extend(sorted(self.keyframes[k].children, reverse=True))
        return out

    # -- audit --------------------------------------------------------------

    def audit(self) -> list[str]:
        """Invariant violations (empty when consistent)."""
        errs = []
        with self.lock:
            for pid, p in self.points.items():
                if not p.observations:
                    errs.append(f"point {pid} has no observations")
                for k, i in p.observations.items():
                    kf = self.keyframes.get(k)
                    if kf is None:
                        errs.append(f"point {pid} observed by missing keyframe {k}")
                    elif kf.point_ids[i] != pid:
                        errs.append(f"point {pid} -> kf {k}[{i}] not mirrored")
                if not p.d_min < p.d_max:
                    errs.append(f"point {pid} distance bounds not ordered")
            for k, kf in self.keyframes.items():
                for i in np.nonzero(kf.point_ids >= 0)[0]:
                    pid = int(kf.point_ids[i])
                    p = self.points.get(pid)
                    if p is None or p.observations.get(k) != i:
                        errs.append(f"kf {k}[{i}] -> point {pid} not mirrored")
                counts = self._shared_counts(k)
                expect = {o: w for o, w in counts.items() if w >= self.covis_threshold}
                if expect != kf.covisibility:
                    errs.append(f"kf {k} covisibility mismatch")
                if k == self.origin_id:
                    if kf.parent is not None:
                        errs.append("origin has a parent")
                elif kf.parent not in self.keyframes:
                    errs.append(f"kf {k} parent {kf.parent} missing")
                elif k not in self.keyframes[kf.parent].children:
                    errs.append(f"kf {k} not among its parent's children")
                for c in kf.children:
                    if c not in self.keyframes or self.keyframes[c].parent != k:
                        errs.append(f"kf {k} child {c} inconsistent")
            order = self._tree_order()
            if len(order) != len(self.keyframes) or len(set(order)) != len(order):
                errs.append("spanning tree does not span the keyframes acyclically")
        return errs

    # -- export -------------------------------------------------------------

    def dump(self) -> str:
        """Text dump: one ``keyframe`` line per keyframe and one ``point`` line per map point."""
        lines = ["# hybridslam map v1",
                 "# keyframe <id> <kind> <timestamp> <tx ty tz qx qy qz qw world-to-camera> <parent or -1>",
                 "# point <id> <x y z> <n_obs> <kf:feature>..."]
        with self.lock:
            for k in sorted(self.keyframes):
                kf = self.keyframes[k]
                t, q = kf.pose.t, kf.pose.q
                parent = -1 if kf.parent is None else kf.parent
                lines.append(f"keyframe {k} {kf.kind} {kf.timestamp:.9f} " + " ".join(f"{x:.17g}" for x in (*t, *q)) + f" {parent}")
            for pid in sorted(self.points):
                p = self.points[pid]
                obs = " ".join(f"{k}:{i}" for k, i in sorted(p.observations.items()))
                lines.append(f"point {pid} " + " ".join(f"{x:.17g}" for x in p.position) + f" {len(p.observations)} {obs}")
        return "\n".join(lines) + "\n"
