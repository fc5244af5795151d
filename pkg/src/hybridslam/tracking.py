"""Frame-rate front end for the stereo rig and the wrist fisheye camera.

Stereo frames run a seven-stage cascade: odometry, pose seeding, guided
matching to the last frame, pose-only optimization, bag-of-words reference
keyframe tracking, odometry fallback, and local-window expansion. A fisheye
frame is only processed after its synchronized stereo frame tracked, and
falls back from its own reference keyframe to the stereo reference via
MLPnP before giving up.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .camera_models import unproject_batch
from .errors import (
    FisheyeUnregistered,
    InsufficientCorrespondences,
    InsufficientTracks,
    NoConsensus,
    RelocalizationFailed,
    TooFewResiduals,
    Diverged,
)
from .features import FeatureSet, match_descriptors, match_projection_window, match_stereo
from .geometry import Pose
from .optimizer import FISHEYE, MONO, STEREO, ResidualBlock, RobustConfig, optimize_pose_only
from .pnp import PnPConfig, solve_mlpnp_ransac
from .stereo_odometer import OdometerConfig, StereoFrame, estimate_ego_motion, track_circular
from .world_map import Frame, WorldMap

UNINITIALIZED = "uninitialized"
TRACKING = "tracking"
LOST_STEREO = "lost_stereo"
LOST_FISHEYE = "lost_fisheye_only"


@dataclass
class PipelineConfig:
    max_features: int = 4000
    init_fraction: float = 0.08
    min_matches_track: int = 20
    min_matches_bow: int = 15
    min_matches_local: int = 30
    keyframe_ratio: float = 0.9
    keyframe_gap: int = 5
    keyframe_min_tracked: int = 50
    max_mapping_queue: int = 3
    radius_last: float = 15.0
    radius_local: float = 8.0
    ratio: float = 0.8
    bow_ratio: float = 0.75
    max_descriptor_distance: float = 0.7
    epipolar_tol: float = 1.0
    local_keyframes: int = 80
    odometer_iterations: int = 200
    odometer_threshold: float = 1.5
    pnp_threshold: float = 2e-3
    ransac_seed: int = 0
    loop_closing: bool = True
    hybrid: bool = True
    deterministic: bool = True
    sync_tolerance: float | None = None  # defaults to half the stereo frame period
    full_ba_iterations: int = 20
    local_ba_iterations: int = 10

    def __post_init__(self):
        if not 0 < self.init_fraction < 1:
            raise ValueError("init_fraction must lie in (0, 1)")
        if self.max_features <= 0:
            raise ValueError("max_features must be positive")

    @classmethod
    def from_dict(cls, d: dict | None) -> PipelineConfig:
        d = dict(d or {})
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown pipeline keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def odometer(self) -> OdometerConfig:
        return OdometerConfig(iterations=self.odometer_iterations, threshold=self.odometer_threshold, seed=self.ransac_seed)

    def pnp(self) -> PnPConfig:
        return PnPConfig(threshold=self.pnp_threshold, min_inliers=self.min_matches_bow, seed=self.ransac_seed)


@dataclass
class TrackResult:
    ok: bool
    pose: Pose | None
    stage: str
    inliers: int = 0
    keyframe: int | None = None


@dataclass
class FrameRecord:
    """Frame pose stored relative to a keyframe so later map corrections carry over."""

    index: int
    timestamp: float
    kind: str
    ref_kf: int
    relative: Pose


@dataclass
class TrackingState:
    mode: str = UNINITIALIZED
    ref_stereo: int | None = None
    ref_fisheye: int | None = None
    last_stereo: Frame | None = None
    last_raw: StereoFrame | None = None
    last_fisheye: Frame | None = None
    last_motion: Pose | None = None
    since_kf: dict = field(default_factory=lambda: {"stereo": 0, "fisheye": 0})
    fisheye_lost: bool = False


def need_new_keyframe(tracked: int, ref_tracked: int, frames_since: int, config: PipelineConfig,
                      mapper_queue: int = 0) -> bool:
    """Keyframe rule: overlap drop or frame gap, with enough tracked points and mapper headroom."""
    if mapper_queue >= config.max_mapping_queue:
        return False
    low_overlap = tracked < config.keyframe_ratio * ref_tracked
    gap = frames_since >= config.keyframe_gap
    return (low_overlap or gap) and tracked > config.keyframe_min_tracked


def residual_kinds(frame: Frame, idx) -> np.ndarray:
    if frame.kind == "fisheye":
        return np.full(len(idx), FISHEYE, dtype=np.int8)
    return np.where(np.isfinite(frame.features.right_u[idx]), STEREO, MONO).astype(np.int8)


class Tracker:
    """Sequential tracking worker. Keyframes are handed to ``on_keyframe``."""

    def __init__(self, world_map: WorldMap, rig, fisheye=None, config: PipelineConfig | None = None,
                 on_keyframe=None, mapper_queue=lambda: 0):
        self.map = world_map
        self.rig = rig
        self.fisheye = fisheye
        self.config = config or PipelineConfig()
        self.state = TrackingState()
        self.on_keyframe = on_keyframe or (lambda kid: None)
        self.mapper_queue = mapper_queue
        self.robust = RobustConfig()
        self.records: list[FrameRecord] = []
        self.events: list[tuple] = []
        self.timings: list[float] = []
        self.unregistered = 0

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------

    def _bow(self, features: FeatureSet):
        voc = self.map.vocabulary
        return voc.transform(features.desc) if voc is not None else None

    def _matched(self, frame: Frame):
        idx = np.nonzero(frame.point_ids >= 0)[0]
        alive = np.array([int(frame.point_ids[i]) in self.map.points for i in idx], dtype=bool)
        frame.point_ids[idx[~alive]] = -1
        return idx[alive]

    def _optimize(self, frame: Frame) -> int:
        """Pose-only refinement on the current matches; outlier matches are dropped."""
        idx = self._matched(frame)
        if len(idx) < 3:
            return 0
        pids = frame.point_ids[idx]
        with self.map.lock:
            X = self.map.point_array(pids)
        f = frame.features
        obs = np.column_stack([f.u[idx], f.v[idx], f.right_u[idx]])
        block = ResidualBlock(residual_kinds(frame, idx), obs, np.zeros(len(idx)), np.arange(len(idx)), 1.0 / f.sigma[idx] ** 2)
        try:
            res = optimize_pose_only(frame.pose, frame.camera, X, block, self.robust)
        except (TooFewResiduals, Diverged):
            return 0
        frame.pose = res.pose
        frame.point_ids[idx[~res.inliers]] = -1
        return int(res.inliers.sum())

    def _search_projection(self, frame: Frame, pids, radius: float) -> int:
        """Guided matching of map points into unmatched features of ``frame``."""
        matched = set(frame.point_ids[frame.point_ids >= 0].tolist())
        pids = np.array([p for p in dict.fromkeys(int(x) for x in pids) if p not in matched and p in self.map.points],
                        dtype=np.int64)
        if len(pids) == 0:
            return 0
        with self.map.lock:
            uv, lev, ok = self.map.project_points(frame.pose, frame.camera, pids)
            self.map.increase_visible(pids[ok])
            desc = self.map.descriptor_array(pids[ok])
        pi, fi, _ = match_projection_window(uv[ok], lev[ok], desc, frame.features, radius=radius,
                                            ratio=self.config.ratio, max_distance=self.config.max_descriptor_distance,
                                            available=frame.point_ids < 0)
        frame.point_ids[fi] = pids[ok][pi]
        return len(pi)

    def _search_bow(self, kid: int, frame: Frame):
        """Descriptor matches between a keyframe's mapped features and the frame, grouped by vocabulary node."""
        with self.map.lock:
            if kid not in self.map.keyframes:
                return np.zeros(0, int), np.zeros(0, np.int64)
            kf = self.map.keyframes[kid]
            kp = kf.point_ids.copy()
            kbow = kf.bow
        kdesc = kf.features.desc
        fdesc = frame.features.desc
        fi_all, pid_all, d_all = [], [], []
        if kbow is not None and frame.bow is not None:
            groups = [(kbow.features[n], frame.bow.features[n]) for n in kbow.features if n in frame.bow.features]
        else:
            groups = [(np.arange(len(kp)), np.arange(len(fdesc)))]
        for ka, fb in groups:
            ka = ka[kp[ka] >= 0]
            if len(ka) == 0 or len(fb) == 0:
                continue
            fb = fb[frame.point_ids[fb] < 0]
            if len(fb) == 0:
                continue
            ib, ia, d = match_descriptors(fdesc[fb], kdesc[ka], ratio=self.config.bow_ratio,
                                          max_distance=self.config.max_descriptor_distance)
            fi_all.append(fb[ib])
            pid_all.append(kp[ka[ia]])
            d_all.append(d)
        if not fi_all:
            return np.zeros(0, int), np.zeros(0, np.int64)
        fi, pid, d = np.concatenate(fi_all), np.concatenate(pid_all), np.concatenate(d_all)
        # one feature per point: keep the closest claim
        order = np.argsort(d, kind="stable")
        _, first = np.unique(pid[order], return_index=True)
        keep = order[first]
        alive = np.array([int(p) in self.map.points for p in pid[keep]], dtype=bool)
        keep = keep[alive]
        return fi[keep], pid[keep]

    def _local_keyframes(self, frame: Frame) -> tuple[list[int], int | None]:
        """Keyframes observing the frame's matches plus their best neighbors; also the reference (argmax)."""
        counts: dict[int, int] = {}
        with self.map.lock:
            for pid in frame.point_ids[frame.point_ids >= 0]:
                p = self.map.points.get(int(pid))
                if p is None:
                    continue
                for k in p.observations:
                    counts[k] = counts.get(k, 0) + 1
            if not counts:
                return [], None
            ref = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))[0]
            local = sorted(counts, key=lambda k: (-counts[k], k))
            extra = []
            for k in local[: self.config.local_keyframes]:
                kf = self.map.keyframes[k]
                extra.extend(kf.best_covisibles(10))
                if kf.parent is not None:
                    extra.append(kf.parent)
                extra.extend(sorted(kf.children))
            out = list(dict.fromkeys(local + [k for k in extra if k in self.map.keyframes]))
            return out[: self.config.local_keyframes], ref

    def _local_points(self, kf_ids) -> np.ndarray:
        with self.map.lock:
            pts = []
            for k in kf_ids:
                pk = self.map.keyframes[k].point_ids
                pts.append(pk[pk >= 0])
        if not pts:
            return np.zeros(0, np.int64)
        return np.unique(np.concatenate(pts))

    def _track_local_window(self, frame: Frame) -> tuple[int, int | None]:
        kfs, _ = self._local_keyframes(frame)
        if kfs:
            self._search_projection(frame, self._local_points(kfs), self.config.radius_local)
        n = self._optimize(frame)
        _, ref = self._local_keyframes(frame)
        return n, ref

    def _record(self, frame: Frame, ref: int | None):
        if ref is None or frame.pose is None:
            return
        with self.map.lock:
            kp = self.map.keyframes[ref].pose
        self.records.append(FrameRecord(frame.index, frame.timestamp, frame.kind, ref, frame.pose.compose(kp.inverse())))

    def _found(self, frame: Frame):
        with self.map.lock:
            self.map.increase_found(frame.point_ids[frame.point_ids >= 0])

    def _pnp(self, frame: Frame, fi, pids) -> Pose | None:
        with self.map.lock:
            X = self.map.point_array(pids)
        rays = unproject_batch(frame.camera, frame.features.uv[fi])
        try:
            res = solve_mlpnp_ransac(rays, X, self.config.pnp())
        except (InsufficientCorrespondences, NoConsensus):
            return None
        return res.pose

    def _insert_keyframe(self, frame: Frame) -> int:
        with self.map.lock:
            kid = self.map.insert_keyframe(frame)
            if frame.kind == "stereo":
                self.map.create_stereo_points(kid)
            frame.point_ids = self.map.keyframes[kid].point_ids.copy()
        self.state.since_kf[frame.kind] = 0
        if frame.kind == "stereo":
            self.state.ref_stereo = kid
        else:
            self.state.ref_fisheye = kid
        self.on_keyframe(kid)
        return kid

    def _maybe_keyframe(self, frame: Frame, tracked: int, force: bool = False) -> int | None:
        kind = frame.kind
        self.state.since_kf[kind] += 1
        own_ref = self.state.ref_stereo if kind == "stereo" else self.state.ref_fisheye
        with self.map.lock:
            first_of_kind = self.map.reference.get(kind) is None
            if own_ref is not None and own_ref in self.map.keyframes:
                ref_tracked = self.map.keyframes[own_ref].tracked_points(2, self.map.points)
            else:
                ref_tracked = 0
        if force or first_of_kind or need_new_keyframe(tracked, ref_tracked, self.state.since_kf[kind], self.config,
                                                       self.mapper_queue()):
            return self._insert_keyframe(frame)
        return None

    # ------------------------------------------------------------------
    # stereo
    # ------------------------------------------------------------------

    def make_stereo_frame(self, raw: StereoFrame, index: int) -> Frame:
        left = raw.left.copy()
        left.right_u = match_stereo(left, raw.right, ratio=self.config.ratio, epipolar_tol=self.config.epipolar_tol)
        return Frame("stereo", raw.timestamp, left, self.rig, index=index, right=raw.right)

    def initialize(self, raw: StereoFrame, index: int) -> TrackResult:
        """First frame with enough features becomes the origin keyframe."""
        n = len(raw.left)
        if n < self.config.init_fraction * self.config.max_features:
            return TrackResult(False, None, "init_skipped")
        frame = self.make_stereo_frame(raw, index)
        frame.pose = Pose.identity()
        frame.bow = self._bow(frame.features)
        kid = self._insert_keyframe(frame)
        self.state.mode = TRACKING
        self.state.last_stereo = frame
        self.state.last_raw = raw
        self._record(frame, kid)
        return TrackResult(True, frame.pose, "init", int((frame.point_ids >= 0).sum()), kid)

    def track_stereo(self, raw: StereoFrame, index: int) -> TrackResult:
        t0 = time.perf_counter()
        try:
            if self.state.mode == UNINITIALIZED:
                res = self.initialize(raw, index)
            else:
                res = self._track_stereo(raw, index)
        finally:
            self.timings.append(time.perf_counter() - t0)
        self.events.append((index, "stereo", res.ok))
        return res

    def _track_stereo(self, raw: StereoFrame, index: int) -> TrackResult:
        cfg = self.config
        st = self.state
        frame = self.make_stereo_frame(raw, index)
        frame.bow = self._bow(frame.features)
        prev = st.last_stereo
        # (1) odometry
        motion = None
        if st.last_raw is not None:
            try:
                tracks = track_circular(st.last_raw, raw, self.rig, ratio=cfg.ratio, epipolar_tol=cfg.epipolar_tol)
                motion = estimate_ego_motion(tracks, self.rig, cfg.odometer()).motion
            except (InsufficientTracks, NoConsensus):
                motion = None
        st.last_raw = raw
        if st.mode == LOST_STEREO:
            return self._relocalize_stereo(frame)
        # (2) seed
        frame.pose = motion.compose(prev.pose) if motion is not None else prev.pose
        seed = frame.pose
        stage = None
        # (3) + (4) guided matching to the last frame, pose-only optimization
        n = self._search_projection(frame, prev.point_ids[prev.point_ids >= 0], cfg.radius_last)
        if n >= cfg.min_matches_track:
            n = self._optimize(frame)
            if n >= cfg.min_matches_track:
                stage = "last_frame"
        # (5) bag-of-words tracking against the reference keyframe
        if stage is None:
            frame.point_ids[:] = -1
            frame.pose = seed
            ref = st.ref_stereo
            fi, pids = self._search_bow(ref, frame) if ref is not None else (np.zeros(0, int), None)
            if len(fi) >= cfg.min_matches_bow:
                frame.point_ids[fi] = pids
                n = self._optimize(frame)
                if n >= cfg.min_matches_bow:
                    stage = "reference_keyframe"
        # (6) odometry fallback
        if stage is None:
            if motion is None:
                st.mode = LOST_STEREO
                self._found(frame)
                return TrackResult(False, None, "lost")
            frame.pose = seed
            frame.point_ids[:] = -1
            stage = "odometry"
        # (7) local window expansion
        pose_before = frame.pose
        ids_before = frame.point_ids.copy()
        n, ref = self._track_local_window(frame)
        if n < cfg.min_matches_local:
            if stage == "odometry":
                frame.pose, frame.point_ids = pose_before, ids_before
                ref = st.ref_stereo if st.ref_stereo in self.map.keyframes else self.map.reference.get("stereo")
            else:
                # guided stages succeeded but the window did not confirm; keep what stages 3-5 found
                frame.pose, frame.point_ids = pose_before, ids_before
                _, ref = self._local_keyframes(frame)
                if ref is None:
                    ref = st.ref_stereo
        self._found(frame)
        st.last_motion = motion
        if ref is not None and ref in self.map.keyframes:
            st.ref_stereo = ref
        tracked = int((frame.point_ids >= 0).sum())
        kid = self._maybe_keyframe(frame, tracked, force=(stage == "odometry" and n < cfg.min_matches_local))
        self._record(frame, kid if kid is not None else st.ref_stereo)
        st.last_stereo = frame
        return TrackResult(True, frame.pose, stage, tracked, kid)

    def _relocalize_stereo(self, frame: Frame) -> TrackResult:
        try:
            self.relocalize(frame)
        except RelocalizationFailed:
            return TrackResult(False, None, "lost")
        st = self.state
        st.mode = TRACKING
        _, ref = self._local_keyframes(frame)
        if ref is not None:
            st.ref_stereo = ref
        self._found(frame)
        tracked = int((frame.point_ids >= 0).sum())
        kid = self._maybe_keyframe(frame, tracked)
        self._record(frame, kid if kid is not None else st.ref_stereo)
        st.last_stereo = frame
        return TrackResult(True, frame.pose, "relocalized", tracked, kid)

    # ------------------------------------------------------------------
    # relocalization
    # ------------------------------------------------------------------

    def relocalize(self, frame: Frame, extra_candidates=()) -> Pose:
        """Place-recognition candidates, MLPnP+RANSAC, then pose-only optimization and window expansion."""
        cfg = self.config
        cands = list(extra_candidates)
        with self.map.lock:
            if frame.bow is not None and len(self.map.index):
                hits = self.map.index.query(frame.bow)
                if hits:
                    best = hits[0][1]
                    cands += [k for k, s in hits if s >= 0.75 * best][:10]
            else:
                cands += sorted(self.map.keyframes, reverse=True)[:10]
        for kid in dict.fromkeys(cands):
            if kid is None or kid not in self.map.keyframes:
                continue
            frame.point_ids[:] = -1
            fi, pids = self._search_bow(kid, frame)
            if len(fi) < cfg.min_matches_bow:
                continue
            pose = self._pnp(frame, fi, pids)
            if pose is None:
                continue
            frame.pose = pose
            frame.point_ids[fi] = pids
            n = self._optimize(frame)
            if n < cfg.min_matches_bow:
                continue
            n, _ = self._track_local_window(frame)
            if n >= cfg.min_matches_local:
                return frame.pose
        frame.point_ids[:] = -1
        raise RelocalizationFailed("no candidate keyframe verified")

    # ------------------------------------------------------------------
    # fisheye
    # ------------------------------------------------------------------

    def track_fisheye(self, features: FeatureSet, timestamp: float, index: int, stereo_ok: bool = True) -> TrackResult:
        t0 = time.perf_counter()
        try:
            if not stereo_ok or self.state.mode in (UNINITIALIZED, LOST_STEREO):
                res = TrackResult(False, None, "stereo_not_tracked")
            else:
                self.events.append((index, "fisheye", None))
                try:
                    res = self._track_fisheye(features, timestamp, index)
                except FisheyeUnregistered:
                    self.unregistered += 1
                    self.state.fisheye_lost = True
                    self.state.mode = LOST_FISHEYE
                    res = TrackResult(False, None, "unregistered")
        finally:
            self.timings.append(time.perf_counter() - t0)
        return res

    def _track_fisheye(self, features: FeatureSet, timestamp: float, index: int) -> TrackResult:
        cfg = self.config
        st = self.state
        frame = Frame("fisheye", timestamp, features, self.fisheye, index=index)
        frame.bow = self._bow(features)
        stage = None
        if st.fisheye_lost:
            try:
                self.relocalize(frame, extra_candidates=[st.ref_stereo])
                stage = "relocalized"
            except RelocalizationFailed:
                raise FisheyeUnregistered("fisheye relocalization failed")
        # (1) bag-of-words tracking to the fisheye reference keyframe
        if stage is None and st.ref_fisheye is not None and st.ref_fisheye in self.map.keyframes:
            seed = st.last_fisheye.pose if st.last_fisheye is not None else self.map.keyframes[st.ref_fisheye].pose
            fi, pids = self._search_bow(st.ref_fisheye, frame)
            if len(fi) >= cfg.min_matches_bow:
                frame.pose = seed
                frame.point_ids[fi] = pids
                n = self._optimize(frame)
                if n < cfg.min_matches_bow:
                    pose = self._pnp(frame, fi, pids)
                    frame.point_ids[:] = -1
                    if pose is not None:
                        frame.pose = pose
                        frame.point_ids[fi] = pids
                        n = self._optimize(frame)
                if n >= cfg.min_matches_bow:
                    stage = "fisheye_reference"
        # (2) stereo reference keyframe with MLPnP initialization
        if stage is None and st.ref_stereo is not None:
            frame.point_ids[:] = -1
            fi, pids = self._search_bow(st.ref_stereo, frame)
            if len(fi) >= cfg.min_matches_bow:
                pose = self._pnp(frame, fi, pids)
                if pose is not None:
                    frame.pose = pose
                    frame.point_ids[fi] = pids
                    n = self._optimize(frame)
                    if n >= cfg.min_matches_bow:
                        stage = "stereo_reference"
        if stage is None:
            raise FisheyeUnregistered("no reference keyframe registered the fisheye frame")
        # (3) local window expansion
        n, ref = self._track_local_window(frame)
        if n < cfg.min_matches_local:
            raise FisheyeUnregistered(f"only {n} local-window inliers")
        st.fisheye_lost = False
        if st.mode == LOST_FISHEYE:
            st.mode = TRACKING
        self._found(frame)
        if ref is not None:
            st.ref_fisheye = ref
        kid = self._maybe_keyframe(frame, n)
        self._record(frame, kid if kid is not None else ref)
        st.last_fisheye = frame
        return TrackResult(True, frame.pose, stage, n, kid)
