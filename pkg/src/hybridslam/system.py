"""Four-worker pipeline: tracking, local mapping, loop closing and full bundle adjustment.

In deterministic mode every worker runs to completion inline, in a fixed
round-robin order after each tracked frame, so two runs on the same input
produce identical output. Threaded mode runs local mapping, loop closing and
full BA on their own threads.
"""

from __future__ import annotations

import queue
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import EmptyWindow
from .features import FeatureSet
from .geometry import Pose, Trajectory
from .optimizer import bundle_adjust_full, bundle_adjust_local
from .place_recognition import LoopConfig, LoopDetector, close_loop
from .stereo_odometer import StereoFrame
from .tracking import PipelineConfig, Tracker
from .world_map import WorldMap


@dataclass
class FrameInput:
    """One record of a synchronized stream."""

    index: int
    timestamp: float
    kind: str
    left: FeatureSet
    right: FeatureSet | None = None


@dataclass
class HybridPair:
    timestamp: float
    stereo_index: int
    fisheye_index: int


@dataclass
class SlamOutput:
    stereo: Trajectory
    fisheye: Trajectory
    pairs: list
    n_keyframes: int
    n_points: int
    n_stereo_keyframes: int
    n_fisheye_keyframes: int
    loops: list
    fisheye_total: int
    fisheye_registered: int
    mean_tracking_ms: float
    map_dump: str = ""
    lost_frames: int = 0

    def report(self) -> dict:
        return {
            "stereo_frames": len(self.stereo),
            "fisheye_frames": self.fisheye_total,
            "fisheye_registered": self.fisheye_registered,
            "keyframes": self.n_keyframes,
            "stereo_keyframes": self.n_stereo_keyframes,
            "fisheye_keyframes": self.n_fisheye_keyframes,
            "map_points": self.n_points,
            "loop_closures": len(self.loops),
            "lost_frames": self.lost_frames,
            "mean_tracking_ms": self.mean_tracking_ms,
        }


class LocalMapper:
    """Triangulates, fuses, runs local BA and culls around each new keyframe."""

    def __init__(self, world_map: WorldMap, config: PipelineConfig):
        self.map = world_map
        self.config = config
        self.abort = threading.Event()

    def process(self, kid: int):
        m = self.map
        if kid not in m.keyframes:
            return
        m.cull_points()
        m.create_map_points(kid, stereo=False)
        with m.lock:
            if kid not in m.keyframes:
                return
            first = m.keyframes[kid].best_covisibles(10)
            second = []
            for n in first:
                second += [k for k in m.keyframes[n].best_covisibles(5) if k != kid]
            targets = list(dict.fromkeys(first + second))
        if targets:
            m.fuse(kid, targets)
            with m.lock:
                pids = set()
                for t in targets:
                    if t in m.keyframes:
                        pk = m.keyframes[t].point_ids
                        pids.update(int(p) for p in pk[pk >= 0])
            m.fuse(kid, [kid], pids=sorted(pids))
        K_L, K_F, P_L = m.local_window(kid)
        if len(K_L) + len(K_F) >= 2:
            self.abort.clear()
            try:
                bundle_adjust_local(m, K_L, K_F, P_L, abort=self.abort, iterations=self.config.local_ba_iterations)
            except EmptyWindow:
                pass
        m.cull_keyframes(kid)


class LoopCloser:
    """Detects loops on new keyframes and corrects the map, then schedules full BA."""

    def __init__(self, world_map: WorldMap, config: PipelineConfig, threaded: bool):
        self.map = world_map
        self.config = config
        self.detector = LoopDetector(LoopConfig(seed=config.ransac_seed))
        self.loops: list = []
        self.threaded = threaded
        self.ba_abort = threading.Event()
        self.ba_thread: threading.Thread | None = None
        self.full_ba_runs = 0

    def _full_ba(self):
        bundle_adjust_full(self.map, abort=self.ba_abort, iterations=self.config.full_ba_iterations)
        self.full_ba_runs += 1

    def run_full_ba(self):
        if not self.threaded:
            self._full_ba()
            return
        if self.ba_thread is not None and self.ba_thread.is_alive():
            self.ba_abort.set()
            self.ba_thread.join()
        self.ba_abort.clear()
        self.ba_thread = threading.Thread(target=self._full_ba, name="full-ba", daemon=True)
        self.ba_thread.start()

    def process(self, kid: int):
        loop = self.detector.detect(self.map, kid)
        if loop is None:
            return None
        close_loop(self.map, loop, run_full_ba=self.run_full_ba)
        self.loops.append((loop.query, loop.match, loop.inliers))
        return loop

    def join(self):
        if self.ba_thread is not None:
            self.ba_thread.join()


class SlamSystem:
    def __init__(self, rig, fisheye=None, vocabulary=None, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        self.map = WorldMap(vocabulary)
        self.rig = rig
        self.fisheye = fisheye
        self.threaded = not self.config.deterministic
        self.mapper = LocalMapper(self.map, self.config)
        self.closer = LoopCloser(self.map, self.config, self.threaded)
        self._pending: deque[int] = deque()
        self._map_q: queue.Queue = queue.Queue()
        self._loop_q: queue.Queue = queue.Queue()
        self.tracker = Tracker(self.map, rig, fisheye, self.config, on_keyframe=self._on_keyframe,
                               mapper_queue=self._queue_depth)
        self.pairs: list[HybridPair] = []
        self.fisheye_total = 0
        self.lost_frames = 0
        self._last_stereo: tuple | None = None  # (index, timestamp, ok)
        self._threads: list[threading.Thread] = []
        self._errors: list[BaseException] = []
        if self.threaded:
            self._start_threads()

    # -- scheduling ---------------------------------------------------------

    def _queue_depth(self) -> int:
        return self._map_q.qsize() if self.threaded else 0

    def _on_keyframe(self, kid: int):
        if self.threaded:
            self.mapper.abort.set()
            self._map_q.put(kid)
        else:
            self._pending.append(kid)

    def _drain(self):
        while self._pending:
            kid = self._pending.popleft()
            self.mapper.process(kid)
            if self.config.loop_closing:
                self.closer.process(kid)

    def _worker(self, q: queue.Queue, fn):
        while True:
            kid = q.get()
            if kid is None:
                q.task_done()
                return
            try:
                fn(kid)
            except BaseException as exc:  # surfaced by shutdown()
                self._errors.append(exc)
            finally:
                q.task_done()

    def _mapping_step(self, kid):
        self.mapper.process(kid)
        if self.config.loop_closing:
            self._loop_q.put(kid)

    def _start_threads(self):
        self._threads = [
            threading.Thread(target=self._worker, args=(self._map_q, self._mapping_step), name="local-mapping", daemon=True),
            threading.Thread(target=self._worker, args=(self._loop_q, self.closer.process), name="loop-closing", daemon=True),
        ]
        for t in self._threads:
            t.start()

    def shutdown(self):
        if self.threaded and self._threads:
            self._map_q.join()
            self._loop_q.join()
            self._map_q.put(None)
            self._loop_q.put(None)
            for t in self._threads:
                t.join()
            self._threads = []
        self.closer.join()
        if self._errors:
            raise self._errors[0]

    # -- frame entry points -------------------------------------------------

    def process_stereo(self, left: FeatureSet, right: FeatureSet, timestamp: float, index: int):
        res = self.tracker.track_stereo(StereoFrame(left, right, timestamp), index)
        if not res.ok and self.tracker.state.mode != "uninitialized":
            self.lost_frames += 1
        self._last_stereo = (index, timestamp, res.ok)
        if not self.threaded:
            self._drain()
        return res

    def sync_tolerance(self, stereo_period: float | None) -> float:
        if self.config.sync_tolerance is not None:
            return self.config.sync_tolerance
        return 0.5 * stereo_period if stereo_period else 1e-3

    def process_fisheye(self, features: FeatureSet, timestamp: float, index: int, tolerance: float = 1e-3):
        self.fisheye_total += 1
        last = self._last_stereo
        paired = last is not None and abs(last[1] - timestamp) <= tolerance
        ok = paired and last[2]
        res = self.tracker.track_fisheye(features, timestamp, index, stereo_ok=ok)
        if res.ok:
            self.pairs.append(HybridPair(timestamp, last[0], index))
        if not self.threaded:
            self._drain()
        return res

    def run(self, frames) -> SlamOutput:
        frames = list(frames)
        st = [f.timestamp for f in frames if f.kind == "stereo"]
        period = float(np.median(np.diff(st))) if len(st) > 1 else None
        tol = self.sync_tolerance(period)
        for f in frames:
            if f.kind == "stereo":
                self.process_stereo(f.left, f.right, f.timestamp, f.index)
            elif f.kind == "fisheye" and self.config.hybrid and self.fisheye is not None:
                self.process_fisheye(f.left, f.timestamp, f.index, tol)
        self.shutdown()
        return self.output()

    # -- results ------------------------------------------------------------

    def trajectory(self, kind: str) -> Trajectory:
        ts, poses = [], []
        with self.map.lock:
            for r in self.tracker.records:
                if r.kind != kind:
                    continue
                base = self.map.resolve_pose(r.ref_kf)
                if base is None:
                    continue
                if ts and r.timestamp <= ts[-1]:
                    continue
                ts.append(r.timestamp)
                poses.append(r.relative.compose(base))
        return Trajectory(ts, poses)

    def output(self) -> SlamOutput:
        with self.map.lock:
            kinds = [kf.kind for kf in self.map.keyframes.values()]
            dump = self.map.dump()
            n_points = len(self.map.points)
        timings = self.tracker.timings
        return SlamOutput(
            stereo=self.trajectory("stereo"),
            fisheye=self.trajectory("fisheye"),
            pairs=list(self.pairs),
            n_keyframes=len(kinds),
            n_points=n_points,
            n_stereo_keyframes=kinds.count("stereo"),
            n_fisheye_keyframes=kinds.count("fisheye"),
            loops=list(self.closer.loops),
            fisheye_total=self.fisheye_total,
            fisheye_registered=len(self.pairs),
            mean_tracking_ms=1000.0 * float(np.mean(timings)) if timings else 0.0,
            map_dump=dump,
            lost_frames=self.lost_frames,
        )


def synthetic_frames(world, hybrid: bool = False, frames=None):
    """Stream a synthetic world as interleaved stereo/fisheye records (stereo first in each pair)."""
    from .synthetic import render_frame

    n = len(world.stereo)
    frames = range(n) if frames is None else frames
    for i in frames:
        r = render_frame(world, i, "stereo")
        yield FrameInput(i, r.timestamp, "stereo", r.features, r.right)
        if hybrid and len(world.fisheye):
            f = render_frame(world, i, "fisheye")
            yield FrameInput(i, f.timestamp, "fisheye", f.features)


def pose_pairs(output: SlamOutput) -> list[tuple[float, Pose, Pose]]:
    """``(timestamp, stereo pose, fisheye pose)`` for every registered hybrid pair."""
    s = dict(zip(output.stereo.timestamps, output.stereo.poses))
    f = dict(zip(output.fisheye.timestamps, output.fisheye.poses))
    out = []
    for p in output.pairs:
        if p.timestamp in s and p.timestamp in f:
            out.append((p.timestamp, s[p.timestamp], f[p.timestamp]))
    return out
