"""Database queries, loop detection and loop correction on top of the vocabulary."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import least_squares

from .camera_models import unproject_batch
from .errors import Diverged, InsufficientCorrespondences, NoConsensus, TooFewResiduals
from .features import match_descriptors, match_projection_window
from .geometry import Pose, quat_to_rotvec
from .optimizer import FISHEYE, MONO, STEREO, ResidualBlock, RobustConfig, optimize_pose_only
from .pnp import PnPConfig, solve_mlpnp_ransac
from .vocabulary import BowVector, InvertedIndex, Vocabulary, score, train_vocabulary

log = logging.getLogger(__name__)

__all__ = [
    "BowVector",
    "InvertedIndex",
    "LoopCandidate",
    "LoopDetector",
    "Vocabulary",
    "close_loop",
    "optimize_pose_graph",
    "query_database",
    "score",
    "train_vocabulary",
]


def query_database(world_map, bow: BowVector, query_kf: int | None = None, exclude=()):
    """Candidates scoring at least as well as the query's worst covisible neighbor."""
    with world_map.lock:
        excl = set(exclude)
        min_score = 0.0
        if query_kf is not None and query_kf in world_map.keyframes:
            kf = world_map.keyframes[query_kf]
            excl |= {query_kf} | set(kf.covisibility)
            nbs = [world_map.keyframes[k].bow for k in kf.covisibility if world_map.keyframes[k].bow is not None]
            if nbs:
                min_score = min(score(bow, b) for b in nbs)
        return world_map.index.query(bow, exclude=excl, min_score=min_score)


@dataclass
class LoopCandidate:
    query: int
    match: int
    pose: Pose  # corrected world-to-camera pose of the query keyframe
    matches: dict = field(default_factory=dict)  # query feature index -> loop map point id
    inliers: int = 0
    score: float = 0.0


@dataclass
class LoopConfig:
    consistency: int = 3
    min_inliers: int = 20
    min_keyframe_gap: int = 10
    ratio: float = 0.75
    max_distance: float = 0.7
    pnp_threshold: float = 2e-3
    seed: int = 0


class LoopDetector:
    """Keeps consistency groups across keyframe insertions and verifies candidates geometrically."""

    def __init__(self, config: LoopConfig | None = None):
        self.config = config or LoopConfig()
        self.groups: list[tuple[set, int]] = []
        self.last_loop_kf = -(10**9)

    def detect(self, world_map, kid: int) -> LoopCandidate | None:
        cfg = self.config
        with world_map.lock:
            if kid not in world_map.keyframes:
                return None
            kf = world_map.keyframes[kid]
            if kf.bow is None or len(world_map) <= 3 or kid < self.last_loop_kf + cfg.min_keyframe_gap:
                self.groups = []
                return None
            recent = {k for k in world_map.keyframes if k > kid - cfg.min_keyframe_gap}
            cands = query_database(world_map, kf.bow, kid, exclude=recent)
            # keep the best candidate per covisibility group
            scored = []
            for c, s in cands:
                group = {c} | set(world_map.keyframes[c].covisibility)
                acc = sum(sc for k, sc in cands if k in group)
                scored.append((acc, c, s, group))
        if not scored:
            self.groups = []
            return None
        best_acc = max(a for a, *_ in scored)
        scored = [x for x in scored if x[0] >= 0.75 * best_acc]
        new_groups = []
        consistent = []
        for acc, c, s, group in scored:
            count = 1
            for g, n in self.groups:
                if g & group:
                    count = max(count, n + 1)
            new_groups.append((group, count))
            if count >= cfg.consistency:
                consistent.append((acc, c, s))
        self.groups = new_groups
        consistent.sort(key=lambda x: (-x[0], x[1]))
        for _, c, s in consistent:
            loop = self.verify(world_map, kid, c)
            if loop is not None:
                loop.score = s
                self.groups = []
                self.last_loop_kf = kid
                return loop
        return None

    def verify(self, world_map, kid: int, cand: int) -> LoopCandidate | None:
        """Descriptor matching, MLPnP+RANSAC and pose-only optimization against the candidate's points."""
        cfg = self.config
        with world_map.lock:
            kf = world_map.keyframes[kid]
            ck = world_map.keyframes[cand]
            cp = ck.point_ids
            ia = np.nonzero(cp >= 0)[0]
            if len(ia) < cfg.min_inliers:
                return None
            fi, cj, _ = match_descriptors(kf.features.desc, ck.features.desc[ia], ratio=cfg.ratio,
                                          max_distance=cfg.max_distance, mutual=True)
            if len(fi) < cfg.min_inliers:
                log.debug("loop %d-%d: %d descriptor matches", kid, cand, len(fi))
                return None
            pids = cp[ia[cj]]
            X = world_map.point_array(pids)
            rays = unproject_batch(kf.camera, kf.features.uv[fi])
            try:
                res = solve_mlpnp_ransac(rays, X, PnPConfig(threshold=cfg.pnp_threshold, min_inliers=cfg.min_inliers, seed=cfg.seed))
            except (InsufficientCorrespondences, NoConsensus) as exc:
                log.debug("loop %d-%d: pnp failed on %d matches (%s)", kid, cand, len(fi), exc)
                return None
            fi, pids = fi[res.inliers], pids[res.inliers]
            pose, inl = _refine(kf, fi, world_map.point_array(pids), res.pose)
            if pose is None or inl.sum() < cfg.min_inliers:
                log.debug("loop %d-%d: pose refinement kept %d of %d", kid, cand, int(inl.sum()), len(fi))
                return None
            fi, pids = fi[inl], pids[inl]
            # expand with the candidate's neighborhood
            group = [cand] + ck.best_covisibles(10)
            gp = set()
            for g in group:
                p = world_map.keyframes[g].point_ids
                gp.update(int(x) for x in p[p >= 0])
            gp -= set(int(p) for p in pids)
            gp = np.array(sorted(gp), dtype=np.int64)
            used = np.zeros(len(kf.features), bool)
            used[fi] = True
            if len(gp):
                uv, lev, ok = world_map.project_points(pose, kf.camera, gp)
                pi, fj, _ = match_projection_window(uv[ok], lev[ok], world_map.descriptor_array(gp[ok]), kf.features,
                                                    radius=10.0, ratio=0.8, max_distance=cfg.max_distance,
                                                    available=~used)
                fi = np.concatenate([fi, fj])
                pids = np.concatenate([pids, gp[ok][pi]])
            pose2, inl = _refine(kf, fi, world_map.point_array(pids), pose)
            if pose2 is None or inl.sum() < cfg.min_inliers:
                log.debug("loop %d-%d: expanded refinement kept %d of %d", kid, cand, int(inl.sum()), len(fi))
                return None
            matches = {int(f): int(p) for f, p in zip(fi[inl], pids[inl])}
            return LoopCandidate(kid, cand, pose2, matches, int(inl.sum()))


def _refine(kf, fi, X, pose):
    f = kf.features
    if kf.kind == "fisheye":
        kinds = np.full(len(fi), FISHEYE, np.int8)
    else:
        kinds = np.where(np.isfinite(f.right_u[fi]), STEREO, MONO).astype(np.int8)
    block = ResidualBlock(kinds, np.column_stack([f.u[fi], f.v[fi], f.right_u[fi]]), np.zeros(len(fi)),
                          np.arange(len(fi)), 1.0 / f.sigma[fi] ** 2)
    try:
        res = optimize_pose_only(pose, kf.camera, X, block, RobustConfig())
    except (TooFewResiduals, Diverged):
        return None, np.zeros(len(fi), bool)
    return res.pose, res.inliers


# ---------------------------------------------------------------------------
# Pose graph
# ---------------------------------------------------------------------------


def _log_rel(Ti: Pose, Tj: Pose, Mij: Pose):
    """Residual of ``T_j T_i^-1`` against measurement ``M_ij`` as a 6-vector."""
    E = Mij.inverse().compose(Tj.compose(Ti.inverse()))
    return np.concatenate([E.t, quat_to_rotvec(E.q)])


def optimize_pose_graph(poses: dict, edges: list, fixed, iterations: int = 20) -> dict:
    """Relative-pose graph least squares; ``edges`` are ``(i, j, M_ij)`` with ``M_ij ~ T_j T_i^-1``."""
    ids = sorted(k for k in poses if k not in fixed)
    if not ids or not edges:
        return dict(poses)
    col = {k: n for n, k in enumerate(ids)}
    base = {k: poses[k] for k in poses}

    def current(x, k):
        if k in col:
            return base[k].retract(x[6 * col[k]: 6 * col[k] + 6])
        return base[k]

    def fun(x):
        return np.concatenate([_log_rel(current(x, i), current(x, j), M) for i, j, M in edges])

    rows, cols = [], []
    for e, (i, j, _) in enumerate(edges):
        for k in (i, j):
            if k in col:
                for a in range(6):
                    rows.extend([6 * e + a] * 6)
                    cols.extend(range(6 * col[k], 6 * col[k] + 6))
    sparsity = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(6 * len(edges), 6 * len(ids)))
    res = least_squares(fun, np.zeros(6 * len(ids)), jac_sparsity=sparsity, method="trf", max_nfev=iterations,
                        x_scale="jac")
    return {k: current(res.x, k) for k in poses}


# ---------------------------------------------------------------------------
# Loop correction
# ---------------------------------------------------------------------------


def close_loop(world_map, loop: LoopCandidate, run_full_ba=None, covis_min_weight: int = 100) -> dict:
    """Correct the query's covisibility group, fuse duplicated points, add the loop edge, relax the graph.

    ``run_full_ba`` (if given) is invoked afterwards; the caller decides whether
    it runs inline or on a worker. Returns the corrected poses of the group.
    """
    with world_map.lock:
        kq = world_map.keyframes[loop.query]
        T_old = {k: kf.pose for k, kf in world_map.keyframes.items()}
        group = [loop.query] + kq.best_covisibles()
        Tq_inv = kq.pose.inverse()
        corrected = {k: T_old[k].compose(Tq_inv).compose(loop.pose) for k in group}
        # move the points seen by the group rigidly with their observer
        mover = {}
        for k in group:
            kf = world_map.keyframes[k]
            for pid in kf.point_ids[kf.point_ids >= 0]:
                pid = int(pid)
                if pid in mover:
                    continue
                p = world_map.points[pid]
                p.position = corrected[k].inverse().transform(T_old[k].transform(p.position))
                mover[pid] = k
        for k in group:
            world_map.keyframes[k].pose = corrected[k]
        # fuse the loop-side matches into the older points
        for fidx, lp in loop.matches.items():
            if lp not in world_map.points:
                continue
            cur = int(kq.point_ids[fidx])
            if cur == lp:
                continue
            if cur >= 0 and cur in world_map.points:
                world_map.replace_point(cur, lp)
            elif loop.query not in world_map.points[lp].observations:
                world_map.add_observation(lp, loop.query, fidx)
        # project the loop neighborhood into the corrected group
        lk = world_map.keyframes[loop.match]
        loop_group = [loop.match] + lk.best_covisibles(10)
        lp = set()
        for k in loop_group:
            pk = world_map.keyframes[k].point_ids
            lp.update(int(x) for x in pk[pk >= 0])
        world_map.fuse(loop.query, group, radius=4.0, pids=sorted(lp))
        kq.loop_edges.add(loop.match)
        lk.loop_edges.add(loop.query)
        # pose graph: spanning tree, strong covisibility and loop edges
        edges = []
        for k, kf in world_map.keyframes.items():
            if kf.parent is not None:
                edges.append((kf.parent, k))
            for n, w in kf.covisibility.items():
                if n < k and w >= covis_min_weight:
                    edges.append((n, k))
            for n in kf.loop_edges:
                if n < k:
                    edges.append((n, k))
        edges = list(dict.fromkeys(edges))
        gset = set(group)

        def meas(i, j):
            # edges touching only one side of the correction keep their pre-loop geometry
            use_new = (i in gset) == (j in gset) or {i, j} == {loop.query, loop.match}
            Ti = world_map.keyframes[i].pose if use_new else T_old[i]
            Tj = world_map.keyframes[j].pose if use_new else T_old[j]
            return Tj.compose(Ti.inverse())

        measured = [(i, j, meas(i, j)) for i, j in edges]
        poses = {k: kf.pose for k, kf in world_map.keyframes.items()}
        before = dict(poses)
        optimized = optimize_pose_graph(poses, measured, fixed={world_map.origin_id})
        for k, T in optimized.items():
            world_map.keyframes[k].pose = T
        for pid, p in world_map.points.items():
            r = mover.get(pid, p.ref_kf)
            if r not in before or r not in optimized:
                continue
            p.position = optimized[r].inverse().transform(before[r].transform(p.position))
        for p in world_map.points.values():
            world_map._update_point_geometry(p)
        world_map._bump()
    if run_full_ba is not None:
        run_full_ba()
    return corrected
