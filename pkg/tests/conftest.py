import numpy as np
import pytest

from hybridslam.camera_models import FisheyeModel, PinholeModel, RectifiedStereoRig

# PASS/FAIL lines appended by the acceptance suite
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pinhole():
    return PinholeModel(400.0, 400.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def rig(pinhole):
    return RectifiedStereoRig(pinhole, 0.1)


@pytest.fixture
def fisheye():
    return FisheyeModel.clamped(280.0, 280.0, 511.5, 383.5, 0.02, -0.005, 0.001, -0.0002, 1024, 768)


def scene_points(rng, n, depth=(2.0, 6.0), spread=1.5):
    """Random points in front of an identity camera."""
    z = rng.uniform(*depth, n)
    xy = rng.uniform(-spread, spread, (n, 2)) * z[:, None] / 4.0
    return np.column_stack([xy, z])


@pytest.fixture(scope="session")
def line_world():
    from hybridslam.synthetic import NoiseModel, SceneSpec, generate_world

    spec = SceneSpec(trajectory="straight_line", n_frames=12, n_landmarks=6000, extent=(10.0, 6.0), seed=5,
                     noise=NoiseModel(pixel_sigma=0.5))
    return generate_world(spec)


@pytest.fixture(scope="session")
def clean_line_world():
    from hybridslam.synthetic import SceneSpec, generate_world

    spec = SceneSpec(trajectory="straight_line", n_frames=12, n_landmarks=6000, extent=(10.0, 6.0), seed=6)
    return generate_world(spec)


@pytest.fixture(scope="session")
def clean_line_run(clean_line_world):
    """Deterministic stereo run over the noiseless straight-line world."""
    from hybridslam.synthetic import descriptor_corpus
    from hybridslam.system import SlamSystem, synthetic_frames
    from hybridslam.tracking import PipelineConfig
    from hybridslam.vocabulary import train_vocabulary

    w = clean_line_world
    voc = train_vocabulary(descriptor_corpus(w, range(0, len(w), 4)), k=10, depth=2, seed=0)
    system = SlamSystem(w.rig, None, voc, PipelineConfig(deterministic=True))
    return system.run(synthetic_frames(w))

@pytest.fixture(scope="session")
def arm_world():
    from hybridslam.synthetic import SceneSpec, generate_world

    return generate_world(SceneSpec(trajectory="static_vehicle_arm_sweep", n_frames=12, n_landmarks=8000,
                                    extent=(8.0, 8.0), seed=3, hybrid=True, max_features=1000))


@pytest.fixture(scope="session")
def arm_vocab(arm_world):
    from hybridslam.synthetic import descriptor_corpus
    from hybridslam.vocabulary import train_vocabulary

    frames = range(0, len(arm_world), 3)
    corpus = descriptor_corpus(arm_world, frames) + descriptor_corpus(arm_world, frames, "fisheye")
    return train_vocabulary(corpus, k=10, depth=3, seed=0)


def make_problem(rng, n_frames=4, n_points=60, kinds=("stereo", "mono", "fisheye")):
    """Noiseless multi-view problem: ground-truth poses, cameras, points and a residual block."""
    from hybridslam.geometry import Pose, quat_from_rotvec
    from hybridslam.optimizer import ResidualBlock, KIND_NAMES

    rig = RectifiedStereoRig(PinholeModel(400.0, 400.0, 320.0, 240.0, 640, 480), 0.12)
    fish = FisheyeModel.clamped(280.0, 280.0, 511.5, 383.5, 0.02, -0.005, 0.001, -0.0002, 1024, 768)
    X = np.column_stack([rng.uniform(-1.5, 1.5, n_points), rng.uniform(-1.0, 1.0, n_points), rng.uniform(3.0, 6.0, n_points)])
    poses, cams, kind_of = [], [], []
    for i in range(n_frames):
        kind = kinds[i % len(kinds)]
        poses.append(Pose(quat_from_rotvec(rng.normal(scale=0.03, size=3)), [-0.25 * i, rng.normal(scale=0.05), 0.0]))
        cams.append({"stereo": rig, "mono": rig.left, "fisheye": fish}[kind])
        kind_of.append({"stereo": "stereo", "mono": "mono_pinhole", "fisheye": "fisheye"}[kind])
    kk, obs, fr, pt = [], [], [], []
    for i, (p, c, k) in enumerate(zip(poses, cams, kind_of)):
        z, _ = c.project_batch(p.transform(X))
        for j in range(n_points):
            o = np.full(3, np.nan)
            o[: z.shape[1]] = z[j]
            kk.append(KIND_NAMES[k])
            obs.append(o)
            fr.append(i)
            pt.append(j)
    sig = rng.uniform(1.0, 2.5, len(kk))
    block = ResidualBlock(np.array(kk), np.array(obs), fr, pt, 1.0 / sig**2)
    return poses, cams, X, block


def make_map(rng, n_frames=4, n_points=80, kinds=("stereo", "stereo", "fisheye"), vocabulary=None):
    """World map built from a noiseless ``make_problem`` scene."""
    from hybridslam.features import FeatureSet
    from hybridslam.world_map import Frame, WorldMap

    poses, cams, X, _ = make_problem(rng, n_frames, n_points, kinds)
    m = WorldMap(vocabulary)
    d = np.abs(rng.normal(size=(n_points, 128)))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pids = None
    for i, (p, c) in enumerate(zip(poses, cams)):
        z, _ = c.project_batch(p.transform(X))
        right = z[:, 2] if z.shape[1] == 3 else None
        fs = FeatureSet(z[:, 0], z[:, 1], np.full(n_points, 1.2), np.zeros(n_points), d, right)
        kind = "fisheye" if isinstance(c, FisheyeModel) else "stereo"
        fr = Frame(kind, float(i), fs, c, p, index=i)
        if pids is not None:
            fr.point_ids = np.array(pids)
        kid = m.insert_keyframe(fr)
        if pids is None:
            pids = [m.add_point(X[j], kid, j) for j in range(n_points)]
            m.update_covisibility(kid)
    return m, poses, X


def independent_audit(m) -> list[str]:
    """Invariant check that does not reuse any WorldMap bookkeeping helper."""
    errs = []
    for pid, p in m.points.items():
        for k, i in p.observations.items():
            if k not in m.keyframes or int(m.keyframes[k].point_ids[i]) != pid:
                errs.append(f"observation {pid}->{k} not mirrored")
    for k, kf in m.keyframes.items():
        for i, pid in enumerate(kf.point_ids):
            if pid >= 0 and m.points.get(int(pid)) is None:
                errs.append(f"kf {k}[{i}] points at missing {pid}")
            elif pid >= 0 and m.points[int(pid)].observations.get(k) != i:
                errs.append(f"kf {k}[{i}] not mirrored")
    sets = {k: {int(p) for p in kf.point_ids if p >= 0} for k, kf in m.keyframes.items()}
    for a in m.keyframes:
        for b in m.keyframes:
            if a == b:
                continue
            w = len(sets[a] & sets[b])
            got = m.keyframes[a].covisibility.get(b)
            want = w if w >= m.covis_threshold else None
            if got != want:
                errs.append(f"edge {a}-{b}: {got} != {want}")
    for k in m.keyframes:
        seen, cur = set(), k
        while cur is not None:
            if cur in seen or cur not in m.keyframes:
                errs.append(f"parent chain from {k} is broken")
                break
            seen.add(cur)
            cur = m.keyframes[cur].parent
        if cur is None and m.origin_id not in seen:
            errs.append(f"kf {k} does not reach the origin")
    return errs


def run_map_fuzz(seed: int, n_events: int = 500, n_feat: int = 40):
    """Apply ``n_events`` random map operations; yields ``(event, errors, version_ok)`` after each."""
    from hybridslam.features import FeatureSet
    from hybridslam.geometry import Pose, quat_from_rotvec
    from hybridslam.world_map import Frame, WorldMap

    rng = np.random.default_rng(seed)
    cam = PinholeModel(400, 400, 320, 240, 640, 480)
    m = WorldMap(covis_threshold=4)

    def frame():
        fs = FeatureSet(rng.uniform(0, 640, n_feat), rng.uniform(0, 480, n_feat),
                        rng.choice([1.0, 1.2, 1.44], n_feat), np.zeros(n_feat),
                        rng.random((n_feat, 32)))
        pose = Pose(quat_from_rotvec(rng.normal(scale=0.05, size=3)), rng.normal(scale=0.5, size=3))
        fr = Frame(rng.choice(["stereo", "fisheye"]), float(len(m.keyframes)), fs, cam, pose)
        pids = list(m.points)
        if pids:
            pick = rng.choice(pids, size=min(len(pids), int(rng.integers(0, n_feat))), replace=False)
            slots = rng.choice(n_feat, size=len(pick), replace=False)
            fr.point_ids[slots] = pick
        return fr

    def free_slot(kid):
        free = np.nonzero(m.keyframes[kid].point_ids < 0)[0]
        return int(rng.choice(free)) if len(free) else None

    def position():
        return rng.normal(size=3) + np.array([0, 0, 5.0])

    def some(d):
        return int(rng.choice(list(d))) if d else None

    m.insert_keyframe(frame())
    for _ in range(10):
        m.add_point(position(), 0, free_slot(0))
    ops = ["insert", "add_point", "add_obs", "remove_obs", "remove_point", "replace", "remove_kf",
           "covis", "cull_points", "cull_kfs", "correct", "move"]
    applied = 0
    while applied < n_events:
        op = ops[int(rng.integers(len(ops)))]
        v0 = m.version
        if op == "insert" or len(m.keyframes) < 2:
            op = "insert"
            m.insert_keyframe(frame())
        elif op == "add_point":
            k = some(m.keyframes)
            s = free_slot(k)
            if s is None:
                continue
            m.add_point(position(), k, s)
        elif op == "add_obs":
            p, k = some(m.points), some(m.keyframes)
            s = free_slot(k)
            if p is None or s is None or k in m.points[p].observations:
                continue
            m.add_observation(p, k, s)
        elif op == "remove_obs":
            p = some(m.points)
            if p is None:
                continue
            m.remove_observation(p, some(m.points[p].observations))
        elif op == "remove_point":
            p = some(m.points)
            if p is None:
                continue
            m.remove_point(p)
        elif op == "replace":
            if len(m.points) < 2:
                continue
            a, b = rng.choice(list(m.points), size=2, replace=False)
            m.replace_point(int(a), int(b))
        elif op == "remove_kf":
            k = some(set(m.keyframes) - {m.origin_id})
            m.remove_keyframe(k)
        elif op == "covis":
            m.update_covisibility(some(m.keyframes))
        elif op == "cull_points":
            m.increase_visible(list(m.points), int(rng.integers(0, 3)))
            before = m.version
            if m.cull_points() == 0:
                # nothing removed and nothing changed
                applied += 1
                yield op, independent_audit(m) + m.audit(), m.version == before
                continue
        elif op == "cull_kfs":
            k = some(m.keyframes)
            if not m.cull_keyframes(k, redundancy=0.5, min_observers=1):
                applied += 1
                yield op, independent_audit(m) + m.audit(), True
                continue
        elif op == "correct":
            sub = rng.choice(list(m.keyframes), size=max(1, len(m.keyframes) // 2), replace=False)
            m.apply_corrections({int(k): m.keyframes[int(k)].pose.compose(
                Pose(quat_from_rotvec(rng.normal(scale=0.01, size=3)), rng.normal(scale=0.01, size=3)))
                for k in sub})
        elif op == "move":
            p = some(m.points)
            if p is None:
                continue
            m.set_point_position(p, position())
        applied += 1
        yield op, independent_audit(m) + m.audit(), m.version > v0
