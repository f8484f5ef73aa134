"""Synthetic egocentric-reach scenario generator and the dataset wire format.

Each sample is one desk-scale reach: a smooth hand path in the world frame
(the first camera frame), a slowly drifting camera pose chain, per-step
local camera coordinates, and low-resolution grayscale frames with a
Gaussian blob rendered where the hand projects. Scenes name target zones;
the seen/unseen split never shares a scene tag.

Wire format: one JSON object per line with keys
{id, scene, T, intrinsics:{fx,fy,ox,oy,w,h}, poses:[[16 doubles]...],
 points_local:[[x,y,z]...], valid_depth:[bool...], frames:[[floats]...]}
plus a manifest {n, seed, splits:{train,val,test_seen,test_unseen},
norm:{min:[3],max:[3]}}. Global points are not serialized; readers
recompute them through the pose chain. Missing depth is stored as a zero
sentinel with its validity flag cleared.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, PoseChain, project

DESK_INTRINSICS = CameraIntrinsics(fx=16.0, fy=16.0, ox=8.0, oy=8.0, width=16, height=16)

START_CENTER = np.array([0.0, 0.06, 0.30])
TARGET_ZONES = {
    "desk_left": (-0.14, 0.05, 0.45),
    "desk_right": (0.14, 0.05, 0.45),
    "shelf_low": (-0.05, 0.10, 0.55),
    "shelf_high": (0.05, -0.08, 0.55),
    "drawer": (0.0, 0.12, 0.40),
    "keyboard": (0.0, 0.08, 0.35),
    "lamp": (0.12, -0.06, 0.50),
    "monitor": (-0.10, -0.04, 0.52),
}
SCENES_SEEN = ("desk_left", "desk_right", "shelf_low", "shelf_high", "drawer", "keyboard")
SCENES_UNSEEN = ("lamp", "monitor")

PROFILES = ("min-jerk", "linear")
NORM_MARGIN = 0.05  # keep normalized targets inside the open tanh range


class ParseError(ValueError):
    """Malformed dataset line; carries the 1-based line number."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def splitmix64(x):
    """The splitmix64 finalizer; mixes a master seed with an index."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def mix_seed(master_seed, index):
    return splitmix64((int(master_seed) << 20) ^ int(index))


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to synthesize one reach clip."""

    scene: str
    start: np.ndarray
    target: np.ndarray
    duration: int
    rot_amplitude: float = 0.004     # radians per step
    trans_amplitude: float = 0.003   # meters per step
    pixel_noise: float = 0.05
    depth_dropout: float = 0.0
    profile: str = "min-jerk"
    bow: float = 0.0                 # peak lateral arc displacement (m)
    bow_dir: np.ndarray | None = None  # unit vector orthogonal to the reach
    seed: int = 0
    intrinsics: CameraIntrinsics = DESK_INTRINSICS

    def __post_init__(self):
        if self.duration < 2:
            raise ValueError("duration must be >= 2")
        if not 0.0 <= self.depth_dropout <= 1.0:
            raise ValueError("depth_dropout must be a probability")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")


@dataclass
class TrajectorySample:
    """One clip: frames, local/global points, poses, validity flags."""

    id: str
    scene: str
    frames: np.ndarray        # (T, H, W) grayscale in [0, 1]
    points_local: np.ndarray  # (T, 3) meters; invalid depth stored as z = 0
    points_global: np.ndarray  # (T, 3) meters in the first camera frame
    poses: PoseChain
    intrinsics: CameraIntrinsics
    valid_depth: np.ndarray   # (T,) bool
    horizon: int = field(init=False)

    def __post_init__(self):
        self.horizon = len(self.points_local)
        if len(self.frames) != self.horizon or len(self.valid_depth) != self.horizon:
            raise ValueError("frame/point/validity lengths differ")


def min_jerk(start, target, steps):
    """Minimum-jerk position profile from start to target over `steps` points."""
    if steps < 2:
        raise ValueError("need at least 2 steps")
    s0 = np.asarray(start, dtype=np.float64)
    s1 = np.asarray(target, dtype=np.float64)
    tau = np.arange(steps, dtype=np.float64)[:, None] / (steps - 1)
    shape = 10 * tau**3 - 15 * tau**4 + 6 * tau**5
    return s0 + (s1 - s0) * shape


def linear_path(start, target, steps):
    if steps < 2:
        raise ValueError("need at least 2 steps")
    s0 = np.asarray(start, dtype=np.float64)
    s1 = np.asarray(target, dtype=np.float64)
    tau = np.arange(steps, dtype=np.float64)[:, None] / (steps - 1)
    return s0 + (s1 - s0) * tau


def _smooth_noise(rng, steps, width=5):
    raw = rng.standard_normal((steps, 3))
    kernel = np.ones(width) / width
    return np.stack([np.convolve(raw[:, i], kernel, mode="same") for i in range(3)], axis=1)


def _small_rotation(omega):
    wx, wy, wz = omega
    r = np.array([
        [1.0, -wz, wy],
        [wz, 1.0, -wx],
        [-wy, wx, 1.0],
    ])
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def gen_camera_path(spec, steps, rng):
    """Per-step camera motion: identity first pose, then smooth small
    rotations/translations, orthonormalized per step."""
    rots = _smooth_noise(rng, steps) * spec.rot_amplitude
    trans = _smooth_noise(rng, steps) * spec.trans_amplitude
    poses = [Pose.identity()]
    for t in range(1, steps):
        if spec.rot_amplitude == 0 and spec.trans_amplitude == 0:
            poses.append(Pose.identity())
        else:
            poses.append(Pose.from_rt(_small_rotation(rots[t]), trans[t]))
    return PoseChain(poses)


def render_frame(p_local, intrinsics, size, noise, rng, blob_sigma=1.2):
    """Grayscale frame with a Gaussian blob at the projected hand position."""
    h, w = size
    uv = project(p_local, intrinsics)
    cols = np.arange(w, dtype=np.float64)[None, :]
    rows = np.arange(h, dtype=np.float64)[:, None]
    blob = np.exp(-((cols - uv[0]) ** 2 + (rows - uv[1]) ** 2) / (2 * blob_sigma**2))
    frame = blob + noise * rng.standard_normal((h, w)) if noise else blob
    return np.round(np.clip(frame, 0.0, 1.0), 6)


def gen_sample(spec, sample_id):
    """Synthesize one TrajectorySample from its spec (self-seeded)."""
    rng = np.random.default_rng([spec.seed, 1])  # distinct stream from sample_spec's
    steps = spec.duration
    path_fn = min_jerk if spec.profile == "min-jerk" else linear_path
    world = path_fn(spec.start, spec.target, steps)
    if spec.bow and spec.bow_dir is not None:
        # arc the reach sideways, peaking late (obstacle-clearing shape); the
        # progress-shaping keeps endpoint velocities at zero
        span = np.linalg.norm(spec.target - spec.start)
        progress = np.linalg.norm(world - spec.start, axis=1) / (span if span else 1.0)
        arc = np.sin(np.pi * np.clip(progress, 0, 1) ** 1.5)
        world = world + spec.bow * arc[:, None] * spec.bow_dir
    chain = gen_camera_path(spec, steps, rng)

    local = np.stack([chain.global_to_local(world[t], t + 1) for t in range(steps)])
    if np.any(local[:, 2] <= 0):
        raise ValueError(f"sample {sample_id}: hand behind camera; check scene geometry")
    size = (int(spec.intrinsics.height), int(spec.intrinsics.width))
    frames = np.stack([
        render_frame(local[t], spec.intrinsics, size, spec.pixel_noise, rng)
        for t in range(steps)
    ])

    valid = np.ones(steps, dtype=bool)
    if spec.depth_dropout > 0:
        drop = rng.random(steps) < spec.depth_dropout
        allowed = max(steps - 10, 0)  # keep the repair fit feasible
        if drop.sum() > allowed:
            on = np.flatnonzero(drop)
            drop[:] = False
            drop[on[:allowed]] = True
        valid = ~drop
    stored_local = local.copy()
    stored_local[~valid, 2] = 0.0

    return TrajectorySample(
        id=sample_id, scene=spec.scene, frames=frames,
        points_local=stored_local, points_global=world,
        poses=chain, intrinsics=spec.intrinsics, valid_depth=valid,
    )


@dataclass(frozen=True)
class GenOptions:
    """Dataset-level generation knobs (per-sample specs derive from these)."""

    t_min: int = 12
    t_max: int = 16
    rot_amplitude: float = 0.004
    trans_amplitude: float = 0.003
    pixel_noise: float = 0.05
    depth_dropout: float = 0.0
    profile: str = "min-jerk"
    bow_scale: float = 0.3  # peak arc as a fraction of the reach length
    start_jitter: float = 0.03
    target_jitter: float = 0.04
    scenes_seen: tuple = SCENES_SEEN
    scenes_unseen: tuple = SCENES_UNSEEN
    intrinsics: CameraIntrinsics = DESK_INTRINSICS
    split_counts: tuple | None = None  # (train, val, test_seen, test_unseen)

    def resolve_splits(self, n):
        if self.split_counts is not None:
            counts = tuple(int(c) for c in self.split_counts)
            if sum(counts) != n or len(counts) != 4:
                raise ValueError(f"split counts {counts} do not sum to n={n}")
            return counts
        n_unseen = max(n // 10, 1) if len(self.scenes_unseen) else 0
        n_val = max(n // 10, 1)
        n_seen_test = max(n // 10, 1)
        n_train = n - n_unseen - n_val - n_seen_test
        if n_train < 1:
            raise ValueError(f"n={n} too small to split")
        return n_train, n_val, n_seen_test, n_unseen


def _scene_arc_basis(scene):
    """Scene-characteristic arc: a fixed direction hint and relative size.

    Reaches into the same target zone clear the same clutter, so their
    lateral arcs share a direction; per-sample jitter stays small.
    """
    rng = np.random.default_rng(np.array([zlib.crc32(scene.encode()), 0xA5C]))
    hint = rng.standard_normal(3)
    return hint / np.linalg.norm(hint), rng.uniform(0.6, 1.0)


def sample_spec(opts, seed, scene):
    """Draw one sample's SceneSpec from its own seed (start, target, length, arc)."""
    rng = np.random.default_rng(seed)
    duration = int(rng.integers(opts.t_min, opts.t_max + 1))
    start = START_CENTER + rng.uniform(-opts.start_jitter, opts.start_jitter, 3)
    target = np.asarray(TARGET_ZONES[scene]) + rng.uniform(-opts.target_jitter,
                                                           opts.target_jitter, 3)
    bow = 0.0
    bow_dir = None
    if opts.profile == "min-jerk" and opts.bow_scale > 0:
        reach = target - start
        span = np.linalg.norm(reach)
        hint, amp = _scene_arc_basis(scene)
        hint = hint + 0.15 * rng.standard_normal(3)  # per-sample wobble
        raw = np.cross(reach, np.cross(hint, reach))  # project into the plane normal to the reach
        norm = np.linalg.norm(raw)
        if span > 0 and norm > 1e-9:
            bow_dir = raw / norm
            bow = opts.bow_scale * span * amp * rng.uniform(0.85, 1.15)
    return SceneSpec(
        scene=scene, start=start, target=target, duration=duration,
        rot_amplitude=opts.rot_amplitude, trans_amplitude=opts.trans_amplitude,
        pixel_noise=opts.pixel_noise, depth_dropout=opts.depth_dropout,
        profile=opts.profile, bow=bow, bow_dir=bow_dir,
        seed=seed, intrinsics=opts.intrinsics,
    )


def gen_dataset(n, master_seed, options=None):
    """Generate n samples plus the split/normalization manifest.

    Per-sample seeds mix the master seed with the sample index, so any
    subset of samples regenerates identically regardless of order.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    opts = options or GenOptions()
    n_train, n_val, n_seen_test, n_unseen = opts.resolve_splits(n)
    n_seen = n_train + n_val + n_seen_test

    samples = []
    for i in range(n):
        if i < n_seen:
            scene = opts.scenes_seen[i % len(opts.scenes_seen)]
        else:
            scene = opts.scenes_unseen[(i - n_seen) % len(opts.scenes_unseen)]
        spec = sample_spec(opts, mix_seed(master_seed, i), scene)
        samples.append(gen_sample(spec, f"s{i:05d}"))

    ids = [s.id for s in samples]
    all_global = np.concatenate([s.points_global for s in samples])
    span = all_global.max(axis=0) - all_global.min(axis=0)
    lo = all_global.min(axis=0) - NORM_MARGIN * span
    hi = all_global.max(axis=0) + NORM_MARGIN * span
    manifest = {
        "n": n,
        "seed": int(master_seed),
        "splits": {
            "train": ids[:n_train],
            "val": ids[n_train : n_train + n_val],
            "test_seen": ids[n_train + n_val : n_seen],
            "test_unseen": ids[n_seen:],
        },
        "norm": {"min": lo.tolist(), "max": hi.tolist()},
    }
    return samples, manifest


# ---------------------------------------------------------------------------
# wire format


def _sample_to_json(s):
    return {
        "id": s.id,
        "scene": s.scene,
        "T": int(s.horizon),
        "intrinsics": s.intrinsics.to_dict(),
        "poses": s.poses.to_flat(),
        "points_local": s.points_local.tolist(),
        "valid_depth": [bool(v) for v in s.valid_depth],
        "frames": s.frames.reshape(s.horizon, -1).tolist(),
    }


def _sample_from_json(doc, line_no):
    required = ("id", "scene", "T", "intrinsics", "poses", "points_local",
                "valid_depth", "frames")
    for key in required:
        if key not in doc:
            raise ParseError(line_no, f"missing key {key!r}")
    t = int(doc["T"])
    intr = CameraIntrinsics.from_dict(doc["intrinsics"])
    chain = PoseChain.from_flat(doc["poses"])
    local = np.asarray(doc["points_local"], dtype=np.float64)
    valid = np.asarray(doc["valid_depth"], dtype=bool)
    h, w = int(intr.height), int(intr.width)
    frames = np.asarray(doc["frames"], dtype=np.float64).reshape(t, h, w)
    if local.shape != (t, 3) or len(chain) != t or valid.shape != (t,):
        raise ParseError(line_no, f"inconsistent lengths for sample {doc['id']!r}")
    world = np.stack([chain.local_to_global(local[i], i + 1) for i in range(t)])
    return TrajectorySample(
        id=doc["id"], scene=doc["scene"], frames=frames, points_local=local,
        points_global=world, poses=chain, intrinsics=intr, valid_depth=valid,
    )


def write_dataset(samples, manifest, out_dir):
    """Write data.jsonl plus manifest.json; byte-stable for fixed inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "data.jsonl", "w") as f:
        for s in samples:
            f.write(json.dumps(_sample_to_json(s), separators=(",", ":")))
            f.write("\n")
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return out / "data.jsonl", out / "manifest.json"


def read_dataset(path):
    """Read a dataset directory (or a bare data.jsonl); returns (samples, manifest).

    Global points are recomputed from the stored local points and pose
    chains. Malformed lines raise ParseError with their line number.
    """
    path = Path(path)
    if path.is_dir():
        data_path, manifest_path = path / "data.jsonl", path / "manifest.json"
    else:
        data_path, manifest_path = path, path.parent / "manifest.json"
    samples = []
    with open(data_path) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, f"invalid JSON: {e}") from e
            samples.append(_sample_from_json(doc, line_no))
    manifest = None
    if manifest_path.exists():
        with open(manifest_path) as f:
            manifest = json.load(f)
    return samples, manifest


def split_samples(samples, manifest, split):
    wanted = set(manifest["splits"][split])
    return [s for s in samples if s.id in wanted]
