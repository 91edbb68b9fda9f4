"""Synthetic sprite videos with a known distribution over futures, plus dataset files."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from . import records

DATASET_MAGIC = b"SVPD"
MOTION_MODES = ("per_video", "per_step")

# (dy, dx) unit moves, in the order directions are numbered
DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))
DIRECTION_NAMES = ("right", "left", "down", "up")


@dataclass(frozen=True)
class SceneSpec:
    """Rendering parameters.

    The sprite is a binary ``sprite x sprite`` square that starts centered,
    stays put for ``still_frames`` frames and then moves ``step`` pixels per
    frame along one of ``n_directions`` axis directions, clamped at the
    borders. In ``per_video`` mode one direction is drawn per video, in
    ``per_step`` mode one per transition.
    """

    height: int = 16
    width: int = 16
    sprite: int = 3
    motion: str = "per_video"
    n_directions: int = 4
    step: int = 2
    still_frames: int = 2
    jitter: bool = False
    action_conditioned: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.motion not in MOTION_MODES:
            raise ValueError(f"motion must be one of {MOTION_MODES}, got {self.motion!r}")
        if not 1 <= self.n_directions <= len(DIRECTIONS):
            raise ValueError(f"n_directions must lie in [1, {len(DIRECTIONS)}], got {self.n_directions}")
        if self.sprite < 1 or self.sprite > min(self.height, self.width):
            raise ValueError(f"sprite of side {self.sprite} does not fit a {self.height}x{self.width} frame")
        if self.step < 0 or self.still_frames < 1:
            raise ValueError("step must be >= 0 and still_frames >= 1")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line:
                continue
            key, _, raw = line.partition("=")
            if key not in kinds:
                raise ValueError(f"unknown scene key {key!r}")
            default = getattr(cls, key)
            if isinstance(default, bool):
                values[key] = raw == "True"
            elif isinstance(default, int):
                values[key] = int(raw)
            else:
                values[key] = raw
        return cls(**values)


@dataclass
class VideoDataset:
    """``frames[n, L, 1, H, W]`` in {0, 1}; ``directions[n, L-1]`` is the direction
    index used for each transition (-1 while the sprite rests); ``actions[n, L-1, 2]``
    the applied (dy, dx) displacement."""

    spec: SceneSpec
    frames: np.ndarray
    directions: np.ndarray
    ids: np.ndarray
    actions: Optional[np.ndarray] = None
    split: str = "all"

    def __len__(self):
        return self.frames.shape[0]

    @property
    def length(self) -> int:
        return self.frames.shape[1]

    def subset(self, idx, split: str) -> "VideoDataset":
        idx = np.asarray(idx, dtype=np.int64)
        acts = None if self.actions is None else self.actions[idx]
        return VideoDataset(self.spec, self.frames[idx], self.directions[idx], self.ids[idx], acts, split)


def video_rng(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, int(index)]))


def start_position(spec: SceneSpec, rng: Optional[np.random.Generator] = None) -> tuple[int, int]:
    y, x = (spec.height - spec.sprite) // 2, (spec.width - spec.sprite) // 2
    if spec.jitter:
        y = int(rng.integers(0, spec.height - spec.sprite + 1))
        x = int(rng.integers(0, spec.width - spec.sprite + 1))
    return y, x


def draw_directions(spec: SceneSpec, length: int, rng: np.random.Generator) -> np.ndarray:
    """Direction index per transition, -1 for the resting transitions."""
    out = np.full(length - 1, -1, dtype=np.int64)
    moving = slice(spec.still_frames - 1, length - 1)
    n_moving = len(range(*moving.indices(length - 1)))
    if spec.motion == "per_video":
        out[moving] = rng.integers(0, spec.n_directions)
    else:
        out[moving] = rng.integers(0, spec.n_directions, size=n_moving)
    return out


def trajectory(spec: SceneSpec, start: tuple[int, int], directions: np.ndarray) -> np.ndarray:
    """Top-left sprite positions ``[L, 2]`` after clamping."""
    ymax, xmax = spec.height - spec.sprite, spec.width - spec.sprite
    pos = [start]
    y, x = start
    for d in directions:
        if d >= 0:
            dy, dx = DIRECTIONS[d]
            y = min(max(y + dy * spec.step, 0), ymax)
            x = min(max(x + dx * spec.step, 0), xmax)
        pos.append((y, x))
    return np.array(pos, dtype=np.int64)


def render(spec: SceneSpec, positions: np.ndarray) -> np.ndarray:
    L = positions.shape[0]
    frames = np.zeros((L, 1, spec.height, spec.width), dtype=np.float32)
    s = spec.sprite
    for t, (y, x) in enumerate(positions):
        frames[t, 0, y : y + s, x : x + s] = 1.0
    return frames


def render_video(spec: SceneSpec, index: int, length: int):
    """Frames, directions and positions of video ``index`` (a pure function of its arguments)."""
    rng = video_rng(spec, index)
    start = start_position(spec, rng)
    dirs = draw_directions(spec, length, rng)
    pos = trajectory(spec, start, dirs)
    return render(spec, pos), dirs, pos


def gen_stochastic_videos(spec: SceneSpec, n: int, length: int) -> VideoDataset:
    if length < 2:
        raise ValueError("videos need at least 2 frames")
    if n < 1:
        raise ValueError("need at least one video")
    frames = np.zeros((n, length, 1, spec.height, spec.width), dtype=np.float32)
    dirs = np.zeros((n, length - 1), dtype=np.int64)
    positions = np.zeros((n, length, 2), dtype=np.int64)
    for i in range(n):
        frames[i], dirs[i], positions[i] = render_video(spec, i, length)
    actions = np.diff(positions, axis=1).astype(np.float32) if spec.action_conditioned else None
    return VideoDataset(spec, frames, dirs, np.arange(n, dtype=np.int64), actions)


def gen_actions(spec: SceneSpec, ds: VideoDataset) -> np.ndarray:
    """Applied (dy, dx) displacement between consecutive frames, ``[n, L-1, 2]``."""
    if not spec.action_conditioned:
        raise ValueError("scene is not action-conditioned")
    out = np.zeros((len(ds), ds.length - 1, 2), dtype=np.float32)
    for i, idx in enumerate(ds.ids):
        rng = video_rng(spec, idx)
        start = start_position(spec, rng)
        out[i] = np.diff(trajectory(spec, start, ds.directions[i]), axis=0)
    return out


def replay_actions(spec: SceneSpec, start: tuple[int, int], actions: np.ndarray) -> np.ndarray:
    """Render a video by applying displacement actions from ``start``."""
    pos = [np.asarray(start, dtype=np.int64)]
    for a in actions:
        pos.append(pos[-1] + np.asarray(a, dtype=np.int64))
    return render(spec, np.stack(pos))


def candidate_positions(spec: SceneSpec, t: int) -> list[tuple[int, int]]:
    """Top-left sprite positions reachable at frame ``t`` in per-video mode, one per direction."""
    start = start_position(spec)
    out = []
    for d in range(spec.n_directions):
        dirs = np.array([-1] * (spec.still_frames - 1) + [d] * max(t - spec.still_frames + 1, 0))[:t]
        out.append(tuple(int(v) for v in trajectory(spec, start, dirs)[-1]))
    return out


def split(ds: VideoDataset, fractions, seed: int) -> tuple[VideoDataset, VideoDataset, VideoDataset]:
    """Disjoint train/val/test subsets; leftover videos after flooring go to the largest fractions."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(ds)
    counts = np.floor(fr * n).astype(int)
    for k in np.argsort(-fr, kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(counts)[:-1]
    parts = np.split(perm, bounds)
    return tuple(ds.subset(np.sort(p), tag) for p, tag in zip(parts, ("train", "val", "test")))


# -- persistence ---------------------------------------------------------------


def encode_dataset(ds: VideoDataset) -> bytes:
    header = ds.spec.to_text() + f"split={ds.split}\n"
    recs = {"frames": ds.frames.astype(np.float32), "directions": ds.directions, "ids": ds.ids}
    if ds.actions is not None:
        recs["actions"] = ds.actions.astype(np.float32)
    return records.encode(records.RecordFile(DATASET_MAGIC, header.encode("utf-8"), recs))


def write_dataset(path, ds: VideoDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def read_dataset(path) -> VideoDataset:
    rf = records.read_file(path, DATASET_MAGIC)
    lines = rf.header.decode("utf-8").splitlines()
    split_tag = "all"
    kept = []
    for line in lines:
        if line.startswith("split="):
            split_tag = line[len("split=") :]
        else:
            kept.append(line)
    spec = SceneSpec.from_text("\n".join(kept))
    missing = {"frames", "directions", "ids"} - set(rf.records)
    if missing:
        raise records.FormatError(f"dataset lacks records {sorted(missing)}")
    r = rf.records
    return VideoDataset(spec, r["frames"], r["directions"], r["ids"], r.get("actions"), split_tag)


def scene_from_dict(d: dict) -> SceneSpec:
    known = {f.name for f in fields(SceneSpec)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    return replace(SceneSpec(), **d)
