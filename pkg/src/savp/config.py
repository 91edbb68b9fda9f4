"""Run configuration document: scene, dataset, training and evaluation sections."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import SceneSpec, scene_from_dict
from .train import ConfigError, TrainConfig, config_digest

SECTIONS = ("seed", "scene", "data", "train", "eval")


@dataclass
class DataSettings:
    n_videos: int = 512
    length: int = 9
    fractions: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0

    def __post_init__(self):
        self.fractions = tuple(self.fractions)
        if self.n_videos < 1 or self.length < 2:
            raise ConfigError("data needs n_videos >= 1 and length >= 2")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) < 0:
            raise ConfigError(f"fractions must be three nonnegative numbers summing to 1, got {self.fractions}")


@dataclass
class EvalSettings:
    n_samples: int = 20
    best_of: int = 20
    metrics: tuple = ("psnr", "ssim", "feature")
    feature_seed: int = 1234

    def __post_init__(self):
        self.metrics = tuple(self.metrics)
        if self.n_samples < 1 or not 1 <= self.best_of:
            raise ConfigError("n_samples and best_of must be >= 1")


def derive_seed(seed: int, name: str) -> int:
    """Stable 32-bit seed for a named purpose."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


@dataclass
class RunConfig:
    """Union of every setting a pipeline run needs.

    The top-level ``seed`` feeds the scene seed (substream "data") and the
    training seed (which derives "init" and "training"); sampling uses the
    "sampling" substream.
    """

    seed: int = 0
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataSettings = field(default_factory=DataSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config document must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        scene_raw = dict(d.get("scene") or {})
        if "seed" in scene_raw:
            raise ConfigError("scene.seed is derived from the top-level seed")
        try:
            scene = scene_from_dict(scene_raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad scene section: {exc}") from exc
        scene = replace(scene, seed=derive_seed(seed, "data"))
        train_raw = dict(d.get("train") or {})
        if "seed" in train_raw:
            raise ConfigError("train.seed is derived from the top-level seed")
        train_raw["seed"] = seed
        model = dict(train_raw.get("model") or {})
        for key in ("height", "width", "n_a", "channels"):
            if key in model:
                raise ConfigError(f"train.model.{key} is determined by the scene")
        model.update(height=scene.height, width=scene.width, channels=1, n_a=2 if scene.action_conditioned else 0)
        train_raw["model"] = model
        try:
            train = TrainConfig.from_dict(train_raw)
        except TypeError as exc:
            raise ConfigError(f"bad train section: {exc}") from exc
        return cls(
            seed=seed,
            scene=scene,
            data=_section(DataSettings, d.get("data"), "data"),
            train=train,
            eval=_section(EvalSettings, d.get("eval"), "eval"),
        )

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "scene": asdict(self.scene),
            "data": {**asdict(self.data), "fractions": list(self.data.fractions)},
            "train": self.train.to_dict(),
            "eval": {**asdict(self.eval), "metrics": list(self.eval.metrics)},
        }

    def digest(self) -> str:
        return config_digest(self.to_dict())
