"""Training loop: Adam, schedules, alternating discriminator/generator updates, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import records
from .model import (
    Discriminator,
    DiscriminatorConfig,
    Encoder,
    EncoderConfig,
    Generator,
    GeneratorConfig,
)
from .objectives import (
    RECON_NORMS,
    VARIANTS,
    Batch,
    LossWeights,
    Models,
    VariantSpec,
    default_weights,
    discriminator_losses,
    generate,
    generator_losses,
)
from .tensor import Tape, Tensor, backward

CHECKPOINT_MAGIC = b"SVPC"
DTYPES = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    pass


class CheckpointMismatch(ConfigError):
    """A checkpoint was written under a different configuration."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, iteration: int, value: float):
        super().__init__(f"non-finite loss {term}={value} at iteration {iteration}")
        self.term = term
        self.iteration = iteration
        self.value = value


@dataclass
class ModelConfig:
    """Architecture sizes shared by generator, encoder and discriminators."""

    channels: int = 1
    height: int = 16
    width: int = 16
    n_a: int = 0
    n_z: int = 8
    hidden: tuple = (8, 16, 16)
    latent_hidden: int = 8
    n_kernels: int = 6
    kernel_size: int = 5
    encoder_widths: tuple = (8, 16, 32)
    disc_widths: tuple = (8, 16, 16, 32)
    power_iters: int = 1

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.encoder_widths = tuple(self.encoder_widths)
        self.disc_widths = tuple(self.disc_widths)
        sizes = (self.channels, self.height, self.width, self.n_z, self.latent_hidden, self.n_kernels, self.kernel_size)
        widths = self.hidden + self.encoder_widths + self.disc_widths
        if min(sizes + widths) < 1 or self.n_a < 0 or self.power_iters < 0:
            raise ConfigError("model sizes must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")


@dataclass
class TrainConfig:
    """Optimization settings.

    ``None`` for ``lr``, ``beta1`` or a loss weight selects the per-variant
    default: adversarial variants use lr 2e-4 and beta1 0.5, the others lr
    1e-3 and beta1 0.9.
    """

    variant: str = "savp"
    recon: str = "l1"
    iterations: int = 5000
    batch_size: int = 8
    lr: Optional[float] = None
    beta1: Optional[float] = None
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l1: Optional[float] = None
    kl: Optional[float] = None
    gan: Optional[float] = None
    kl_start: int = 1000
    kl_end: int = 2000
    sampling_start: int = 500
    sampling_end: int = 3000
    context: int = 2
    horizon: int = 8
    seed: int = 0
    checkpoint_every: int = 0
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if v is not None and not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.context < 1 or self.horizon < 1:
            raise ConfigError("context and horizon must be >= 1")
        if self.context > self.horizon:
            raise ConfigError("context longer than the horizon leaves nothing to predict")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.sampling_start > self.sampling_end:
            raise ConfigError("scheduled-sampling window is reversed")
        if self.recon not in RECON_NORMS:
            raise ConfigError(f"recon must be one of {RECON_NORMS}, got {self.recon!r}")
        spec = VariantSpec(self.variant, self.recon)
        if not spec.has_encoder and self.kl:
            raise ConfigError(f"variant {self.variant!r} has no encoder, so the KL weight must be 0")
        if not spec.has_discriminator and self.gan:
            raise ConfigError(f"variant {self.variant!r} has no discriminator, so the GAN weight must be 0")
        try:
            self.weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def adversarial(self) -> bool:
        return self.variant in ("gan", "savp")

    @property
    def base_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 2e-4 if self.adversarial else 1e-3

    @property
    def adam_beta1(self) -> float:
        if self.beta1 is not None:
            return self.beta1
        return 0.5 if self.adversarial else 0.9

    def weights(self) -> LossWeights:
        w = default_weights(self.variant)
        return LossWeights(
            l1=w.l1 if self.l1 is None else self.l1,
            kl=w.kl if self.kl is None else self.kl,
            gan=w.gan if self.gan is None else self.gan,
            kl_start=self.kl_start,
            kl_end=self.kl_end,
        )

    def variant_spec(self) -> VariantSpec:
        return VariantSpec(self.variant, self.recon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["model"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            mknown = {f.name for f in fields(ModelConfig)}
            bad = set(d["model"]) - mknown
            if bad:
                raise ConfigError(f"unknown model keys: {sorted(bad)}")
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)

    def digest(self) -> str:
        # checkpoint cadence does not change the trajectory
        d = self.to_dict()
        d.pop("checkpoint_every")
        return config_digest(d)


def config_digest(d: dict) -> str:
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# -- schedules -----------------------------------------------------------------


def lr_schedule(iteration: int, base_lr: float, iterations: int) -> float:
    """Constant for the first two thirds, then linear decay towards 0."""
    decay_start = (2 * iterations) // 3
    if iteration < decay_start:
        return base_lr
    return base_lr * (iterations - iteration) / (iterations - decay_start)


def scheduled_sampling_prob(iteration: int, start: int, end: int) -> float:
    """Probability of feeding ground truth: 1 before ``start``, 0 from ``end``, linear between."""
    if iteration <= start:
        return 1.0
    if iteration >= end:
        return 0.0
    return 1.0 - (iteration - start) / (end - start)


def teacher_forcing_flags(p: float, steps: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random(steps) < p


# -- optimizer -----------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a named parameter set."""

    def __init__(self, named_params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        """``grads`` maps parameter Tensors to arrays; missing entries count as zero."""
        for name, p in self.params.items():
            g = grads.get(p)
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def state_dict(self, prefix: str) -> dict:
        out = {f"{prefix}.step": np.array(self.t, dtype=np.int64)}
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, state: dict, prefix: str) -> None:
        self.t = int(state[f"{prefix}.step"])
        for name in self.params:
            self.m[name] = np.array(state[f"{prefix}.m.{name}"])
            self.v[name] = np.array(state[f"{prefix}.v.{name}"])


# -- model construction --------------------------------------------------------


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (data, init, training, sampling)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def build_models(cfg: TrainConfig, rng: Optional[np.random.Generator] = None) -> Models:
    rng = substream(cfg.seed, "init") if rng is None else rng
    m = cfg.model
    dtype = DTYPES[cfg.dtype]
    spec = cfg.variant_spec()
    gcfg = GeneratorConfig(
        channels=m.channels,
        height=m.height,
        width=m.width,
        n_z=m.n_z,
        n_a=m.n_a,
        hidden=m.hidden,
        latent_hidden=m.latent_hidden,
        n_kernels=m.n_kernels,
        kernel_size=m.kernel_size,
        stochastic=cfg.variant != "deterministic",
    )
    models = Models(Generator(gcfg, rng, dtype))
    if spec.has_encoder:
        models.encoder = Encoder(EncoderConfig(m.channels, m.n_z, m.encoder_widths), rng, dtype)
    dcfg = DiscriminatorConfig(m.channels, m.disc_widths, m.power_iters)
    if spec.has_discriminator:
        models.discriminator = Discriminator(dcfg, rng, dtype)
    if spec.has_vae_discriminator:
        models.discriminator_vae = Discriminator(dcfg, rng, dtype)
    return models


# -- trainer -------------------------------------------------------------------


@dataclass
class Checkpoint:
    iteration: int
    digest: str
    tensors: dict
    rng_state: dict
    config: dict = field(default_factory=dict)


class Trainer:
    """Owns models, optimizers, the training RNG and the loss log.

    ``frames`` is ``[n, L, C, H, W]`` with ``L >= horizon + 1``; training
    clips are the first ``horizon + 1`` frames of each video.
    """

    def __init__(self, cfg: TrainConfig, frames: np.ndarray, actions: Optional[np.ndarray] = None):
        self.cfg = cfg
        n, L = frames.shape[:2]
        m = cfg.model
        if L < cfg.horizon + 1:
            raise ValueError(f"videos have {L} frames; horizon {cfg.horizon} needs {cfg.horizon + 1}")
        if frames.shape[2:] != (m.channels, m.height, m.width):
            raise ValueError(f"frame shape {frames.shape[2:]} != model {(m.channels, m.height, m.width)}")
        if m.n_a and (actions is None or actions.shape[2] != m.n_a):
            raise ValueError(f"model expects {m.n_a}-dim actions")
        if cfg.adversarial and cfg.horizon < 3:
            raise ValueError("the video discriminator needs a horizon of at least 3")
        dtype = DTYPES[cfg.dtype]
        self.frames = np.ascontiguousarray(frames[:, : cfg.horizon + 1], dtype=dtype)
        self.actions = None if not m.n_a else np.ascontiguousarray(actions[:, : cfg.horizon], dtype=dtype)
        self.models = build_models(cfg)
        self.spec = cfg.variant_spec()
        self.weights = cfg.weights()
        self.optimizers = {
            name: Adam(dict(module.named_parameters()), cfg.adam_beta1, cfg.beta2, cfg.adam_eps)
            for name, module in self.models.named().items()
        }
        self.rng = substream(cfg.seed, "training")
        self.iteration = 0
        self.log: list[tuple[int, str, float]] = []

    def next_batch(self) -> Batch:
        cfg = self.cfg
        n = self.frames.shape[0]
        idx = self.rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        p = scheduled_sampling_prob(self.iteration, cfg.sampling_start, cfg.sampling_end)
        flags = teacher_forcing_flags(p, cfg.horizon, self.rng)
        actions = None if self.actions is None else self.actions[idx]
        return Batch(self.frames[idx], cfg.context, actions, flags)

    def train_step(self) -> dict:
        """One iteration; returns the scalar losses and advances the iteration counter."""
        cfg, it = self.cfg, self.iteration
        lr = lr_schedule(it, cfg.base_lr, cfg.iterations)
        batch = self.next_batch()
        with Tape():
            rollouts = generate(self.spec, batch, self.models, self.rng)
            d_losses = discriminator_losses(self.spec, rollouts, self.models)
            out = {}
            if d_losses:
                for name, loss in d_losses.items():
                    out[f"d_{name}"] = loss.item()
                self._check(out)
                total_d = sum(d_losses.values(), start=0.0)
                grads = backward(total_d)
                for name in d_losses:
                    self.optimizers[name].step(grads, lr)
            g_loss, _, diag = generator_losses(self.spec, rollouts, self.models, self.weights, it)
            out.update({k: v for k, v in diag.items() if k != "kl_weight"})
            self._check(out)
            grads = backward(g_loss)
            for name in ("G", "E"):
                if name in self.optimizers:
                    self.optimizers[name].step(grads, lr)
        for term in sorted(out):
            self.log.append((it, term, out[term]))
        self.iteration += 1
        return out

    def _check(self, losses: dict) -> None:
        for term, value in losses.items():
            if not np.isfinite(value):
                raise NonFiniteLossError(term, self.iteration, value)

    def run(self, iterations: Optional[int] = None, on_step=None) -> list[dict]:
        end = self.cfg.iterations if iterations is None else min(self.iteration + iterations, self.cfg.iterations)
        history = []
        while self.iteration < end:
            history.append(self.train_step())
            if on_step is not None:
                on_step(self)
        return history

    # -- persistence --

    def state_tensors(self) -> dict:
        out = {}
        for name, module in self.models.named().items():
            for key, value in module.state_dict().items():
                out[f"{name}.{key}"] = value
        for name, opt in self.optimizers.items():
            out.update(opt.state_dict(f"adam.{name}"))
        return out

    def checkpoint(self) -> Checkpoint:
        tensors = {k: np.array(v, copy=True) for k, v in self.state_tensors().items()}
        return Checkpoint(self.iteration, self.cfg.digest(), tensors, self.rng.bit_generator.state, self.cfg.to_dict())

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.digest != self.cfg.digest():
            raise CheckpointMismatch("checkpoint config digest does not match this configuration")
        t = ckpt.tensors
        for name, module in self.models.named().items():
            prefix = f"{name}."
            module.load_state_dict({k[len(prefix) :]: v for k, v in t.items() if k.startswith(prefix)})
        for name, opt in self.optimizers.items():
            opt.load_state_dict(t, f"adam.{name}")
        self.rng.bit_generator.state = ckpt.rng_state
        self.iteration = ckpt.iteration


def save_checkpoint(path, trainer_or_ckpt) -> None:
    ckpt = trainer_or_ckpt.checkpoint() if isinstance(trainer_or_ckpt, Trainer) else trainer_or_ckpt
    meta = {"digest": ckpt.digest, "iteration": ckpt.iteration, "config": ckpt.config}
    header = json.dumps(meta, sort_keys=True).encode()
    trailer = json.dumps(ckpt.rng_state, sort_keys=True).encode()
    records.write_file(path, records.RecordFile(CHECKPOINT_MAGIC, header, ckpt.tensors, trailer))


def load_checkpoint(path, expected_digest: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint; refuses it when ``expected_digest`` is given and differs."""
    rf = records.read_file(path, CHECKPOINT_MAGIC)
    try:
        header = json.loads(rf.header)
        rng_state = json.loads(rf.trailer)
    except json.JSONDecodeError as exc:
        raise records.FormatError(f"corrupt checkpoint metadata: {exc}") from exc
    if expected_digest is not None and header["digest"] != expected_digest:
        raise CheckpointMismatch(f"checkpoint digest {header['digest'][:12]} != expected {expected_digest[:12]}")
    return Checkpoint(int(header["iteration"]), header["digest"], rf.records, rng_state, header.get("config", {}))


def write_loss_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "term", "value"])
        for it, term, value in log:
            w.writerow([it, term, repr(float(value))])


def read_loss_log(path) -> list[tuple[int, str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[:1] != [["iter", "term", "value"]]:
        raise ValueError(f"{path} is not a loss log")
    return [(int(i), t, float(v)) for i, t, v in rows[1:]]


def sample_predictions(
    models: Models,
    frames: np.ndarray,
    context: int,
    horizon: int,
    n_samples: int,
    rng: np.random.Generator,
    actions: Optional[np.ndarray] = None,
    batch_size: int = 64,
) -> np.ndarray:
    """Prior-code rollouts ``[n_samples, n, horizon, C, H, W]`` predicting frames 1..horizon.

    Ground truth is fed for the first ``context`` steps, own predictions after.
    """
    G = models.generator
    n = frames.shape[0]
    if frames.shape[1] < context:
        raise ValueError(f"videos have {frames.shape[1]} frames, context needs {context}")
    frames = np.asarray(frames, dtype=G.dtype)
    out = np.zeros((n_samples, n, horizon) + frames.shape[2:], dtype=G.dtype)
    for s in range(n_samples):
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            z = rng.standard_normal((hi - lo, horizon, G.cfg.n_z)).astype(G.dtype)
            acts = None if actions is None else actions[lo:hi]
            pred = G.rollout(frames[lo:hi], Tensor(z), context, actions=acts)
            out[s, lo:hi] = pred.data
    return out
