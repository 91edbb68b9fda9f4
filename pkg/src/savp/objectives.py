"""Loss terms and their assembly into the deterministic, VAE, GAN and SAVP variants."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .model import Discriminator, Encoder, Generator, LatentTrack, sample_latents
from .tensor import Tensor

VARIANTS = ("deterministic", "vae", "gan", "savp")
RECON_NORMS = ("l1", "l2")

# lambda_kl / lambda_1 used when no explicit KL weight is configured
DEFAULT_KL_RATIO = 1e-3


@dataclass
class LossWeights:
    """Objective weights.

    ``l1`` scales the reconstruction term, ``kl`` is the final KL weight reached
    at ``kl_end`` after a linear ramp from ``kl_start``, ``gan`` scales every
    adversarial generator term.
    """

    l1: float = 1.0
    kl: float = 0.0
    gan: float = 0.0
    kl_start: int = 0
    kl_end: int = 0

    def __post_init__(self):
        if self.l1 < 0 or self.kl < 0 or self.gan < 0:
            raise ValueError(f"loss weights must be nonnegative, got l1={self.l1} kl={self.kl} gan={self.gan}")
        if self.kl_start > self.kl_end:
            raise ValueError(f"KL anneal window [{self.kl_start}, {self.kl_end}] is reversed")


@dataclass(frozen=True)
class VariantSpec:
    kind: str = "savp"
    recon: str = "l1"

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}; expected one of {VARIANTS}")
        if self.recon not in RECON_NORMS:
            raise ValueError(f"unknown reconstruction norm {self.recon!r}")

    @property
    def has_encoder(self) -> bool:
        return self.kind in ("vae", "savp")

    @property
    def has_discriminator(self) -> bool:
        return self.kind in ("gan", "savp")

    @property
    def has_vae_discriminator(self) -> bool:
        return self.kind == "savp"

    @property
    def adversarial(self) -> bool:
        return self.has_discriminator


def default_weights(kind: str, kl_start: int = 0, kl_end: int = 0) -> LossWeights:
    l1 = 100.0 if kind in ("gan", "savp") else 1.0
    kl = DEFAULT_KL_RATIO * l1 if kind in ("vae", "savp") else 0.0
    gan = 1.0 if kind in ("gan", "savp") else 0.0
    return LossWeights(l1=l1, kl=kl, gan=gan, kl_start=kl_start, kl_end=kl_end)


# -- individual terms -----------------------------------------------------------


def loss_reconstruction(target, pred: Tensor, norm: str = "l1") -> Tensor:
    """Elementwise mean of |x - x_hat| (l1) or (x - x_hat)^2 (l2)."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if target.shape != pred.shape:
        raise ValueError(f"reconstruction shapes differ: {target.shape} vs {pred.shape}")
    diff = pred - target
    if norm == "l1":
        return T.tensor_mean(T.absolute(diff))
    if norm == "l2":
        return T.tensor_mean(T.square(diff))
    raise ValueError(f"unknown norm {norm!r}")


def loss_kl(mu: Tensor, logsigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over time and latent dims, averaged over batch."""
    per = 0.5 * (T.square(mu) + T.exp(2.0 * logsigma) - 1.0 - 2.0 * logsigma)
    return T.tensor_sum(per) * (1.0 / mu.shape[0])


def loss_gan_discriminator(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Binary cross-entropy with real labelled 1 and fake 0, from logits."""
    return T.tensor_mean(T.softplus(-real_logits)) + T.tensor_mean(T.softplus(fake_logits))


def loss_gan_generator(fake_logits: Tensor) -> Tensor:
    """Non-saturating generator loss -log D(fake)."""
    return T.tensor_mean(T.softplus(-fake_logits))


def kl_anneal_weight(iteration: int, weights: LossWeights) -> float:
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    if iteration < weights.kl_start:
        return 0.0
    if iteration >= weights.kl_end:
        return weights.kl
    return weights.kl * (iteration - weights.kl_start) / (weights.kl_end - weights.kl_start)


# -- assembly -------------------------------------------------------------------


@dataclass
class Models:
    generator: Generator
    encoder: Optional[Encoder] = None
    discriminator: Optional[Discriminator] = None
    discriminator_vae: Optional[Discriminator] = None

    def named(self) -> dict:
        out = {"G": self.generator, "E": self.encoder, "D": self.discriminator, "D_vae": self.discriminator_vae}
        return {k: v for k, v in out.items() if v is not None}

    def check(self, variant: VariantSpec) -> None:
        want = {
            "E": variant.has_encoder,
            "D": variant.has_discriminator,
            "D_vae": variant.has_vae_discriminator,
        }
        have = self.named()
        for key, needed in want.items():
            if needed and key not in have:
                raise ValueError(f"variant {variant.kind!r} needs model {key}, which is missing")
            if not needed and key in have:
                raise ValueError(f"variant {variant.kind!r} does not use model {key}")


@dataclass
class Batch:
    """Ground-truth clip ``frames[b, T+1, C, H, W]`` plus optional actions ``[b, >=T, n_a]``."""

    frames: np.ndarray
    context: int
    actions: Optional[np.ndarray] = None
    teacher_forcing: Optional[np.ndarray] = None

    @property
    def steps(self) -> int:
        return self.frames.shape[1] - 1


@dataclass
class Rollouts:
    target: Tensor
    posterior: Optional[Tensor] = None
    prior: Optional[Tensor] = None
    posterior_track: Optional[LatentTrack] = None
    prior_track: Optional[LatentTrack] = None

    @property
    def main(self) -> Tensor:
        """Rollout used for reconstruction."""
        return self.posterior if self.posterior is not None else self.prior


def generate(variant: VariantSpec, batch: Batch, models: Models, rng: np.random.Generator) -> Rollouts:
    """Run the rollouts a variant needs.

    Random draws happen in a fixed order (posterior noise, then prior codes)
    so variants sharing a prefix of draws see identical codes.
    """
    G = models.generator
    dtype = G.dtype
    frames = Tensor(np.asarray(batch.frames, dtype=dtype))
    b, steps = frames.shape[0], batch.steps
    shape = (b, steps, G.cfg.n_z)
    target = frames[:, 1:]
    kw = dict(context=batch.context, actions=batch.actions, teacher_forcing=batch.teacher_forcing)
    out = Rollouts(target=target)
    if variant.has_encoder:
        mu, logsigma = models.encoder.encode_sequence(frames, steps)
        out.posterior_track = sample_latents("posterior", rng, mu=mu, logsigma=logsigma)
        out.posterior = G.rollout(frames, out.posterior_track, **kw)
    if variant.kind == "deterministic":
        out.prior_track = LatentTrack(Tensor(np.zeros(shape, dtype=dtype)), source="prior")
        out.prior = G.rollout(frames, out.prior_track, **kw)
    elif variant.has_discriminator:
        out.prior_track = sample_latents("prior", rng, shape=shape, dtype=dtype)
        out.prior = G.rollout(frames, out.prior_track, **kw)
    return out


def _real_fake_logits(disc: Discriminator, real: Tensor, fake: Tensor):
    logits = disc(T.concat([real, fake], axis=0))
    n = real.shape[0]
    return logits[:n], logits[n:]


def discriminator_losses(variant: VariantSpec, rollouts: Rollouts, models: Models) -> dict:
    """D losses on detached generator outputs."""
    losses = {}
    real = rollouts.target.detach()
    if variant.has_discriminator:
        r, f = _real_fake_logits(models.discriminator, real, rollouts.prior.detach())
        losses["D"] = loss_gan_discriminator(r, f)
    if variant.has_vae_discriminator:
        r, f = _real_fake_logits(models.discriminator_vae, real, rollouts.posterior.detach())
        losses["D_vae"] = loss_gan_discriminator(r, f)
    return losses


def generator_losses(
    variant: VariantSpec, rollouts: Rollouts, models: Models, weights: LossWeights, iteration: int
) -> tuple[Tensor, Optional[Tensor], dict]:
    """Joint generator/encoder objective plus the encoder-dependent part and term values."""
    terms: dict[str, Tensor] = {}
    terms["recon"] = loss_reconstruction(rollouts.target, rollouts.main, variant.recon)
    total = weights.l1 * terms["recon"]
    enc_part = None
    diag = {}
    if variant.has_encoder:
        terms["kl"] = loss_kl(rollouts.posterior_track.mu, rollouts.posterior_track.logsigma)
        w_kl = kl_anneal_weight(iteration, weights)
        diag["kl_weight"] = w_kl
        total = total + w_kl * terms["kl"]
        enc_part = total
    if variant.has_discriminator:
        terms["gan_g"] = loss_gan_generator(models.discriminator(rollouts.prior))
        total = total + weights.gan * terms["gan_g"]
    if variant.has_vae_discriminator:
        terms["gan_g_vae"] = loss_gan_generator(models.discriminator_vae(rollouts.posterior))
        total = total + weights.gan * terms["gan_g_vae"]
        enc_part = enc_part + weights.gan * terms["gan_g_vae"]
    diag.update({k: v.item() for k, v in terms.items()})
    diag["total"] = total.item()
    return total, enc_part, diag


@dataclass
class Objective:
    generator_loss: Tensor
    encoder_loss: Optional[Tensor]
    d_losses: dict
    diagnostics: dict = field(default_factory=dict)
    rollouts: Optional[Rollouts] = None


def assemble_objective(
    variant: VariantSpec,
    batch: Batch,
    models: Models,
    rng: np.random.Generator,
    iteration: int,
    weights: Optional[LossWeights] = None,
) -> Objective:
    """All loss terms of one variant, evaluated with the current parameters.

    deterministic: lambda_1 * recon with zero codes.
    vae: lambda_1 * recon + w_kl * KL with posterior codes.
    gan: lambda_1 * recon + lambda_gan * GAN with prior codes.
    savp: posterior rollout gives recon, KL and the D_vae term; prior rollout gives the D term.
    """
    models.check(variant)
    if weights is None:
        weights = default_weights(variant.kind)
    rollouts = generate(variant, batch, models, rng)
    d_losses = discriminator_losses(variant, rollouts, models)
    g_loss, e_loss, diag = generator_losses(variant, rollouts, models, weights, iteration)
    for name, loss in d_losses.items():
        diag[f"d_{name}"] = loss.item()
    return Objective(g_loss, e_loss, d_losses, diag, rollouts)
