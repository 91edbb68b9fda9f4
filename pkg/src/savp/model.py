"""Generator, encoder and video discriminators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .layers import (
    Conv2d,
    ConvLSTMCell,
    FCLSTMCell,
    InstanceNorm,
    Linear,
    Module,
    SpectralWeight,
    init_weight,
    spectral_normalize,
    zeros,
)
from .tensor import Tensor

LOGSIGMA_CLAMP = 10.0


@dataclass
class GeneratorConfig:
    channels: int = 1
    height: int = 16
    width: int = 16
    n_z: int = 8
    n_a: int = 0
    hidden: tuple = (8, 16, 16)
    latent_hidden: int = 8
    n_kernels: int = 6
    kernel_size: int = 5
    stochastic: bool = True

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if len(self.hidden) != 3:
            raise ValueError("generator uses exactly three conv-LSTM levels")
        if self.height % 4 or self.width % 4:
            raise ValueError("frame size must be divisible by 4 (two pooling levels)")
        if self.height < 8 or self.width < 8:
            raise ValueError("frames smaller than 8x8 leave a single pixel at the coarsest level")

    @property
    def n_components(self) -> int:
        # warped images + first frame + previous frame + synthesized frame
        return self.n_kernels + 3


@dataclass
class GeneratorState:
    lstm: list
    latent: tuple
    last_frame: Optional[Tensor]
    first_frame: Tensor


@dataclass
class LatentTrack:
    z: Tensor
    mu: Optional[Tensor] = None
    logsigma: Optional[Tensor] = None
    source: str = "prior"

    @property
    def steps(self) -> int:
        return self.z.shape[1]


def _spatial(v: Tensor, h: int, w: int) -> Tensor:
    b, n = v.shape
    return T.broadcast_to(T.reshape(v, (b, n, 1, 1)), (b, n, h, w))


class Generator(Module):
    """Recurrent CDNA-style generator.

    Three conv-LSTM levels (full, half, quarter resolution) with average-pool
    downsampling and bilinear upsampling, a skip from the first level to the
    last decoder layer, and three heads: per-sample warping kernels from the
    coarsest feature map, a sigmoid synthesis frame and a softmax compositing
    mask over ``n_kernels + 3`` candidates.
    """

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        h0, h1, h2 = cfg.hidden
        cond = cfg.latent_hidden + cfg.n_a
        C = cfg.channels
        self.latent_lstm = FCLSTMCell(cfg.n_z, cfg.latent_hidden, rng, dtype)
        self.lstm0 = ConvLSTMCell(C + cond, h0, rng, dtype=dtype)
        self.lstm1 = ConvLSTMCell(h0 + cond, h1, rng, dtype=dtype)
        self.lstm2 = ConvLSTMCell(h1 + cond, h2, rng, dtype=dtype)
        self.dec1 = Conv2d(h2 + cond, h1, 3, rng, bias=False, dtype=dtype)
        self.dec1_norm = InstanceNorm(h1, dtype)
        self.dec0 = Conv2d(h1 + h0 + cond, h0, 3, rng, bias=False, dtype=dtype)
        self.dec0_norm = InstanceNorm(h0, dtype)
        self.synth_a = Conv2d(h0, h0, 3, rng, bias=False, dtype=dtype)
        self.synth_norm = InstanceNorm(h0, dtype)
        self.synth_b = Conv2d(h0, C, 3, rng, dtype=dtype)
        self.mask_a = Conv2d(h0, h0, 3, rng, bias=False, dtype=dtype)
        self.mask_norm = InstanceNorm(h0, dtype)
        self.mask_b = Conv2d(h0, cfg.n_components, 3, rng, dtype=dtype)
        coarse = h2 * (cfg.height // 4) * (cfg.width // 4)
        self.kernel_fc = Linear(coarse, cfg.n_kernels * cfg.kernel_size**2, rng, dtype)

    def initial_state(self, first_frame: Tensor) -> GeneratorState:
        b = first_frame.shape[0]
        H, W = self.cfg.height, self.cfg.width
        sizes = [(H, W), (H // 2, W // 2), (H // 4, W // 4)]
        cells = [self.lstm0, self.lstm1, self.lstm2]
        lstm = [cell.zero_state(b, h, w, self.dtype) for cell, (h, w) in zip(cells, sizes)]
        return GeneratorState(lstm, self.latent_lstm.zero_state(b, self.dtype), None, first_frame)

    def step(self, state: GeneratorState, prev_frame: Tensor, z: Tensor, action: Optional[Tensor] = None):
        """Predict the next frame from ``prev_frame`` and one latent code.

        Returns ``(frame, new_state, diagnostics)`` where diagnostics holds the
        normalized kernels, the compositing mask and the synthesized frame.
        """
        cfg = self.cfg
        b, C, H, W = prev_frame.shape
        if (C, H, W) != (cfg.channels, cfg.height, cfg.width):
            raise ValueError(f"frame shape {prev_frame.shape[1:]} != configured {(cfg.channels, cfg.height, cfg.width)}")
        if z.shape != (b, cfg.n_z):
            raise ValueError(f"latent code shape {z.shape} != {(b, cfg.n_z)}")
        if not cfg.stochastic:
            z = Tensor(np.zeros((b, cfg.n_z), dtype=self.dtype))
        zh, zc = self.latent_lstm(z, state.latent)
        cond = zh
        if cfg.n_a:
            if action is None or action.shape != (b, cfg.n_a):
                raise ValueError(f"action-conditioned generator needs actions of shape {(b, cfg.n_a)}")
            cond = T.concat([zh, action], axis=1)

        (h0, c0), (h1, c1), (h2, c2) = state.lstm
        x = T.concat([prev_frame, _spatial(cond, H, W)], axis=1)
        h0, c0 = self.lstm0(x, (h0, c0))
        x = T.concat([T.avg_pool2d(h0, 2), _spatial(cond, H // 2, W // 2)], axis=1)
        h1, c1 = self.lstm1(x, (h1, c1))
        x = T.concat([T.avg_pool2d(h1, 2), _spatial(cond, H // 4, W // 4)], axis=1)
        h2, c2 = self.lstm2(x, (h2, c2))

        x = T.concat([T.upsample_bilinear2d(h2, 2), _spatial(cond, H // 2, W // 2)], axis=1)
        d1 = T.relu(self.dec1_norm(self.dec1(x)))
        x = T.concat([T.upsample_bilinear2d(d1, 2), h0, _spatial(cond, H, W)], axis=1)
        d0 = T.relu(self.dec0_norm(self.dec0(x)))

        synth = T.sigmoid(self.synth_b(T.relu(self.synth_norm(self.synth_a(d0)))))
        mask = T.softmax(self.mask_b(T.relu(self.mask_norm(self.mask_a(d0)))), axis=1)
        k = cfg.kernel_size
        logits = self.kernel_fc(T.reshape(h2, (b, -1)))
        kernels = T.reshape(T.softmax(T.reshape(logits, (b, cfg.n_kernels, k * k)), axis=-1), (b, cfg.n_kernels, k, k))
        for head, value in (("synthesis", synth), ("mask", mask), ("kernel", kernels)):
            if np.isnan(value.data).any():
                raise FloatingPointError(f"NaN produced by the {head} head")

        warped = T.apply_kernels(prev_frame, kernels)  # b, n_k, C, H, W
        candidates = T.concat(
            [
                warped,
                T.reshape(state.first_frame, (b, 1, C, H, W)),
                T.reshape(prev_frame, (b, 1, C, H, W)),
                T.reshape(synth, (b, 1, C, H, W)),
            ],
            axis=1,
        )
        frame = T.tensor_sum(candidates * T.reshape(mask, (b, cfg.n_components, 1, H, W)), axis=1)
        new_state = GeneratorState([(h0, c0), (h1, c1), (h2, c2)], (zh, zc), frame, state.first_frame)
        return frame, new_state, {"kernels": kernels, "mask": mask, "synth": synth}

    def rollout(
        self,
        frames,
        latents,
        context: int,
        actions=None,
        teacher_forcing: Optional[Sequence[bool]] = None,
    ) -> Tensor:
        """Predict ``x_1..x_T`` for ``T = latents.steps``.

        ``frames`` is ``[b, L, C, H, W]`` ground truth with at least
        ``context`` frames. Step ``t`` consumes ground truth ``x_t`` when
        ``t < context`` or ``teacher_forcing[t]`` holds, otherwise the previous
        prediction.
        """
        frames = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.dtype))
        z = latents.z if isinstance(latents, LatentTrack) else latents
        b, L = frames.shape[:2]
        steps = z.shape[1]
        if context < 1 or context > L:
            raise ValueError(f"context {context} must lie in [1, {L}]")
        if teacher_forcing is not None and len(teacher_forcing) != steps:
            raise ValueError(f"teacher_forcing has {len(teacher_forcing)} entries for {steps} steps")
        if actions is not None and not isinstance(actions, Tensor):
            actions = Tensor(np.asarray(actions, dtype=self.dtype))
        if actions is not None and actions.shape[1] < steps:
            raise ValueError(f"{actions.shape[1]} actions for {steps} steps")

        state = self.initial_state(frames[:, 0])
        preds = []
        prev_pred = None
        for t in range(steps):
            use_truth = t < context or (teacher_forcing is not None and teacher_forcing[t])
            if use_truth:
                if t >= L:
                    raise ValueError(f"step {t} needs ground truth frame {t} but only {L} were given")
                prev = frames[:, t]
            else:
                prev = prev_pred
            a_t = actions[:, t] if actions is not None else None
            prev_pred, state, _ = self.step(state, prev, z[:, t], a_t)
            preds.append(prev_pred)
        return T.stack(preds, axis=1)


@dataclass
class EncoderConfig:
    channels: int = 1
    n_z: int = 8
    widths: tuple = (8, 16, 32)

    def __post_init__(self):
        self.widths = tuple(self.widths)


class Encoder(Module):
    """Three stride-2 convs (instance norm, leaky ReLU), global mean, two linear heads."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        cin = 2 * cfg.channels
        self.convs = []
        self.norms = []
        for width in cfg.widths:
            self.convs.append(Conv2d(cin, width, 4, rng, stride=2, bias=False, dtype=dtype))
            self.norms.append(InstanceNorm(width, dtype))
            cin = width
        self.mu_head = Linear(cin, cfg.n_z, rng, dtype)
        self.logsigma_head = Linear(cin, cfg.n_z, rng, dtype)

    def __call__(self, x_t: Tensor, x_next: Tensor) -> tuple[Tensor, Tensor]:
        if x_t.shape != x_next.shape:
            raise ValueError(f"encoder frames differ in shape: {x_t.shape} vs {x_next.shape}")
        x = T.concat([x_t, x_next], axis=1)
        for conv, norm in zip(self.convs, self.norms):
            x = T.leaky_relu(norm(conv(x)), 0.2)
        pooled = T.tensor_mean(x, axis=(2, 3))
        mu = self.mu_head(pooled)
        logsigma = T.clip(self.logsigma_head(pooled), -LOGSIGMA_CLAMP, LOGSIGMA_CLAMP)
        return mu, logsigma

    def encode_sequence(self, frames, steps: int) -> tuple[Tensor, Tensor]:
        """Posterior parameters for every adjacent pair ``(x_t, x_t+1)``, t < steps.

        All pairs go through the network as one batch; results are ``[b, steps, n_z]``.
        """
        frames = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.dtype))
        b, L, C, H, W = frames.shape
        if L < steps + 1:
            raise ValueError(f"need {steps + 1} frames to encode {steps} transitions, got {L}")
        cur = T.reshape(frames[:, :steps], (b * steps, C, H, W))
        nxt = T.reshape(frames[:, 1 : steps + 1], (b * steps, C, H, W))
        mu, logsigma = self(cur, nxt)
        n = self.cfg.n_z
        return T.reshape(mu, (b, steps, n)), T.reshape(logsigma, (b, steps, n))


def encoder_posterior(encoder: Encoder, x_t, x_next) -> tuple[Tensor, Tensor]:
    return encoder(x_t, x_next)


def sample_latents(
    source: str,
    rng: np.random.Generator,
    shape: Optional[tuple] = None,
    mu: Optional[Tensor] = None,
    logsigma: Optional[Tensor] = None,
    dtype=np.float32,
    eps: Optional[np.ndarray] = None,
) -> LatentTrack:
    """Draw latent codes from the unit Gaussian prior or the encoder posterior.

    Prior codes are i.i.d. N(0, 1) of ``shape = (b, T, n_z)``. Posterior codes
    use ``z = mu + exp(logsigma) * eps`` so gradients reach ``mu`` and
    ``logsigma``. ``eps`` may be supplied to pin the noise.
    """
    if source == "prior":
        if shape is None:
            raise ValueError("prior sampling needs a shape")
        z = rng.standard_normal(shape).astype(dtype) if eps is None else np.asarray(eps, dtype=dtype)
        return LatentTrack(Tensor(z), source="prior")
    if source == "posterior":
        if mu is None or logsigma is None:
            raise ValueError("posterior sampling needs mu and logsigma")
        if eps is None:
            eps = rng.standard_normal(mu.shape)
        noise = Tensor(np.asarray(eps, dtype=mu.dtype))
        z = mu + T.exp(logsigma) * noise
        return LatentTrack(z, mu, logsigma, "posterior")
    raise ValueError(f"unknown latent source {source!r}")


@dataclass
class DiscriminatorConfig:
    channels: int = 1
    widths: tuple = (8, 16, 16, 32)
    power_iters: int = 1
    slope: float = 0.1

    def __post_init__(self):
        self.widths = tuple(self.widths)


class Discriminator(Module):
    """Spectrally normalized 3D-conv video classifier emitting one logit per video.

    Layers alternate 3x3x3 stride-1 and 4x4x4 stride-2 convolutions, as in
    the SNGAN stack with every filter given a time axis.
    """

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.layers = []
        self.biases = []
        self.strides = []
        cin = cfg.channels
        for i, width in enumerate(cfg.widths):
            k, s = (3, 1) if i % 2 == 0 else (4, 2)
            self.layers.append(SpectralWeight(init_weight(rng, (width, cin, k, k, k), dtype), rng))
            self.biases.append(zeros((width,), dtype))
            self.strides.append(s)
            cin = width
        self.head = SpectralWeight(init_weight(rng, (1, cin), dtype), rng)
        self.head_bias = zeros((1,), dtype)

    @property
    def min_length(self) -> int:
        return self.layers[0].weight.shape[2]

    def spectral_weights(self) -> list[SpectralWeight]:
        return list(self.layers) + [self.head]

    def __call__(self, video, update: bool = True, power_iters: Optional[int] = None) -> Tensor:
        """``video[b, T, C, H, W]`` -> logits ``[b]``.

        With zero power iterations the stored vectors are used unchanged, which
        makes the network a fixed function of its weights.
        """
        video = video if isinstance(video, Tensor) else Tensor(np.asarray(video, dtype=self.dtype))
        if video.ndim != 5:
            raise ValueError(f"discriminator expects [b, T, C, H, W], got {video.shape}")
        if video.shape[1] < self.min_length:
            raise ValueError(f"video has {video.shape[1]} frames; first 3D conv needs at least {self.min_length}")
        iters = self.cfg.power_iters if power_iters is None else power_iters
        update = update and iters > 0
        x = T.transpose(video, (0, 2, 1, 3, 4))
        for sw, bias, s in zip(self.layers, self.biases, self.strides):
            w = spectral_normalize(sw, iters, update)
            x = T.leaky_relu(T.conv3d(x, w, bias, stride=s, padding="same"), self.cfg.slope)
        pooled = T.tensor_mean(x, axis=(2, 3, 4))
        w = spectral_normalize(self.head, iters, update)
        logits = T.matmul(pooled, T.transpose(w)) + self.head_bias
        return T.reshape(logits, (video.shape[0],))


def discriminator_score(disc: Discriminator, video, **kw) -> Tensor:
    return disc(video, **kw)
