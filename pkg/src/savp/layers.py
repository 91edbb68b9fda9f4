"""Network building blocks: parameter containers, LSTM cells, spectral norm."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

# gate layout inside every LSTM pre-activation
GATES = ("input", "forget", "output", "candidate")
FORGET_BIAS = 1.0
# power iterations run when a spectrally normalized weight is created
WARMUP_ITERS = 20


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; child modules
    and lists of modules are walked recursively. Names in ``_buffers`` are
    numpy arrays that are training state but not trained (e.g. power
    iteration vectors).
    """

    _buffers: tuple = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield f"{prefix}{key}", getattr(self, key)
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]


# -- initialization ------------------------------------------------------------


def init_weight(rng: np.random.Generator, shape: tuple, dtype=np.float32, fan_in: Optional[int] = None) -> Tensor:
    """Uniform(-s, s) with s = sqrt(1 / fan_in); fan_in defaults to prod(shape[1:])."""
    if fan_in is None:
        fan_in = int(np.prod(shape[1:]))
    s = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def lstm_bias(hidden: int, dtype=np.float32) -> Tensor:
    b = np.zeros(4 * hidden, dtype=dtype)
    b[hidden : 2 * hidden] = FORGET_BIAS
    return Tensor(b, requires_grad=True)


def init_params(spec: dict, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Build a named parameter fragment from ``{name: shape}``.

    Names ending in ``bias`` start at zero, ``lstm_bias`` entries get the
    forget-gate offset, ``scale`` entries start at one, everything else is
    drawn with :func:`init_weight`.
    """
    out = {}
    for name, shape in spec.items():
        shape = tuple(shape)
        if name.endswith("lstm_bias"):
            out[name] = lstm_bias(shape[0] // 4, dtype)
        elif name.endswith("bias") or name.endswith("shift"):
            out[name] = zeros(shape, dtype)
        elif name.endswith("scale"):
            out[name] = ones(shape, dtype)
        else:
            out[name] = init_weight(rng, shape, dtype)
    return out


# -- layers --------------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, bias=True, dtype=np.float32):
        self.weight = init_weight(rng, (cout, cin, k, k), dtype)
        self.bias = zeros((cout,), dtype) if bias else None
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding="same")


class Linear(Module):
    def __init__(self, nin, nout, rng, dtype=np.float32):
        self.weight = init_weight(rng, (nin, nout), dtype, fan_in=nin)
        self.bias = zeros((nout,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class InstanceNorm(Module):
    def __init__(self, channels, dtype=np.float32, eps=1e-5):
        self.scale = ones((channels,), dtype)
        self.shift = zeros((channels,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.instance_norm(x, self.scale, self.shift, self.eps)


class ConvLSTMCell(Module):
    """Convolutional LSTM with instance-normalized gate and cell pre-activations.

    ``weight`` convolves the concatenation ``[input, hidden]`` (input channels
    first) into the four gate maps. ``bias`` is applied after normalization,
    since a pre-norm bias would be cancelled, and carries the forget offset.
    The returned cell state is the normalized one.
    """

    def __init__(self, in_channels, hidden, rng, kernel=3, dtype=np.float32, eps=1e-5):
        self.in_channels = in_channels
        self.hidden = hidden
        self.weight = init_weight(rng, (4 * hidden, in_channels + hidden, kernel, kernel), dtype)
        self.gate_scale = ones((4 * hidden,), dtype)
        self.bias = lstm_bias(hidden, dtype)
        self.cell_scale = ones((hidden,), dtype)
        self.cell_shift = zeros((hidden,), dtype)
        self.eps = eps

    def zero_state(self, batch, height, width, dtype=np.float32):
        z = np.zeros((batch, self.hidden, height, width), dtype=dtype)
        return Tensor(z), Tensor(z.copy())

    def __call__(self, x: Tensor, state) -> tuple[Tensor, Tensor]:
        h, c = state
        if x.shape[2:] != h.shape[2:] or x.shape[0] != h.shape[0]:
            raise ValueError(f"ConvLSTM input {x.shape} does not match state {h.shape}")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"ConvLSTM expects {self.in_channels} input channels, got {x.shape[1]}")
        n = self.hidden
        pre = T.conv2d(T.concat([x, h], axis=1), self.weight, padding="same")
        pre = T.instance_norm(pre, self.gate_scale, self.bias, self.eps)
        gates = T.sigmoid(pre[:, : 3 * n])
        cand = T.tanh(pre[:, 3 * n :])
        i, f, o = gates[:, :n], gates[:, n : 2 * n], gates[:, 2 * n :]
        c_next = f * c + i * cand
        c_next = T.instance_norm(c_next, self.cell_scale, self.cell_shift, self.eps)
        h_next = o * T.tanh(c_next)
        return h_next, c_next


class FCLSTMCell(Module):
    """Plain fully-connected LSTM (no normalization)."""

    def __init__(self, in_size, hidden, rng, dtype=np.float32):
        self.in_size = in_size
        self.hidden = hidden
        self.weight = init_weight(rng, (in_size + hidden, 4 * hidden), dtype, fan_in=in_size + hidden)
        self.bias = lstm_bias(hidden, dtype)

    def zero_state(self, batch, dtype=np.float32):
        z = np.zeros((batch, self.hidden), dtype=dtype)
        return Tensor(z), Tensor(z.copy())

    def __call__(self, x: Tensor, state) -> tuple[Tensor, Tensor]:
        h, c = state
        if x.ndim != 2 or x.shape[1] != self.in_size or h.shape[0] != x.shape[0]:
            raise ValueError(f"FCLSTM input {x.shape} incompatible with in_size {self.in_size} / state {h.shape}")
        n = self.hidden
        pre = T.matmul(T.concat([x, h], axis=1), self.weight) + self.bias
        gates = T.sigmoid(pre[:, : 3 * n])
        cand = T.tanh(pre[:, 3 * n :])
        i, f, o = gates[:, :n], gates[:, n : 2 * n], gates[:, 2 * n :]
        c_next = f * c + i * cand
        h_next = o * T.tanh(c_next)
        return h_next, c_next


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(np.linalg.norm(v), 1e-12)


class SpectralWeight(Module):
    """Raw weight plus persistent power-iteration vectors.

    The weight is viewed as a matrix ``[out, rest]``; ``u`` has length ``out``
    and ``v`` length ``rest``. ``warmup`` power iterations run at construction
    so the vectors start near convergence, as they would be after a stretch
    of training with one iteration per forward pass.
    """

    _buffers = ("u", "v")

    def __init__(self, weight: Tensor, rng: np.random.Generator, warmup: int = WARMUP_ITERS):
        self.weight = weight
        rows = weight.shape[0]
        cols = int(np.prod(weight.shape[1:]))
        self.u = _unit(rng.standard_normal(rows)).astype(weight.dtype)
        self.v = _unit(rng.standard_normal(cols)).astype(weight.dtype)
        if np.any(self.matrix()):
            self.power_iterate(warmup)

    def matrix(self) -> np.ndarray:
        return self.weight.data.reshape(self.weight.shape[0], -1)

    def power_iterate(self, iters: int) -> None:
        w = self.matrix()
        for _ in range(iters):
            self.v[...] = _unit(w.T @ self.u)
            self.u[...] = _unit(w @ self.v)


def spectral_normalize(sw: SpectralWeight, power_iters: int = 1, update: bool = True) -> Tensor:
    """Return ``W / sigma`` with ``sigma = u^T W v`` from the persistent vectors.

    With ``update=False`` the stored ``u, v`` are used as-is, which keeps the
    map a fixed function of ``W`` (useful for gradient checks).
    """
    if update and power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    w = sw.matrix()
    if not np.any(w):
        raise ValueError("spectral_normalize: weight matrix is all zeros, sigma undefined")
    if update:
        sw.power_iterate(power_iters)
    outer = np.outer(sw.u, sw.v).reshape(sw.weight.shape).astype(sw.weight.dtype)
    sigma = T.tensor_sum(sw.weight * outer)
    if sigma.item() <= 0:
        raise ValueError("spectral_normalize: non-positive sigma estimate")
    return sw.weight / sigma


def spectral_norm_estimate(sw: SpectralWeight) -> float:
    return float(sw.u @ sw.matrix() @ sw.v)
