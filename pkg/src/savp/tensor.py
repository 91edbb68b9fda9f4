"""Dense tensors with a small reverse-mode autodiff tape.

Every differentiable operation records itself on the active :class:`Tape`
when at least one input requires a gradient. ``backward`` replays the tape in
reverse creation order, which is a valid topological order because a node can
only be created after all of its inputs.

Operations are deliberately limited to what the video model needs.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tape",
    "Tensor",
    "tensor",
    "backward",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "exp",
    "log",
    "square",
    "sqrt",
    "matmul",
    "conv2d",
    "conv3d",
    "avg_pool2d",
    "upsample_bilinear2d",
    "activation",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "softmax",
    "softplus",
    "clip",
    "instance_norm",
    "apply_kernels",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "broadcast_to",
    "tensor_sum",
    "tensor_mean",
    "same_padding",
]

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_active: list["Tape"] = []


class Tape:
    """Records operations for one forward/backward pass.

    Use as a context manager. Tensors created while the tape is active and
    depending on a ``requires_grad`` leaf are appended to ``nodes``.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc):
        popped = _active.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: "Tensor") -> None:
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(out)

    def clear(self) -> None:
        for node in self.nodes:
            node._tape = None
            node._backward = None
            node._parents = ()
        self.nodes = []


def _current_tape() -> Optional[Tape]:
    return _active[-1] if _active else None


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``data`` is a numpy array of float32 or float64. Leaves created with
    ``requires_grad=True`` receive a ``grad`` array of identical shape and
    dtype after :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_tape", "_index")

    __array_priority__ = 100

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._tape: Optional[Tape] = None
        self._index = -1

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> Optional[int]:
        return self._index if self._tape is not None else None

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, dtype=None, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad, name=name)


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in _DTYPES:
        dtype = x.dtype
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; record it when some parent is tracked on an active tape."""
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- backward -----------------------------------------------------------------


def backward(loss: Tensor) -> dict:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a mapping from every ``requires_grad`` leaf reached on the tape to
    its gradient array. The same arrays are stored on ``leaf.grad`` (replacing
    any previous value). Gradients from multiple paths are summed.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._backward is None:
        raise ValueError("loss is not recorded on any active tape (detached or built without a Tape)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss._index + 1]):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if parent._backward is None:
                leaves[key] = parent
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    result = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g
        result[leaf] = g
    return result


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: divisor contains zeros")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    # sign(0) == 0 gives the zero subgradient at the kink
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt: input must be nonnegative")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2 * out),))


_UNARY = {"neg": neg, "abs": absolute, "exp": exp, "log": log, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, neg, abs, exp, log, square."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](_lift(a))
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- shape plumbing ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, old),))


def _getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g) if _needs_add_at(index) else full.__setitem__(index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; batched leading dims on ``a`` are allowed."""
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        g = np.ascontiguousarray(g)
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


# -- convolution -----------------------------------------------------------------


def same_padding(n: int, k: int, stride: int) -> tuple[int, int]:
    """Zero padding (before, after) so the output has ceil(n / stride) samples.

    Odd totals put the extra pixel after (bottom/right).
    """
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def _zero_pad(a: np.ndarray, pads) -> np.ndarray:
    if all(p == (0, 0) for p in pads):
        return a
    shape = a.shape[:2] + tuple(n + p0 + p1 for n, (p0, p1) in zip(a.shape[2:], pads))
    out = np.zeros(shape, dtype=a.dtype)
    out[(slice(None), slice(None)) + tuple(slice(p0, p0 + n) for n, (p0, _) in zip(a.shape[2:], pads))] = a
    return out


def _im2col(xp: np.ndarray, ksize, strides, out_sp) -> np.ndarray:
    """[b, c, *spatial] -> [b, c, *ksize, *out_sp] copy of every kernel tap's view."""
    nd = len(ksize)
    spans = tuple(s * (m - 1) + 1 for s, m in zip(strides, out_sp))
    view = sliding_window_view(xp, spans, axis=tuple(range(2, 2 + nd)))
    view = view[(slice(None), slice(None)) + tuple(slice(0, k) for k in ksize) + tuple(slice(None, None, s) for s in strides)]
    cols = np.empty(xp.shape[:2] + tuple(ksize) + tuple(out_sp), dtype=xp.dtype)
    np.copyto(cols, view)
    return cols


def _conv_nd(x: Tensor, w: Tensor, bias: Optional[Tensor], stride, padding: str, nd: int) -> Tensor:
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise ValueError(f"conv{nd}d: expected rank-{nd + 2} input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv{nd}d: input channels {x.shape[1]} != weight in-channels {w.shape[1]}")
    strides = (stride,) * nd if isinstance(stride, int) else tuple(stride)
    if any(s < 1 for s in strides):
        raise ValueError("stride must be >= 1")
    spatial = x.shape[2:]
    ksize = w.shape[2:]
    if padding == "same":
        pads = [same_padding(n, k, s) for n, k, s in zip(spatial, ksize, strides)]
    elif padding == "valid":
        pads = [(0, 0)] * nd
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    padded = [n + p0 + p1 for n, (p0, p1) in zip(spatial, pads)]
    if any(k > n for k, n in zip(ksize, padded)):
        raise ValueError(f"conv{nd}d: kernel {ksize} larger than padded input {tuple(padded)}")

    b, cin = x.shape[:2]
    cout = w.shape[0]
    xp = _zero_pad(x.data, pads)
    out_sp = tuple((n - k) // s + 1 for n, k, s in zip(padded, ksize, strides))
    npos = int(np.prod(out_sp))
    ntaps = int(np.prod(ksize))
    # im2col laid out so one batched matmul lands directly in [b, cout, positions]
    cols = _im2col(xp, ksize, strides, out_sp).reshape(b, cin * ntaps, npos)
    wm = w.data.reshape(cout, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1)
    out = out.reshape((b, cout) + out_sp)

    xshape = x.shape
    unit_stride = all(s == 1 for s in strides)

    def bw(g):
        gx = gw = gb = None
        g = np.ascontiguousarray(g)
        gm = g.reshape(b, cout, npos)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 2))
        if w.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            if unit_stride:
                # input gradient is a full correlation with the flipped, transposed kernel
                back_pads = [(k - 1 - p0, k - 1 - p1) for k, (p0, p1) in zip(ksize, pads)]
                gp = _zero_pad(g, back_pads)
                flip = (slice(None), slice(None)) + (slice(None, None, -1),) * nd
                wf = np.ascontiguousarray(np.swapaxes(w.data[flip], 0, 1)).reshape(cin, -1)
                gcols = _im2col(gp, ksize, strides, xshape[2:]).reshape(b, cout * ntaps, -1)
                gx = np.matmul(wf, gcols).reshape(xshape)
            else:
                gcols = np.matmul(wm.T, gm).reshape((b, cin) + tuple(ksize) + out_sp)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for off in np.ndindex(*ksize):
                    win = tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(off, strides, out_sp))
                    gxp[(slice(None), slice(None)) + win] += gcols[(slice(None), slice(None)) + off]
                crop = tuple(slice(p0, p0 + n) for (p0, _), n in zip(pads, xshape[2:]))
                gx = gxp[(slice(None), slice(None)) + crop]
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x[b, cin, h, w]`` with ``weight[cout, cin, kh, kw]``."""
    return _conv_nd(x, weight, bias, stride, padding, 2)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x[b, cin, t, h, w]`` with ``weight[cout, cin, kt, kh, kw]``."""
    return _conv_nd(x, weight, bias, stride, padding, 3)


def apply_kernels(image: Tensor, kernels: Tensor) -> Tensor:
    """Filter each sample with its own kernel set.

    ``image[b, c, h, w]`` and ``kernels[b, n, kh, kw]`` give ``[b, n, c, h, w]``,
    one "same"-padded cross-correlation per kernel and channel.
    """
    b, c, h, w = image.shape
    kb, n, kh, kw = kernels.shape
    if kb != b:
        raise ValueError(f"apply_kernels: batch mismatch {image.shape} vs {kernels.shape}")
    pads = [same_padding(h, kh, 1), same_padding(w, kw, 1)]
    xp = np.pad(image.data, [(0, 0), (0, 0)] + pads)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # b, c, h, w, kh, kw
    kd = kernels.data
    out = np.einsum("bchwij,bnij->bnchw", win, kd, optimize=True)

    def bw(g):
        g = np.ascontiguousarray(g)
        gk = np.einsum("bnchw,bchwij->bnij", g, win, optimize=True) if kernels.requires_grad else None
        gi = None
        if image.requires_grad:
            cols = np.einsum("bnchw,bnij->bchwij", g, kd, optimize=True)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + h, j : j + w] += cols[..., i, j]
            gi = gxp[:, :, pads[0][0] : pads[0][0] + h, pads[1][0] : pads[1][0] + w]
        return gi, gk

    return _make(out, (image, kernels), bw)


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"avg_pool2d: spatial extents {(h, w)} not divisible by window {window}")
    k = window
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (g / (k * k),)

    return _make(out, (x,), bw)


def _interp_matrix(n: int, factor: int, dtype) -> np.ndarray:
    m = n * factor
    mat = np.zeros((m, n), dtype=dtype)
    if n == 1:
        mat[:, 0] = 1
        return mat
    pos = np.arange(m) * (n - 1) / (m - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    mat[np.arange(m), lo] += 1 - frac
    mat[np.arange(m), lo + 1] += frac
    return mat


def upsample_bilinear2d(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling on a corner-aligned grid (first/last samples coincide)."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    _, _, h, w = x.shape
    mh = _interp_matrix(h, factor, x.dtype)
    mw = _interp_matrix(w, factor, x.dtype)
    out = mh @ x.data @ mw.T
    return _make(out, (x,), lambda g: (mh.T @ g @ mw,))


# -- activations -----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return _make(x.data * slope, (x,), lambda g: (g * slope,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.data) + 1)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) in overflow-free form."""
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    sig = 0.5 * (np.tanh(0.5 * xd) + 1)
    return _make(out, (x,), lambda g: (g * sig,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def activation(kind: str, x: Tensor, alpha: float = 0.2, axis: int = -1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ValueError(f"unknown activation {kind!r}")


# -- normalization -------------------------------------------------------------


def instance_norm(
    x: Tensor,
    scale: Optional[Tensor] = None,
    shift: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    """Standardize each (sample, channel) over all trailing axes, then apply scale/shift.

    A group with a single element is rejected: its normalized value would be
    identically zero, which almost always means a mis-sized feature map.
    """
    if x.ndim < 3:
        raise ValueError(f"instance_norm expects [b, c, ...], got shape {x.shape}")
    axes = tuple(range(2, x.ndim))
    n = int(np.prod(x.shape[2:]))
    if n < 2:
        raise ValueError(f"instance_norm: group of size {n} for shape {x.shape}")
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = (1, -1) + (1,) * len(axes)
    out = xhat
    if scale is not None:
        out = out * scale.data.reshape(bshape)
    if shift is not None:
        out = out + shift.data.reshape(bshape)

    def bw(g):
        gscale = gshift = None
        if shift is not None and shift.requires_grad:
            gshift = g.sum(axis=(0,) + axes)
        if scale is not None and scale.requires_grad:
            gscale = (g * xhat).sum(axis=(0,) + axes)
        gx = None
        if x.requires_grad:
            gh = g * scale.data.reshape(bshape) if scale is not None else g
            gx = inv * (
                gh - gh.mean(axis=axes, keepdims=True) - xhat * (gh * xhat).mean(axis=axes, keepdims=True)
            )
        return gx, gscale, gshift

    parents = [x]
    picks = [0]
    if scale is not None:
        parents.append(scale)
        picks.append(1)
    if shift is not None:
        parents.append(shift)
        picks.append(2)

    def bw_selected(g):
        grads = bw(g)
        return tuple(grads[i] for i in picks)

    return _make(out, parents, bw_selected)
