"""Minimal reverse-mode automatic differentiation on top of numpy.

Values are :class:`Tensor` objects wrapping an ``np.ndarray``. Operations
executed while a :class:`GradTape` is active are recorded in execution order;
:func:`backward` replays that record in reverse to accumulate gradients.
Outside a tape the same functions are plain numpy forward passes.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FEATURE_EXTRACTOR = "feature_extractor"
OUTPUT_LAYER = "output_layer"
GROUPS = (FEATURE_EXTRACTOR, OUTPUT_LAYER)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value reached a place where it cannot be tolerated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named, trainable leaf tensor belonging to one parameter group."""

    __slots__ = ("name", "_group", "trainable")

    def __init__(self, name: str, data, group: str = FEATURE_EXTRACTOR, trainable: bool = True):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self._group = group
        self.trainable = trainable

    @property
    def group(self) -> str:
        return self._group

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group})"


class ModelParams(Mapping[str, Parameter]):
    """Ordered, name-unique collection of parameters."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, p: Parameter) -> Parameter:
        if p.name in self._params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def group(self, group: str) -> dict[str, Parameter]:
        return {n: p for n, p in self._params.items() if p.group == group}

    def trainable(self, group: str | None = None) -> dict[str, Parameter]:
        return {
            n: p
            for n, p in self._params.items()
            if p.trainable and (group is None or p.group == group)
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(values)
        if missing:
            raise KeyError(f"missing values for parameters: {sorted(missing)}")
        for n, p in self._params.items():
            v = np.asarray(values[n])
            if v.shape != p.shape:
                raise DimensionError(f"{n}: shape {v.shape} != parameter shape {p.shape}")
            p.data = v.astype(p.dtype, copy=True)


# --------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    shape: tuple[int, ...]


@dataclass
class GradTape:
    """Ordered record of the differentiable primitives run inside ``with``."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def gradient(self, loss: Tensor, params=None) -> dict[str, np.ndarray]:
        return backward(self, loss, params)


_TAPES: list[GradTape] = []


@contextlib.contextmanager
def no_tape():
    """Temporarily suspend recording (used for finite differences)."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(_Node(out, inputs, backward_fn, data.shape))
    return out


def _backprop(tape: GradTape, loss: Tensor) -> dict[int, np.ndarray]:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        assert node.out.data.shape == node.shape
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
    return grads


def backward(tape: GradTape, loss: Tensor, params=None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep over ``tape``.

    Returns a gradient for every trainable parameter in ``params`` (a mapping
    or iterable of :class:`Parameter`; defaults to every parameter seen on the
    tape). Parameters the loss does not depend on get exact zeros.
    """
    grads = _backprop(tape, loss)
    if params is None:
        seen: dict[str, Parameter] = {}
        for node in tape.nodes:
            for inp in node.inputs:
                if isinstance(inp, Parameter):
                    seen[inp.name] = inp
        params = seen.values()
    elif isinstance(params, Mapping):
        params = params.values()
    out = {}
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(id(p))
        out[p.name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), bw)


def dense(x, W, b=None) -> Tensor:
    """``x @ W + b`` applied to the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"dense: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"dense: bias shape {b.shape} incompatible with weight shape {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd.T
        gW = xd.reshape(-1, xd.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gW, gb

    return _result(out, (x, W, b), bw)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(i is Ellipsis or isinstance(i, (slice, int)) for i in idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), bw)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _result(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _result(np.stack([x.data for x in xs], axis=axis), xs, bw)


# --------------------------------------------------------------------------
# nonlinearities


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def elementwise(x, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(x)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax_cross_entropy(logits, onehot, reduction: str = "sum") -> Tensor:
    """Cross-entropy between ``softmax(logits)`` and one-hot targets.

    Evaluated through log-softmax; ``reduction`` is ``"sum"`` (the plain
    double sum over examples and classes) or ``"mean"`` over examples.
    """
    logits = as_tensor(logits)
    y = np.asarray(onehot.data if isinstance(onehot, Tensor) else onehot, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"targets shape {y.shape} != logits shape {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    scale = 1.0 if reduction == "sum" else 1.0 / max(1, logits.data.reshape(-1, logits.shape[-1]).shape[0])
    loss = -(y * logp).sum() * scale
    p = np.exp(logp)

    def bw(g):
        return (g * scale * (p * y.sum(axis=-1, keepdims=True) - y),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# --------------------------------------------------------------------------
# normalisation and regularisation


def layer_norm(x, gain, bias, axis: int = -1, eps: float = 1e-6) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[axis] == 0:
        raise DimensionError("layer_norm: zero-length normalisation axis")
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match axis length {n}")
    xd = np.moveaxis(x.data, axis, -1)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = np.moveaxis(xhat * gain.data + bias.data, -1, axis)

    def bw(g):
        g = np.moveaxis(g, axis, -1)
        g2 = g.reshape(-1, n)
        ggain = (g2 * xhat.reshape(-1, n)).sum(axis=0)
        gbias = g2.sum(axis=0)
        gx = g * gain.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return np.moveaxis(gx, -1, axis), ggain, gbias

    return _result(out, (x, gain, bias), bw)


@dataclass
class RunningStats:
    """Exponential-moving-average batch statistics for :func:`batch_norm`."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None


def batch_norm(
    x,
    scale,
    shift,
    running_stats: RunningStats,
    mode: str = "train",
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation; statistics pool every axis except the last.

    In ``train`` mode batch statistics are used and ``running_stats`` is
    updated in place (``r <- momentum*r + (1-momentum)*batch``). In ``eval``
    mode the frozen running statistics are used.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[-1]
    shape = x.shape
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    if mode == "train":
        mu = x2.mean(axis=0)
        xc = x2 - mu
        var = np.einsum("ij,ij->j", xc, xc) / m
        unbiased = var * (m / max(1, m - 1))
        if running_stats.mean is None:
            running_stats.mean = mu.copy()
            running_stats.var = unbiased
        else:
            running_stats.mean = momentum * running_stats.mean + (1 - momentum) * mu
            running_stats.var = momentum * running_stats.var + (1 - momentum) * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv

        def bw(g):
            g = g.reshape(-1, c)
            gs = np.einsum("ij,ij->j", g, xhat)
            gb = g.sum(axis=0)
            gx = (scale.data * inv / m) * (m * g - gb - xhat * gs)
            return gx.reshape(shape), gs, gb

    elif mode == "eval":
        if running_stats.mean is None or running_stats.var is None:
            raise RuntimeError("batch_norm: eval mode requires populated running statistics")
        inv = 1.0 / np.sqrt(running_stats.var + eps)
        xhat = (x2 - running_stats.mean) * inv

        def bw(g):
            g = g.reshape(-1, c)
            return (g * (scale.data * inv)).reshape(shape), np.einsum("ij,ij->j", g, xhat), g.sum(axis=0)

    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = (xhat * scale.data + shift.data).astype(x.dtype, copy=False).reshape(shape)
    return _result(out, (x, scale, shift), bw)


def dropout(x, p: float, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` so eval is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# convolution


def _same_pads(n: int, k: int, s: int) -> tuple[int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


# products H*W*Cin*Ho*Wo*Cout up to this size use the dense lowering
_DENSE_CONV_LIMIT = 1 << 22
_placement_cache: dict[tuple, np.ndarray] = {}


def _placement(H, W, kh, kw, sh, sw, ph0, pw0, Ho, Wo) -> np.ndarray:
    """0/1 array ``[H*W, Ho*Wo, kh*kw]`` marking which kernel tap links input to output."""
    key = (H, W, kh, kw, sh, sw, ph0, pw0, Ho, Wo)
    P = _placement_cache.get(key)
    if P is None:
        P = np.zeros((H * W, Ho * Wo, kh * kw))
        for oy in range(Ho):
            for ox in range(Wo):
                for ky in range(kh):
                    iy = oy * sh + ky - ph0
                    if not 0 <= iy < H:
                        continue
                    for kx in range(kw):
                        ix = ox * sw + kx - pw0
                        if 0 <= ix < W:
                            P[iy * W + ix, oy * Wo + ox, ky * kw + kx] = 1.0
        _placement_cache[key] = P
    return P


def conv2d(x, filters, stride=(1, 1), padding: str = "valid") -> Tensor:
    """2-D cross-correlation, channels-last.

    ``x`` is ``batch x H x W x Cin`` and ``filters`` is ``kh x kw x Cin x Cout``.
    ``same`` padding zero-pads (extra row/column after) so the output is
    ``ceil(H/sh) x ceil(W/sw)``.
    """
    x, w = as_tensor(x), as_tensor(filters)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with filters {w.shape}")
    B, H, W, _ = x.shape
    kh, kw, cin, cout = w.shape
    sh, sw = stride
    if padding == "same":
        ph, pw = _same_pads(H, kh, sh), _same_pads(W, kw, sw)
    elif padding == "valid":
        ph, pw = (0, 0), (0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Hp, Wp = H + sum(ph), W + sum(pw)
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // sh + 1, (Wp - kw) // sw + 1
    if kh == 1 and sh == 1 and ph == (0, 0) and H > 1:
        # rows are independent: fold them into the batch
        y = conv2d(reshape(x, (B * H, 1, W, cin)), w, (1, sw), padding)
        return reshape(y, (B, H, Wo, cout))
    if H * W * cin * Ho * Wo * cout <= _DENSE_CONV_LIMIT:
        return _conv2d_dense(x, w, (sh, sw), ph[0], pw[0], Ho, Wo)
    return _conv2d_im2col(x, w, (sh, sw), ph, pw, Ho, Wo)


def _conv2d_dense(x: Tensor, w: Tensor, stride, ph0, pw0, Ho, Wo) -> Tensor:
    B, H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    P = _placement(H, W, kh, kw, stride[0], stride[1], ph0, pw0, Ho, Wo)
    P2 = P.reshape(-1, kh * kw)
    wd = w.data
    M = (P2 @ wd.reshape(kh * kw, cin * cout)).reshape(H * W, Ho * Wo, cin, cout)
    M = M.transpose(0, 2, 1, 3).reshape(H * W * cin, Ho * Wo * cout).astype(wd.dtype, copy=False)
    xf = x.data.reshape(B, H * W * cin)
    out = (xf @ M).reshape(B, Ho, Wo, cout)
    need_x = x.requires_grad

    def bw(g):
        g2 = g.reshape(B, Ho * Wo * cout)
        gM = (xf.T @ g2).reshape(H * W, cin, Ho * Wo, cout).transpose(0, 2, 1, 3)
        gw = (P2.T @ gM.reshape(H * W * Ho * Wo, cin * cout)).reshape(kh, kw, cin, cout)
        gx = (g2 @ M.T).reshape(B, H, W, cin) if need_x else None
        return gx, gw.astype(wd.dtype, copy=False)

    return _result(out, (x, w), bw)


def _conv2d_im2col(x: Tensor, w: Tensor, stride, ph, pw, Ho, Wo) -> Tensor:
    B, H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    sh, sw = stride
    xp = x.data
    if sum(ph) or sum(pw):
        xp = np.pad(xp, ((0, 0), ph, pw, (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]  # B Ho Wo Cin kh kw
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * cin)
    wd = w.data
    wmat = wd.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(B, Ho, Wo, cout)
    need_x = x.requires_grad

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(kh, kw, cin, cout)
        if not need_x:
            return None, gw
        gcol = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, cin)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw, :] += gcol[:, :, :, i, j, :]
        gx = gxp[:, ph[0] : ph[0] + H, pw[0] : pw[0] + W, :]
        return gx, gw

    return _result(out, (x, w), bw)


# --------------------------------------------------------------------------
# recurrent cell


@dataclass
class GRUWeights:
    """Input, recurrent and bias weights for the three gates (z, r, candidate).

    ``W`` is ``dx x 3dh``, ``U`` is ``dh x 3dh`` and ``b`` is ``3dh``, with the
    gate blocks laid out in the order z, r, candidate.
    """

    W: Tensor
    U: Tensor
    b: Tensor


def gru_cell(x, h, weights: GRUWeights) -> Tensor:
    """One GRU step.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    cand = tanh(x Wh + (r*h) Uh + bh), h' = (1-z)*h + z*cand.
    """
    x, h = as_tensor(x), as_tensor(h)
    W, U, b = weights.W, weights.U, weights.b
    dh = h.shape[-1]
    if W.shape != (x.shape[-1], 3 * dh) or U.shape != (dh, 3 * dh) or b.shape != (3 * dh,):
        raise DimensionError(
            f"gru_cell: x {x.shape}, h {h.shape} incompatible with W {W.shape}, U {U.shape}, b {b.shape}"
        )
    xw = dense(x, W, b)
    hu = matmul(h, U[:, : 2 * dh])
    gates = sigmoid(xw[..., : 2 * dh] + hu)
    z = gates[..., :dh]
    r = gates[..., dh:]
    cand = tanh(xw[..., 2 * dh :] + matmul(r * h, U[:, 2 * dh :]))
    return h + z * (cand - h)


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper = AdamHyper(),
) -> tuple[Mapping[str, Parameter], AdamState]:
    """Bias-corrected Adam update, applied in place to ``params``.

    Every trainable parameter in ``params`` must have a gradient. A
    non-finite gradient raises :class:`NumericError` before anything changes.
    """
    trainable = {n: p for n, p in params.items() if p.trainable}
    for n, p in trainable.items():
        if n not in grads:
            raise KeyError(f"no gradient for trainable parameter {n!r}")
        if grads[n].shape != p.shape:
            raise DimensionError(f"{n}: gradient shape {grads[n].shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(grads[n])):
            raise NumericError(f"non-finite gradient for {n!r}")
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for n, p in trainable.items():
        g = grads[n]
        m = state.m.get(n)
        v = state.v.get(n)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[n], state.v[n] = m, v
        step = hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        p.data = (p.data - step).astype(p.dtype)
    return params, state


# --------------------------------------------------------------------------
# finite-difference check


def gradcheck(f: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``inputs`` may be arrays or tensors; they are passed to ``f`` as tensors
    that require gradients, and perturbed in place for central differences.
    """
    tensors = []
    for x in inputs:
        if isinstance(x, Tensor):
            tensors.append(x)
        else:
            tensors.append(Tensor(np.array(x, dtype=np.float64), requires_grad=True))
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
    try:
        with GradTape() as tape:
            loss = f(*tensors)
        grads = _backprop(tape, loss)
        analytic = [grads.get(id(t), np.zeros_like(t.data)) for t in tensors]
        worst = 0.0
        with no_tape():
            for t, ga in zip(tensors, analytic):
                flat = t.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = float(f(*tensors).data)
                    flat[i] = orig - eps
                    down = float(f(*tensors).data)
                    flat[i] = orig
                    num = (up - down) / (2 * eps)
                    a = float(ga.reshape(-1)[i])
                    worst = max(worst, abs(a - num) / max(1.0, abs(a)))
        return worst
    finally:
        for t, s in zip(tensors, saved):
            t.requires_grad = s


def init_glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
