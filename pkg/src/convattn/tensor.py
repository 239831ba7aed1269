"""Dense tensors (up to 3 axes) with reverse-mode automatic differentiation.

Only the operations the encoder actually needs are implemented. Tensors are
numpy-backed; float32 is the default storage type, float64 is used by the
gradient-checking suite. The graph is a tape of closures: every op returns a
new Tensor holding references to its parents and a backprop callback, and
``Tensor.backward()`` walks the tape once in reverse topological order.

``exact_reductions()`` switches time-axis reductions (matmul contractions and
softmax normalization) to correctly-rounded summation via math.fsum. fsum is
order-independent, which makes properties like permutation equivariance hold
bit-exactly instead of merely up to rounding. It is slow and meant for
verification, not training.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ShapeError

DEFAULT_DTYPE = np.float32

_EXACT_REDUCTIONS = False


@contextmanager
def exact_reductions():
    """Correctly-rounded (order-independent) sums inside matmul and softmax."""
    global _EXACT_REDUCTIONS
    prev = _EXACT_REDUCTIONS
    _EXACT_REDUCTIONS = True
    try:
        yield
    finally:
        _EXACT_REDUCTIONS = prev


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backprop", "_backward_done", "name")

    def __init__(self, data, dtype=None, name: Optional[str] = None,
                 _parents: tuple = (), _backprop=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 3:
            raise ShapeError(f"at most 3 axes supported, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backprop = _backprop
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate .grad on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_done:
            raise RuntimeError("backward already called on this graph; "
                               "rebuild the graph before calling again")
        self._backward_done = True

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, name={self.name!r})"


TensorLike = Union[Tensor, np.ndarray, float, int, list]


def _as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _fsum_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("exact_reductions matmul supports 2D operands only")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            out[i, j] = math.fsum(a[i, :] * b[:, j])
    return out


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        if _EXACT_REDUCTIONS:
            out = _fsum_matmul(a.data, b.data)
        else:
            out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from e

    def backprop(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accum(_unbroadcast(ga, a.data.shape))
        b._accum(_unbroadcast(gb, b.data.shape))

    return Tensor(out, _parents=(a, b), _backprop=backprop)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e

    def backprop(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return Tensor(out, _parents=(a, b), _backprop=backprop)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e

    def backprop(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out, _parents=(a, b), _backprop=backprop)


def scale(x: TensorLike, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    out = x.data * s

    def backprop(g):
        x._accum(g * s)

    return Tensor(out, _parents=(x,), _backprop=backprop)


def relu(x: TensorLike) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def backprop(g):
        x._accum(g * (x.data > 0))

    return Tensor(out, _parents=(x,), _backprop=backprop)


def transpose(x: TensorLike) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got shape {x.shape}")
    out = np.swapaxes(x.data, -1, -2)

    def backprop(g):
        x._accum(np.swapaxes(g, -1, -2))

    return Tensor(out, _parents=(x,), _backprop=backprop)


def tsum(x: TensorLike, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=False)

    def backprop(g):
        if axis is None:
            x._accum(np.broadcast_to(g, x.data.shape).copy())
        else:
            x._accum(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return Tensor(out, _parents=(x,), _backprop=backprop)


def tmean(x: TensorLike, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(tsum(x, axis=axis), 1.0 / n)


def softmax_lastaxis(x: TensorLike, additive_mask: Optional[TensorLike] = None) -> Tensor:
    """Numerically-stable softmax over the last axis.

    ``additive_mask`` entries are 0 (visible) or -inf (hidden); hidden
    positions get exactly probability 0 and exactly zero gradient. A slice
    with every position hidden is an error.
    """
    x = _as_tensor(x)
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        try:
            scores = x.data + m
        except ValueError as e:
            raise ShapeError(f"mask shape {m.shape} not broadcastable to {x.shape}") from e
    else:
        scores = x.data

    if not np.isfinite(scores).any(axis=-1).all():
        raise ValueError("empty attention window: a softmax slice is fully masked")

    mx = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - mx)  # exp(-inf) == 0.0 exactly for masked entries
    if _EXACT_REDUCTIONS:
        denom = np.apply_along_axis(lambda r: math.fsum(r), -1, e)[..., None]
    else:
        denom = np.sum(e, axis=-1, keepdims=True)
    y = e / denom

    def backprop(g):
        inner = np.sum(g * y, axis=-1, keepdims=True)
        x._accum(y * (g - inner))

    return Tensor(y, _parents=(x,), _backprop=backprop)


def log_softmax_lastaxis(x: TensorLike) -> Tensor:
    x = _as_tensor(x)
    mx = np.max(x.data, axis=-1, keepdims=True)
    shifted = x.data - mx
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def backprop(g):
        x._accum(g - y * np.sum(g, axis=-1, keepdims=True))

    return Tensor(out, _parents=(x,), _backprop=backprop)


def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike, eps: float = 1e-5) -> Tensor:
    """Standardize each frame over the last axis, then apply gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} "
                         f"do not match last axis of {x.shape}")
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def backprop(g):
        lead = tuple(range(g.ndim - 1))
        gain._accum(np.sum(g * xhat, axis=lead))
        bias._accum(np.sum(g, axis=lead))
        gxh = g * gain.data
        gx = inv * (gxh - np.mean(gxh, axis=-1, keepdims=True)
                    - xhat * np.mean(gxh * xhat, axis=-1, keepdims=True))
        x._accum(gx)

    return Tensor(out, _parents=(x, gain, bias), _backprop=backprop)


def conv1d_same(x: TensorLike, kernel: TensorLike, bias: TensorLike) -> Tensor:
    """Centered 1D convolution over time with zero padding, stride 1.

    x: [T, Din], kernel: [k, Din, Dout], bias: [Dout] -> [T, Dout].
    Output at frame t depends on frames t-(k-1)/2 .. t+(k-1)/2.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.ndim != 2 or kernel.ndim != 3:
        raise ShapeError(f"conv1d_same: need x[T,Din], kernel[k,Din,Dout]; "
                         f"got {x.shape} and {kernel.shape}")
    k, din, dout = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d_same kernel size must be odd, got {k}")
    if x.shape[1] != din or bias.shape != (dout,):
        raise ShapeError(f"conv1d_same: shapes {x.shape}, {kernel.shape}, {bias.shape} "
                         f"are inconsistent")
    t_len = x.shape[0]
    pad = (k - 1) // 2
    xp = np.zeros((t_len + 2 * pad, din), dtype=x.data.dtype)
    xp[pad:pad + t_len] = x.data
    out = np.tile(bias.data, (t_len, 1)).astype(x.data.dtype, copy=False)
    for j in range(k):
        out = out + np.matmul(xp[j:j + t_len], kernel.data[j])

    def backprop(g):
        bias._accum(g.sum(axis=0))
        gk = np.empty_like(kernel.data)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gk[j] = np.matmul(xp[j:j + t_len].T, g)
            gxp[j:j + t_len] += np.matmul(g, kernel.data[j].T)
        kernel._accum(gk)
        x._accum(gxp[pad:pad + t_len])

    return Tensor(out, _parents=(x, kernel, bias), _backprop=backprop)


def linear(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None) -> Tensor:
    """x @ weight (+ bias)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def dropout_rng(seed: int, step: int, op_index: int) -> np.random.Generator:
    """Counter-based generator: the same (seed, step, op) triple always yields
    the same mask, independent of call history."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(step, op_index)))


def dropout(x: TensorLike, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode requires an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(keep, dtype=x.data.dtype))


def concat_lastaxis(parts: Sequence[TensorLike]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_lastaxis needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([0] + [p.shape[-1] for p in parts])

    def backprop(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accum(g[..., lo:hi])

    return Tensor(out, _parents=tuple(parts), _backprop=backprop)


def slice_lastaxis(x: TensorLike, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    out = x.data[..., start:stop].copy()

    def backprop(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        x._accum(full)

    return Tensor(out, _parents=(x,), _backprop=backprop)


def slice_axis0(x: TensorLike, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    out = x.data[start:stop].copy()

    def backprop(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x._accum(full)

    return Tensor(out, _parents=(x,), _backprop=backprop)


def take_rowwise(x: TensorLike, idx: np.ndarray) -> Tensor:
    """For 2D x and integer idx[T]: returns x[t, idx[t]] as a 1D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"take_rowwise expects a 2D tensor, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def backprop(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        x._accum(full)

    return Tensor(out, _parents=(x,), _backprop=backprop)
