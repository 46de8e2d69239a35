"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Every operation is a pure function: given the same inputs (and, for dropout,
a generator in the same state) the output is bitwise identical. Values are
64-bit floats throughout; producing a NaN or Inf anywhere is a contract
violation and raises immediately.

An active :class:`GradientTape` records each differentiable operation in
execution order. Because a tensor is always created before it is consumed,
walking the tape backwards visits nodes in a valid topological order, so
:func:`backward` is a single reverse sweep.

Randomness comes from :func:`rng_from_seed`, which builds a Philox4x64
counter-based bit generator keyed through ``numpy.random.SeedSequence``.
The same integer key tuple always yields the same stream; distinct keys
yield statistically independent streams, which is what makes per-sample
seed derivation safe to parallelize.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf


class NumericsError(ValueError):
    """Contract violation in a tensor operation (shape, domain, or NaN/Inf)."""


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def rng_from_seed(*key: int) -> np.random.Generator:
    """Return a Philox4x64 generator deterministically keyed by integers.

    ``rng_from_seed(seed, scene, index)`` and so on always produce the same
    stream for the same key tuple, independent of call order or platform.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


class Tensor:
    """A dense array of 64-bit floats, immutable by convention.

    ``data`` is the raw numpy array (row-major). Tensors compare and hash by
    identity; the tape relies on that to track dataflow.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        # cheap screen first: a sum is NaN/Inf whenever any element is
        # (opposite infinities produce NaN); it can also overflow on huge
        # finite values, so only the exact check may raise
        if not math.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
            label = f" {name!r}" if name else ""
            raise NumericsError(f"non-finite value in tensor{label}")
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def assign(self, data) -> None:
        """Rebind the value in place (optimizer updates). Shape must match."""
        arr = np.asarray(data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise NumericsError(
                f"assign shape {arr.shape} != {self.data.shape}"
                + (f" for {self.name!r}" if self.name else "")
            )
        if not math.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
            raise NumericsError(
                "non-finite value in assignment"
                + (f" to {self.name!r}" if self.name else "")
            )
        self.data = arr

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; scalars are promoted to constant tensors
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


_BackwardFn = Callable[[np.ndarray], tuple]

_TAPES: list["GradientTape"] = []


class GradientTape:
    """Records operations in execution order for one forward/backward pass.

    Single-writer: one backward pass per tape instance; recording after
    backward has run is an error. Use as a context manager::

        with GradientTape() as tape:
            loss = ...
        grads = backward(loss, tape)
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], _BackwardFn]] = []
        self._grads: dict[Tensor, np.ndarray] | None = None

    def __enter__(self) -> "GradientTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        if popped is not self:
            raise NumericsError("gradient tapes exited out of order")

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], bwd: _BackwardFn) -> None:
        if self._grads is not None:
            raise NumericsError("tape already consumed by a backward pass")
        self._ops.append((out, inputs, bwd))

    def gradient(self, t: Tensor) -> np.ndarray:
        """Accumulated gradient of the swept loss w.r.t. ``t``."""
        if self._grads is None:
            raise NumericsError("backward has not run on this tape")
        try:
            return self._grads[t]
        except KeyError:
            raise NumericsError(
                "tensor not on tape"
                + (f": {t.name!r}" if t.name else "")
            ) from None

    def __len__(self) -> int:
        return len(self._ops)


def _push(out: Tensor, inputs: tuple[Tensor, ...], bwd: _BackwardFn) -> Tensor:
    if _TAPES:
        _TAPES[-1]._record(out, inputs, bwd)
    return out


def backward(loss: Tensor, tape: GradientTape) -> dict[Tensor, np.ndarray]:
    """Reverse sweep: gradients of a scalar loss w.r.t. everything on the tape.

    Returns a mapping keyed by tensor identity. Every named leaf tensor (a
    parameter) that participated in the forward computation appears, with an
    exact-zero gradient if no path connects it to the loss; anonymous
    constants off the loss path are omitted.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise NumericsError("backward needs a scalar loss tensor")
    if tape._grads is not None:
        raise NumericsError("backward already ran on this tape")
    produced = {out for out, _, _ in tape._ops}
    if loss not in produced:
        raise NumericsError("loss was not produced under this tape")

    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for out, inputs, bwd in reversed(tape._ops):
        g = grads.get(out)
        if g is None:
            continue
        for t, gi in zip(inputs, bwd(g)):
            if gi is None:
                continue
            acc = grads.get(t)
            grads[t] = gi if acc is None else acc + gi
    for _, inputs, _ in tape._ops:
        for t in inputs:
            if t.name is not None and t not in produced and t not in grads:
                grads[t] = np.zeros_like(t.data)
    tape._grads = grads
    return grads


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _push(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _push(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _push(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _push(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def bwd(g):
        return (-g,)

    return _push(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors with agreeing inner dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericsError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _push(out, (a, b), bwd)


def affine(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for a 2-D ``x`` and a 1-D bias (one tape op)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise NumericsError(f"affine shape mismatch: {x.shape} @ {w.shape} + {b.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def bwd(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _push(out, (x, w, b), bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise NumericsError(f"transpose needs a 2-D tensor, got shape {a.shape}")
    out = Tensor(a.data.T)

    def bwd(g):
        return (g.T,)

    return _push(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.shape),)

    return _push(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise NumericsError("concat of empty sequence")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _push(out, tuple(ts), bwd)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[..., start:stop, ...]`` along ``axis``."""
    a = _as_tensor(a)
    if not (0 <= start <= stop <= a.shape[axis]):
        raise NumericsError(
            f"narrow [{start}:{stop}] out of range for axis {axis} of shape {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index])

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _push(out, (a,), bwd)


def gather_rows(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` with scatter-add backward."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 1:
        raise NumericsError("gather_rows needs a 2-D table and 1-D indices")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise NumericsError(
            f"row index out of range [0, {table.shape[0]}): {idx.tolist()}"
        )
    out = Tensor(table.data[idx])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _push(out, (table,), bwd)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _push(out, (a,), bwd)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return _push(out, (a,), bwd)


def abs(a) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = Tensor(np.abs(a.data))

    def bwd(g):
        return (g * np.sign(a.data),)

    return _push(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bwd(g):
        return (g * out.data,)

    return _push(out, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))

    def bwd(g):
        return (g / a.data,)

    return _push(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def bwd(g):
        return (g * 0.5 / out.data,)

    return _push(out, (a,), bwd)


def atan2(y, x) -> Tensor:
    y, x = _as_tensor(y), _as_tensor(x)
    out = Tensor(np.arctan2(y.data, x.data))

    def bwd(g):
        denom = x.data * x.data + y.data * y.data
        return (
            _unbroadcast(g * x.data / denom, y.shape),
            _unbroadcast(-g * y.data / denom, x.shape),
        )

    return _push(out, (y, x), bwd)


def gelu(a) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    out = Tensor(a.data * cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return _push(out, (a,), bwd)


def softmax(z) -> Tensor:
    """Probabilities along the last axis, computed with max subtraction."""
    z = _as_tensor(z)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return ((g - inner) * p,)

    return _push(out, (z,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of a 2-D tensor with biased variance.

    out[i] = (x[i] - mean(x[i])) / sqrt(var(x[i]) + eps) * gain + bias
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim != 2:
        raise NumericsError(f"layer_norm needs a 2-D input, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise NumericsError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}"
        )
    if eps <= 0:
        raise NumericsError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _push(out, (x, gain, bias), bwd)


def attention(q, k, v, n_heads: int) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over row sequences, fused across heads.

    The width of the 2-D inputs is split into ``n_heads`` slices; per head,
    rows of ``q`` attend over rows of ``k`` with softmax(q k^T / sqrt(dh))
    weights and mix rows of ``v``. Returns the re-concatenated context and
    the attention weights as a plain ``[n_heads, T, T]`` array (each row a
    probability distribution). One tape op; the backward pass is the
    standard attention gradient.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise NumericsError(
            f"attention needs three equal 2-D shapes, got {q.shape}/{k.shape}/{v.shape}"
        )
    t, d = q.shape
    if n_heads < 1 or d % n_heads:
        raise NumericsError(f"width {d} is not divisible by n_heads={n_heads}")
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)

    def split(arr):
        return arr.reshape(t, n_heads, dh).transpose(1, 0, 2)  # [H, T, dh]

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    weights = e / e.sum(axis=-1, keepdims=True)  # [H, T, T]
    ctx = weights @ vh
    out = Tensor(ctx.transpose(1, 0, 2).reshape(t, d))

    def bwd(g):
        gctx = split(g)
        gw = gctx @ vh.transpose(0, 2, 1)
        gv = weights.transpose(0, 2, 1) @ gctx
        gs = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 2, 1) @ qh

        def merge(arr):
            return arr.transpose(1, 0, 2).reshape(t, d)

        return merge(gq), merge(gk), merge(gv)

    return _push(out, (q, k, v), bwd), weights


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Zero entries with probability ``rate`` during training, scaling the rest.

    Inference (``training=False``) and ``rate=0`` return the input unchanged.
    The mask is drawn from ``rng``, so a generator in the same state always
    reproduces the same mask.
    """
    if not 0.0 <= rate < 1.0:
        raise NumericsError(f"dropout rate must be in [0, 1): {rate}")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise NumericsError("dropout in training mode needs a generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask)

    def bwd(g):
        return (g * mask,)

    return _push(out, (x,), bwd)
