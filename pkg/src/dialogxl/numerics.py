"""Dense tensors with reverse-mode differentiation, plus AdamW.

Every op records itself on the active :class:`Tape` when at least one input
requires a gradient.  ``backward(tape, loss)`` walks the tape in reverse.

    >>> with Tape() as tape:
    ...     x = Tensor([2.0], requires_grad=True)
    ...     y = Tensor([3.0], requires_grad=True)
    ...     loss = (x * y).sum()
    >>> backward(tape, loss)
    >>> x.grad, y.grad
    (array([3.]), array([2.]))
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Additive mask value; exp(-1e9 + c) underflows to exactly 0 at both precisions.
LARGE_NEG = -1e9

_DEFAULT_DTYPE = np.float64


class DegenerateRowError(ValueError):
    """Raised when a softmax row has every entry masked."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        keep = isinstance(data, (np.ndarray, np.floating)) and data.dtype.kind == "f"
        arr = np.asarray(data, dtype=dtype or (data.dtype if keep else _DEFAULT_DTYPE))
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable  # upstream grad -> tuple of input grads (None where not needed)


@dataclass
class Tape:
    """Ordered log of differentiable operations."""

    records: list = field(default_factory=list)
    _out_ids: dict = field(default_factory=dict)

    def record(self, op, inputs, output, back):
        self._out_ids[id(output)] = len(self.records)
        self.records.append(TapeRecord(op, tuple(inputs), output, back))

    def __contains__(self, t):
        return id(t) in self._out_ids

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


_TAPES: list = []
_NO_GRAD = [0]


class no_grad:
    def __enter__(self):
        _NO_GRAD[0] += 1

    def __exit__(self, *exc):
        _NO_GRAD[0] -= 1
        return False


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _operands(a, b):
    # raw arrays/scalars take the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def _make(op, data, inputs, back):
    # without an active tape nothing is recorded and the result is a constant
    needs = bool(_TAPES) and not _NO_GRAD[0] and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _TAPES[-1].record(op, inputs, out, back)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _operands(a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _make("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner),)

    return _make("gelu", out, (x,), back)


def where(cond, a, b):
    """Select ``a`` where ``cond`` (a constant boolean array) is true, else ``b``."""
    a, b = _operands(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make("where", out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                            _unbroadcast(np.where(cond, 0.0, g), sb)))


def detach(x):
    return Tensor(x.data, requires_grad=False)


# -- reductions / shape ----------------------------------------------------

def tsum(x, axis=None):
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", x.data.sum(axis=axis), (x,), back)


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a1, a2):
    x = as_tensor(x)
    return _make("swapaxes", np.swapaxes(x.data, a1, a2), (x,),
                 lambda g: (np.swapaxes(g, a1, a2),))


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, back)


def index_rows(x, idx):
    """``x[idx]`` along the first axis; repeated indices accumulate in backward."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make("index_rows", x.data[idx], (x,), back)


def embedding(table, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for embedding table of size {table.shape[0]}")
    return index_rows(table, ids)


def gather_last(x, idx):
    """out[..., i, j] = x[..., i, idx[..., i, j]] with ``idx`` broadcast over leading axes."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    full_idx = np.broadcast_to(idx, x.shape[:-1] + idx.shape[-1:])
    out = np.take_along_axis(x.data, full_idx, axis=-1)
    n = x.shape[-1]

    def back(g):
        rows = int(np.prod(x.shape[:-1]))
        flat = (full_idx.reshape(rows, -1) + n * np.arange(rows)[:, None]).ravel()
        acc = np.bincount(flat, weights=g.reshape(-1), minlength=rows * n)
        return (acc.reshape(x.shape).astype(g.dtype, copy=False),)

    return _make("gather_last", out, (x,), back)


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast numpy-style."""
    a, b = _operands(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", ad @ bd, (a, b), back)


# -- fused nn primitives ---------------------------------------------------

def softmax_rows(x):
    """Row-wise softmax over the last axis, stabilised by the row max."""
    x = as_tensor(x)
    xd = x.data
    if xd.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    mx = xd.max(axis=-1, keepdims=True)
    if np.any(mx <= LARGE_NEG / 2):
        raise DegenerateRowError("softmax row with every entry masked")
    e = np.exp(xd - mx)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make("softmax", p, (x,), back)


def log_softmax_rows(x):
    x = as_tensor(x)
    xd = x.data
    mx = xd.max(axis=-1, keepdims=True)
    shifted = xd - mx
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), back)


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm affine shape mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make("layer_norm", out, (x, gain, bias), back)


def cross_entropy(logits, targets, reduction="mean"):
    """Mean (or summed) negative log-likelihood of integer ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    logp = log_softmax_rows(logits)
    picked = index_pairs(logp, np.arange(n), targets)
    total = tsum(picked)
    scale = -1.0 / n if reduction == "mean" else -1.0
    return mul(total, scale)


def index_pairs(x, rows, cols):
    """Pick ``x[rows[i], cols[i]]`` from a 2-d tensor."""
    x = as_tensor(x)
    rows, cols = np.asarray(rows), np.asarray(cols)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _make("index_pairs", x.data[rows, cols], (x,), back)


def dropout(x, p, rng: np.random.Generator | None, training=True):
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.dtype)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# -- differentiation -------------------------------------------------------

def backward(tape: Tape, loss: Tensor):
    """Populate ``.grad`` of every grad-requiring leaf reachable from ``loss``."""
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss not in tape:
        raise TapeError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    on_tape = tape._out_ids
    for rec in reversed(tape.records[: on_tape[id(loss)] + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in on_tape:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps=1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x.grad = None
    x.requires_grad = True
    with Tape() as tape:
        out = f(x)
    backward(tape, out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = float(f(x).data)
            flat[i] = old - eps
            fm = float(f(x).data)
            flat[i] = old
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# -- optimiser -------------------------------------------------------------

class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamWState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(state: AdamWState, params: dict, grads: dict | None = None):
    """One bias-corrected AdamW update with decoupled weight decay.

    ``params`` maps names to Tensors; gradients come from ``grads`` when given,
    otherwise from each parameter's ``.grad`` (missing grads count as zero).
    """
    b1, b2 = state.betas
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
