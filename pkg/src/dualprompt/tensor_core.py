"""Dense float64 tensors with a linear reverse-mode tape.

Every differentiable op appends one record to the active :class:`Tape` when
any of its inputs requires a gradient.  :func:`backward` walks the records in
exact reverse order.  Only tensors with ``requires_grad=True`` ever receive a
``grad``; frozen tensors are never touched.

Broadcasting is deliberately limited: batched matmul may broadcast a 2-D right
operand over leading dims, and the row-wise ops (``add_bias``, ``layernorm``)
broadcast a ``[D]`` vector over rows.  Everything else needs identical shapes.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "ShapeError", "active_tape", "no_grad", "backward",
    "matmul", "add", "sub", "mul", "div", "scale", "add_scalar", "add_bias",
    "gelu", "softmax", "layernorm", "concat_seq", "concat_last", "expand_batch", "reshape",
    "transpose", "slice_last", "slice_seq", "select_token", "sum_all",
    "mean", "rowdot", "l2norm", "cosine_distance", "cross_entropy_logits",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(data, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    # operator sugar; all routes through the recorded ops below
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _fail_item(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of executed differentiable ops.

    Use as a context manager to make it the active tape for the current thread.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.records.append(_Record(out, inputs, backward_fn))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor, clear: bool = True) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward_fn(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    leaves[key] = inp
        # whatever is left was never produced by a recorded op: a leaf parameter
        for key, g in grads.items():
            t = leaves.get(key, loss if key == id(loss) else None)
            if t is None or not t.requires_grad:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        if clear:
            self.clear()


_local = threading.local()


def _stack() -> list[Tape]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = [Tape()]
    return st


def active_tape() -> Tape:
    return _stack()[-1]


@contextmanager
def no_grad():
    tape = active_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every trainable tensor reachable from ``loss``."""
    active_tape().backward(loss)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs:
        tape.record(out, tuple(inputs), backward_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., M, K] x [..., K, N]``.

    ``b`` may be 2-D, in which case it is shared across all leading dims of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ _swap(bd) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _swap(ad) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd if a.requires_grad else None,
                                               g * ad if b.requires_grad else None))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + float(c), (x,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine shift: ``x[..., D] + b[D]``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    d = b.shape[0]

    def bw(g):
        return g, (g.reshape(-1, d).sum(axis=0) if b.requires_grad else None)

    return _make(x.data + b.data, (x, b), bw)


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = erf(xd * _SQRT_HALF)
    cdf += 1.0
    cdf *= 0.5

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd)
        pdf *= _INV_SQRT_2PI
        pdf *= xd
        pdf += cdf
        pdf *= g
        return (pdf,)

    return _make(xd * cdf, (x,), bw)


# ---------------------------------------------------------------- normalisers

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} vs last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        ggamma = (g2 * xhat.reshape(-1, d)).sum(axis=0) if gamma.requires_grad else None
        gbeta = g2.sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------- shape plumbing

def concat_seq(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the sequence axis (second to last): rows of ``a`` then ``b``."""
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_seq: cannot stack {a.shape} on {b.shape}")
    la = a.shape[-2]
    return _make(np.concatenate([a.data, b.data], axis=-2), (a, b),
                 lambda g: (g[..., :la, :], g[..., la:, :]))


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; leading dims must agree."""
    parts = list(parts)
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise ShapeError(f"concat_last: leading dims differ: {[p.shape for p in parts]}")
    edges = np.cumsum([0] + [p.shape[-1] for p in parts])
    return _make(np.concatenate([p.data for p in parts], axis=-1), parts,
                 lambda g: tuple(g[..., edges[i]:edges[i + 1]] for i in range(len(parts))))


def expand_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat ``x`` along a new leading axis of length ``batch``."""
    out = np.broadcast_to(x.data, (batch,) + x.shape)
    return _make(out, (x,), lambda g: (g.sum(axis=0),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop], (x,), bw)


def slice_seq(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the sequence axis."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return _make(x.data[..., start:stop, :], (x,), bw)


def select_token(x: Tensor, index: int) -> Tensor:
    """Pick one sequence position: ``[..., L, D] -> [..., D]``."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., index, :] = g
        return (full,)

    return _make(x.data[..., index, :], (x,), bw)


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.array(x.data.sum() / n), (x,), lambda g: (np.full_like(x.data, g / n),))


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Dot product over the last axis: ``[..., D], [..., D] -> [...]``."""
    _same_shape("rowdot", a, b)
    ad, bd = a.data, b.data
    return _make((ad * bd).sum(axis=-1), (a, b),
                 lambda g: (g[..., None] * bd, g[..., None] * ad))


def l2norm(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Euclidean norm over the last axis, clamped below at ``floor``."""
    xd = x.data
    raw = np.sqrt((xd * xd).sum(axis=-1))
    n = np.maximum(raw, floor)

    def bw(g):
        live = raw > floor
        return (np.where(live[..., None], g[..., None] * xd / n[..., None], 0.0),)

    return _make(n, (x,), bw)


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """``1 - cos(a, b)`` row-wise over the last axis, norms clamped at 1e-12."""
    cos = div(rowdot(a, b), mul(l2norm(a), l2norm(b)))
    return add_scalar(scale(cos, -1.0), 1.0)


def cross_entropy_logits(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean softmax cross-entropy over a ``[B, C]`` logit matrix.

    ``mask`` is an optional boolean ``[C]`` vector; masked-out classes are
    excluded from the softmax (their logits get no gradient).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits: expected [B, C], got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if y.shape != (b,):
        raise ShapeError(f"cross_entropy_logits: {y.shape[0] if y.ndim else 0} labels for {b} rows")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"label outside [0, {c}) in cross_entropy_logits")
    z = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask[y].all():
            raise ValueError("cross_entropy_logits: a label is masked out")
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(s)
    rows = np.arange(b)
    loss = -logp[rows, y].sum() / b
    p = e / s

    def bw(g):
        d = p.copy()
        d[rows, y] -= 1.0
        return (d * (g / b),)

    return _make(np.array(loss), (logits,), bw)
