"""Define-by-run reverse-mode differentiation over numpy arrays.

Operations executed inside ``with Tape() as tape:`` are appended to that tape
when any input requires a gradient.  ``backward(root)`` walks the tape in
reverse and accumulates ``.grad`` on every leaf that requires one.  Outside a
tape nothing is recorded, which is how inference runs.

Only the primitives the mixer model needs are provided.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from tmm import toeplitz

_ACTIVE: list["Tape"] = []
DEBUG = False


def set_debug(flag: bool) -> None:
    """Validate finiteness of every primitive output when enabled."""
    global DEBUG
    DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data) if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable
    op: str


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        tape = _ACTIVE[-1]
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, tuple(inputs), backward, op))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _shape_error(op: str, *shapes):
    return ValueError(f"{op}: incompatible shapes {', '.join(map(str, shapes))}")


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise _shape_error("elementwise_mul", a.shape, b.shape) from None

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("elementwise_mul", data, (a, b), back)


elementwise_mul = mul


def scale(a, s: float) -> Tensor:
    a = _lift(a)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise _shape_error("matmul", a.shape, b.shape)
    try:
        data = a.data @ b.data
    except ValueError:
        raise _shape_error("matmul", a.shape, b.shape) from None

    def back(g):
        ga = gb = None
        if a.requires_grad:
            if a.ndim == 2 and b.ndim > 2:
                # shared weight on the left: contract batch and column axes in one GEMM
                lead = tuple(range(b.ndim - 2)) + (b.ndim - 1,)
                ga = np.tensordot(g, b.data, axes=(lead, lead))
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", data, (a, b), back)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _lift(a)
    return _record("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF (erf form, not tanh)."""
    x = _lift(x)
    cdf = ndtr(x.data)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _record("gelu", x.data * cdf, (x,), back)


def layer_norm(x, gain, shift, axis: int = -2, eps: float = 1e-5) -> Tensor:
    """Normalize over ``axis`` (the hidden axis by default); gain/shift are 1-D."""
    x, gain, shift = _lift(x), _lift(gain), _lift(shift)
    d = x.shape[axis]
    if gain.shape != (d,) or shift.shape != (d,):
        raise _shape_error("layer_norm", x.shape, gain.shape, shift.shape)
    bshape = [1] * x.ndim
    bshape[axis] = d
    g_b = gain.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * g_b + shift.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis % x.ndim)

    def back(g):
        gx = None
        if x.requires_grad:
            dxhat = g * g_b
            gx = inv * (
                dxhat
                - dxhat.mean(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return _record("layer_norm", out, (x, gain, shift), back)


def embedding_gather(table, ids) -> Tensor:
    """Rows of ``table`` (V, D) selected by integer ``ids``; output shape ids.shape + (D,)."""
    table = _lift(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding_gather: ids must lie in [0, {table.shape[0]}), "
            f"got range [{ids.min()}, {ids.max()}]"
        )

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding_gather", table.data[ids], (table,), back)


def concat_rows(tensors, axis: int = -2) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise _shape_error("concat_rows", *(t.shape for t in ts)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _record("concat_rows", data, ts, back)


def slice_rows(x, start: int, stop: int, axis: int = -2) -> Tensor:
    x = _lift(x)
    size = x.shape[axis]
    if not (0 <= start <= stop <= size):
        raise ValueError(f"slice_rows: [{start}:{stop}] out of range for axis of size {size}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record("slice_rows", x.data[idx], (x,), back)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _lift(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _lift(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", x.shape, tuple(shape)) from None
    return _record("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def causal_toeplitz_mix(x, coeffs, bias=None, path: str = "auto") -> Tensor:
    """Causal Toeplitz mix of a ``(..., D, N)`` tensor; see :mod:`tmm.toeplitz`."""
    x, coeffs = _lift(x), _lift(coeffs)
    inputs = [x, coeffs]
    if bias is not None:
        bias = _lift(bias)
        inputs.append(bias)
    if x.ndim < 2 or (bias is not None and bias.shape != coeffs.shape):
        raise _shape_error(
            "causal_toeplitz_mix", x.shape, coeffs.shape, None if bias is None else bias.shape
        )
    path = toeplitz.resolve_path(path, x.shape[-1])
    data = toeplitz.mix_forward(x.data, coeffs.data, None if bias is None else bias.data, path)

    def back(g):
        gx, gc, gb = toeplitz.mix_backward(
            x.data, coeffs.data, g, path=path, with_bias=bias is not None
        )
        gc = gc.astype(coeffs.data.dtype, copy=False)
        if bias is None:
            return gx, gc
        return gx, gc, gb.astype(bias.data.dtype, copy=False)

    return _record("causal_toeplitz_mix", data, inputs, back)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mask-weighted mean of ``-log softmax(logits)[target]`` over (B, N) positions."""
    logits = _lift(logits)
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise _shape_error("cross_entropy", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"cross_entropy: target ids must lie in [0, {v})")
    w = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    if w.shape != targets.shape:
        raise _shape_error("cross_entropy", logits.shape, w.shape)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: mask selects no positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    loss = ((lse - picked) * w).sum() / total

    def back(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (((g * w / total)[..., None] * p).astype(logits.data.dtype, copy=False),)

    return _record("cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), back)


# ---------------------------------------------------------------- backward


def backward(root: Tensor, tape: Tape | None = None, retain: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

    The tape is released afterwards unless ``retain``; outputs point back at
    their tape, so keeping it alive would pin every saved activation.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    tape = tape or root._tape
    if tape is None:
        raise ValueError("root was not recorded on a tape (no input requires grad)")
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        node.out.grad = None if node.out is not root else g
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
            else:
                inp.grad = inp.grad + gi
    if not retain:
        for node in tape.nodes:
            node.out._tape = None
        tape.nodes.clear()
