"""Causal Toeplitz token mixing.

Activations are laid out hidden-by-tokens, ``(..., D, N)``, and mixed by
right-multiplication with an upper-triangular Toeplitz matrix::

    Y[:, j] = sum_{k=0..j} coeffs[k] * X[:, j - k] + bias[j]

``coeffs[k]`` is the weight of the token ``k`` positions back.  Coefficient and
bias arrays may carry leading axes (one kernel per head, say); those align with
the trailing leading axes of ``x`` and broadcast over the hidden axis.

Three evaluation strategies share this contract: a materialized matrix multiply,
a zero-padded circular convolution through :mod:`tmm.fft`, and a single-column
decode step over cached history.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from tmm import fft as _fft

PATHS = ("fft", "matmul", "auto")

# Below this sequence length "auto" picks the materialized path; measured
# crossover on a desk CPU with `tmm bench` lies between 2048 and 4096.
AUTO_FFT_MIN_LENGTH = 4096


class ContextExhaustedError(IndexError):
    """Raised when a position is at or past the fixed context length."""


@dataclass
class ToeplitzCoeffs:
    """Per-offset weights plus per-position bias of one causal Toeplitz layer."""

    coeffs: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.coeffs.shape != self.bias.shape:
            raise ValueError(
                f"coeffs {self.coeffs.shape} and bias {self.bias.shape} differ in shape"
            )
        if not (np.isfinite(self.coeffs).all() and np.isfinite(self.bias).all()):
            raise ValueError("Toeplitz parameters must be finite")

    @classmethod
    def zeros(cls, n_ctx: int) -> "ToeplitzCoeffs":
        return cls(np.zeros(n_ctx), np.zeros(n_ctx))

    @property
    def n_ctx(self) -> int:
        return self.coeffs.shape[-1]

    def matrix(self, n: int | None = None) -> np.ndarray:
        return materialize_causal(self.coeffs, self.n_ctx if n is None else n)

    def mix(self, x, path: str = "fft") -> np.ndarray:
        return mix_forward(x, self.coeffs, self.bias, path=path)


def _check_len(n: int, n_ctx: int) -> None:
    if n > n_ctx:
        raise ContextExhaustedError(
            f"sequence length {n} exceeds Toeplitz context length {n_ctx}"
        )


@lru_cache(maxsize=32)
def _offsets(n: int) -> np.ndarray:
    off = np.arange(n)[None, :] - np.arange(n)[:, None]
    off.setflags(write=False)
    return off


@lru_cache(maxsize=32)
def _diag_plan(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # upper-triangle (i, j) pairs grouped by offset j - i, for diagonal sums
    i, j = np.triu_indices(n)
    order = np.argsort(j - i, kind="stable")
    i, j = i[order], j[order]
    starts = np.concatenate(([0], np.cumsum(np.arange(n, 1, -1))))
    for a in (i, j, starts):
        a.setflags(write=False)
    return i, j, starts


def materialize_causal(coeffs, n: int) -> np.ndarray:
    """n x n upper-triangular matrix with ``M[i, j] = coeffs[j - i]`` for j >= i."""
    coeffs = np.asarray(coeffs)
    _check_len(n, coeffs.shape[-1])
    off = _offsets(n)
    m = np.take(coeffs[..., :n], np.clip(off, 0, None), axis=-1)
    return np.where(off >= 0, m, 0.0).astype(coeffs.dtype, copy=False)


def _prepare(x, coeffs, bias):
    x = np.asarray(x)
    coeffs = np.asarray(coeffs)
    if x.ndim < 2:
        raise ValueError(f"activation block must be (..., D, N), got shape {x.shape}")
    n = x.shape[-1]
    _check_len(n, coeffs.shape[-1])
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape[-1] != coeffs.shape[-1]:
            raise ValueError(
                f"bias length {bias.shape[-1]} != coeffs length {coeffs.shape[-1]}"
            )
    if not np.isfinite(x).all():
        raise ValueError("non-finite values in Toeplitz mixer input")
    return x, coeffs, bias, n


def _add_bias(y, bias, n):
    if bias is None:
        return y
    return y + bias[..., None, :n]


def mix_forward_matmul(x, coeffs, bias=None) -> np.ndarray:
    """``X @ materialize_causal(coeffs, N) + bias`` on the materialized matrix."""
    x, coeffs, bias, n = _prepare(x, coeffs, bias)
    m = materialize_causal(coeffs, n).astype(x.dtype, copy=False)
    return _add_bias(x @ m, bias, n).astype(x.dtype, copy=False)


def mix_forward_fft(x, coeffs, bias=None) -> np.ndarray:
    """Same map as :func:`mix_forward_matmul`, in O(D N log N) via circulant embedding."""
    x, coeffs, bias, n = _prepare(x, coeffs, bias)
    size = _fft.next_fft_length(n)
    xp = np.zeros(x.shape[:-1] + (size,))
    xp[..., :n] = x
    cp = np.zeros(coeffs.shape[:-1] + (1, size))
    cp[..., 0, :n] = coeffs[..., :n]
    y = _fft.ifft(_fft.fft(xp) * _fft.fft(cp)).real[..., :n]
    return _add_bias(y, bias, n).astype(x.dtype, copy=False)


def resolve_path(path: str, n: int) -> str:
    if path not in PATHS:
        raise ValueError(f"unknown mix path {path!r}; expected one of {PATHS}")
    if path == "auto":
        return "fft" if n >= AUTO_FFT_MIN_LENGTH else "matmul"
    return path


def mix_forward(x, coeffs, bias=None, path: str = "auto") -> np.ndarray:
    x = np.asarray(x)
    if resolve_path(path, x.shape[-1]) == "fft":
        return mix_forward_fft(x, coeffs, bias)
    return mix_forward_matmul(x, coeffs, bias)


def _sum_to_coeff_shape(full: np.ndarray, cshape: tuple) -> np.ndarray:
    """Reduce ``(..., D, N)`` gradients to a ``(*clead, N)`` coefficient gradient."""
    full = full.sum(axis=-2)
    extra = full.ndim - (len(cshape))
    if extra > 0:
        full = full.sum(axis=tuple(range(extra)))
    for ax, size in enumerate(cshape[:-1]):
        if size == 1 and full.shape[ax] != 1:
            full = full.sum(axis=ax, keepdims=True)
    return full


def mix_backward(x, coeffs, grad_y, path: str = "auto", with_bias: bool = True):
    """Adjoint of the causal mix.

    Returns ``(grad_x, grad_coeffs, grad_bias)``; the parameter gradients have
    the full ``coeffs`` shape (entries past N are zero).  ``grad_bias`` is None
    when ``with_bias`` is false.
    """
    x = np.asarray(x)
    coeffs = np.asarray(coeffs)
    grad_y = np.asarray(grad_y)
    if grad_y.shape != x.shape:
        raise ValueError(
            f"mix_backward shape mismatch: x {x.shape}, grad_y {grad_y.shape}"
        )
    n = x.shape[-1]
    n_ctx = coeffs.shape[-1]
    _check_len(n, n_ctx)
    cshape = coeffs.shape
    if resolve_path(path, n) == "fft":
        size = _fft.next_fft_length(n)
        gp = np.zeros(grad_y.shape[:-1] + (size,))
        gp[..., :n] = grad_y
        xp = np.zeros(x.shape[:-1] + (size,))
        xp[..., :n] = x
        cp = np.zeros(cshape[:-1] + (1, size))
        cp[..., 0, :n] = coeffs[..., :n]
        g_hat = _fft.fft(gp)
        grad_x = _fft.ifft(np.conj(_fft.fft(cp)) * g_hat).real[..., :n]
        gc_full = _fft.ifft(np.conj(_fft.fft(xp)) * g_hat).real[..., :n]
        gc = _sum_to_coeff_shape(gc_full, cshape)
    else:
        m = materialize_causal(coeffs, n).astype(grad_y.dtype, copy=False)
        grad_x = grad_y @ np.swapaxes(m, -1, -2)
        gc = _diag_sums(x, grad_y, cshape)
    grad_coeffs = np.zeros(cshape, dtype=np.float64)
    grad_coeffs[..., :n] = gc
    grad_bias = None
    if with_bias:
        gb = _sum_to_coeff_shape(grad_y, cshape)
        grad_bias = np.zeros(cshape, dtype=np.float64)
        grad_bias[..., :n] = gb
    return grad_x.astype(x.dtype, copy=False), grad_coeffs, grad_bias


def _diag_sums(x, g, cshape):
    """grad_coeffs[k] = sum_{d, j >= k} x[d, j - k] g[d, j] via the D-contracted Gram matrix."""
    n = x.shape[-1]
    clead = cshape[:-1]
    k = len(clead)
    xb, gb = np.broadcast_arrays(x, g)
    lead = xb.shape[:-2]
    keep = lead[len(lead) - k :] if k else ()
    if len(lead) < k or tuple(clead) != tuple(keep):
        raise ValueError(
            f"coefficient leading shape {clead} must match trailing activation axes {lead}"
        )
    # fold every axis not carried by the coefficients into the contraction
    r = int(np.prod(lead[: len(lead) - k], dtype=np.int64))
    d = xb.shape[-2]
    xf = xb.reshape((r,) + keep + (d, n))
    gf = gb.reshape((r,) + keep + (d, n))
    xf = np.moveaxis(xf, 0, k).reshape(keep + (r * d, n))
    gf = np.moveaxis(gf, 0, k).reshape(keep + (r * d, n))
    q = np.swapaxes(xf, -1, -2) @ gf
    i, j, starts = _diag_plan(n)
    return np.add.reduceat(q[..., i, j], starts, axis=-1)


def decode_step(history, coeffs, x_j, j: int, bias=None) -> np.ndarray:
    """Output column j from cached input columns 0..j-1 and the new column.

    ``history`` is ``(..., D, j)``; the cost is O(D j).
    """
    coeffs = np.asarray(coeffs)
    if j >= coeffs.shape[-1]:
        raise ContextExhaustedError(
            f"position {j} is past the context length {coeffs.shape[-1]}"
        )
    history = np.asarray(history)
    x_j = np.asarray(x_j)
    if history.shape[-1] != j:
        raise ValueError(f"history holds {history.shape[-1]} columns, expected {j}")
    w = coeffs[..., j:0:-1]
    y = (history @ w[..., :, None])[..., 0] + coeffs[..., :1] * x_j
    if bias is not None:
        y = y + np.asarray(bias)[..., j : j + 1]
    return y
