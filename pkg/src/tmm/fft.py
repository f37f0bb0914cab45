"""Iterative radix-2 FFT and circular convolution.

Transforms run along the last axis and broadcast over any leading axes, so a
whole ``(..., D, L)`` activation block is transformed in one call.  Inputs are
promoted to complex128; real inputs are handled as complex with zero imaginary
part.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


class FFTSizeError(ValueError):
    """Raised when a transform length is not a power of two."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_fft_length(n: int) -> int:
    """Smallest power of two that is >= 2n (room for the circulant embedding)."""
    if n < 1:
        raise ValueError(f"next_fft_length needs n >= 1, got {n}")
    return 1 << (2 * n - 1).bit_length()


@lru_cache(maxsize=64)
def _plan(n: int) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    """Bit-reversal permutation and per-stage twiddles for length n (read-only)."""
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    twiddles = []
    m = 2
    while m <= n:
        w = np.exp(-2j * np.pi * np.arange(m // 2) / m)
        w.setflags(write=False)
        twiddles.append(w)
        m *= 2
    return rev, tuple(twiddles)


def fft(x, inverse: bool = False) -> np.ndarray:
    """DFT along the last axis.

    Forward is unnormalized; ``inverse=True`` scales by 1/n so that
    ``fft(fft(x), inverse=True) == x``.
    """
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    if not is_power_of_two(n):
        raise FFTSizeError(f"FFT length must be a power of two, got {n}")
    if inverse:
        a = np.conj(a)
    rev, twiddles = _plan(n)
    a = a[..., rev]
    lead = a.shape[:-1]
    for w in twiddles:
        m = 2 * w.shape[0]
        a = a.reshape(*lead, n // m, m)
        lo = a[..., : m // 2]
        hi = a[..., m // 2 :] * w
        a = np.concatenate((lo + hi, lo - hi), axis=-1)
    a = a.reshape(*lead, n)
    if inverse:
        a = np.conj(a) / n
    return a


def ifft(x) -> np.ndarray:
    return fft(x, inverse=True)


def circular_convolve(a, b) -> np.ndarray:
    """Cyclic convolution of two real sequences along the last axis.

    Leading axes broadcast.  The imaginary residue of the inverse transform is
    discarded.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(
            f"circular_convolve length mismatch: {a.shape[-1]} vs {b.shape[-1]}"
        )
    return ifft(fft(a) * fft(b)).real


def circular_correlate(a, b) -> np.ndarray:
    """r[k] = sum_j a[j] * b[(j + k) mod n], computed as IFFT(conj(FFT(a)) * FFT(b))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(
            f"circular_correlate length mismatch: {a.shape[-1]} vs {b.shape[-1]}"
        )
    return ifft(np.conj(fft(a)) * fft(b)).real
