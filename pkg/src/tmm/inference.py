"""Prefill plus cached single-token decoding.

The cache holds, for every block, the token-mixing inputs seen so far (the
normalized columns, or the per-head projected columns in heads mode).  Each
decode step therefore costs O(d * j) for mixing at position j, and the
residual stream itself never needs to be stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from tmm.model import TMModel
from tmm.toeplitz import ContextExhaustedError, decode_step


@dataclass
class DecodeCache:
    layers: list  # per block: array (..., D_mix, n_ctx) of mixing inputs
    position: int = 0

    def columns(self, layer: int) -> np.ndarray:
        return self.layers[layer][..., : self.position]


@dataclass
class SamplerSpec:
    mode: str = "greedy"  # greedy | temperature | top_k
    temperature: float = 1.0
    k: int = 1
    seed: int = 0
    rng: np.random.Generator | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature", "top_k"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.k < 1:
            raise ValueError("top_k needs k >= 1")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)


def sample(logits: np.ndarray, spec: SamplerSpec) -> int:
    logits = np.asarray(logits, dtype=np.float64)
    if spec.mode == "greedy":
        return int(np.argmax(logits))
    z = logits / spec.temperature
    if spec.mode == "top_k":
        k = min(spec.k, z.shape[-1])
        cut = np.partition(z, -k)[-k]
        z = np.where(z >= cut, z, -np.inf)
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(spec.rng.choice(p.shape[-1], p=p))


def _ln(x, gain, shift, eps=1e-5):
    xc = x - x.mean()
    return xc / np.sqrt((xc * xc).mean() + eps) * gain + shift


def _gelu(x):
    return x * ndtr(x)


def _empty_cache(model: TMModel) -> DecodeCache:
    c = model.config
    if c.mode == "heads":
        shape = (c.heads, c.head_dim, c.n_ctx)
    elif c.mode == "kernel":
        shape = (c.kernel + 1, c.d_model, c.n_ctx)
    else:
        shape = (c.d_model, c.n_ctx)
    return DecodeCache([np.zeros(shape) for _ in range(c.n_layers)])


def _kernel_stack(cols: np.ndarray, kernel: int) -> np.ndarray:
    """(D, n) normalized columns -> (kernel+1, D, n) row-shifted, zero-padded copies."""
    d = cols.shape[0]
    padded = np.concatenate([cols, np.zeros((kernel,) + cols.shape[1:])], axis=0)
    return np.stack([padded[i : i + d] for i in range(kernel + 1)])


def prefill(model: TMModel, prompt) -> tuple[np.ndarray, DecodeCache]:
    """Run the prompt through the FFT path once; return last-position logits and the cache."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    n = prompt.shape[0]
    if n == 0:
        raise ValueError("prefill needs at least one prompt token")
    if n > model.config.n_ctx:
        raise ContextExhaustedError(f"prompt of {n} tokens exceeds n_ctx {model.config.n_ctx}")
    trace: list = []
    logits = model.forward(prompt[None, :], path="fft", trace=trace).data[0, -1]
    cache = _empty_cache(model)
    for buf, cols in zip(cache.layers, trace):
        cols = cols[0]
        if model.config.mode == "kernel":
            cols = _kernel_stack(cols, model.config.kernel)
        buf[..., :n] = cols
    cache.position = n
    return logits, cache


def decode(model: TMModel, cache: DecodeCache, token: int) -> np.ndarray:
    """Append ``token`` at position ``cache.position`` and return next-token logits."""
    c = model.config
    j = cache.position
    if j >= c.n_ctx:
        raise ContextExhaustedError(
            f"context exhausted: position {j} with n_ctx {c.n_ctx} (bias fixes the maximum length)"
        )
    if not 0 <= token < c.vocab_size:
        raise ValueError(f"token id {token} outside [0, {c.vocab_size})")
    p = {k: t.data for k, t in model.params.items()}
    x = p["embed"][token].astype(np.float64)
    for i in range(c.n_layers):
        pre = f"blocks.{i}."
        xn = _ln(x, p[pre + "ln1.gain"], p[pre + "ln1.shift"])
        coeffs, bias = p[pre + "mix.coeffs"], p[pre + "mix.bias"]
        buf = cache.layers[i]
        if c.mode == "single":
            col = xn
            mixed = decode_step(buf[:, :j], coeffs, col, j, bias)
        elif c.mode == "heads":
            col = (p[pre + "mix.proj_in"] @ xn).reshape(c.heads, c.head_dim)
            y = decode_step(buf[..., :j], coeffs, col, j, bias)
            mixed = p[pre + "mix.proj_out"] @ y.reshape(-1)
        else:
            col = _kernel_stack(xn[:, None], c.kernel)[..., 0]
            mixed = decode_step(buf[..., :j], coeffs, col, j).sum(axis=0) + bias[j]
        buf[..., j] = col
        u = x + mixed
        h = _gelu(p[pre + "mlp.w1"] @ _ln(u, p[pre + "ln2.gain"], p[pre + "ln2.shift"]))
        x = u + p[pre + "mlp.w2"] @ h
    cache.position = j + 1
    return _ln(x, p["norm.gain"], p["norm.shift"]) @ p["head"]


def iter_generate(model: TMModel, prompt, max_new: int, sampler: SamplerSpec | None = None):
    """Yield sampled tokens one at a time (prompt excluded)."""
    prompt = [int(t) for t in np.asarray(prompt).reshape(-1)]
    sampler = sampler or SamplerSpec()
    n_new = min(max_new, model.config.n_ctx - len(prompt))
    if n_new <= 0:
        return
    logits, cache = prefill(model, prompt)
    for t in range(n_new):
        tok = sample(logits, sampler)
        yield tok
        if t < n_new - 1:
            logits = decode(model, cache, tok)


def generate(model: TMModel, prompt, max_new: int, sampler: SamplerSpec | None = None) -> list[int]:
    """Prompt followed by up to ``max_new`` sampled tokens, stopping at the context limit."""
    prompt = [int(t) for t in np.asarray(prompt).reshape(-1)]
    return prompt + list(iter_generate(model, prompt, max_new, sampler))


def rollout_recompute(model: TMModel, prompt, steps: int) -> tuple[list[int], list[np.ndarray]]:
    """Greedy reference rollout that re-runs the full forward every step."""
    seq = [int(t) for t in np.asarray(prompt).reshape(-1)]
    logits_seen = []
    for _ in range(steps):
        logits = model.forward(np.asarray(seq)[None, :]).data[0, -1]
        logits_seen.append(logits)
        seq.append(int(np.argmax(logits)))
    return seq, logits_seen
