"""Toeplitz MLP Mixer: embedding, pre-norm mixer blocks, final norm, LM head.

Hidden states are ``(B, D, N)`` tensors (hidden by tokens) so that token mixing
is a right-multiplication and channel maps are left-multiplications.

Token mixing comes in three modes:

* ``single``  one causal Toeplitz layer with a per-position bias.
* ``heads``   input projection, independent Toeplitz layer + bias per head,
              heads stacked along the hidden axis, output projection.
* ``kernel``  ``kernel + 1`` Toeplitz layers, layer ``i`` applied to the hidden
              rows ``i .. i + D`` of the input zero-padded with ``kernel`` rows,
              summed, plus one shared bias.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from tmm import autodiff as ad
from tmm.autodiff import Tensor
from tmm.toeplitz import ContextExhaustedError

MODES = ("single", "heads", "kernel")
DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 16
    mode: str = "heads"
    heads: int = 4
    kernel: int = 1
    n_ctx: int = 512
    mlp_ratio: int = 4
    freeze_toeplitz: bool = False
    mix_path: str = "auto"
    dtype: str = "f64"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_ctx", "mlp_ratio", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "heads" and self.d_model % self.heads:
            raise ValueError(f"heads={self.heads} does not divide d_model={self.d_model}")
        if self.kernel < 0:
            raise ValueError(f"kernel must be >= 0, got {self.kernel}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.mix_path not in ("fft", "matmul", "auto"):
            raise ValueError(f"unknown mix_path {self.mix_path!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def layer_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Parameter shapes of one mixer block, in creation order."""
    d, n = config.d_model, config.n_ctx
    shapes = {"ln1.gain": (d,), "ln1.shift": (d,)}
    if config.mode == "single":
        shapes |= {"mix.coeffs": (n,), "mix.bias": (n,)}
    elif config.mode == "heads":
        h = config.heads
        shapes |= {
            "mix.proj_in": (d, d),
            "mix.coeffs": (h, n),
            "mix.bias": (h, n),
            "mix.proj_out": (d, d),
        }
    else:
        shapes |= {"mix.coeffs": (config.kernel + 1, n), "mix.bias": (n,)}
    e = config.mlp_ratio * d
    shapes |= {"ln2.gain": (d,), "ln2.shift": (d,), "mlp.w1": (e, d), "mlp.w2": (d, e)}
    return shapes


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = {"embed": (config.vocab_size, config.d_model)}
    for i in range(config.n_layers):
        for k, s in layer_shapes(config).items():
            shapes[f"blocks.{i}.{k}"] = s
    shapes["norm.gain"] = (config.d_model,)
    shapes["norm.shift"] = (config.d_model,)
    shapes["head"] = (config.d_model, config.vocab_size)
    return shapes


def is_toeplitz_param(name: str) -> bool:
    return name.endswith("mix.coeffs") or name.endswith("mix.bias")


def _fan_in(name: str, shape: tuple, config: ModelConfig) -> int | None:
    """Kaiming fan-in for a weight, or None for zero/one-initialized tensors."""
    if name.endswith("mix.coeffs"):
        return config.n_ctx
    if name == "embed":
        return shape[1]
    if name.endswith(("mix.proj_in", "mix.proj_out", "mlp.w1", "mlp.w2")):
        return shape[1]
    return None


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = DTYPES[config.dtype]
    out = {}
    for name, shape in param_shapes(config).items():
        fan = _fan_in(name, shape, config)
        if fan is not None:
            arr = rng.normal(0.0, math.sqrt(2.0 / fan), size=shape)
        elif name.endswith("gain"):
            arr = np.ones(shape)
        else:
            # norm shifts, Toeplitz biases and the (zero-init) LM head
            arr = np.zeros(shape)
        out[name] = arr.astype(dtype)
    return out


class TMModel:
    """Parameters plus the forward pass; parameters are autodiff leaves."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        self.config = config
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.asarray(params[name])
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            frozen = config.freeze_toeplitz and is_toeplitz_param(name)
            self.params[name] = Tensor(arr, requires_grad=not frozen, name=name)

    # -- bookkeeping

    def named_parameters(self):
        return self.params.items()

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def num_parameters(self) -> int:
        return sum(int(np.prod(s)) for s in param_shapes(self.config).values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"blocks.{i}."
        return {k[len(prefix):]: t for k, t in self.params.items() if k.startswith(prefix)}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    # -- forward

    def embed(self, tokens) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (B, N), got shape {tokens.shape}")
        if tokens.shape[1] > self.config.n_ctx:
            raise ContextExhaustedError(
                f"sequence length {tokens.shape[1]} exceeds n_ctx {self.config.n_ctx}"
            )
        x = ad.embedding_gather(self.params["embed"], tokens)
        return ad.transpose(x, (0, 2, 1))

    def trunk(self, x: Tensor, path: str | None = None, trace: list | None = None) -> Tensor:
        path = path or self.config.mix_path
        for i in range(self.config.n_layers):
            x = block_forward(x, self.layer(i), self.config, path=path, trace=trace)
        return x

    def hidden(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params["norm.gain"], self.params["norm.shift"])

    def logits(self, h: Tensor) -> Tensor:
        return ad.matmul(ad.transpose(h, (0, 2, 1)), self.params["head"])

    def forward(self, tokens, path: str | None = None, trace: list | None = None) -> Tensor:
        """Logits ``(B, N, V)`` for integer tokens ``(B, N)``."""
        return self.logits(self.hidden(self.trunk(self.embed(tokens), path, trace)))

    __call__ = forward


def build(config: ModelConfig, seed: int | None = None) -> TMModel:
    return TMModel(config, init_params(config, seed))


# ---------------------------------------------------------------- blocks


def token_mix_single(x: Tensor, p: dict, path: str = "auto", trace=None) -> Tensor:
    if trace is not None:
        trace.append(x.data)
    return ad.causal_toeplitz_mix(x, p["mix.coeffs"], p["mix.bias"], path=path)


def token_mix_heads(x: Tensor, p: dict, heads: int, path: str = "auto", trace=None) -> Tensor:
    b, d, n = x.shape
    if d % heads:
        raise ValueError(f"token_mix_heads: {heads} heads do not divide hidden size {d}")
    s = ad.matmul(p["mix.proj_in"], x)
    s = ad.reshape(s, (b, heads, d // heads, n))
    if trace is not None:
        trace.append(s.data)
    y = ad.causal_toeplitz_mix(s, p["mix.coeffs"], p["mix.bias"], path=path)
    return ad.matmul(p["mix.proj_out"], ad.reshape(y, (b, d, n)))


def token_mix_kernel(x: Tensor, p: dict, kernel: int, path: str = "auto", trace=None) -> Tensor:
    b, d, n = x.shape
    if trace is not None:
        trace.append(x.data)
    coeffs = p["mix.coeffs"]
    if coeffs.shape[0] != kernel + 1:
        raise ValueError(
            f"token_mix_kernel: expected {kernel + 1} Toeplitz layers, got {coeffs.shape[0]}"
        )
    if kernel:
        xp = ad.concat_rows([x, np.zeros((b, kernel, n), dtype=x.data.dtype)])
    else:
        xp = x
    shifted = [ad.reshape(ad.slice_rows(xp, i, i + d), (b, 1, d, n)) for i in range(kernel + 1)]
    stack = shifted[0] if kernel == 0 else ad.concat_rows(shifted, axis=1)
    mixed = ad.causal_toeplitz_mix(stack, coeffs, None, path=path)
    y = ad.reshape(mixed, (b, d, n)) if kernel == 0 else _sum_axis1(mixed)
    return ad.add(y, ad.slice_rows(p["mix.bias"], 0, n, axis=0))


def _sum_axis1(t: Tensor) -> Tensor:
    # (B, K, D, N) -> (B, D, N) as a matmul with a ones vector keeps the tape small
    b, k, d, n = t.shape
    flat = ad.reshape(ad.transpose(t, (0, 2, 3, 1)), (b, d * n, k))
    ones = np.ones((k, 1), dtype=t.data.dtype)
    return ad.reshape(ad.matmul(flat, ones), (b, d, n))


def token_mix(x: Tensor, p: dict, config: ModelConfig, path: str = "auto", trace=None) -> Tensor:
    if config.mode == "single":
        return token_mix_single(x, p, path, trace)
    if config.mode == "heads":
        return token_mix_heads(x, p, config.heads, path, trace)
    return token_mix_kernel(x, p, config.kernel, path, trace)


def block_forward(x: Tensor, p: dict, config: ModelConfig, path: str = "auto", trace=None) -> Tensor:
    """Pre-norm residual block: token mix, then GELU channel MLP."""
    u = ad.add(x, token_mix(ad.layer_norm(x, p["ln1.gain"], p["ln1.shift"]), p, config, path, trace))
    h = ad.gelu(ad.matmul(p["mlp.w1"], ad.layer_norm(u, p["ln2.gain"], p["ln2.shift"])))
    return ad.add(u, ad.matmul(p["mlp.w2"], h))
