"""Binary token files and model checkpoints (little-endian, platform independent).

Token file::

    magic  b"TMTK"
    u32    version (1)
    u32    vocab_size
    u32    token width in bytes (2 or 4)
    u64    token count
    ...    count little-endian unsigned ids

Checkpoint::

    magic  b"TMM1"
    u32    version (1)
    u64    payload length
    ...    payload
    u32    crc32(payload)

    payload:
      u32 + utf-8 JSON   model config
      u32                parameter count, then per parameter a tensor record
      u8                 optimizer flag; when 1:
        u64 step, f64 beta1, beta2, eps, weight_decay,
        u32 entry count, then per entry: name, m record, v record

    tensor record: u16 name length, utf-8 name, u8 rank, u32 * rank shape,
                   u8 dtype tag (1 = f64, 2 = f32), raw data
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TOKEN_MAGIC = b"TMTK"
TOKEN_VERSION = 1
_TOKEN_HEADER = struct.Struct("<4sIIIQ")

CKPT_MAGIC = b"TMM1"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")

_DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_TAG_OF = {np.dtype(np.float64): 1, np.dtype(np.float32): 2}


class FormatError(ValueError):
    """Malformed or unsupported file."""


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


# ---------------------------------------------------------------- token files


@dataclass
class TokenFile:
    vocab_size: int
    tokens: np.ndarray
    width: int = 2

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if self.width not in (2, 4):
            raise FormatError(f"token width must be 2 or 4 bytes, got {self.width}")
        if self.vocab_size > (1 << (8 * self.width)):
            raise FormatError(f"vocab {self.vocab_size} does not fit in {self.width}-byte ids")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise FormatError("token id outside [0, vocab_size)")

    @property
    def count(self) -> int:
        return int(self.tokens.size)

    def to_bytes(self) -> bytes:
        header = _TOKEN_HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, self.vocab_size, self.width, self.count)
        dt = "<u2" if self.width == 2 else "<u4"
        return header + self.tokens.astype(dt).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "TokenFile":
        if len(buf) < _TOKEN_HEADER.size:
            raise FormatError("token file shorter than its header")
        magic, version, vocab, width, count = _TOKEN_HEADER.unpack_from(buf)
        if magic != TOKEN_MAGIC:
            raise FormatError(f"bad token file magic {magic!r}")
        if version != TOKEN_VERSION:
            raise VersionError(f"unsupported token file version {version}")
        if width not in (2, 4):
            raise FormatError(f"token width must be 2 or 4, got {width}")
        payload = buf[_TOKEN_HEADER.size :]
        if len(payload) != count * width:
            raise FormatError(f"payload is {len(payload)} bytes, header says {count * width}")
        dt = "<u2" if width == 2 else "<u4"
        return cls(vocab, np.frombuffer(payload, dtype=dt).astype(np.int64), width)


def default_width(vocab_size: int) -> int:
    return 2 if vocab_size <= 1 << 16 else 4


def write_tokenfile(path, tokens, vocab_size: int, width: int | None = None) -> TokenFile:
    tf = TokenFile(vocab_size, tokens, width or default_width(vocab_size))
    Path(path).write_bytes(tf.to_bytes())
    return tf


def read_tokenfile(path) -> TokenFile:
    return TokenFile.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- checkpoints


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *vals):
        self.parts.append(struct.pack("<" + fmt, *vals))

    def name(self, s: str):
        b = s.encode("utf-8")
        self.pack("H", len(b))
        self.parts.append(b)

    def tensor(self, name: str, arr: np.ndarray):
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        self.name(name)
        self.pack("B", arr.ndim)
        if arr.ndim:
            self.pack(f"{arr.ndim}I", *arr.shape)
        tag = _TAG_OF[arr.dtype]
        self.pack("B", tag)
        self.parts.append(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        if self.pos + s.size > len(self.buf):
            raise FormatError("truncated checkpoint payload")
        vals = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint payload")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def name(self) -> str:
        (n,) = self.unpack("H")
        return self.raw(n).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.name()
        (rank,) = self.unpack("B")
        shape = self.unpack(f"{rank}I") if rank else ()
        (tag,) = self.unpack("B")
        if tag not in _DTYPE_TAGS:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        dt = _DTYPE_TAGS[tag]
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self.raw(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, data.astype(dt.newbyteorder("="))


@dataclass
class Checkpoint:
    model: object  # TMModel
    state: object | None  # OptimizerState


def checkpoint_bytes(model, state=None) -> bytes:
    w = _Writer()
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    w.pack("I", len(cfg))
    w.parts.append(cfg)
    params = model.state_dict()
    w.pack("I", len(params))
    for name, arr in params.items():
        w.tensor(name, arr)
    if state is None:
        w.pack("B", 0)
    else:
        w.pack("B", 1)
        w.pack("Q", state.step)
        w.pack("4d", state.beta1, state.beta2, state.eps, state.weight_decay)
        names = sorted(state.m)
        w.pack("I", len(names))
        for name in names:
            w.name(name)
            w.tensor("m", state.m[name])
            w.tensor("v", state.v[name])
    payload = w.getvalue()
    return (
        _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(payload))
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    from tmm.model import ModelConfig, TMModel
    from tmm.training import OptimizerState

    if len(buf) < _CKPT_HEADER.size + 4:
        raise FormatError("checkpoint shorter than its header")
    magic, version, length = _CKPT_HEADER.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    start = _CKPT_HEADER.size
    if len(buf) != start + length + 4:
        raise FormatError("checkpoint length does not match its header")
    payload = buf[start : start + length]
    (crc,) = struct.unpack_from("<I", buf, start + length)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("checkpoint crc32 mismatch")
    r = _Reader(payload)
    (n,) = r.unpack("I")
    config = ModelConfig.from_dict(json.loads(r.raw(n).decode("utf-8")))
    (count,) = r.unpack("I")
    params = {}
    for _ in range(count):
        name, arr = r.tensor()
        if name in params:
            raise FormatError(f"duplicate parameter {name!r}")
        params[name] = arr
    model = TMModel(config, params)
    state = None
    (flag,) = r.unpack("B")
    if flag:
        (step,) = r.unpack("Q")
        b1, b2, eps, wd = r.unpack("4d")
        state = OptimizerState(beta1=b1, beta2=b2, eps=eps, weight_decay=wd, step=step)
        (entries,) = r.unpack("I")
        for _ in range(entries):
            name = r.name()
            state.m[name] = r.tensor()[1]
            state.v[name] = r.tensor()[1]
    if r.pos != len(payload):
        raise FormatError("trailing bytes in checkpoint payload")
    return Checkpoint(model, state)


def save_checkpoint(path, model, state=None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, state))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
