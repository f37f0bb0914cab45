"""Tokenization, windowing and a small built-in text corpus."""

from __future__ import annotations

import importlib.util
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tmm.formats import TokenFile, default_width

# Stdlib modules whose source makes a deterministic, offline sample of real text.
CORPUS_MODULES = (
    "argparse", "textwrap", "difflib", "shlex", "calendar", "fractions",
    "ftplib", "imaplib", "mailbox", "pydoc", "tarfile", "zipfile", "ssl",
    "smtplib", "inspect", "turtle", "typing", "dataclasses", "statistics",
)


def tokenize_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize_bytes(ids) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


_WORD = re.compile(r"\S+|\s+")


def tokenize_words(text: str, vocab: dict[str, int] | None = None) -> tuple[np.ndarray, dict[str, int]]:
    """Split into runs of non-space and space characters; unknown pieces map to id 0."""
    pieces = _WORD.findall(text)
    if vocab is None:
        vocab = {"<unk>": 0}
        for p in sorted(set(pieces)):
            vocab.setdefault(p, len(vocab))
    ids = np.array([vocab.get(p, 0) for p in pieces], dtype=np.int64)
    return ids, vocab


def detokenize_words(ids, vocab: dict[str, int]) -> str:
    inv = {i: w for w, i in vocab.items()}
    return "".join(inv[int(i)] for i in ids)


def tokenize(paths, scheme: str = "byte") -> tuple[TokenFile, dict | None]:
    """Tokenize and concatenate files; returns the token file and (word scheme) vocab."""
    raw = b"".join(Path(p).read_bytes() for p in paths)
    if scheme == "byte":
        return TokenFile(256, tokenize_bytes(raw), 2), None
    if scheme == "word":
        ids, vocab = tokenize_words(raw.decode("utf-8"))
        return TokenFile(len(vocab), ids, default_width(len(vocab))), vocab
    raise ValueError(f"unknown tokenization scheme {scheme!r}")


def save_vocab(path, vocab: dict) -> None:
    Path(path).write_text(json.dumps(vocab, ensure_ascii=False))


def load_vocab(path) -> dict:
    return json.loads(Path(path).read_text())


@dataclass
class WindowDataset:
    train: np.ndarray  # (n_train, length)
    eval: np.ndarray  # (n_eval, length)

    def batches(self, batch_size: int, seed: int = 0, split: str = "train"):
        """Endless shuffled batches, reshuffled each pass."""
        data = self.train if split == "train" else self.eval
        if len(data) == 0:
            raise ValueError(f"{split} split is empty")
        rng = np.random.default_rng(seed)
        while True:
            order = rng.permutation(len(data))
            for i in range(0, len(order) - batch_size + 1, batch_size):
                yield data[order[i : i + batch_size]]


def window_dataset(tokens, length: int, stride: int | None = None, eval_fraction: float = 0.0,
                   seed: int | None = None) -> WindowDataset:
    """Cut full windows of ``length`` tokens, ``stride`` apart (default non-overlapping).

    The last ``eval_fraction`` of windows (in corpus order) is held out before
    the training windows are shuffled by ``seed`` (None keeps corpus order).
    """
    if isinstance(tokens, TokenFile):
        tokens = tokens.tokens
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    stride = length if stride is None else stride
    if length < 1 or stride < 1:
        raise ValueError("window length and stride must be >= 1")
    if not 0.0 <= eval_fraction < 1.0:
        raise ValueError("eval_fraction must lie in [0, 1)")
    count = 0 if tokens.size < length else (tokens.size - length) // stride + 1
    starts = np.arange(count) * stride
    windows = tokens[starts[:, None] + np.arange(length)[None, :]] if count else np.zeros((0, length), np.int64)
    n_eval = int(round(count * eval_fraction))
    train, held = windows[: count - n_eval], windows[count - n_eval :]
    if seed is not None:
        train = train[np.random.default_rng(seed).permutation(len(train))]
    return WindowDataset(train, held)


def builtin_corpus(max_bytes: int = 1 << 20) -> bytes:
    """Concatenated Python stdlib sources, truncated to ``max_bytes``."""
    chunks, total = [], 0
    for name in CORPUS_MODULES:
        spec = importlib.util.find_spec(name)
        if spec is None or not spec.origin or not spec.origin.endswith(".py"):
            continue
        text = Path(spec.origin).read_bytes()
        chunks.append(text)
        total += len(text)
        if total >= max_bytes:
            break
    return b"".join(chunks)[:max_bytes]
