"""Byte-level corpora: loading, splitting, batching and a built-in toy text."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    path: str
    data: np.ndarray  # uint8 byte tokens
    split: int  # first eval byte

    @property
    def train(self) -> np.ndarray:
        return self.data[: self.split]

    @property
    def eval(self) -> np.ndarray:
        return self.data[self.split :]


def from_bytes(raw: bytes, train_fraction: float = 0.9, path: str = "<memory>") -> Corpus:
    if not 0.0 < train_fraction < 1.0:
        raise CorpusError("train fraction must lie in (0, 1)")
    data = np.frombuffer(raw, dtype=np.uint8).copy()
    return Corpus(path, data, int(len(data) * train_fraction))


def load_corpus(path: str | os.PathLike, train_fraction: float = 0.9) -> Corpus:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    return from_bytes(p.read_bytes(), train_fraction, str(p))


def sample_batch(rng: np.random.Generator, data: np.ndarray, batch_size: int, length: int) -> np.ndarray:
    """``batch_size`` random windows of ``length`` bytes, as int64 tokens."""
    if len(data) < length:
        raise CorpusError(f"need at least {length} bytes, have {len(data)}")
    starts = rng.integers(0, len(data) - length + 1, size=batch_size)
    return np.stack([data[s : s + length] for s in starts]).astype(np.int64)


def chunks(data: np.ndarray, length: int, limit: int | None = None) -> np.ndarray:
    """Non-overlapping windows of ``length`` bytes from the start of ``data``."""
    n = len(data) // length
    if limit is not None:
        n = min(n, limit)
    if n == 0:
        raise CorpusError(f"need at least {length} bytes, have {len(data)}")
    return data[: n * length].reshape(n, length).astype(np.int64)


def read_prompts(path: str | os.PathLike) -> list[np.ndarray]:
    """Newline-separated calibration prompts, one byte sequence per line."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"calibration file not found: {path}")
    lines = [ln for ln in p.read_bytes().split(b"\n") if ln.strip()]
    return [np.frombuffer(ln, dtype=np.uint8).astype(np.int64) for ln in lines]


_WORDS = (
    "the a red blue green small big old new fast slow cat dog fox owl bird fish tree "
    "hill river stone moon sun star road house door box cup key map ship cloud rain "
    "snow wind sees likes finds takes keeps moves holds wants jumps runs sits"
).split()

_NAMES = "ada bob cy dee eli fay gus hal ivy jon kim lu max ned ora pip".split()


def toy_text(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic structured text: copy lines, key/value recall and sums.

    Most of it is only predictable by attending back to earlier tokens, so
    squeezing the key/value features visibly hurts the model.
    """
    rng = np.random.default_rng(seed)
    out: list[str] = []
    size = 0
    while size < n_bytes:
        kind = rng.integers(0, 3)
        if kind == 0:
            words = " ".join(rng.choice(_WORDS, size=int(rng.integers(3, 6))))
            line = f"{words} | {words}.\n"
        elif kind == 1:
            names = rng.choice(_NAMES, size=3, replace=False)
            vals = rng.integers(10, 100, size=3)
            facts = " ".join(f"{n}={v}" for n, v in zip(names, vals))
            j = int(rng.integers(0, 3))
            line = f"{facts} ? {names[j]}={vals[j]}\n"
        else:
            a, b = (int(x) for x in rng.integers(0, 50, size=2))
            line = f"{a}+{b}={a + b}; {b}+{a}={a + b}\n"
        out.append(line)
        size += len(line)
    return "".join(out).encode("ascii")[:n_bytes]
