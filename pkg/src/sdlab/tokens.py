"""Character vocabulary, token sequences, and probability distributions.

Token sequences are plain ``list[int]``; distributions are 1-D float64
numpy arrays that sum to 1. Both are shared read-only across the engine,
the policies, and the metrics layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng

DIST_SUM_TOL = 1e-9


@dataclass(frozen=True)
class Vocab:
    symbols: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.symbols)})

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        # Reserved id one past the vocabulary; embeds to zeros, never generated.
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: list[int]) -> str:
        return "".join(self.symbols[i] for i in ids)


def build_char_vocab(corpus: str) -> Vocab:
    """Sorted distinct characters of ``corpus``."""
    if not corpus:
        raise ValueError("empty corpus")
    return Vocab(tuple(sorted(set(corpus))))


def _escape_symbol(c: str) -> str:
    if c == "\\":
        return "\\\\"
    if c.isprintable() and c != " ":
        return c
    if c == " ":
        return "\\s"
    return f"\\u{ord(c):04x}"


def _unescape_symbol(s: str) -> str:
    if not s.startswith("\\"):
        return s
    if s == "\\\\":
        return "\\"
    if s == "\\s":
        return " "
    if s.startswith("\\u"):
        return chr(int(s[2:], 16))
    raise ValueError(f"bad vocab escape {s!r}")


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    """One symbol per line, index = line number; whitespace escaped."""
    Path(path).write_text(
        "".join(_escape_symbol(c) + "\n" for c in vocab.symbols), encoding="utf-8"
    )


def load_vocab(path: str | Path) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocab(tuple(_unescape_symbol(s) for s in lines))


def check_dist(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("distribution must be 1-D")
    if (d < 0).any():
        raise ValueError("distribution has negative entries")
    if abs(float(d.sum()) - 1.0) > DIST_SUM_TOL:
        raise ValueError(f"distribution sums to {d.sum()!r}, not 1")
    return d


def normalize(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if (raw < 0).any():
        raise ValueError("cannot normalize negative entries")
    total = float(raw.sum())
    if total <= 0.0:
        raise ValueError("degenerate distribution")
    return raw / total


def residual_dist(p: np.ndarray, p_hat: np.ndarray) -> np.ndarray:
    """Rejection fallback distribution: normalized positive part of p - p_hat."""
    diff = np.maximum(0.0, np.asarray(p, dtype=np.float64) - np.asarray(p_hat, dtype=np.float64))
    total = float(diff.sum())
    if total <= 0.0:
        raise ValueError("degenerate residual")
    return diff / total


def argmax_dist(d: np.ndarray) -> int:
    """Index of the largest mass; ties break to the lowest index."""
    return int(np.argmax(d))


def sample(d: np.ndarray, rng: Rng) -> int:
    """Inverse-CDF draw over index order using a single uniform."""
    cdf = np.cumsum(np.asarray(d, dtype=np.float64))
    idx = int(np.searchsorted(cdf, rng.uniform(), side="right"))
    return min(idx, len(cdf) - 1)
