"""Vocabulary, tokenizer and the frozen prior-report encoder."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
PROMPT_TOKENS = ("[BLA]", "[POS]", "[NEG]", "[UNC]")
RESERVED = (PAD, BOS, EOS, UNK) + PROMPT_TOKENS

MAX_TEXT_LEN = 100

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class EmptyReportError(ValueError):
    """Report text contains no tokens (distinct from having no prior report)."""


class Vocabulary:
    """Dense token ids; reserved tokens occupy ids 0..7, lookups fall back to UNK."""

    def __init__(self, tokens: Iterable[str]):
        seen: dict[str, int] = {}
        for tok in list(RESERVED) + [t for t in tokens if t not in RESERVED]:
            if tok not in seen:
                seen[tok] = len(seen)
        self._ids = seen
        self._tokens = list(seen)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def prompt_ids(self) -> list[int]:
        return [self._ids[t] for t in PROMPT_TOKENS]

    def decode(self, ids: Sequence[int], stop_at_eos: bool = True) -> str:
        words = []
        for i in ids:
            if stop_at_eos and i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            words.append(self._tokens[i])
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or out of order")
        return cls(lines)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens


def words(text: str) -> list[str]:
    """Lower-case word/punctuation split; no vocabulary lookup, no truncation."""
    return _TOKEN_RE.findall(" ".join(text.split()).lower())


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_TEXT_LEN) -> list[int]:
    toks = words(text)
    if not toks:
        raise EmptyReportError("report text is empty")
    return [vocab.id(t) for t in toks[:max_len]]


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """``(length, dim)`` sin/cos position codes."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class FrozenTextEncoder:
    """Seeded random token embeddings plus sinusoidal positions.

    Never trainable: nothing here is registered in a parameter store, and the
    produced features never require gradient.
    """

    def __init__(self, vocab_size: int, dim: int = 64, seed: int = 0,
                 use_positions: bool = True, dtype=np.float32):
        rng = np.random.default_rng([seed, 7919])
        self.dim = dim
        self.vocab_size = vocab_size
        self.use_positions = use_positions
        self.dtype = np.dtype(dtype)
        self._table = rng.standard_normal((vocab_size, dim))

    def encode(self, ids: Sequence[int]) -> Tensor:
        """Return the ``(dim, L)`` text feature for a token id sequence."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("cannot encode an empty token sequence")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise IndexError(f"token id out of range for vocabulary of size {self.vocab_size}")
        feat = self._table[ids]
        if self.use_positions:
            feat = feat + sinusoidal_positions(len(ids), self.dim)
        return Tensor(feat.T.astype(self.dtype), requires_grad=False)
