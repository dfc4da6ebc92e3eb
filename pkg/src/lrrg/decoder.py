"""Prompt-conditioned transformer report decoder, greedy/beam generation and the total loss.

Decoder input is ``[14 prompt tokens] + [BOS] + gold[:-1]``; only positions
from BOS onward are scored, so prompt-position predictions never reach the
loss (their logits are not even computed during training).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import Linear, N_DISEASES
from .params import ParameterStore
from .tensor import Tensor
from .text import sinusoidal_positions

NEG_INF = -1e9


@dataclass
class GenerationResult:
    tokens: list[int]
    log_probs: list[float]
    terminated_by: str  # "eos" | "length"

    @property
    def score(self) -> float:
        return float(np.sum(self.log_probs))


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.weight = store.create(f"{name}.weight", (dim,), "ones")
        self.bias = store.create(f"{name}.bias", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class MultiHeadAttention:
    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int, kv_dim: int | None = None):
        self.dim, self.heads = dim, heads
        kv_dim = kv_dim or dim
        self.q = Linear(store, f"{name}.q", dim, dim)
        self.k = Linear(store, f"{name}.k", kv_dim, dim)
        self.v = Linear(store, f"{name}.v", kv_dim, dim)
        self.o = Linear(store, f"{name}.o", dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        n, t, _ = x.shape
        return T.transpose(T.reshape(x, (n, t, self.heads, self.dim // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``mask`` (broadcastable to ``(N, h, T, S)``) marks disallowed pairs."""
        n, t, _ = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.dim // self.heads))
        if mask is not None:
            scores = T.masked_fill(scores, mask, NEG_INF)
        out = T.matmul(T.softmax(scores, axis=-1), v)
        return self.o(T.reshape(T.transpose(out, (0, 2, 1, 3)), (n, t, self.dim)))


class DecoderLayer:
    """Pre-norm: causal self-attention, cross-attention over image positions, feed-forward."""

    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int, d_ff: int):
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim)
        self.self_attn = MultiHeadAttention(store, f"{name}.self", dim, heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross", dim, heads)
        self.ln3 = LayerNorm(store, f"{name}.ln3", dim)
        self.ff1 = Linear(store, f"{name}.ff1", dim, d_ff, init="he")
        self.ff2 = Linear(store, f"{name}.ff2", d_ff, dim)

    def __call__(self, x: Tensor, memory: Tensor, causal: np.ndarray) -> Tensor:
        h = self.ln1(x)
        x = T.add(x, self.self_attn(h, h, causal))
        x = T.add(x, self.cross_attn(self.ln2(x), memory))
        return T.add(x, self.ff2(T.relu(self.ff1(self.ln3(x)))))


class ReportDecoder:
    def __init__(self, store: ParameterStore, vocab_size: int, feature_channels: int, dim: int = 64,
                 layers: int = 2, heads: int = 4, d_ff: int = 128, max_len: int = 256):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim, self.vocab_size = dim, vocab_size
        self.embed = store.create("decoder.embed", (vocab_size, dim), "normal", gain=dim ** -0.5)
        self.memory_proj = Linear(store, "decoder.memory", feature_channels, dim)
        self.layers = [DecoderLayer(store, f"decoder.layer{i}", dim, heads, d_ff) for i in range(layers)]
        self.ln_out = LayerNorm(store, "decoder.ln_out", dim)
        self.head = Linear(store, "decoder.head", dim, vocab_size)
        self.positions = sinusoidal_positions(max_len, dim)

    def memory(self, feature: Tensor) -> Tensor:
        """Flatten ``(N, C, H, W)`` to ``(N, H*W, dim)`` key/value positions."""
        n, c, h, w = feature.shape
        flat = T.transpose(T.reshape(feature, (n, c, h * w)), (0, 2, 1))
        return self.memory_proj(flat)

    def hidden(self, tokens: np.ndarray, memory: Tensor) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        t = tokens.shape[1]
        if t > len(self.positions):
            self.positions = sinusoidal_positions(2 * t, self.dim)
        x = T.add(T.take(self.embed, tokens, axis=0),
                  Tensor(self.positions[:t].astype(self.embed.dtype)))
        causal = np.triu(np.ones((t, t), dtype=bool), k=1)
        for layer in self.layers:
            x = layer(x, memory, causal)
        return self.ln_out(x)

    def logits(self, tokens: np.ndarray, memory: Tensor, start: int = 0) -> Tensor:
        """Next-token logits for positions ``start..T-1``; ``(N, T-start, V)``."""
        h = self.hidden(tokens, memory)
        if start:
            h = T.take(h, np.arange(start, h.shape[1]), axis=1)
        return self.head(h)


def _prefix(prompt_ids: np.ndarray, bos_id: int) -> np.ndarray:
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    if prompt_ids.ndim != 2 or prompt_ids.shape[1] != N_DISEASES:
        raise ValueError(f"prompt must be (N, {N_DISEASES}) token ids, got {prompt_ids.shape}")
    return np.concatenate([prompt_ids, np.full((len(prompt_ids), 1), bos_id)], axis=1)


def decode_train(decoder: ReportDecoder, feature: Tensor, prompt_ids: np.ndarray,
                 gold: Sequence[Sequence[int]], bos_id: int, pad_id: int) -> Tensor:
    """Per-sample mean next-token cross-entropy over gold positions; ``(N,)``.

    Each gold sequence must end with EOS.
    """
    if any(len(g) == 0 for g in gold):
        raise ValueError("gold report is empty")
    n = len(gold)
    prefix = _prefix(prompt_ids, bos_id)
    longest = max(len(g) for g in gold)
    targets = np.full((n, longest), pad_id, dtype=np.int64)
    for i, g in enumerate(gold):
        targets[i, : len(g)] = g
    valid = np.arange(longest)[None, :] < np.array([len(g) for g in gold])[:, None]
    inputs = np.concatenate([prefix, targets[:, :-1]], axis=1)
    start = prefix.shape[1] - 1  # the BOS position predicts gold[0]
    logits = decoder.logits(inputs, decoder.memory(feature), start=start)
    logp = T.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    weights = (onehot * valid[..., None] / valid.sum(axis=1)[:, None, None]).astype(logits.dtype)
    return T.neg(T.sum(T.mul(logp, Tensor(weights)), axis=(1, 2)))


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def greedy_search(step: Callable[[list[int], list[list[int]]], np.ndarray], batch: int, max_len: int,
                  eos_id: int) -> list[GenerationResult]:
    """Batched greedy expansion.

    ``step(rows, prefixes)`` returns ``(len(rows), V)`` next-token log-probs
    for the still-unfinished sample indices ``rows``.
    """
    seqs: list[list[int]] = [[] for _ in range(batch)]
    lps: list[list[float]] = [[] for _ in range(batch)]
    done = [False] * batch
    for _ in range(max_len):
        active = [i for i in range(batch) if not done[i]]
        if not active:
            break
        logp = step(active, [seqs[i] for i in active])
        for row, i in zip(logp, active):
            tok = int(np.argmax(row))
            seqs[i].append(tok)
            lps[i].append(float(row[tok]))
            done[i] = tok == eos_id
    return [GenerationResult(s, l, "eos" if d else "length") for s, l, d in zip(seqs, lps, done)]


def beam_search(step: Callable[[list[list[int]]], np.ndarray], width: int, max_len: int,
                eos_id: int) -> GenerationResult:
    """Highest total log-probability sequence under beam pruning.

    At each step the ``width`` best extensions of all live beams are kept;
    those ending in EOS retire. The search stops once no live beam can beat
    the best retired one (log-probabilities never increase a score). Ties
    break towards the lexicographically smaller token sequence. Width 1 is
    exactly greedy decoding.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    live: list[tuple[float, list[int], list[float]]] = [(0.0, [], [])]
    finished: list[tuple[float, list[int], list[float]]] = []
    for _ in range(max_len):
        logp = step([b[1] for b in live])
        cands = []
        for (score, toks, lps), row in zip(live, logp):
            for tok in range(len(row)):
                cands.append((score + float(row[tok]), toks + [tok], lps + [float(row[tok])]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for cand in cands[:width]:
            (finished if cand[1][-1] == eos_id else live).append(cand)
        if not live:
            break
        if finished and max(f[0] for f in finished) >= live[0][0]:
            break
    pool = [(s, t, l, "eos") for s, t, l in finished] + [(s, t, l, "length") for s, t, l in live
                                                          if len(t) == max_len]
    best = min(pool, key=lambda c: (-c[0], c[1]))
    return GenerationResult(best[1], best[2], best[3])


def decode_generate(decoder: ReportDecoder, feature: Tensor, prompt_ids: np.ndarray, bos_id: int,
                    eos_id: int, max_len: int = 60, beam_width: int = 1) -> list[GenerationResult]:
    """Generate one report per sample; deterministic given parameters and inputs."""
    with T.no_grad():
        memory = decoder.memory(feature)
        prefix = _prefix(prompt_ids, bos_id)
        if beam_width == 1:
            def step(rows, prefixes):
                toks = np.array([list(prefix[i]) + p for i, p in zip(rows, prefixes)], dtype=np.int64)
                mem = memory if len(rows) == len(prefix) else T.take(memory, rows, axis=0)
                return _log_softmax_np(decoder.logits(toks, mem, start=toks.shape[1] - 1).data[:, 0])

            return greedy_search(step, len(prefix), max_len, eos_id)
        out = []
        for i in range(len(prefix)):
            mem_i = T.take(memory, [i], axis=0)

            def step(prefixes, i=i, mem_i=mem_i):
                toks = np.array([list(prefix[i]) + p for p in prefixes], dtype=np.int64)
                mem = T.broadcast_to(mem_i, (len(prefixes),) + mem_i.shape[1:])
                return _log_softmax_np(decoder.logits(toks, mem, start=toks.shape[1] - 1).data[:, 0])

            out.append(beam_search(step, beam_width, max_len, eos_id))
        return out


def total_loss(lm, ce_cur, ce_prior=None, w: float = 4.0):
    """``lm + w * (ce_cur + ce_prior)``; an absent prior term counts as zero."""
    if w < 0:
        raise ValueError("loss weight must be non-negative")
    if isinstance(lm, Tensor):
        ce = ce_cur if ce_prior is None else T.add(ce_cur, ce_prior)
        return T.add(lm, T.scale(ce, w))
    return lm + w * (ce_cur + (0.0 if ce_prior is None else ce_prior))
