"""Clinical-efficacy (CE) and language metrics: precision/recall/F1 over
binarised disease labels, corpus BLEU-1..4 and ROUGE-L."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

POSITIVE_ATTRIBUTES = ("positive", "uncertain")
ROUGE_BETA = 1.2

METRIC_FIELDS = (
    "ce_precision_macro", "ce_recall_macro", "ce_f1_macro",
    "ce_precision_micro", "ce_recall_micro", "ce_f1_micro",
    "bleu1", "bleu4", "rougeL", "n_samples", "n_with_prior",
)


def map_attributes(labels: Sequence[str]) -> np.ndarray:
    """positive/uncertain -> 1, negative/blank -> 0."""
    return np.array([lab in POSITIVE_ATTRIBUTES for lab in labels], dtype=np.int8)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class CeScores:
    precision_macro: float
    recall_macro: float
    f1_macro: float
    precision_micro: float
    recall_micro: float
    f1_micro: float


def confusion_counts(pred: np.ndarray, gold: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-column TP, FP, FN of two binary ``(N, D)`` matrices."""
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    if pred.shape != gold.shape or pred.ndim != 2:
        raise ValueError(f"ce_scores: shape mismatch {pred.shape} vs {gold.shape}")
    if pred.shape[0] == 0:
        raise ValueError("ce_scores: no samples")
    tp = (pred & gold).sum(axis=0)
    fp = (pred & ~gold).sum(axis=0)
    fn = (~pred & gold).sum(axis=0)
    return tp, fp, fn


def scores_from_counts(tp, fp, fn) -> CeScores:
    tp, fp, fn = (np.asarray(a, dtype=np.int64) for a in (tp, fp, fn))
    per_p = [_ratio(t, t + f) for t, f in zip(tp, fp)]
    per_r = [_ratio(t, t + f) for t, f in zip(tp, fn)]
    per_f = [_f1(p, r) for p, r in zip(per_p, per_r)]
    TP, FP, FN = int(tp.sum()), int(fp.sum()), int(fn.sum())
    p_mi, r_mi = _ratio(TP, TP + FP), _ratio(TP, TP + FN)
    return CeScores(float(np.mean(per_p)), float(np.mean(per_r)), float(np.mean(per_f)),
                    p_mi, r_mi, _f1(p_mi, r_mi))


def ce_scores(pred: np.ndarray, gold: np.ndarray) -> CeScores:
    """Macro (per-disease then mean) and micro (pooled counts) P/R/F1."""
    return scores_from_counts(*confusion_counts(pred, gold))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
         n: int = 4) -> float:
    """Corpus BLEU-n: pooled clipped n-gram precisions, uniform log-weights,
    corpus brevity penalty with the closest reference length. No smoothing."""
    if len(candidates) != len(references):
        raise ValueError("bleu: candidate and reference counts differ")
    if not 1 <= n <= 4:
        raise ValueError("bleu: n must be in 1..4")
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = list(cand)
        refs = [list(r) for r in refs]
        cand_len += len(cand)
        ref_len += min((len(r) for r in refs), key=lambda L: (abs(L - len(cand)), L)) if refs else 0
        for k in range(1, n + 1):
            counts = ngrams(cand, k)
            best: Counter = Counter()
            for r in refs:
                best |= ngrams(r, k)
            matched[k - 1] += sum(min(c, best[g]) for g, c in counts.items())
            total[k - 1] += max(len(cand) - k + 1, 0)
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str], beta: float = ROUGE_BETA) -> float:
    """LCS F-measure ``(1 + b^2) P R / (R + b^2 P)``; 0 for empty inputs."""
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def corpus_rouge_l(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    if len(candidates) != len(references) or not candidates:
        raise ValueError("rouge_l: need equally many, and at least one, candidates and references")
    return float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

def metrics_record(pred_labels: Iterable[Sequence[str]], gold_labels: Iterable[Sequence[str]],
                   candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                   n_with_prior: int) -> dict:
    pred = np.array([map_attributes(p) for p in pred_labels])
    gold = np.array([map_attributes(g) for g in gold_labels])
    ce = ce_scores(pred, gold)
    refs = [[r] for r in references]
    return {
        **{f"ce_{k}": v for k, v in asdict(ce).items()},
        "bleu1": bleu(candidates, refs, 1),
        "bleu4": bleu(candidates, refs, 4),
        "rougeL": corpus_rouge_l(candidates, references),
        "n_samples": len(candidates),
        "n_with_prior": int(n_with_prior),
    }


def write_metrics(record: dict, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is not None:
        append_csv(csv_path, record, METRIC_FIELDS + tuple(k for k in record if k not in METRIC_FIELDS))


def append_csv(path, row: dict, fields: Sequence[str]) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="raise")
        if new:
            writer.writeheader()
        writer.writerow(row)
