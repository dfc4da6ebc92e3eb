"""Deterministic training loop, evaluation and the ablation / prior-proportion experiments."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import RunConfig
from .metrics import append_csv, ce_scores, map_attributes, metrics_record
from .params import AdamW
from .synth import FINDINGS, StudyRecord, rule_label, select_split
from .system import ReportModel
from .text import words

log = logging.getLogger(__name__)

STEP_FIELDS = ("epoch", "step", "loss", "lm", "ce_cur", "ce_prior", "n", "n_prior")
EPOCH_FIELDS = ("epoch", "loss", "lm", "ce_cur", "ce_prior", "seconds")
EVAL_FIELDS = ("ce_precision_macro", "ce_recall_macro", "ce_f1_macro",
               "ce_precision_micro", "ce_recall_micro", "ce_f1_micro",
               "bleu1", "bleu4", "rougeL", "n_samples", "n_with_prior",
               "progression_f1_micro", "n_progression_cells", "split", "ablation", "seed")


@dataclass
class TrainResult:
    model: ReportModel
    optimizer: AdamW
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch, 7]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def rotate_bilinear(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate ``(C, H, W)`` about its centre; samples outside the frame read as zero."""
    c, h, w = image.shape
    a = np.deg2rad(degrees)
    yy, xx = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2, indexing="ij")
    sy = np.cos(a) * yy - np.sin(a) * xx + (h - 1) / 2
    sx = np.sin(a) * yy + np.cos(a) * xx + (w - 1) / 2
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    padded = np.pad(image, ((0, 0), (1, 2), (1, 2)))
    out = np.zeros_like(image)
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        ys, xs = np.clip(y0 + dy + 1, 0, h + 2), np.clip(x0 + dx + 1, 0, w + 2)
        out += padded[:, ys, xs] * wt.astype(image.dtype)
    return out


def augment_images(images: np.ndarray, rng: np.random.Generator, pad: int = 2, max_degrees: float = 5.0
                   ) -> np.ndarray:
    """Random shift (crop from a zero-padded frame) plus a small random rotation, per sample."""
    n, c, h, w = images.shape
    framed = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        out[i] = rotate_bilinear(framed[i, :, dy:dy + h, dx:dx + w], rng.uniform(-max_degrees, max_degrees))
    return out


def train(cfg: RunConfig, records: Sequence[StudyRecord], out_dir=None,
          model: ReportModel | None = None, on_epoch: Callable[[int, ReportModel], None] | None = None
          ) -> TrainResult:
    """Optimise the combined loss; logs every step and every epoch to CSV under ``out_dir``."""
    if not records:
        raise ValueError("no training records")
    model = model or ReportModel(cfg)
    opt = AdamW(model.store, lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult(model, opt)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in ("steps.csv", "epochs.csv"):
            (out / name).unlink(missing_ok=True)
    step = 0
    with T.precision(cfg.precision):
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            sums = np.zeros(4)
            count = 0
            for idx in batch_order(len(records), cfg.batch_size, cfg.seed, epoch):
                batch = model.collate([records[i] for i in idx])
                if cfg.augment:
                    rng = np.random.default_rng([cfg.seed, epoch, step, 11])
                    batch.current = augment_images(batch.current, rng)
                    if batch.prior is not None:
                        batch.prior = augment_images(batch.prior, rng)
                losses = model.losses(batch)
                model.store.zero_grad()
                T.backward(losses.total)
                opt.step()
                step += 1
                row = {"epoch": epoch, "step": step, "loss": float(losses.total.data), "lm": losses.lm,
                       "ce_cur": losses.ce_cur, "ce_prior": losses.ce_prior, "n": losses.n,
                       "n_prior": losses.n_prior}
                result.steps.append(row)
                if out is not None:
                    append_csv(out / "steps.csv", row, STEP_FIELDS)
                sums += np.array([row["loss"], row["lm"], row["ce_cur"], row["ce_prior"]]) * losses.n
                count += losses.n
            means = sums / count
            erow = {"epoch": epoch, "loss": means[0], "lm": means[1], "ce_cur": means[2], "ce_prior": means[3],
                    "seconds": round(time.perf_counter() - t0, 3)}
            result.epochs.append(erow)
            log.info("epoch %d loss %.4f lm %.4f ce_cur %.4f ce_prior %.4f (%.1fs)", epoch, *means,
                     erow["seconds"])
            if out is not None:
                append_csv(out / "epochs.csv", erow, EPOCH_FIELDS)
            if on_epoch is not None:
                on_epoch(epoch, model)
    if out is not None:
        save_checkpoint(out / "checkpoint.npz", model, opt, cfg.epochs, result.epochs)
    return result


def progression_cells(records: Sequence[StudyRecord], predicted: Sequence[Sequence[str]]
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Binary (pred, gold) over every (record, finding) that carries a progression tag."""
    index = {name: k for k, name in enumerate(FINDINGS)}
    pred, gold = [], []
    for rec, lab in zip(records, predicted):
        for name in rec.progression:
            k = index[name]
            pred.append(map_attributes([lab[k]])[0])
            gold.append(map_attributes([rec.labels[k]])[0])
    return np.array(pred, dtype=np.int8), np.array(gold, dtype=np.int8)


def evaluate(model: ReportModel, records: Sequence[StudyRecord], out_dir=None, split: str = "all",
             batch_size: int = 64) -> dict:
    """Generate reports, label them with the rule labeller and score them."""
    if not records:
        raise ValueError("evaluation split is empty")
    generated = []
    with T.precision(model.cfg.precision):
        for i in range(0, len(records), batch_size):
            generated.extend(model.generate(records[i:i + batch_size]))
    texts = [g[1] for g in generated]
    pred_labels = [rule_label(t) for t in texts]
    gold_labels = [rule_label(r.report) for r in records]
    record = metrics_record(pred_labels, gold_labels, [words(t) for t in texts],
                            [words(r.report) for r in records], sum(r.has_prior for r in records))
    p, g = progression_cells(records, pred_labels)
    record["progression_f1_micro"] = ce_scores(p[:, None], g[:, None]).f1_micro if len(p) else 0.0
    record["n_progression_cells"] = int(len(p))
    record.update(split=split, ablation=model.cfg.ablation, seed=model.cfg.seed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tag = split.replace("=", "")
        (out / f"reports_{tag}.txt").write_text("".join(t + "\n" for t in texts), encoding="utf-8")
        meta = [{"study_id": r.study_id, "terminated_by": g[2].terminated_by, "n_tokens": len(g[2].tokens)}
                for r, g in zip(records, generated)]
        (out / f"reports_{tag}.jsonl").write_text("".join(json.dumps(m) + "\n" for m in meta), encoding="utf-8")
        (out / f"metrics_{tag}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n",
                                                 encoding="utf-8")
        append_csv(out / "metrics.csv", record, EVAL_FIELDS)
    return record


def evaluate_splits(model: ReportModel, records: Sequence[StudyRecord], splits: Sequence[str],
                    out_dir=None) -> dict[str, dict]:
    return {s: evaluate(model, select_split(records, s), out_dir, split=s) for s in splits}
