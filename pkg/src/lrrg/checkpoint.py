"""Checkpoint persistence: one ``.npz`` with parameters, optimiser moments and a
JSON header (format version, config snapshot, epoch, metric history, disease table)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .params import AdamW
from .synth import FINDINGS
from .system import ReportModel
from .text import Vocabulary

FORMAT_VERSION = 1


def save_checkpoint(path, model: ReportModel, optimizer: AdamW | None = None, epoch: int = 0,
                    history: list | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "epoch": epoch,
        "history": history or [],
        "findings": list(FINDINGS),
        "vocabulary": model.vocab.tokens,
    }
    arrays = {f"param/{k}": v for k, v in model.store.state_dict().items()}
    if optimizer is not None:
        arrays.update({f"optim/{k}": np.asarray(v) for k, v in optimizer.state_dict().items()})
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, precision: str | None = None):
    """Return ``(model, optimizer_state or None, header)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        if tuple(header["findings"]) != FINDINGS:
            raise ValueError(f"{path}: disease table differs from this build")
        cfg = RunConfig.from_dict(header["config"])
        if precision is not None:
            cfg = cfg.replace(precision=precision)
        model = ReportModel(cfg, Vocabulary(header["vocabulary"]))
        model.store.load_state_dict({k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")})
        optim = {k[len("optim/"):]: data[k] for k in data.files if k.startswith("optim/")} or None
    return model, optim, header
