"""Per-block central-difference gradient checks at 64-bit.

Every block is built on a tiny geometry with all parameters (gates
included) re-drawn at random, so no gradient path is trivially zero. Each
check covers the block inputs and every parameter it owns.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .decoder import ReportDecoder, decode_train
from .model import DifferenceAware, FeatureAlignment, LongitudinalEncoder, StageBlock, classification_loss, ldconv
from .params import ParameterStore
from .tensor import Tensor

STEP = 1e-5


def _randomise(store: ParameterStore, rng: np.random.Generator, scale: float = 0.5) -> None:
    for _, p in store.items():
        p.data = rng.normal(0.0, scale, size=p.shape)


def _check_all(loss: Callable[[], Tensor], leaves: dict[str, Tensor], step: float = STEP) -> tuple[float, str]:
    worst, where = 0.0, ""
    for name, leaf in leaves.items():
        err = T.finite_difference_check(loss, leaf, step)
        if err >= worst:
            worst, where = err, name
    return worst, where


def _projection(shape, rng) -> Tensor:
    return Tensor(rng.normal(size=shape))


def check_stage(rng) -> tuple[float, str]:
    store = ParameterStore(1, dtype=np.float64)
    block = StageBlock(store, "current.stage1", 2, 3)
    _randomise(store, rng)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
    r = _projection((2, 3, 3, 3), rng)
    return _check_all(lambda: T.sum(T.mul(block(x), r)), {"input": x, **dict(store.items())})


def check_dfam(rng) -> tuple[float, str]:
    store = ParameterStore(2, dtype=np.float64)
    block = FeatureAlignment(store, "align.stage1", 4, 5)
    _randomise(store, rng)
    x = Tensor(rng.normal(size=(2, 4, 6, 6)), requires_grad=True)
    text = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    mask = np.array([[True, True, True], [True, True, False]])
    r = _projection((2, 4, 6, 6), rng)
    loss = lambda: T.sum(T.mul(T.add(x, block(x, text, mask)), r))  # noqa: E731
    return _check_all(loss, {"image": x, "text": text, **dict(store.items())})


def check_ddam(rng) -> tuple[float, str]:
    store = ParameterStore(3, dtype=np.float64)
    block = DifferenceAware(store, "diff.stage1", 3)
    _randomise(store, rng)
    cur = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
    prior = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
    r = _projection((2, 3, 5, 5), rng)
    return _check_all(lambda: T.sum(T.mul(block(cur, prior), r)),
                      {"current": cur, "prior": prior, **dict(store.items())})


def check_ldconv(rng) -> tuple[float, str]:
    x = Tensor(rng.normal(size=(1, 4, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4, 3, 3)), requires_grad=True)
    theta = Tensor(rng.normal(size=(4,)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    r = _projection((1, 4, 5, 5), rng)
    return _check_all(lambda: T.sum(T.mul(ldconv(x, w, theta, b), r)),
                      {"input": x, "weight": w, "theta": theta, "bias": b})


def check_classifier(rng) -> tuple[float, str]:
    cfg = RunConfig(stage_channels=(2, 3), image_size=4, precision="f64")
    store = ParameterStore(4, dtype=np.float64)
    enc = LongitudinalEncoder(store, cfg)
    _randomise(store, rng)
    feat = Tensor(rng.normal(size=(2, 3, 1, 1)), requires_grad=True)
    gold = rng.integers(0, 4, size=(2, 14))
    leaves = {"feature": feat, **{n: p for n, p in store.items() if n.startswith("head_current")}}
    return _check_all(lambda: T.sum(classification_loss(enc.classify(feat), gold)), leaves)


def check_decoder(rng) -> tuple[float, str]:
    store = ParameterStore(5, dtype=np.float64)
    dec = ReportDecoder(store, vocab_size=12, feature_channels=3, dim=8, layers=1, heads=2, d_ff=8)
    _randomise(store, rng, scale=0.3)
    feat = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
    prompt = rng.integers(8, 12, size=(2, 14))
    gold = [[5, 6, 2], [7, 2]]
    return _check_all(lambda: T.sum(decode_train(dec, feat, prompt, gold, bos_id=1, pad_id=0)),
                      {"feature": feat, **dict(store.items())})


CHECKS = {
    "backbone_stage": check_stage,
    "dfam": check_dfam,
    "ddam": check_ddam,
    "ldconv": check_ldconv,
    "classifier": check_classifier,
    "decoder": check_decoder,
}


def run_gradchecks(seed: int = 0) -> dict[str, dict]:
    """Max relative error (and the worst leaf) per block."""
    out = {}
    with T.precision("f64"):
        for name, fn in CHECKS.items():
            t0 = time.perf_counter()
            err, leaf = fn(np.random.default_rng([seed, len(out)]))
            out[name] = {"max_rel_error": err, "worst_leaf": leaf, "seconds": round(time.perf_counter() - t0, 3)}
    return out
