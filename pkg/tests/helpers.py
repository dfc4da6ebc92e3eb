"""Shared small configurations and builders for the test suite."""

import numpy as np

from lrrg.config import RunConfig
from lrrg.params import ParameterStore


def tiny_config(**changes) -> RunConfig:
    """Two-stage 8x8 encoder, one-layer decoder: fast enough for exact-equality tests."""
    base = dict(stage_channels=(4, 8), image_size=8, text_dim=6, d_model=8, n_layers=1, n_heads=2,
                d_ff=16, max_gen_len=8, precision="f64")
    base.update(changes)
    return RunConfig(**base)


def randomise(store: ParameterStore, seed: int = 0, scale: float = 0.4, prefix: str = "") -> None:
    """Overwrite parameters (zero-initialised gates included) with seeded noise."""
    rng = np.random.default_rng(seed)
    for name, p in store.items():
        if name.startswith(prefix):
            p.data = rng.normal(0.0, scale, size=p.shape).astype(p.dtype)
