"""Flat run configuration with JSON round-trip and named ablation presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

ABLATIONS = ("none", "no-msf", "no-dam", "no-fam", "no-df", "no-prior")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f32"
    # backbone
    in_channels: int = 1
    image_size: int = 32
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    share_backbone: bool = False
    mirror_init: bool = True
    # text
    text_dim: int = 64
    max_text_len: int = 100
    text_positions: bool = True
    # decoder
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_gen_len: int = 60
    beam_width: int = 1
    # ablations
    multi_stage_fusion: bool = True
    dfam_enabled: bool = True
    ddam_enabled: bool = True
    dynamic_fusion_enabled: bool = True
    use_prior: bool = True
    # optimisation
    lr: float = 5e-5
    weight_decay: float = 0.05
    epochs: int = 10
    batch_size: int = 16
    loss_weight: float = 4.0
    teacher_forcing: bool = False
    augment: bool = False
    # data
    train_dir: str = "data/train"
    test_dir: str = "data/test"
    out_dir: str = "runs/default"
    n_train_patients: int = 1000
    n_test_patients: int = 200
    visits_per_patient: int = 2
    prior_fraction: float = 0.5

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.validate()

    def validate(self) -> None:
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if len(self.stage_channels) < 2:
            raise ConfigError("need at least two backbone stages")
        if any(c <= 0 for c in self.stage_channels):
            raise ConfigError("stage widths must be positive")
        if self.image_size >> len(self.stage_channels) < 1:
            raise ConfigError("too many stages for the input size")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.loss_weight < 0:
            raise ConfigError("loss_weight must be non-negative")
        if self.beam_width < 1 or self.max_gen_len < 1:
            raise ConfigError("beam_width and max_gen_len must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("invalid optimisation settings")
        if not 0.0 <= self.prior_fraction <= 1.0:
            raise ConfigError("prior_fraction must lie in [0, 1]")

    @property
    def dtype(self):
        import numpy as np
        return np.float64 if self.precision == "f64" else np.float32

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_ablation(self, name: str) -> "RunConfig":
        return self.replace(**ablation_overrides(name))

    @property
    def ablation(self) -> str:
        flags = {k: getattr(self, k) for k in ablation_overrides("none")}
        for name in ABLATIONS:
            if flags == ablation_overrides(name):
                return name
        return "custom"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(data)


def ablation_overrides(name: str) -> dict:
    base = {"multi_stage_fusion": True, "dfam_enabled": True, "ddam_enabled": True,
            "dynamic_fusion_enabled": True, "use_prior": True}
    if name == "none":
        return base
    if name == "no-msf":
        return {**base, "multi_stage_fusion": False}
    if name == "no-dam":
        return {**base, "ddam_enabled": False}
    if name == "no-fam":
        return {**base, "dfam_enabled": False}
    if name == "no-df":
        return {**base, "dynamic_fusion_enabled": False}
    if name == "no-prior":
        return {**base, "use_prior": False}
    raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
