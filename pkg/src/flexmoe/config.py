"""Flat run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .data import SynthConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

MODEL_FIELDS = ("modality_names", "input_dims", "n_classes", "d", "n_experts", "top_k", "n_heads", "n_layers", "fill")
TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")


@dataclass
class RunConfig:
    # training
    epochs: int = 50
    warmup_epochs: int = 5
    learning_rate: float = 1e-4
    batch_size: int = 8
    lambda_aux: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    curriculum: str = "descending"
    eval_batch_size: int = 256
    restore_best: bool = True
    # model
    modality_names: list = field(default_factory=lambda: ["I", "G", "C", "B"])
    input_dims: list = field(default_factory=lambda: [16, 12, 10, 8])
    n_classes: int = 3
    d: int = 128
    n_experts: int = 16
    top_k: int = 4
    n_heads: int = 4
    n_layers: int = 1
    fill: str = "bank"
    # data: a manifest path, or the synthetic generator below
    manifest: str | None = None
    n_samples: int = 2000
    noise_sigma: float = 3.0
    mean_scale: float = 1.0
    combo_distribution: dict | None = None
    class_prior_by_combo: dict | None = None
    data_seed: int = 0
    split_seed: int = 0
    # run
    out: str = "runs/default"
    seeds: list = field(default_factory=lambda: [0])

    def model_config(self, seed: int) -> ModelConfig:
        kw = {k: getattr(self, k) for k in MODEL_FIELDS}
        kw["modality_names"] = tuple(kw["modality_names"])
        kw["input_dims"] = tuple(int(x) for x in kw["input_dims"])
        return ModelConfig(seed=seed, **kw)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **{k: getattr(self, k) for k in TRAIN_FIELDS})

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            modality_names=tuple(self.modality_names),
            input_dims=tuple(int(x) for x in self.input_dims),
            n_classes=self.n_classes,
            noise_sigma=self.noise_sigma,
            mean_scale=self.mean_scale,
            combo_distribution=self.combo_distribution,
            class_prior_by_combo=self.class_prior_by_combo,
            n_samples=self.n_samples,
            seed=self.data_seed,
            structure_seed=self.data_seed,
        )

    def validate(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required", ["seeds"])
        for seed in self.seeds:
            self.train_config(seed).validate()
        self.model_config(self.seeds[0]).validate()
        if self.manifest is None:
            self.synth_config().validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def from_dict(values: dict) -> RunConfig:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}", unknown)
    return RunConfig(**values)


def load_config(path=None) -> RunConfig:
    """Read a YAML config; missing keys take the shipped defaults."""
    if path is None:
        text = resources.files("flexmoe").joinpath("default_config.yaml").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    values = yaml.safe_load(text) or {}
    if not isinstance(values, dict):
        raise ConfigError("config must be a mapping of keys to values", ["<root>"])
    return from_dict(values)


def _coerce(name, raw: str):
    """Parse a command-line override into the field's type."""
    default = _FIELDS[name].default
    if default is dataclasses.MISSING:
        default = _FIELDS[name].default_factory()
    try:
        if name == "seeds":
            return [int(s) for s in raw.split(",") if s.strip()]
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [type(default[0])(s) if default else s for s in raw.split(",")]
        if name in ("combo_distribution", "class_prior_by_combo"):
            return yaml.safe_load(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {name}={raw!r}", [name]) from None


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    values = config.to_dict()
    for name, raw in overrides.items():
        if raw is None:
            continue
        values[name] = _coerce(name, raw) if isinstance(raw, str) else raw
    return from_dict(values)


def dump_config(config: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")
