"""The assembled network: encoders, missing-modality completion, SMoE blocks, head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoders import GlobalEmbedding, ZeroFill, assemble_batch, build_encoders
from .errors import CapacityError, ConfigError
from .layers import Module
from .modality import ExpertIndexMap, MissingModalityBank, ModalitySet
from .smoe import PredictionHead, RouterOutput, SmoeLayer, predict_head

FILL_MODES = ("bank", "zero", "global")


@dataclass
class ModelConfig:
    modality_names: tuple = ("I", "G", "C", "B")
    input_dims: tuple = (16, 12, 10, 8)
    n_classes: int = 3
    d: int = 128
    n_experts: int = 16
    top_k: int = 4
    n_heads: int = 4
    n_layers: int = 1
    fill: str = "bank"
    seed: int = 0

    @property
    def modality_set(self) -> ModalitySet:
        return ModalitySet(tuple(self.modality_names))

    def validate(self):
        bad = []
        try:
            ms = self.modality_set
        except ValueError:
            raise ConfigError("invalid modality_names", ["modality_names"]) from None
        if len(self.input_dims) != len(ms) or any(int(x) < 1 for x in self.input_dims):
            bad.append("input_dims")
        if self.n_classes < 2:
            bad.append("n_classes")
        if self.d < 1 or self.n_heads < 1 or self.d % self.n_heads:
            bad.append("d/n_heads")
        if self.n_layers < 1:
            bad.append("n_layers")
        if not 1 <= self.top_k <= self.n_experts:
            bad.append("top_k")
        if self.fill not in FILL_MODES:
            bad.append("fill")
        if bad:
            raise ConfigError(f"invalid model config fields: {', '.join(bad)}", bad)
        if self.n_experts < ms.n_combos:
            raise CapacityError(
                f"n_experts={self.n_experts} is below the {ms.n_combos} modality combinations",
                ["n_experts"],
            )

    def to_dict(self):
        d = asdict(self)
        d["modality_names"] = list(self.modality_names)
        d["input_dims"] = [int(x) for x in self.input_dims]
        return d


@dataclass
class Forward:
    logits: T.Tensor
    routers: list
    token_masks: np.ndarray
    tokens: T.Tensor | None = None


class FlexMoE(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        ms = config.modality_set
        rng = np.random.default_rng(config.seed)
        self.modality_set = ms
        self.index_map = ExpertIndexMap(ms)
        self.encoders = build_encoders(ms, config.input_dims, config.d, rng)
        if config.fill == "bank":
            self.filler = MissingModalityBank(ms, config.d, rng)
        elif config.fill == "global":
            self.filler = GlobalEmbedding(len(ms), config.d, rng)
        else:
            self.filler = ZeroFill(config.d)
        self.layers = [
            SmoeLayer(len(ms), config.d, config.n_experts, config.top_k, config.n_heads, rng)
            for _ in range(config.n_layers)
        ]
        self.head = PredictionHead(config.d, config.n_classes, rng)

    @property
    def bank(self):
        return self.filler if isinstance(self.filler, MissingModalityBank) else None

    def reset_stats(self):
        for layer in self.layers:
            layer.stats.reset()

    def forward(self, batch) -> Forward:
        x = assemble_batch(batch.features, batch.masks, self.encoders, self.filler)
        routers: list[RouterOutput] = []
        for layer in self.layers:
            x, router = layer(x)
            routers.append(router)
        logits = predict_head(self.head, x.mean(axis=1))
        token_masks = np.repeat(np.asarray(batch.masks, dtype=np.int64), len(self.modality_set))
        return Forward(logits, routers, token_masks, x)

    def target_experts(self, token_masks) -> np.ndarray:
        return self.index_map.mask_to_index[np.asarray(token_masks, dtype=np.int64)]
