"""Per-modality encoders and token assembly with bank completion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptyComboError, SchemaError
from .layers import LayerNorm, Linear, Module, param
from .modality import ModalityCombo, ModalitySet


class ModalityEncoder(Module):
    """Linear -> GELU -> Linear -> LayerNorm, mapping ``input_dim`` features to ``d``."""

    def __init__(self, modality: int, input_dim: int, d: int, rng):
        self.modality = modality
        self.input_dim = input_dim
        self.d = d
        self.fc1 = Linear(input_dim, d, rng)
        self.fc2 = Linear(d, d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, x):
        return self.norm(self.fc2(T.gelu(self.fc1(x))))


def encode_modality(encoder: ModalityEncoder, features) -> T.Tensor:
    features = T.as_tensor(features)
    if features.shape[-1] != encoder.input_dim:
        raise SchemaError(
            f"modality {encoder.modality} expects {encoder.input_dim} features, "
            f"got {features.shape[-1]}"
        )
    if features.ndim == 1:
        return encoder(features.reshape(1, -1)).reshape(-1)
    return encoder(features)


class GlobalEmbedding(Module):
    """One learnable vector per modality, shared by every combination (ablation)."""

    def __init__(self, n_modalities: int, d: int, rng, std=0.02):
        self.table = param(rng.normal(0.0, std, size=(n_modalities, d)))

    def gather(self, masks, missing: int):
        return self.table[np.full(len(masks), missing)]


class ZeroFill(Module):
    """Zero vectors in place of missing modalities (ablation)."""

    def __init__(self, d: int):
        self.d = d

    def gather(self, masks, missing: int):
        return T.Tensor(np.zeros((len(masks), self.d)))


@dataclass
class TokenSequence:
    tokens: T.Tensor
    combo: ModalityCombo
    provenance: list[str]


def assemble_tokens(sample, encoders, bank) -> TokenSequence:
    """Single-sample view of :func:`assemble_batch`."""
    combo = sample.combo
    if combo is None or combo.mask == 0:
        raise EmptyComboError(f"sample {getattr(sample, 'id', '?')} observes nothing")
    feats = [
        None if f is None else np.asarray(f, dtype=np.float64).reshape(1, -1) for f in sample.features
    ]
    tokens = assemble_batch(feats, np.array([combo.mask]), encoders, bank)
    provenance = ["encoded" if combo.observes(j) else "bank" for j in range(combo.n_modalities)]
    return TokenSequence(tokens.reshape(tokens.shape[1:]), combo, provenance)


def assemble_batch(features, masks, encoders, filler) -> T.Tensor:
    """Build the ``(B, |M|, d)`` token tensor for a batch.

    ``features[m]`` is a ``(B, input_dim_m)`` array (rows of samples missing
    ``m`` are ignored); ``masks`` holds each sample's combination bitmask.
    Observed slots are encoded; missing slots come from ``filler.gather``.
    """
    masks = np.asarray(masks, dtype=np.int64)
    if np.any(masks <= 0):
        raise EmptyComboError("every sample must observe at least one modality")
    n = len(masks)
    d = encoders[0].d
    pieces = []
    for m, enc in enumerate(encoders):
        seen = (masks >> m & 1).astype(bool)
        rows = np.flatnonzero(seen)
        if rows.size:
            x = np.asarray(features[m], dtype=np.float64)[rows]
            pieces.append(((rows, m), encode_modality(enc, x)))
        gaps = np.flatnonzero(~seen)
        if gaps.size:
            pieces.append(((gaps, m), filler.gather(masks[gaps], m)))
    return T.index_add((n, len(encoders), d), pieces)


def build_encoders(modality_set: ModalitySet, input_dims, d: int, rng):
    if len(input_dims) != len(modality_set):
        raise SchemaError("one input dimension per modality is required")
    return [ModalityEncoder(m, int(dim), d, rng) for m, dim in enumerate(input_dims)]
