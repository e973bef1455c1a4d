"""Modality sets, combination bitmasks, expert index assignment, missing-modality bank."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import combinations

import numpy as np

from . import tensor as T
from .errors import EmptyComboError, InvalidLookupError
from .layers import Module, param


@dataclass(frozen=True, order=True)
class ModalityCombo:
    """Bitmask of observed modalities; bit ``j`` is modality ``j`` of the set."""

    mask: int
    n_modalities: int

    def __post_init__(self):
        if self.mask == 0:
            raise EmptyComboError("a combination must observe at least one modality")
        if not 0 < self.mask < (1 << self.n_modalities):
            raise ValueError(f"mask {self.mask:#b} does not fit {self.n_modalities} modalities")

    @property
    def cardinality(self) -> int:
        return bin(self.mask).count("1")

    @property
    def is_full(self) -> bool:
        return self.mask == (1 << self.n_modalities) - 1

    @property
    def row(self) -> int:
        """Row of this combination in the missing-modality bank."""
        return self.mask - 1

    def observes(self, j: int) -> bool:
        return bool(self.mask >> j & 1)

    def observed(self) -> list[int]:
        return [j for j in range(self.n_modalities) if self.observes(j)]

    def missing(self) -> list[int]:
        return [j for j in range(self.n_modalities) if not self.observes(j)]

    def flags(self) -> list[bool]:
        return [self.observes(j) for j in range(self.n_modalities)]


def combo_from_flags(flags) -> ModalityCombo:
    flags = [bool(f) for f in flags]
    mask = sum(1 << j for j, f in enumerate(flags) if f)
    if mask == 0:
        raise EmptyComboError("no modality observed")
    return ModalityCombo(mask, len(flags))


@dataclass(frozen=True)
class ModalitySet:
    """Ordered modality labels; the order fixes bit positions and tie-breaks."""

    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not 2 <= len(self.names) <= 8:
            raise ValueError("a modality set holds between 2 and 8 modalities")
        if any(not n for n in self.names) or len(set(self.names)) != len(self.names):
            raise ValueError(f"modality labels must be distinct and non-empty: {self.names}")

    def __len__(self):
        return len(self.names)

    @property
    def n_combos(self) -> int:
        return (1 << len(self.names)) - 1

    @property
    def full(self) -> ModalityCombo:
        return ModalityCombo(self.n_combos, len(self))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def combo_from_flags(self, flags) -> ModalityCombo:
        flags = list(flags)
        if len(flags) != len(self):
            raise ValueError(f"expected {len(self)} flags, got {len(flags)}")
        return combo_from_flags(flags)

    def combo(self, mask: int) -> ModalityCombo:
        return ModalityCombo(int(mask), len(self))

    @property
    def _separator(self):
        return "" if all(len(n) == 1 for n in self.names) else "+"

    def label(self, combo: ModalityCombo) -> str:
        return self._separator.join(self.names[j] for j in combo.observed())

    def parse(self, label: str) -> ModalityCombo:
        parts = label.split("+") if self._separator else list(label)
        try:
            flags = [False] * len(self)
            for part in parts:
                flags[self.index(part)] = True
        except ValueError:
            raise ValueError(f"unknown modality in combination {label!r}") from None
        return self.combo_from_flags(flags)


ADNI = ModalitySet(("I", "G", "C", "B"))
MIMIC = ModalitySet(("L", "N", "C"))


class ExpertIndexMap:
    """Combination to designated-expert index.

    Larger combinations come first; within one cardinality, combinations are
    ordered lexicographically by modality position.  For ``(I, G, C, B)``
    this gives IGCB=0, IGC=1, ..., B=14.
    """

    def __init__(self, modality_set: ModalitySet):
        self.modality_set = modality_set
        n = len(modality_set)
        order = []
        for size in range(n, 0, -1):
            for members in combinations(range(n), size):
                order.append(ModalityCombo(sum(1 << j for j in members), n))
        self._combos = tuple(order)
        self._index = {c.mask: i for i, c in enumerate(order)}

    def __len__(self):
        return len(self._combos)

    def index(self, combo: ModalityCombo) -> int:
        return self._index[combo.mask]

    def combo(self, index: int) -> ModalityCombo:
        return self._combos[index]

    def combos(self):
        return self._combos

    @cached_property
    def mask_to_index(self) -> np.ndarray:
        """Lookup array: ``mask_to_index[mask]`` is the expert index (entry 0 unused)."""
        table = np.full(len(self._combos) + 1, -1, dtype=np.int64)
        for mask, i in self._index.items():
            table[mask] = i
        return table


def expert_index(combo: ModalityCombo) -> int:
    return _index_map(combo.n_modalities)[combo.mask]


_MAPS: dict[int, dict[int, int]] = {}


def _index_map(n):
    if n not in _MAPS:
        names = tuple(chr(ord("a") + j) for j in range(n))
        _MAPS[n] = dict(ExpertIndexMap(ModalitySet(names))._index) if n >= 2 else {1: 0}
    return _MAPS[n]


class MissingModalityBank(Module):
    """Learnable ``(2^|M| - 1, |M|, d)`` table; cell ``(row(c), m)`` fills modality ``m`` for combo ``c``."""

    def __init__(self, modality_set: ModalitySet, d: int, rng=None, std=0.02):
        if d < 1:
            raise ValueError("bank dimension must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        self.modality_set = modality_set
        self.d = d
        self.table = param(rng.normal(0.0, std, size=(modality_set.n_combos, len(modality_set), d)))

    @property
    def shape(self):
        return self.table.shape

    def readable(self) -> np.ndarray:
        """Boolean ``(rows, |M|)``: True where the cell can be read."""
        n = len(self.modality_set)
        masks = np.arange(1, self.modality_set.n_combos + 1)[:, None]
        missing = (masks >> np.arange(n)[None, :] & 1) == 0
        missing[-1, :] = False
        return missing

    def lookup(self, observed: ModalityCombo, missing: int) -> T.Tensor:
        if observed.is_full:
            raise InvalidLookupError("the full combination has no missing modality")
        if observed.observes(missing):
            raise InvalidLookupError(
                f"modality {self.modality_set.names[missing]} is observed in "
                f"{self.modality_set.label(observed)}"
            )
        return self.table[observed.row, missing]

    def gather(self, masks, missing: int) -> T.Tensor:
        """Cells for many samples at once: one ``d``-row per entry of ``masks``."""
        masks = np.asarray(masks, dtype=np.int64)
        if np.any(masks >> missing & 1):
            raise InvalidLookupError(f"modality {missing} is observed in some requested rows")
        return self.table[masks - 1, missing]


def bank_init(modality_set: ModalitySet, d: int, seed: int) -> MissingModalityBank:
    return MissingModalityBank(modality_set, d, np.random.default_rng(seed))


def bank_lookup(bank: MissingModalityBank, observed: ModalityCombo, missing: int) -> T.Tensor:
    return bank.lookup(observed, missing)
