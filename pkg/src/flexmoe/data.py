"""Datasets with missing modalities: synthetic generation, CSV ingestion, splitting."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, EmptyComboError, ParseError, SchemaError, SplitError
from .modality import ModalityCombo, ModalitySet

log = logging.getLogger(__name__)


@dataclass
class Sample:
    id: str
    features: list
    combo: ModalityCombo
    label: int


@dataclass
class Dataset:
    """Column-oriented samples.

    ``features[m]`` has one row per sample; rows of samples that do not
    observe modality ``m`` are NaN and never read.
    """

    modality_set: ModalitySet
    ids: list
    features: list
    masks: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        n = len(self.ids)
        if self.masks.shape != (n,) or self.labels.shape != (n,):
            raise SchemaError("ids, masks and labels must have equal length")
        if len(self.features) != len(self.modality_set):
            raise SchemaError("one feature block per modality is required")
        if any(f.shape[0] != n for f in self.features):
            raise SchemaError("feature blocks must have one row per sample")
        if n and self.masks.min() <= 0:
            raise EmptyComboError("every sample must observe at least one modality")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise SchemaError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> Sample:
        combo = self.modality_set.combo(self.masks[i])
        feats = [f[i].copy() if combo.observes(m) else None for m, f in enumerate(self.features)]
        return Sample(self.ids[i], feats, combo, int(self.labels[i]))

    @property
    def input_dims(self):
        return [f.shape[1] for f in self.features]

    @property
    def full_mask(self) -> int:
        return self.modality_set.n_combos

    def is_full(self) -> np.ndarray:
        return self.masks == self.full_mask

    def cardinalities(self) -> np.ndarray:
        return np.array([bin(m).count("1") for m in self.masks], dtype=np.int64)

    def present(self) -> np.ndarray:
        """Boolean ``(N, |M|)`` presence matrix."""
        return (self.masks[:, None] >> np.arange(len(self.modality_set))[None, :] & 1).astype(bool)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.modality_set,
            [self.ids[i] for i in index],
            [f[index] for f in self.features],
            self.masks[index],
            self.labels[index],
            self.n_classes,
        )

    def combo_counts(self) -> dict:
        labels, counts = np.unique(self.masks, return_counts=True)
        return {self.modality_set.label(self.modality_set.combo(m)): int(c) for m, c in zip(labels, counts)}


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    """Gaussian class-conditional features with planted missingness.

    ``combo_distribution`` maps combination labels (e.g. ``"IGB"``) to
    probabilities.  ``class_prior_by_combo`` optionally replaces the uniform
    class draw with a per-combination prior, which makes the label signal
    depend on which modalities are observed.  Class means come from
    ``structure_seed`` and samples from ``seed``, so datasets drawn with
    different seeds share one generating model.
    """

    modality_names: tuple = ("I", "G", "C", "B")
    input_dims: tuple = (16, 12, 10, 8)
    n_classes: int = 3
    noise_sigma: float = 1.0
    mean_scale: float = 1.0
    class_means: list | None = None
    combo_distribution: dict | None = None
    class_prior_by_combo: dict | None = None
    n_samples: int = 1000
    seed: int = 0
    structure_seed: int = 0

    @property
    def modality_set(self) -> ModalitySet:
        return ModalitySet(tuple(self.modality_names))

    def validate(self):
        ms = self.modality_set
        bad = []
        if len(self.input_dims) != len(ms) or any(int(d) < 1 for d in self.input_dims):
            bad.append("input_dims")
        if self.n_classes < 2:
            bad.append("n_classes")
        if not self.noise_sigma > 0:
            bad.append("noise_sigma")
        if self.n_samples < 1:
            bad.append("n_samples")
        dist = self.combo_probabilities()
        if any(p < 0 for p in dist.values()) or abs(sum(dist.values()) - 1.0) > 1e-9:
            bad.append("combo_distribution")
        if self.class_prior_by_combo:
            for label, prior in self.class_prior_by_combo.items():
                prior = np.asarray(prior, dtype=np.float64)
                if prior.shape != (self.n_classes,) or prior.min() < 0 or abs(prior.sum() - 1) > 1e-9:
                    bad.append(f"class_prior_by_combo[{label}]")
        if bad:
            raise ConfigError(f"invalid synthetic config fields: {', '.join(bad)}", bad)

    def combo_probabilities(self) -> dict:
        """Probability per combination bitmask."""
        ms = self.modality_set
        if self.combo_distribution is None:
            return {ms.full.mask: 1.0}
        try:
            out = {}
            for label, p in self.combo_distribution.items():
                mask = ms.parse(label).mask
                out[mask] = out.get(mask, 0.0) + float(p)
            return out
        except (ValueError, EmptyComboError) as exc:
            raise ConfigError(f"bad combo_distribution: {exc}", ["combo_distribution"]) from None

    def class_prior(self, mask: int) -> np.ndarray:
        uniform = np.full(self.n_classes, 1.0 / self.n_classes)
        if not self.class_prior_by_combo:
            return uniform
        label = self.modality_set.label(self.modality_set.combo(mask))
        prior = self.class_prior_by_combo.get(label)
        return uniform if prior is None else np.asarray(prior, dtype=np.float64)

    def means(self) -> list:
        """Per-modality ``(n_classes, input_dim)`` class means."""
        if self.class_means is not None:
            return [np.asarray(m, dtype=np.float64) for m in self.class_means]
        rng = np.random.default_rng([self.structure_seed, 7919])
        return [rng.normal(0.0, self.mean_scale, size=(self.n_classes, int(d))) for d in self.input_dims]


def synth_generate(config: SynthConfig) -> Dataset:
    config.validate()
    ms = config.modality_set
    rng = np.random.default_rng(config.seed)
    dist = config.combo_probabilities()
    masks_support = np.array(sorted(dist), dtype=np.int64)
    probs = np.array([dist[m] for m in masks_support])
    n = config.n_samples
    masks = masks_support[rng.choice(len(masks_support), size=n, p=probs / probs.sum())]
    if config.class_prior_by_combo:
        labels = np.empty(n, dtype=np.int64)
        u = rng.random(n)
        for mask in np.unique(masks):
            rows = np.flatnonzero(masks == mask)
            cdf = np.cumsum(config.class_prior(mask))
            labels[rows] = np.minimum(np.searchsorted(cdf, u[rows], side="right"), config.n_classes - 1)
    else:
        labels = rng.integers(0, config.n_classes, size=n)
    means = config.means()
    features = []
    for m, dim in enumerate(config.input_dims):
        x = means[m][labels] + config.noise_sigma * rng.standard_normal((n, int(dim)))
        x[(masks >> m & 1) == 0] = np.nan
        features.append(x)
    width = len(str(n - 1))
    ids = [f"s{i:0{width}d}" for i in range(n)]
    return Dataset(ms, ids, features, masks, labels, config.n_classes)


def bayes_log_posterior(config: SynthConfig, dataset: Dataset) -> np.ndarray:
    """Unnormalised class log-posteriors under the generating model."""
    means = config.means()
    n = len(dataset)
    scores = np.zeros((n, config.n_classes))
    for mask in np.unique(dataset.masks):
        scores[dataset.masks == mask] += np.log(np.maximum(config.class_prior(mask), 1e-300))
    for m, x in enumerate(dataset.features):
        rows = np.flatnonzero(dataset.masks >> m & 1)
        diff = x[rows][:, None, :] - means[m][None, :, :]
        scores[rows] -= (diff**2).sum(axis=2) / (2 * config.noise_sigma**2)
    return scores


def bayes_accuracy(config: SynthConfig, dataset: Dataset) -> dict:
    """Accuracy of the Bayes-optimal rule, overall and per combination label."""
    pred = bayes_log_posterior(config, dataset).argmax(axis=1)
    hit = pred == dataset.labels
    out = {"all": float(hit.mean())}
    for mask in np.unique(dataset.masks):
        rows = dataset.masks == mask
        out[dataset.modality_set.label(dataset.modality_set.combo(mask))] = float(hit[rows].mean())
    return out


# ---------------------------------------------------------------- CSV ingestion


@dataclass
class ModalitySchema:
    name: str
    columns: list | None = None
    input_dim: int | None = None


@dataclass
class ModalityTable:
    """Rows of one modality file keyed by id; blank cells are NaN until imputed."""

    name: str
    columns: list
    ids: list
    values: np.ndarray
    _row: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._row = {i: r for r, i in enumerate(self.ids)}

    def __contains__(self, sample_id):
        return sample_id in self._row

    def row(self, sample_id) -> np.ndarray:
        return self.values[self._row[sample_id]]

    def column_means(self, ids) -> np.ndarray:
        """Per-column mean over the given ids' observed cells (0 where none observed)."""
        rows = [self._row[i] for i in ids if i in self._row]
        block = self.values[rows] if rows else np.empty((0, len(self.columns)))
        observed = ~np.isnan(block)
        counts = observed.sum(axis=0)
        sums = np.where(observed, block, 0.0).sum(axis=0)
        return np.divide(sums, counts, out=np.zeros(len(self.columns)), where=counts > 0)

    def impute(self, train_ids) -> "ModalityTable":
        means = self.column_means(train_ids)
        values = np.where(np.isnan(self.values), means[None, :], self.values)
        return ModalityTable(self.name, list(self.columns), list(self.ids), values)


def load_modality_csv(path, schema: ModalitySchema, train_ids=None) -> ModalityTable:
    """Read ``id,<features...>`` rows; impute blank cells with training means if ``train_ids`` given."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        if not header or header[0].strip() != "id":
            raise SchemaError(f"{path}: first column must be 'id', got {header[:1]}")
        columns = [h.strip() for h in header[1:]]
        if schema.columns is not None and columns != list(schema.columns):
            raise SchemaError(f"{path}: columns {columns} do not match schema {list(schema.columns)}")
        if schema.input_dim is not None and len(columns) != schema.input_dim:
            raise SchemaError(f"{path}: {len(columns)} feature columns, schema expects {schema.input_dim}")
        ids, rows = [], []
        for line_no, record in enumerate(reader, start=2):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise SchemaError(f"{path}:{line_no}: expected {len(header)} cells, got {len(record)}")
            values = []
            for col, cell in zip(header[1:], record[1:]):
                cell = cell.strip()
                if not cell:
                    values.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}:{line_no}: column {col!r} holds non-numeric {cell!r}", line_no, col
                    ) from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}:{line_no}: column {col!r} is not finite", line_no, col)
                values.append(v)
            sid = record[0].strip()
            if sid in ids:
                raise SchemaError(f"{path}:{line_no}: duplicate id {sid!r}")
            ids.append(sid)
            rows.append(values)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(columns))
    table = ModalityTable(schema.name, columns, ids, values)
    return table.impute(train_ids) if train_ids is not None else table


def load_labels_csv(path) -> dict:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames[:2]] != ["id", "label"]:
            raise SchemaError(f"{path}: label file needs columns 'id','label'")
        out = {}
        for line_no, row in enumerate(reader, start=2):
            try:
                out[row["id"].strip()] = int(row["label"])
            except (TypeError, ValueError):
                raise ParseError(f"{path}:{line_no}: bad label {row.get('label')!r}", line_no, "label") from None
    return out


def tables_to_dataset(modality_set, tables, labels, n_classes=None) -> Dataset:
    """Join per-modality tables on the label ids; samples seen in no table are dropped."""
    ids, masks, kept = [], [], []
    for sid in labels:
        mask = sum(1 << m for m, t in enumerate(tables) if sid in t)
        if mask == 0:
            log.warning("dropping sample %s: no modality observed", sid)
            continue
        ids.append(sid)
        masks.append(mask)
    for t in tables:
        block = np.full((len(ids), len(t.columns)), np.nan)
        for r, sid in enumerate(ids):
            if sid in t:
                block[r] = t.row(sid)
        kept.append(block)
    y = np.array([labels[i] for i in ids], dtype=np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if len(y) else 1
    return Dataset(modality_set, ids, kept, np.array(masks, dtype=np.int64), y, n_classes)


def load_manifest(path):
    """Load a dataset manifest (YAML or JSON) into a :class:`Dataset` with NaN blank cells.

    Keys: ``modalities`` (ordered labels), ``files`` (label -> CSV path),
    ``labels`` (CSV path), ``input_dims`` (label -> int), optional ``n_classes``.
    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    manifest = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    try:
        names = list(manifest["modalities"])
        files = manifest["files"]
        dims = manifest["input_dims"]
        label_path = manifest["labels"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: manifest missing key {exc}") from None
    ms = ModalitySet(tuple(names))
    base = path.parent
    tables = []
    for name in names:
        schema = ModalitySchema(name, input_dim=int(dims[name]))
        file = base / files[name]
        tables.append(load_modality_csv(file, schema))
    labels = load_labels_csv(base / label_path)
    return tables_to_dataset(ms, tables, labels, manifest.get("n_classes"))


def write_dataset_csv(dataset: Dataset, out_dir) -> Path:
    """Write per-modality CSVs, a label CSV and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ms = dataset.modality_set
    files = {}
    for m, name in enumerate(ms.names):
        fname = f"modality_{name}.csv"
        files[name] = fname
        block = dataset.features[m]
        with (out_dir / fname).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + [f"{name}_{j}" for j in range(block.shape[1])])
            for i, sid in enumerate(dataset.ids):
                if dataset.masks[i] >> m & 1:
                    w.writerow([sid] + ["" if np.isnan(v) else repr(float(v)) for v in block[i]])
    with (out_dir / "labels.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"])
        for sid, y in zip(dataset.ids, dataset.labels):
            w.writerow([sid, int(y)])
    manifest = {
        "modalities": list(ms.names),
        "files": files,
        "labels": "labels.csv",
        "input_dims": {n: int(d) for n, d in zip(ms.names, dataset.input_dims)},
        "n_classes": int(dataset.n_classes),
    }
    path = out_dir / "manifest.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    return path


# ---------------------------------------------------------------- splits


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    train_index: np.ndarray
    val_index: np.ndarray
    test_index: np.ndarray

    def impute(self) -> "Splits":
        """Fill blank cells of observed modalities with training-split column means."""
        means = training_means(self.train)
        return Splits(
            impute_with(self.train, means),
            impute_with(self.val, means),
            impute_with(self.test, means),
            self.train_index,
            self.val_index,
            self.test_index,
        )


def training_means(train: Dataset) -> list:
    present = train.present()
    out = []
    for m, block in enumerate(train.features):
        rows = block[present[:, m]]
        observed = ~np.isnan(rows)
        counts = observed.sum(axis=0)
        sums = np.where(observed, rows, 0.0).sum(axis=0)
        out.append(np.divide(sums, counts, out=np.zeros(block.shape[1]), where=counts > 0))
    return out


def impute_with(dataset: Dataset, means) -> Dataset:
    present = dataset.present()
    feats = []
    for m, block in enumerate(dataset.features):
        block = block.copy()
        rows = present[:, m]
        sub = block[rows]
        block[rows] = np.where(np.isnan(sub), means[m][None, :], sub)
        feats.append(block)
    return Dataset(dataset.modality_set, list(dataset.ids), feats, dataset.masks, dataset.labels, dataset.n_classes)


def split_dataset(dataset: Dataset, ratios=(0.7, 0.15, 0.15), seed=0) -> Splits:
    """Validation and test come only from full-modality samples; training keeps the rest."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("split ratios must be three non-negative numbers summing to 1", ["ratios"])
    n = len(dataset)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    full = np.flatnonzero(dataset.is_full())
    need = n_val + n_test
    if full.size < need:
        raise SplitError(
            f"split needs {need} full-modality samples for validation and test, only {full.size} available"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(full)[:need]
    val_index = np.sort(chosen[:n_val])
    test_index = np.sort(chosen[n_val:])
    held = np.zeros(n, dtype=bool)
    held[chosen] = True
    train_index = np.flatnonzero(~held)
    return Splits(
        dataset.subset(train_index),
        dataset.subset(val_index),
        dataset.subset(test_index),
        train_index,
        val_index,
        test_index,
    )
