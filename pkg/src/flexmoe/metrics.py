"""Classification metrics, routing activation ratios, bank similarity reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import EmptyReportError, UndefinedClassError


def _as_labels(x):
    return np.asarray(x, dtype=np.int64).reshape(-1)


def accuracy(preds, labels) -> float:
    preds, labels = _as_labels(preds), _as_labels(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set")
    return float((preds == labels).mean())


def confusion_matrix(preds, labels, n_classes) -> np.ndarray:
    """Counts indexed ``[true, predicted]``."""
    preds, labels = _as_labels(preds), _as_labels(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    for name, x in (("prediction", preds), ("label", labels)):
        if x.size and (x.min() < 0 or x.max() >= n_classes):
            raise ValueError(f"{name} class index outside [0, {n_classes})")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (labels, preds), 1)
    return out


def macro_f1(preds, labels, n_classes) -> float:
    """Unweighted per-class F1 mean; a class never predicted nor present scores 0."""
    cm = confusion_matrix(preds, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    f1 = np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)
    return float(f1.mean())


def binary_auc(scores, positive) -> float:
    """Rank-based AUC; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedClassError("AUC needs both positives and negatives")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_macro(scores, labels) -> float:
    """Mean one-vs-rest AUC over classes (columns of ``scores``)."""
    scores = scores.data if isinstance(scores, T.Tensor) else np.asarray(scores, dtype=np.float64)
    labels = _as_labels(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise ValueError("scores must be (n, C) with one row per label")
    if labels.size < 2:
        raise ValueError("AUC needs at least two samples")
    aucs = []
    for c in range(scores.shape[1]):
        positive = labels == c
        if positive.all() or not positive.any():
            raise UndefinedClassError(f"class {c} has no positives or no negatives", label=c)
        aucs.append(binary_auc(scores[:, c], positive))
    return float(np.mean(aucs))


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    auc_macro: float
    confusion: np.ndarray
    n: int

    def rows(self):
        return [("accuracy", self.accuracy), ("macro_f1", self.macro_f1), ("auc_macro", self.auc_macro)]


def predict(model, dataset, batch_size=256):
    """Class probabilities for every sample, computed without recording a tape."""
    out = []
    for start in range(0, len(dataset), batch_size):
        fwd = model.forward(dataset.subset(np.arange(start, min(start + batch_size, len(dataset)))))
        out.append(T.softmax(fwd.logits, axis=1).data)
    if not out:
        return np.zeros((0, model.config.n_classes))
    return np.concatenate(out)


def evaluate(model, dataset, batch_size=256) -> EvalReport:
    probs = predict(model, dataset, batch_size)
    preds = probs.argmax(axis=1)
    labels = dataset.labels
    c = probs.shape[1]
    try:
        auc = auc_macro(probs, labels)
    except UndefinedClassError:
        auc = float("nan")
    return EvalReport(
        accuracy(preds, labels), macro_f1(preds, labels, c), auc, confusion_matrix(preds, labels, c), len(labels)
    )


def write_eval_report(report: EvalReport, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, value in report.rows():
            w.writerow([name, repr(float(value))])


# ---------------------------------------------------------------- routing analysis


@dataclass
class RoutingLog:
    """One entry per routed token: owning sample's combo mask, slot, top-k experts."""

    combo_masks: np.ndarray
    slots: np.ndarray
    top_indices: np.ndarray
    n_experts: int

    def __len__(self):
        return self.combo_masks.size

    @property
    def top1(self):
        return self.top_indices[:, 0]


def collect_routing(model, dataset, layer=0, batch_size=256) -> RoutingLog:
    masks, slots, tops = [], [], []
    n_slots = len(model.modality_set)
    for start in range(0, len(dataset), batch_size):
        batch = dataset.subset(np.arange(start, min(start + batch_size, len(dataset))))
        fwd = model.forward(batch)
        masks.append(fwd.token_masks)
        slots.append(np.tile(np.arange(n_slots), len(batch)))
        tops.append(fwd.routers[layer].top_indices)
    k = model.config.top_k
    return RoutingLog(
        np.concatenate(masks) if masks else np.zeros(0, dtype=np.int64),
        np.concatenate(slots) if slots else np.zeros(0, dtype=np.int64),
        np.concatenate(tops) if tops else np.zeros((0, k), dtype=np.int64),
        model.config.n_experts,
    )


@dataclass
class ActivationMatrix:
    combos: list
    values: np.ndarray

    def row(self, combo_label):
        return self.values[self.combos.index(combo_label)]


def activation_matrix(logs: RoutingLog, modality_set, index_map=None) -> ActivationMatrix:
    """Share of each combination's top-k assignments that land on each expert."""
    if len(logs) == 0:
        raise EmptyReportError("no routing records")
    present = np.unique(logs.combo_masks)
    if index_map is not None:
        present = sorted(present, key=lambda m: index_map.index(modality_set.combo(m)))
    rows, labels = [], []
    for mask in present:
        tops = logs.top_indices[logs.combo_masks == mask].reshape(-1)
        counts = np.bincount(tops, minlength=logs.n_experts).astype(np.float64)
        rows.append(counts / counts.sum())
        labels.append(modality_set.label(modality_set.combo(mask)))
    return ActivationMatrix(labels, np.array(rows))


def specialization_rate(logs: RoutingLog, index_map) -> dict:
    """Fraction of tokens whose top-1 expert is their combination's designated expert."""
    targets = index_map.mask_to_index[logs.combo_masks]
    hit = logs.top1 == targets
    ms = index_map.modality_set
    out = {"all": float(hit.mean()) if hit.size else float("nan")}
    for mask in np.unique(logs.combo_masks):
        sel = logs.combo_masks == mask
        out[ms.label(ms.combo(mask))] = float(hit[sel].mean())
    return out


def expert_load(logs: RoutingLog) -> np.ndarray:
    return np.bincount(logs.top_indices.reshape(-1), minlength=logs.n_experts).astype(np.float64)


def write_activation_matrix(matrix: ActivationMatrix, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = matrix.values.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["combo"] + [f"expert_{e}" for e in range(n)])
        for label, row in zip(matrix.combos, matrix.values):
            w.writerow([label] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------- bank similarity


@dataclass
class SimilarityMatrix:
    labels: list
    values: np.ndarray
    zero_norm: list


@dataclass
class BankSimilarity:
    rows: SimilarityMatrix
    cols: SimilarityMatrix


def cosine_matrix(vectors):
    """Pairwise cosine similarity; zero-norm vectors give 0 and are flagged."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    zero = norms <= 0
    safe = np.where(zero, 1.0, norms)
    sim = (v @ v.T) / np.outer(safe, safe)
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return np.clip(sim, -1.0, 1.0), zero.tolist()


def bank_similarity(bank, index_map=None) -> BankSimilarity:
    """Cosine similarity between bank rows (observed combos) and columns (missing modalities).

    Each row or column is flattened with its unreadable cells set to zero,
    so only cells readable in both members of a pair contribute to the dot
    product.
    """
    ms = bank.modality_set
    table = bank.table.data
    readable = bank.readable()
    cells = np.where(readable[:, :, None], table, 0.0)
    masks = [m for m in range(1, ms.n_combos)]
    if index_map is not None:
        masks.sort(key=lambda m: index_map.index(ms.combo(m)))
    row_vecs = [cells[m - 1].reshape(-1) for m in masks]
    row_sim, row_zero = cosine_matrix(row_vecs)
    col_vecs = [cells[: ms.n_combos - 1, j, :].reshape(-1) for j in range(len(ms))]
    col_sim, col_zero = cosine_matrix(col_vecs)
    return BankSimilarity(
        SimilarityMatrix([ms.label(ms.combo(m)) for m in masks], row_sim, row_zero),
        SimilarityMatrix(list(ms.names), col_sim, col_zero),
    )


def write_similarity(matrix: SimilarityMatrix, path, corner):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([corner] + matrix.labels + ["zero_norm"])
        for label, row, flag in zip(matrix.labels, matrix.values, matrix.zero_norm):
            w.writerow([label] + [repr(float(v)) for v in row] + [int(flag)])
