"""Curriculum ordering, loss assembly, Adam, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .metrics import evaluate
from .smoe import balance_loss, router_ce_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 5
    learning_rate: float = 1e-4
    batch_size: int = 8
    lambda_aux: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    curriculum: str = "descending"
    eval_batch_size: int = 256
    restore_best: bool = True

    def validate(self):
        bad = []
        if self.epochs < 1:
            bad.append("epochs")
        if not 0 <= self.warmup_epochs <= self.epochs:
            bad.append("warmup_epochs")
        if not self.learning_rate > 0:
            bad.append("learning_rate")
        if self.batch_size < 1:
            bad.append("batch_size")
        if not self.lambda_aux >= 0:
            bad.append("lambda_aux")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            bad.append("adam")
        if self.curriculum not in ("descending", "ascending", "none"):
            bad.append("curriculum")
        if bad:
            raise ConfigError(f"invalid training config fields: {', '.join(bad)}", bad)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- ordering


def curriculum_sort(dataset, descending=True) -> np.ndarray:
    """Indices ordered by number of observed modalities; ties keep dataset order."""
    card = dataset.cardinalities() if hasattr(dataset, "cardinalities") else np.asarray(dataset)
    key = -card if descending else card
    return np.argsort(key, kind="stable")


def epoch_schedule(config: TrainConfig, epoch: int) -> str:
    if not 1 <= epoch <= config.epochs:
        raise ValueError(f"epoch must lie in [1, {config.epochs}], got {epoch}")
    return "sorted" if epoch <= config.warmup_epochs else "shuffled"


def epoch_order(config: TrainConfig, dataset, epoch: int, rng) -> np.ndarray:
    if epoch_schedule(config, epoch) == "sorted" and config.curriculum != "none":
        return curriculum_sort(dataset, descending=config.curriculum == "descending")
    return rng.permutation(len(dataset))


# ---------------------------------------------------------------- losses


def total_loss(task_ce, router_ce, balance, lambda_aux) -> T.Tensor:
    parts = [T.as_tensor(x) for x in (task_ce, router_ce, balance)]
    for p in parts:
        if not np.isfinite(p.data).all():
            raise NumericError("loss component is not finite")
    return parts[0] + lambda_aux * (parts[1] + parts[2])


@dataclass
class LossTerms:
    task: T.Tensor
    router_ce: T.Tensor
    balance: T.Tensor
    total: T.Tensor

    def record(self):
        return {
            "task": float(self.task.data),
            "router_ce": float(self.router_ce.data),
            "balance": float(self.balance.data),
            "total": float(self.total.data),
        }


def compute_losses(model, batch, lambda_aux, fwd=None) -> LossTerms:
    """Task loss plus per-regime routing losses.

    Tokens of full-modality samples are balanced over all their top-k
    assignments; tokens of partial samples add the router cross-entropy
    toward their combination's expert and are balanced without their top-1.
    """
    fwd = model.forward(batch) if fwd is None else fwd
    task = T.cross_entropy(fwd.logits, batch.labels)
    full = fwd.token_masks == model.modality_set.n_combos
    g_rows = np.flatnonzero(full)
    s_rows = np.flatnonzero(~full)
    router_ce = T.Tensor(0.0)
    balance = T.Tensor(0.0)
    for router in fwd.routers:
        if s_rows.size:
            targets = model.target_experts(fwd.token_masks[s_rows])
            router_ce = router_ce + router_ce_loss(router.probs[s_rows], targets)
        balance = balance + balance_loss(router, "G", rows=g_rows) + balance_loss(router, "S", rows=s_rows)
    return LossTerms(task, router_ce, balance, total_loss(task, router_ce, balance, lambda_aux))


# ---------------------------------------------------------------- optimisation


@numba.njit(cache=True, error_model="numpy")
def _adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    for i in range(param.size):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        param[i] -= lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)


class Adam:
    """Adam with per-parameter step counts; parameters without a gradient are left untouched."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.steps = {n: 0 for n in self.params}

    def step(self):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.steps[name] += 1
            t = self.steps[name]
            _adam_update(
                p.data.reshape(-1),
                np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                self.m[name].reshape(-1),
                self.v[name].reshape(-1),
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                1.0 - self.beta1**t,
                1.0 - self.beta2**t,
            )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainState:
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    running: dict = field(default_factory=lambda: {"task": 0.0, "router_ce": 0.0, "balance": 0.0})


def make_state(model, config: TrainConfig) -> TrainState:
    opt = Adam(model.named_parameters(), config.learning_rate, (config.beta1, config.beta2), config.adam_eps)
    return TrainState(opt, np.random.default_rng([config.seed, 1]))


class TrainingAborted(NumericError):
    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


def train_step(state: TrainState, model, batch, config: TrainConfig) -> dict:
    state.optimizer.zero_grad()
    with T.Tape() as tape:
        try:
            terms = compute_losses(model, batch, config.lambda_aux)
        except NumericError as exc:
            raise TrainingAborted(f"non-finite forward at step {state.step}: {exc}", {"step": state.step}) from exc
        record = terms.record()
        if not all(math.isfinite(v) for v in record.values()):
            raise TrainingAborted(f"non-finite loss at step {state.step}", {"step": state.step, **record})
        tape.backward(terms.total)
    for name, p in state.optimizer.params.items():
        if p.grad is not None and not math.isfinite(float(np.sum(p.grad))):
            raise TrainingAborted(f"non-finite gradient for {name}", {"step": state.step, **record})
    state.optimizer.step()
    state.step += 1
    for key in state.running:
        state.running[key] += record[key]
    record["step"] = state.step
    return record


@dataclass
class TrainResult:
    epochs: list
    steps: list
    best_epoch: int
    best_val_accuracy: float
    best_state: dict
    state: TrainState


def fit(model, train, val, config: TrainConfig, on_epoch=None, on_step=None) -> TrainResult:
    """Train with curriculum warm-up; keeps the parameters of the best validation epoch."""
    config.validate()
    state = make_state(model, config)
    return resume(model, train, val, config, state, on_epoch=on_epoch, on_step=on_step)


def resume(model, train, val, config, state, on_epoch=None, on_step=None, best=None) -> TrainResult:
    epochs, steps = [], []
    best_acc, best_epoch, best_state = (-1.0, 0, None) if best is None else best
    bs = config.batch_size
    for epoch in range(state.epoch + 1, config.epochs + 1):
        order = epoch_order(config, train, epoch, state.rng)
        sums = {"task": 0.0, "router_ce": 0.0, "balance": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, len(order), bs):
            rec = train_step(state, model, train.subset(order[start : start + bs]), config)
            steps.append(rec)
            if on_step is not None:
                on_step(rec)
            for key in sums:
                sums[key] += rec[key]
            n_batches += 1
        state.epoch = epoch
        row = {"epoch": epoch, "schedule": epoch_schedule(config, epoch)}
        row.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        if val is not None and len(val):
            report = evaluate(model, val, batch_size=config.eval_batch_size)
            row.update(val_accuracy=report.accuracy, val_macro_f1=report.macro_f1)
            if report.accuracy > best_acc:
                best_acc, best_epoch, best_state = report.accuracy, epoch, model.state_dict()
        epochs.append(row)
        log.info("epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row, state)
    if best_state is None:
        best_state, best_epoch = model.state_dict(), state.epoch
    if config.restore_best:
        model.load_state_dict(best_state)
    return TrainResult(epochs, steps, best_epoch, best_acc, best_state, state)


# ---------------------------------------------------------------- gradient suite


def gradient_suite(model, batch, lambda_aux=0.01, eps=1e-5, max_coords=None, seed=0) -> dict:
    """Finite-difference check of the total training loss against every parameter group.

    Returns the worst relative error per top-level parameter group and overall.
    """
    groups = {}
    for name, p in model.named_parameters():
        groups.setdefault(name.split(".")[0], []).append(p)

    def loss():
        return compute_losses(model, batch, lambda_aux).total

    out = {}
    for i, (group, params) in enumerate(groups.items()):
        out[group] = T.grad_check(loss, params, eps=eps, max_coords=max_coords, seed=seed + i)
    out["all"] = max(out.values())
    return out
