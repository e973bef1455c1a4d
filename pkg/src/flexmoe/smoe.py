"""Sparse mixture-of-experts block: attention front-end, top-k gating, routing losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import LayerNorm, Linear, Module, param

CV_EPS = 1e-10


class Expert(Module):
    """Feed-forward expert d -> 4d -> d with GELU."""

    def __init__(self, d, rng, expansion=4):
        self.fc1 = Linear(d, expansion * d, rng)
        self.fc2 = Linear(expansion * d, d, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))

    def flops(self, n_rows):
        return self.fc1.flops(n_rows) + self.fc2.flops(n_rows)


class GateNetwork(Module):
    def __init__(self, d, n_experts, rng):
        self.proj = Linear(d, n_experts, rng)
        self.n_experts = n_experts

    def __call__(self, x):
        return self.proj(x)


@dataclass
class RouterOutput:
    probs: T.Tensor
    masked: T.Tensor
    top_indices: np.ndarray
    top1: np.ndarray

    @property
    def k(self):
        return self.top_indices.shape[1]

    @property
    def n_experts(self):
        return self.probs.shape[1]


def gate_probs(gate: GateNetwork, tokens) -> T.Tensor:
    return T.softmax_rows(gate(tokens))


def route_topk(probs, k: int) -> RouterOutput:
    probs = T.as_tensor(probs)
    idx = T.topk_indices(probs, k)
    return RouterOutput(probs, T.topk_mask(probs, k), idx, idx[:, 0].copy())


@dataclass
class ComputeStats:
    """Per-forward counters for the expert and gate work actually performed."""

    expert_calls: int = 0
    tokens: int = 0
    expert_flops: int = 0
    gate_flops: int = 0
    calls_per_expert: dict = field(default_factory=dict)

    def reset(self):
        self.expert_calls = self.tokens = self.expert_flops = self.gate_flops = 0
        self.calls_per_expert = {}

    @property
    def moe_flops(self):
        return self.expert_flops + self.gate_flops


class MultiHeadSelfAttention(Module):
    """Self-attention over the modality slots with slot embeddings, residual and LayerNorm."""

    def __init__(self, n_slots, d, n_heads, rng):
        if d % n_heads:
            raise ShapeError(f"hidden dimension {d} is not divisible by {n_heads} heads")
        self.n_slots = n_slots
        self.n_heads = n_heads
        self.d = d
        self.slot_embedding = param(rng.normal(0.0, 0.02, size=(n_slots, d)))
        self.q = Linear(d, d, rng)
        # a key bias only shifts every score of a query equally, so softmax cancels it
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.norm = LayerNorm(d)
        self.last_weights = None

    def __call__(self, tokens):
        b, m, d = tokens.shape
        if m != self.n_slots:
            raise ShapeError(f"expected {self.n_slots} tokens, got {m}")
        h, dh = self.n_heads, d // self.n_heads
        x = tokens + self.slot_embedding

        def heads(t):
            return t.reshape(b, m, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        weights = T.softmax(q @ k.transpose(0, 1, 3, 2) * (1.0 / math.sqrt(dh)), axis=-1)
        self.last_weights = weights.data
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, m, d)
        return self.norm(x + self.out(ctx))


def attention_forward(layer, tokens) -> T.Tensor:
    """Attention for one ``(|M|, d)`` sequence or a ``(B, |M|, d)`` batch."""
    attn = layer.attention if isinstance(layer, SmoeLayer) else layer
    tokens = T.as_tensor(tokens)
    if tokens.ndim == 2:
        return attn(tokens.reshape(1, *tokens.shape)).reshape(tokens.shape)
    return attn(tokens)


class SmoeLayer(Module):
    """Transformer block whose feed-forward sublayer is a sparse mixture of experts."""

    def __init__(self, n_slots, d, n_experts, k, n_heads, rng):
        if not 1 <= k <= n_experts:
            raise ValueError(f"top-k must lie in [1, {n_experts}], got {k}")
        self.attention = MultiHeadSelfAttention(n_slots, d, n_heads, rng)
        self.gate = GateNetwork(d, n_experts, rng)
        self.experts = [Expert(d, rng) for _ in range(n_experts)]
        self.norm = LayerNorm(d)
        self.k = k
        self.d = d
        self.stats = ComputeStats()

    @property
    def n_experts(self):
        return len(self.experts)

    def route(self, flat_tokens) -> RouterOutput:
        self.stats.gate_flops += self.gate.proj.flops(flat_tokens.shape[0])
        return route_topk(gate_probs(self.gate, flat_tokens), self.k)

    def __call__(self, tokens):
        """Return block output ``(B, |M|, d)`` and the router decisions for its ``B*|M|`` tokens."""
        b, m, d = tokens.shape
        h = attention_forward(self, tokens)
        flat = h.reshape(b * m, d)
        router = self.route(flat)
        y = smoe_forward(self, flat, router)
        return self.norm(h + y.reshape(b, m, d)), router


def smoe_forward(layer: SmoeLayer, tokens, router: RouterOutput) -> T.Tensor:
    """Sum of selected experts weighted by the masked gate values.

    Only experts in a token's top-k are evaluated for that token.
    """
    tokens = T.as_tensor(tokens)
    n, d = tokens.shape
    stats = layer.stats
    stats.tokens += n
    pieces = []
    for e, expert in enumerate(layer.experts):
        rows = np.flatnonzero((router.top_indices == e).any(axis=1))
        if rows.size == 0:
            continue
        out = expert(tokens[rows])
        weight = router.masked[rows, np.full(rows.size, e)].reshape(-1, 1)
        pieces.append((rows, out * weight))
        stats.expert_calls += rows.size
        stats.expert_flops += expert.flops(rows.size)
        stats.calls_per_expert[e] = stats.calls_per_expert.get(e, 0) + int(rows.size)
    return T.index_add((n, d), pieces)


def cv_squared(values) -> float:
    """Squared coefficient of variation, population variance over squared mean."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cv_squared of an empty vector")
    if np.any(x < 0):
        raise ValueError("cv_squared expects non-negative values")
    mu = x.mean()
    if x.size == 1 or mu <= CV_EPS:
        return 0.0
    return float(x.var() / mu**2)


def cv_squared_tensor(values: T.Tensor) -> T.Tensor:
    """Differentiable :func:`cv_squared`; the guards return a constant zero."""
    if values.size == 1 or values.data.mean() <= CV_EPS:
        return T.Tensor(0.0)
    mu = values.mean()
    centered = values - mu
    return (centered * centered).mean() / (mu * mu)


def _mode_exclusion(router: RouterOutput, mode, rows):
    """Per-token multiplier: 0 at a token's top-1 column when it is routed in S mode."""
    n, e = len(rows), router.n_experts
    if isinstance(mode, str):
        if mode not in ("G", "S"):
            raise ValueError(f"mode must be 'G' or 'S', got {mode!r}")
        specialized = np.full(n, mode == "S")
    else:
        specialized = np.asarray(mode, dtype=bool)[rows]
    keep = np.ones((n, e))
    keep[np.flatnonzero(specialized), router.top1[rows][specialized]] = 0.0
    return keep


def balance_loss(router: RouterOutput, mode="G", rows=None) -> T.Tensor:
    """Importance plus load balancing, both as CV^2 over experts.

    ``mode`` is ``"G"`` (all top-k assignments count), ``"S"`` (each token's
    top-1 assignment is dropped), or a boolean per-token array selecting S.
    ``rows`` restricts the statistic to a subset of tokens.  The load term is
    a count and carries no gradient.
    """
    masked = router.masked
    if rows is None:
        rows = np.arange(router.probs.shape[0])
    else:
        rows = np.asarray(rows, dtype=np.int64)
        masked = masked[rows]
    if rows.size == 0:
        return T.Tensor(0.0)
    keep = _mode_exclusion(router, mode, rows)
    importance = (masked * keep).sum(axis=0)
    load = ((masked.data * keep) > 0).sum(axis=0)
    return cv_squared_tensor(importance) + cv_squared(load)


def router_ce_loss(probs, targets) -> T.Tensor:
    """Mean of ``-log probs[j, target_j]``: pulls each token's top-1 toward its target expert."""
    probs = T.as_tensor(probs)
    targets = np.asarray(targets, dtype=np.int64)
    n, e = probs.shape
    if targets.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {targets.shape}")
    if n == 0:
        return T.Tensor(0.0)
    if targets.min() < 0 or targets.max() >= e:
        raise ValueError(f"target experts must lie in [0, {e})")
    return -T.log(probs[np.arange(n), targets]).mean()


class PredictionHead(Module):
    def __init__(self, d, n_classes, rng):
        self.proj = Linear(d, n_classes, rng)

    def __call__(self, pooled):
        return self.proj(pooled)


def predict_head(head: PredictionHead, pooled) -> T.Tensor:
    pooled = T.as_tensor(pooled)
    if pooled.ndim == 1:
        return head(pooled.reshape(1, -1)).reshape(-1)
    return head(pooled)
