"""Independent reference computations used by the tests.

These deliberately avoid the package's tensor code: plain numpy or plain
Python loops, written from the textbook definitions.
"""

import math

import numpy as np


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def dense_expert(expert, x):
    h = gelu(x @ expert.fc1.weight.data + expert.fc1.bias.data)
    return h @ expert.fc2.weight.data + expert.fc2.bias.data


def dense_moe(layer, x, masked):
    """Evaluate every expert on every token, then weight by the masked gate."""
    outs = np.stack([dense_expert(e, x) for e in layer.experts], axis=1)  # (n, E, d)
    return np.einsum("ne,ned->nd", masked, outs)


def cv_squared_direct(values):
    xs = [float(v) for v in values]
    n = len(xs)
    mu = sum(xs) / n
    if n == 1 or mu <= 1e-10:
        return 0.0
    var = sum((v - mu) ** 2 for v in xs) / n
    return var / (mu * mu)


def auc_pair_count(y_true, scores):
    """Fraction of (positive, negative) pairs ranked correctly; ties count half."""
    pos = [s for y, s in zip(y_true, scores) if y]
    neg = [s for y, s in zip(y_true, scores) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def macro_auc_pair_count(labels, probs, n_classes):
    return sum(auc_pair_count([y == c for y in labels], probs[:, c]) for c in range(n_classes)) / n_classes


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
