"""Slow, definition-level reference implementations used only by tests.

Nothing here imports the code under test beyond plain data types.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def auc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def ap_definition(scores, labels, positive=1) -> float:
    """precision@k averaged over positive ranks; ties by original index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    acc = 0.0
    for k, i in enumerate(order, start=1):
        if labels[i] == positive:
            hits += 1
            acc += hits / k
    return acc / hits


def ap_grouped(scores, labels, positive=1) -> float:
    """sum over distinct thresholds of (recall gain) * precision at that threshold."""
    n_pos = sum(1 for y in labels if y == positive)
    acc = 0.0
    prev_tp = 0
    for thr in sorted(set(scores), reverse=True):
        selected = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(1 for y in selected if y == positive)
        acc += (tp - prev_tp) / n_pos * (tp / len(selected))
        prev_tp = tp
    return acc


def shapley_by_formula(value, n) -> list[float]:
    """phi_i = sum_S |S|!(n-|S|-1)!/n! [v(S+i) - v(S)] with v over frozensets."""
    phi = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        total = 0.0
        for r in range(n):
            w = math.factorial(r) * math.factorial(n - r - 1) / math.factorial(n)
            for S in itertools.combinations(others, r):
                total += w * (value(frozenset(S) | {i}) - value(frozenset(S)))
        phi.append(total)
    return phi


def central_difference(f, x: np.ndarray, eps: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f(x)
        x[idx] = old - eps
        down = f(x)
        x[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad

