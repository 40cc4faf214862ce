"""Imbalance-aware objectives on a two-logit head and class-aware batching.

Every loss returns ``(loss, dloss/dlogits)``.  The ``*_batch`` variants take
``(B, 2)`` logits and average over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BetaOutOfRange, EmptyMinority

LOSS_KINDS = ("ce", "bce_effnum", "focal", "ldam")
IMBALANCE_KINDS = ("bce_effnum", "focal", "ldam")


def effective_number_weights(counts: Sequence[int], beta: float = 0.999) -> tuple[float, float]:
    """Class weights ``(1 - beta) / (1 - beta**n_c)`` rescaled to sum to 2."""
    if not 0.0 <= beta < 1.0:
        raise BetaOutOfRange(f"beta must lie in [0, 1), got {beta}")
    if any(n < 1 for n in counts):
        raise ValueError(f"class counts must be >= 1, got {tuple(counts)}")
    raw = [(1.0 - beta) / (1.0 - beta**n) for n in counts]
    total = sum(raw)
    return tuple(2.0 * w / total for w in raw)  # type: ignore[return-value]


def ldam_margins(counts: Sequence[int], C: float = 0.5) -> tuple[float, float]:
    """Per-class margins ``C / n_c**0.25``."""
    if C <= 0:
        raise ValueError("C must be positive")
    if any(n < 1 for n in counts):
        raise ValueError(f"class counts must be >= 1, got {tuple(counts)}")
    return tuple(C / n**0.25 for n in counts)  # type: ignore[return-value]


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def ce_rows(logits, labels):
    """Per-row CE and its gradient, written in terms of the binary logit gap.

    softplus(-gap) keeps full relative precision for confident rows, where
    logsumexp minus the true logit would cancel to zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    rows = np.arange(len(labels))
    gap = logits[rows, labels] - logits[rows, 1 - labels]
    q = _sigmoid(-gap)  # probability mass on the wrong class
    grad = np.empty_like(logits)
    grad[rows, labels] = -q
    grad[rows, 1 - labels] = q
    return _softplus(-gap), grad


def bce_effnum_rows(logits, labels, weights):
    loss, grad = ce_rows(logits, labels)
    w = np.asarray(weights, dtype=np.float64)[labels]
    return w * loss, w[:, None] * grad


def focal_rows(logits, labels, gamma):
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    logits = np.asarray(logits, dtype=np.float64)
    rows = np.arange(len(labels))
    if gamma == 0:
        return ce_rows(logits, labels)
    # binary margin of the true class over the other one
    diff = logits[rows, labels] - logits[rows, 1 - labels]
    ce = _softplus(-diff)
    p_t = _sigmoid(diff)
    q = _sigmoid(-diff)  # 1 - p_t without cancellation
    mod = q**gamma
    loss = mod * ce
    # d/d(diff) of q^g * ce
    ddiff = -gamma * q**gamma * p_t * ce - mod * q
    grad = np.zeros_like(logits)
    grad[rows, labels] = ddiff
    grad[rows, 1 - labels] = -ddiff
    return loss, grad


def ldam_rows(logits, labels, margins, scale):
    if scale <= 0:
        raise ValueError("scale must be positive")
    adjusted = np.array(logits, dtype=np.float64)
    rows = np.arange(len(labels))
    adjusted[rows, labels] -= np.asarray(margins, dtype=np.float64)[labels]
    loss, grad = ce_rows(scale * adjusted, labels)
    return loss, scale * grad


def _single(fn, logits, label, *args):
    loss, grad = fn(np.asarray(logits, dtype=np.float64)[None], np.asarray([int(label)]), *args)
    return float(loss[0]), grad[0]


def loss_ce(logits, label):
    return _single(ce_rows, logits, label)


def loss_bce_effnum(logits, label, weights):
    return _single(bce_effnum_rows, logits, label, weights)


def loss_focal(logits, label, gamma: float = 2.0):
    return _single(focal_rows, logits, label, gamma)


def loss_ldam(logits, label, margins, scale: float = 10.0):
    return _single(ldam_rows, logits, label, margins, scale)


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    beta: float = 0.999
    gamma: float = 2.0
    margin_c: float = 0.5
    scale_s: float = 10.0
    class_counts: tuple[int, int] = (1, 1)

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; choose from {', '.join(LOSS_KINDS)}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "class_counts", tuple(int(c) for c in self.class_counts))
        if any(c < 1 for c in self.class_counts):
            raise ValueError("class_counts must be positive")

    def with_counts(self, counts: Sequence[int]) -> "LossSpec":
        return LossSpec(self.kind, self.beta, self.gamma, self.margin_c, self.scale_s, tuple(counts))

    def rows(self, logits: np.ndarray, labels: np.ndarray):
        labels = np.asarray(labels, dtype=np.int64)
        if self.kind == "ce":
            return ce_rows(logits, labels)
        if self.kind == "bce_effnum":
            return bce_effnum_rows(logits, labels, effective_number_weights(self.class_counts, self.beta))
        if self.kind == "focal":
            return focal_rows(logits, labels, self.gamma)
        return ldam_rows(logits, labels, ldam_margins(self.class_counts, self.margin_c), self.scale_s)

    def batch(self, logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        loss, grad = self.rows(logits, labels)
        n = len(loss)
        return float(loss.mean()), grad / n

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "beta": self.beta,
            "gamma": self.gamma,
            "margin_c": self.margin_c,
            "scale_s": self.scale_s,
            "class_counts": list(self.class_counts),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LossSpec":
        return cls(
            kind=doc.get("kind", "ce"),
            beta=float(doc.get("beta", 0.999)),
            gamma=float(doc.get("gamma", 2.0)),
            margin_c=float(doc.get("margin_c", 0.5)),
            scale_s=float(doc.get("scale_s", 10.0)),
            class_counts=tuple(doc.get("class_counts", (1, 1))),
        )


# ---------------------------------------------------------------------------
# Batching


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[tuple[int, ...], ...]
    min_minority_per_batch: int = 0
    minority_label: int | None = None

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)


def minority_class(labels: Sequence[int]) -> int:
    """The rarer label (ties go to 1, the non-terminating class)."""
    n1 = sum(1 for y in labels if y == 1)
    n0 = len(labels) - n1
    return 1 if n1 <= n0 else 0


def shuffled_batches(n_items: int, batch_size: int, seed: int) -> BatchPlan:
    order = np.random.default_rng(seed).permutation(n_items)
    batches = tuple(tuple(int(i) for i in order[s : s + batch_size]) for s in range(0, n_items, batch_size))
    return BatchPlan(batches)


def class_aware_batches(labels: Sequence[int], batch_size: int = 32, min_minority: int = 1, seed: int = 0) -> BatchPlan:
    """One epoch of batches, each holding at least ``min_minority`` minority items.

    Majority items are dealt out without replacement; every minority item is
    used once and batches still short of ``min_minority`` are topped up by
    sampling minority items with replacement.
    """
    if not batch_size > min_minority >= 1:
        raise ValueError("need batch_size > min_minority >= 1")
    labels = list(labels)
    minor = minority_class(labels)
    minority = [i for i, y in enumerate(labels) if y == minor]
    majority = [i for i, y in enumerate(labels) if y != minor]
    if not minority:
        raise EmptyMinority("class-aware sampling needs at least one minority item")
    rng = np.random.default_rng(seed)
    n_batches = max(1, math.ceil(len(labels) / batch_size))
    maj_chunks = np.array_split(rng.permutation(majority).astype(np.int64), n_batches)
    dealt: list[list[int]] = [[] for _ in range(n_batches)]
    for k, idx in enumerate(rng.permutation(minority)):
        dealt[k % n_batches].append(int(idx))
    batches = []
    for chunk, mins in zip(maj_chunks, dealt):
        short = min_minority - len(mins)
        if short > 0:
            mins += [int(i) for i in rng.choice(minority, size=short, replace=True)]
        batch = np.concatenate([chunk, np.asarray(mins, dtype=np.int64)])
        rng.shuffle(batch)
        batches.append(tuple(int(i) for i in batch))
    return BatchPlan(tuple(batches), min_minority, minor)
