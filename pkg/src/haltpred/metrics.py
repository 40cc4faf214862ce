"""Ranking and threshold metrics for binary termination scores."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import NoPositives, SingleClassInput


def _arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    return s, y


def _require_both(y: np.ndarray) -> tuple[int, int]:
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("metric needs both classes present")
    return n_pos, n_neg


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outscores a random negative, ties = 1/2.

    Computed from mid-ranks (Mann-Whitney U).
    """
    s, y = _arrays(scores, labels)
    n_pos, n_neg = _require_both(y)
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores: Sequence[float], labels: Sequence[int], positive: int = 1, ties: str = "index") -> float:
    """Mean of precision@k over the ranks k of the positives.

    ``ties="index"`` orders equal scores by original position.
    ``ties="group"`` evaluates precision once per distinct score, which
    makes the value independent of the order of tied items.
    """
    s, y = _arrays(scores, labels)
    hits = (y == positive).astype(np.float64)
    n_pos = hits.sum()
    if n_pos == 0:
        raise NoPositives(f"no items with label {positive}")
    order = np.argsort(-s, kind="stable")
    hits = hits[order]
    tp = np.cumsum(hits)
    if ties == "index":
        precision = tp / np.arange(1, len(hits) + 1)
        return float((precision * hits).sum() / n_pos)
    if ties != "group":
        raise ValueError("ties must be 'index' or 'group'")
    ordered = s[order]
    # last position of every block of equal scores
    ends = np.flatnonzero(np.r_[ordered[1:] != ordered[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    gained = np.diff(np.r_[0.0, tp_at])
    return float((precision * gained).sum() / n_pos)


def balanced_map(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mean of the AP for class 1 (scores as-is) and for class 0 (scores negated)."""
    s, y = _arrays(scores, labels)
    _require_both(y)
    ap_pos = average_precision(s, y, positive=1, ties="group")
    ap_neg = average_precision(-s, y, positive=0, ties="group")
    return 0.5 * (ap_pos + ap_neg)


def threshold_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> tuple[float, float]:
    """Accuracy and F1 when predicting positive iff ``score >= threshold``."""
    s, y = _arrays(scores, labels)
    pred = s >= threshold
    truth = y == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    accuracy = float(np.mean(pred == truth)) if len(s) else 0.0
    if tp == 0:
        return accuracy, 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return accuracy, 2 * precision * recall / (precision + recall)
