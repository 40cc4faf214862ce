"""Soft-voting ensembles over trained runs and their evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .corpus import Corpus
from .errors import EmptyEnsemble, MembershipError
from .imbalance import IMBALANCE_KINDS
from .metrics import average_precision, roc_auc, threshold_metrics
from .model import Model, load_checkpoint, predict_proba, tokenize

ENSEMBLE_KINDS = ("E1", "E2", "E3")
DEFAULT_THRESHOLD = 0.5


def soft_vote(probabilities: Sequence[float]) -> float:
    """Arithmetic mean of member probabilities."""
    if len(probabilities) == 0:
        raise EmptyEnsemble("soft vote over an empty ensemble")
    p = np.asarray(probabilities, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("member probabilities must lie in [0, 1]")
    return float(soft_vote_matrix(p[:, None])[0])


def soft_vote_matrix(member_probs: np.ndarray) -> np.ndarray:
    """Column-wise mean of an ``(members, items)`` probability matrix.

    Averaging offsets from the column minimum in sorted order makes the
    result exact for identical members and independent of member order.
    """
    member_probs = np.atleast_2d(np.asarray(member_probs, dtype=np.float64))
    if member_probs.shape[0] == 0:
        raise EmptyEnsemble("soft vote over an empty ensemble")
    lo = member_probs.min(axis=0)
    hi = member_probs.max(axis=0)
    offsets = np.sort(member_probs - lo, axis=0)
    return np.clip(lo + offsets.sum(axis=0) / member_probs.shape[0], lo, hi)


@dataclass
class Member:
    checkpoint: str
    loss: str
    use_cas: bool
    model: Model | None = field(default=None, repr=False, compare=False)

    def load(self, base: Path | None = None) -> Model:
        if self.model is None:
            path = Path(self.checkpoint)
            if base is not None and not path.is_absolute():
                path = base / path
            self.model = load_checkpoint(path)
        return self.model


@dataclass
class EnsembleSpec:
    members: list[Member]
    kind: str
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        self.kind = self.kind.upper()
        validate_membership(self.kind, [(m.loss, m.use_cas) for m in self.members])

    def models(self) -> list[Model]:
        return [m.load(self.base_dir) for m in self.members]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "members": [{"checkpoint": m.checkpoint, "loss": m.loss, "use_cas": m.use_cas} for m in self.members],
        }

    @classmethod
    def from_json(cls, doc: dict, base_dir: Path | None = None) -> "EnsembleSpec":
        members = [Member(str(d["checkpoint"]), str(d["loss"]).lower(), bool(d["use_cas"])) for d in doc["members"]]
        return cls(members, str(doc["kind"]), base_dir)

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleSpec":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text(encoding="utf-8")), path.parent)


def validate_membership(kind: str, members: Sequence[tuple[str, bool]]) -> None:
    """Reject member lists that break the E1/E2/E3 composition rules.

    E1 holds only cross-entropy runs; E2 only imbalance-aware losses; E3 is
    E2 with class-aware sampling on every member.
    """
    if kind not in ENSEMBLE_KINDS:
        raise MembershipError(f"unknown ensemble kind {kind!r}")
    if not members:
        raise EmptyEnsemble("ensemble has no members")
    for loss, cas in members:
        loss = loss.lower()
        if kind == "E1" and loss != "ce":
            raise MembershipError(f"E1 admits only ce members, got {loss}")
        if kind in ("E2", "E3") and loss not in IMBALANCE_KINDS:
            raise MembershipError(f"{kind} admits only {', '.join(IMBALANCE_KINDS)} members, got {loss}")
        if kind == "E3" and not cas:
            raise MembershipError("E3 members must all be trained with class-aware sampling")


@dataclass(frozen=True)
class EvalReport:
    auc: float
    ap_minority: float
    accuracy: float
    f1: float
    threshold: float
    n_pos: int
    n_neg: int

    def to_json(self) -> dict:
        return {
            "auc": self.auc,
            "map": self.ap_minority,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "threshold": self.threshold,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


def report_from_scores(scores: Sequence[float], labels: Sequence[int], threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    labels = np.asarray(labels)
    accuracy, f1 = threshold_metrics(scores, labels, threshold)
    return EvalReport(
        auc=roc_auc(scores, labels),
        ap_minority=average_precision(scores, labels, positive=1),
        accuracy=accuracy,
        f1=f1,
        threshold=threshold,
        n_pos=int((labels == 1).sum()),
        n_neg=int((labels == 0).sum()),
    )


Scorable = Union[EnsembleSpec, Model, Sequence[Model]]


def _as_models(target: Scorable) -> list[Model]:
    if isinstance(target, EnsembleSpec):
        return target.models()
    if isinstance(target, Model):
        return [target]
    return list(target)


def ensemble_proba(target: Scorable, sources: Sequence[str]) -> np.ndarray:
    seqs = [tokenize(s) for s in sources]
    return soft_vote_matrix(np.stack([predict_proba(m, seqs) for m in _as_models(target)]))


def evaluate(target: Scorable, dataset: Corpus, threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    """Member probabilities, soft vote, then every metric."""
    return report_from_scores(ensemble_proba(target, dataset.sources), dataset.labels, threshold)
