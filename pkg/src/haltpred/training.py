"""Mini-batch AdamW training with early stopping and best-checkpoint restore."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import Corpus, split
from .errors import NonFiniteGradient, NonFiniteLoss, ValidationMissingClass
from .imbalance import LossSpec, class_aware_batches, shuffled_batches
from .metrics import balanced_map
from .model import AdamWState, Model, TokenSequence, adamw_step, backward_batch, forward_batch, pad_batch, predict_proba, tokenize

log = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    lr: float = 3e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    max_epochs: int = 7
    patience: int = 10
    checks_per_epoch: int = 2
    use_cas: bool = False
    min_minority: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.checks_per_epoch < 1 or self.max_epochs < 1:
            raise ValueError("patience, checks_per_epoch and max_epochs must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 2:
            raise ValueError("invalid optimiser settings")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["loss"] = self.loss.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        loss = LossSpec.from_json(doc.pop("loss", {}))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(loss=loss, **doc)


@dataclass(frozen=True)
class CheckRecord:
    check: int
    epoch: int
    step: int
    train_loss: float
    val_balanced_map: float
    params_digest: str


@dataclass
class TrainReport:
    history: list[CheckRecord]
    best_check: int
    stopped_early: bool
    config: TrainConfig
    final_model: str = "best checkpoint"

    @property
    def best(self) -> CheckRecord:
        return self.history[self.best_check]

    @property
    def epochs_run(self) -> int:
        return max((r.epoch for r in self.history), default=-1) + 1

    def to_json(self) -> dict:
        return {
            "history": [asdict(r) for r in self.history],
            "best_check": self.best_check,
            "stopped_early": self.stopped_early,
            "final_model": self.final_model,
            "epochs_run": self.epochs_run,
            "config": self.config.to_json(),
        }


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()[:16]


class EarlyStopping:
    """Tracks the best score; signals a stop after ``patience`` checks
    without a strict improvement larger than ``tol``."""

    def __init__(self, patience: int, tol: float = IMPROVEMENT_TOL):
        self.patience = patience
        self.tol = tol
        self.best = -math.inf
        self.best_index = -1
        self.bad_checks = 0
        self.count = 0

    def update(self, score: float) -> bool:
        """Record ``score``; returns True when it is the new best."""
        improved = score > self.best + self.tol
        if improved:
            self.best = score
            self.best_index = self.count
            self.bad_checks = 0
        else:
            self.bad_checks += 1
        self.count += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.bad_checks >= self.patience


def _check_boundaries(n_batches: int, checks: int) -> set[int]:
    """Batch indices after which a validation check runs (last one included)."""
    return {max(0, round(n_batches * (c + 1) / checks) - 1) for c in range(checks)}


def train(
    model: Model,
    train_set: Corpus,
    val_set: Corpus,
    config: TrainConfig,
    validate: Callable[[Model], float] | None = None,
) -> tuple[Model, TrainReport]:
    """Fit ``model`` and return the checkpoint with the best validation score.

    ``validate`` overrides the default scorer (balanced mAP on ``val_set``).
    """
    val_labels = np.asarray(val_set.labels)
    if validate is None:
        if len(set(val_labels.tolist())) < 2:
            raise ValidationMissingClass("validation set must contain both classes")
        val_seqs = [tokenize(s) for s in val_set.sources]

        def validate(m: Model) -> float:
            return balanced_map(predict_proba(m, val_seqs), val_labels)

    loss_spec = config.loss.with_counts(tuple(max(1, c) for c in train_set.counts))
    seqs: list[TokenSequence] = [tokenize(s) for s in train_set.sources]
    labels = np.asarray(train_set.labels, dtype=np.int64)
    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamWState.zeros_like(params)
    stopper = EarlyStopping(config.patience)
    history: list[CheckRecord] = []
    best_params = params
    step = 0
    stopped = False

    for epoch in range(config.max_epochs):
        epoch_seed = config.seed * 1_000_003 + epoch
        if config.use_cas:
            plan = class_aware_batches(labels.tolist(), config.batch_size, config.min_minority, epoch_seed)
        else:
            plan = shuffled_batches(len(seqs), config.batch_size, epoch_seed)
        boundaries = _check_boundaries(len(plan), config.checks_per_epoch)
        running: list[float] = []
        for b, batch in enumerate(plan):
            current = Model(model.config, params)
            ids, mask = pad_batch([seqs[i].ids for i in batch])
            logits, cache = forward_batch(current, ids, mask)
            loss, dlogits = loss_spec.batch(logits, labels[list(batch)])
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at step {step}", list(batch), history)
            grads = backward_batch(current, cache, dlogits)
            try:
                params, state = adamw_step(params, grads, state, config.lr, config.weight_decay)
            except NonFiniteGradient as exc:
                raise NonFiniteLoss(f"step {step}: {exc}", list(batch), history) from exc
            running.append(loss)
            step += 1
            if b in boundaries:
                score = float(validate(Model(model.config, params)))
                if stopper.update(score):
                    best_params = params
                history.append(
                    CheckRecord(len(history), epoch, step, float(np.mean(running)), score, params_digest(params))
                )
                log.debug("epoch %d step %d loss %.4f val %.4f", epoch, step, history[-1].train_loss, score)
                running = []
                if stopper.should_stop:
                    stopped = True
                    break
        if stopped:
            break

    report = TrainReport(history, stopper.best_index, stopped, config)
    return Model(model.config, {k: v.copy() for k, v in best_params.items()}), report


def mean_loss(model: Model, corpus: Corpus, loss: LossSpec, batch_size: int = 256) -> float:
    """Average training objective of ``model`` over ``corpus``."""
    spec = loss.with_counts(tuple(max(1, c) for c in corpus.counts))
    seqs = [tokenize(s) for s in corpus.sources]
    labels = np.asarray(corpus.labels, dtype=np.int64)
    total = 0.0
    for start in range(0, len(seqs), batch_size):
        ids, mask = pad_batch([s.ids for s in seqs[start : start + batch_size]])
        logits, _ = forward_batch(model, ids, mask)
        rows, _ = spec.rows(logits, labels[start : start + batch_size])
        total += float(rows.sum())
    return total / len(seqs)


def validation_split(corpus: Corpus, seed: int, fraction: float = 0.8) -> tuple[Corpus, Corpus]:
    """Carve a stratified validation set out of a training corpus."""
    pair = split(corpus, fraction, seed)
    return pair.train, pair.test
