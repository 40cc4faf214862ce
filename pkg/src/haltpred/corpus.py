"""Seeded synthetic corpus of labelled While-programs."""

from __future__ import annotations

import hashlib
import io
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import GenerationMismatch, RuntimeFault, TooFewMinority, UnknownTemplate
from .minilang import Fault, Halted, interpret, parse

TERMINATING = 0
NON_TERMINATING = 1

TERMINATING_TEMPLATES = ("countdown", "bounded_count_up", "nested_loops", "guarded_if_loop")
NON_TERMINATING_TEMPLATES = ("missing_decrement", "wrong_direction", "constant_guard")
TEMPLATES = TERMINATING_TEMPLATES + NON_TERMINATING_TEMPLATES

# non-terminating template -> terminating twin differing only in the loop guard or update
TWINS = {
    "wrong_direction": "countdown",
    "missing_decrement": "countdown",
    "constant_guard": "countdown",
}

DEFAULT_BUDGET = 10_000
MAX_RETRIES = 100

_NAMES = ("x", "y", "i", "j", "k", "n", "cnt", "idx", "acc", "tmp", "rem", "lo", "hi", "val")


def _derive(*parts: object) -> int:
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def generate(template: str, params: dict[str, int] | None = None, seed: int = 0) -> str:
    """Render one program from ``template``.

    Variable names and filler statements come from ``seed``; the shared
    draws happen before any template-specific ones, so twins rendered with
    the same ``(params, seed)`` differ only where their templates differ.

    Recognised params: ``n`` (loop bound), ``m`` (inner bound),
    ``step`` (default 1), ``t`` (if threshold), ``noise`` (filler
    statements, default 0).
    """
    if template not in TEMPLATES:
        raise UnknownTemplate(f"unknown template {template!r}; choose from {', '.join(TEMPLATES)}")
    p = dict(params or {})
    rng = random.Random(_derive("gen", seed))
    v, w, a = rng.sample(_NAMES, 3)
    n = p.get("n", rng.randint(1, 12))
    m = p.get("m", rng.randint(1, 6))
    t = p.get("t", rng.randint(1, 10))
    step = p.get("step", 1)
    noise = p.get("noise", 0)
    fill_values = [rng.randint(0, 9) for _ in range(noise)]
    variant = rng.randrange(3)

    if template == "countdown":
        core = f"{v} := {n}; while {v} > 0 {{ {v} := {v} - {step} }}"
    elif template == "bounded_count_up":
        core = f"{v} := 0; while {v} < {n} {{ {v} := {v} + {step} }}"
    elif template == "nested_loops":
        core = (
            f"{v} := {n}; while {v} > 0 {{ {w} := {m}; "
            f"while {w} > 0 {{ {w} := {w} - 1 }}; {v} := {v} - {step} }}"
        )
    elif template == "guarded_if_loop":
        core = (
            f"{v} := {n}; while {v} > 0 {{ if {v} > {t} "
            f"{{ {v} := {v} - {step + 1} }} else {{ {v} := {v} - {step} }} }}"
        )
    elif template == "missing_decrement":
        body = (f"{w} := {v} - {step}", f"{v} := {v} + 0", f"{v} := {v} * 1")[variant]
        core = f"{v} := {n}; while {v} > 0 {{ {body} }}"
    elif template == "wrong_direction":
        core = f"{v} := {n}; while {v} > 0 {{ {v} := {v} + {step} }}"
    else:  # constant_guard
        guard = (f"{n} > 0", f"{v} == {v}", f"{v} + 1 > {v}")[variant]
        core = f"{v} := {n}; while {guard} {{ {v} := {v} - {step} }}"

    stmts = [f"{a} := {val}" for val in fill_values[: (noise + 1) // 2]]
    stmts.append(core)
    stmts += [f"{a} := {a} + {val}" for val in fill_values[(noise + 1) // 2 :]]
    return "; ".join(stmts)


def twin_pair(template: str, params: dict[str, int] | None = None, seed: int = 0) -> tuple[str, str]:
    """(terminating, non-terminating) programs differing only in one loop part."""
    if template not in TWINS:
        raise UnknownTemplate(f"no twin defined for {template!r}")
    return generate(TWINS[template], params, seed), generate(template, params, seed)


@dataclass(frozen=True)
class LabeledProgram:
    source: str
    label: int
    template: str
    seed: int
    steps: int | None  # None marks an exhausted budget

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "label": self.label,
            "template": self.template,
            "seed": self.seed,
            "steps": self.steps,
        }


@dataclass(frozen=True)
class Corpus:
    items: tuple[LabeledProgram, ...]
    budget: int = DEFAULT_BUDGET
    seed: int = 0

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def labels(self) -> list[int]:
        return [it.label for it in self.items]

    @property
    def sources(self) -> list[str]:
        return [it.source for it in self.items]

    @property
    def n0(self) -> int:
        return sum(1 for it in self.items if it.label == TERMINATING)

    @property
    def n1(self) -> int:
        return sum(1 for it in self.items if it.label == NON_TERMINATING)

    @property
    def counts(self) -> tuple[int, int]:
        return self.n0, self.n1

    def subset(self, indices: Iterable[int]) -> "Corpus":
        return Corpus(tuple(self.items[i] for i in indices), self.budget, self.seed)

    def dumps(self) -> str:
        buf = io.StringIO()
        header = {"budget": self.budget, "master_seed": self.seed, "n0": self.n0, "n1": self.n1}
        buf.write(json.dumps(header, sort_keys=True) + "\n")
        for item in self.items:
            buf.write(json.dumps(item.to_json(), sort_keys=True) + "\n")
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8", newline="\n")

    @classmethod
    def loads(cls, text: str) -> "Corpus":
        lines = [ln for ln in text.split("\n") if ln.strip()]
        if not lines:
            raise ValueError("empty corpus file")
        header = json.loads(lines[0])
        items = tuple(
            LabeledProgram(d["source"], int(d["label"]), d["template"], int(d["seed"]), d["steps"])
            for d in map(json.loads, lines[1:])
        )
        corpus = cls(items, int(header["budget"]), int(header["master_seed"]))
        if (corpus.n0, corpus.n1) != (header["n0"], header["n1"]):
            raise ValueError("corpus header counts disagree with items")
        return corpus

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def label_program(source: str, budget: int) -> tuple[int, int | None]:
    """(label, steps); steps is None when the budget ran out.

    Raises RuntimeFault when the run faults, since such a program has no
    trustworthy label.
    """
    outcome = interpret(parse(source), budget)
    if isinstance(outcome, Halted):
        return TERMINATING, outcome.steps
    if isinstance(outcome, Fault):
        raise RuntimeFault(outcome.description)
    return NON_TERMINATING, None


def _make_item(index: int, label: int, budget: int, master_seed: int) -> LabeledProgram:
    pool = NON_TERMINATING_TEMPLATES if label == NON_TERMINATING else TERMINATING_TEMPLATES
    for attempt in range(MAX_RETRIES):
        item_seed = _derive("item", master_seed, index, attempt) % (2**31)
        rng = random.Random(item_seed)
        template = rng.choice(pool)
        params = {
            "n": rng.randint(1, 20),
            "m": rng.randint(1, 8),
            "t": rng.randint(1, 10),
            "step": rng.randint(1, 3),
            "noise": rng.randint(0, 2),
        }
        source = generate(template, params, item_seed)
        got, steps = label_program(source, budget)
        if got == label:
            return LabeledProgram(source, label, template, item_seed, steps)
    raise GenerationMismatch(
        f"item {index}: no {pool} program with label {label} within {MAX_RETRIES} attempts"
    )


def build_corpus(
    size: int = 2000,
    minority_ratio: float = 0.02,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
) -> Corpus:
    """Generate ``size`` programs, ``round(size * minority_ratio)`` of them
    non-terminating, each label confirmed by running the interpreter."""
    if size < 10:
        raise ValueError("size must be >= 10")
    if not 0 < minority_ratio < 0.5:
        raise ValueError("minority_ratio must be in (0, 0.5)")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    n1 = max(1, round(size * minority_ratio))
    minority = set(random.Random(_derive("layout", seed)).sample(range(size), n1))
    items = tuple(
        _make_item(k, NON_TERMINATING if k in minority else TERMINATING, budget, seed)
        for k in range(size)
    )
    return Corpus(items, budget, seed)


@dataclass(frozen=True)
class SplitPair:
    train: Corpus
    test: Corpus


def split(corpus: Corpus, train_fraction: float = 0.8, seed: int = 0) -> SplitPair:
    """Stratified split: each class keeps its share on both sides, with at
    least one item of every class on each side."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    by_class: dict[int, list[int]] = {}
    for i, it in enumerate(corpus.items):
        by_class.setdefault(it.label, []).append(i)
    if len(by_class) < 2 or any(len(v) < 2 for v in by_class.values()):
        raise TooFewMinority("every class needs at least 2 items to split")

    rng = random.Random(_derive("split", seed))
    target_total = round(train_fraction * len(corpus))
    # smaller classes first; the largest absorbs rounding
    order = sorted(by_class, key=lambda c: (len(by_class[c]), c))
    train_idx: list[int] = []
    taken = 0
    for pos, cls in enumerate(order):
        members = list(by_class[cls])
        rng.shuffle(members)
        if pos < len(order) - 1:
            k = round(train_fraction * len(members))
        else:
            k = target_total - taken
        k = min(max(k, 1), len(members) - 1)
        taken += k
        train_idx += members[:k]
    train_set = set(train_idx)
    test_idx = [i for i in range(len(corpus)) if i not in train_set]
    return SplitPair(corpus.subset(sorted(train_set)), corpus.subset(test_idx))
