"""Token-level Shapley attribution mapped onto AST nodes.

A scorer is any callable taking an ``(k, n)`` integer array of token-id rows
and returning ``k`` probabilities.  Tokens absent from a coalition are
replaced by ``MASK_ID`` so positions stay aligned.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NodeSetMismatch, SpanMismatch, TooManyTokens
from .minilang import Ast, Span, parse
from .model import MASK_ID, Model, TokenSequence, score_rows, tokenize

Scorer = Callable[[np.ndarray], np.ndarray]

MAX_EXACT_TOKENS = 12
_CHUNK_ROWS = 8192


@dataclass(frozen=True)
class TokenAttribution:
    phi: np.ndarray
    base_value: float
    full_value: float
    method: str  # "exact" | "sampled"
    n_permutations: int | None = None
    seed: int | None = None


@dataclass(frozen=True)
class NodeAttribution:
    phi: np.ndarray  # indexed by node id
    covered: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class EnsembleAttribution:
    phi: np.ndarray
    member_count: int


def model_scorer(model: Model) -> Scorer:
    return lambda rows: score_rows(model, rows)


def _ids(tokens: TokenSequence | Sequence[int]) -> np.ndarray:
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tokens
    return np.asarray(ids, dtype=np.int64)


def _evaluate_coalitions(scorer: Scorer, ids: np.ndarray, coalitions: np.ndarray, mask_id: int) -> np.ndarray:
    """Scorer values for boolean coalition rows, each distinct row scored once."""
    n = len(ids)
    weights = (1 << np.arange(n, dtype=np.int64)) if n else np.zeros(0, dtype=np.int64)
    keys = coalitions.astype(np.int64) @ weights
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    rows = np.where(coalitions[first], ids[None, :], mask_id)
    values = np.empty(len(uniq))
    for start in range(0, len(rows), _CHUNK_ROWS):
        values[start : start + _CHUNK_ROWS] = scorer(rows[start : start + _CHUNK_ROWS])
    return values[inverse.ravel()]


def shapley_exact(scorer: Scorer, tokens: TokenSequence | Sequence[int], mask_id: int = MASK_ID) -> TokenAttribution:
    """Shapley values by enumerating all ``2**n`` coalitions."""
    ids = _ids(tokens)
    n = len(ids)
    if n > MAX_EXACT_TOKENS:
        raise TooManyTokens(f"exact Shapley is limited to {MAX_EXACT_TOKENS} tokens, got {n}")
    if n == 0:
        raise ValueError("nothing to attribute")
    masks = np.arange(1 << n, dtype=np.int64)
    present = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
    values = _evaluate_coalitions(scorer, ids, present, mask_id)
    sizes = present.sum(1)
    # |S|! (n - |S| - 1)! / n!
    weight = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])
    phi = np.empty(n)
    for i in range(n):
        without = masks[~present[:, i]]
        phi[i] = np.sum(weight[sizes[without]] * (values[without | (1 << i)] - values[without]))
    return TokenAttribution(phi, float(values[0]), float(values[-1]), "exact")


def _permutations(n: int, n_permutations: int, seed: int, exhaustive: bool) -> np.ndarray:
    if exhaustive:
        return np.asarray(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)
    # one generator per permutation index: parallel and serial runs agree
    return np.stack([np.random.default_rng([seed, k]).permutation(n) for k in range(n_permutations)])


def shapley_sampled(
    scorer: Scorer,
    tokens: TokenSequence | Sequence[int],
    n_permutations: int = 200,
    seed: int = 0,
    mask_id: int = MASK_ID,
    exhaustive: bool = False,
) -> TokenAttribution:
    """Permutation-sampling estimate: mean marginal contribution of each token
    when added in random order.  ``exhaustive=True`` walks all ``n!`` orders."""
    ids = _ids(tokens)
    n = len(ids)
    if n == 0:
        raise ValueError("nothing to attribute")
    if n_permutations < 1 and not exhaustive:
        raise ValueError("n_permutations must be >= 1")
    perms = _permutations(n, n_permutations, seed, exhaustive)
    k = len(perms)
    # prefix coalitions: row j of permutation p holds its first j tokens
    rank = np.empty_like(perms)
    rank[np.arange(k)[:, None], perms] = np.arange(n)
    prefix = rank[:, None, :] < np.arange(n + 1)[None, :, None]
    values = _evaluate_coalitions(scorer, ids, prefix.reshape(-1, n), mask_id).reshape(k, n + 1)
    marginals = np.diff(values, axis=1)
    phi = np.zeros(n)
    np.add.at(phi, perms.ravel(), marginals.ravel())
    phi /= k
    return TokenAttribution(phi, float(values[0, 0]), float(values[0, -1]), "sampled", k, None if exhaustive else seed)


def map_tokens_to_ast(attribution: TokenAttribution | Sequence[float], spans: Sequence[Span], ast: Ast) -> NodeAttribution:
    """Each node collects the full Shapley value of every token overlapping its span."""
    phi_tokens = np.asarray(getattr(attribution, "phi", attribution), dtype=np.float64)
    if len(phi_tokens) != len(spans):
        raise SpanMismatch(f"{len(phi_tokens)} token values but {len(spans)} spans")
    root = ast[ast.root].span
    for i, sp in enumerate(spans):
        if not root.contains(Span(*sp)):
            raise SpanMismatch(f"token {i} span {tuple(sp)} lies outside the program span {tuple(root)}")
    phi = np.zeros(len(ast))
    covered = []
    for node in ast.nodes:
        idx = tuple(i for i, sp in enumerate(spans) if node.span.overlaps(Span(*sp)))
        covered.append(idx)
        phi[node.id] = math.fsum(phi_tokens[list(idx)]) if idx else 0.0
    return NodeAttribution(phi, tuple(covered))


def aggregate_models(attributions: Sequence[NodeAttribution]) -> EnsembleAttribution:
    """Per-node mean across models (order-independent summation)."""
    if not attributions:
        raise NodeSetMismatch("no attributions to aggregate")
    size = len(attributions[0].phi)
    if any(len(a.phi) != size for a in attributions):
        raise NodeSetMismatch("attributions cover different node sets")
    if any(a.covered != attributions[0].covered for a in attributions):
        raise NodeSetMismatch("attributions were mapped onto different trees")
    stacked = np.stack([a.phi for a in attributions])
    mean = np.array([math.fsum(col) / len(attributions) for col in stacked.T])
    return EnsembleAttribution(mean, len(attributions))


# ---------------------------------------------------------------------------
# Export

NEUTRAL = (0xF7, 0xF7, 0xF7)
RED = (0xB2, 0x18, 0x2B)
BLUE = (0x21, 0x66, 0xAC)
MIN_WIDTH = 0.4
MAX_WIDTH = 2.4
MIN_PEN = 0.5
MAX_PEN = 6.0


def diverging_color(value: float, scale: float) -> str:
    """Hex colour: red for positive (non-termination evidence), blue for negative."""
    t = 0.0 if scale <= 0 else max(-1.0, min(1.0, value / scale))
    end = RED if t > 0 else BLUE
    rgb = (round(a + (b - a) * abs(t)) for a, b in zip(NEUTRAL, end))
    return "#" + "".join(f"{c:02x}" for c in rgb)


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def _phi_array(attribution) -> np.ndarray:
    return np.asarray(getattr(attribution, "phi", attribution), dtype=np.float64)


def export_attributed_graph(
    ast: Ast,
    attribution: EnsembleAttribution | NodeAttribution | Sequence[float],
    fmt: str = "dot",
    base_value: float | None = None,
    full_value: float | None = None,
) -> str:
    """Render the attributed tree as Graphviz DOT or JSON text."""
    phi = _phi_array(attribution)
    if len(phi) != len(ast):
        raise NodeSetMismatch(f"attribution covers {len(phi)} nodes, tree has {len(ast)}")
    fmt = fmt.lower()
    if fmt == "json":
        doc = {
            "nodes": [
                {"id": n.id, "kind": n.kind, "label": n.label, "span": [n.span.start, n.span.end], "phi": float(phi[n.id])}
                for n in ast.nodes
            ],
            "edges": [[n.id, c] for n in ast.nodes for c in n.children],
            "base_value": base_value,
            "full_value": full_value,
        }
        return json.dumps(doc, indent=2)
    if fmt != "dot":
        raise ValueError("format must be 'dot' or 'json'")

    scale = float(np.max(np.abs(phi))) if len(phi) else 0.0
    rel = np.abs(phi) / scale if scale > 0 else np.zeros_like(phi)
    lines = [
        "digraph attributed_ast {",
        "  node [shape=ellipse, style=filled, fixedsize=true, fontsize=10];",
        "  edge [arrowhead=none];",
    ]
    for n in ast.nodes:
        width = max(MIN_WIDTH, MAX_WIDTH * rel[n.id])
        label = f"{n.kind}\\n{_dot_escape(n.label)}\\n{phi[n.id]:+.4f}"
        lines.append(
            f'  n{n.id} [label="{label}", width={width:.4f}, height={0.6 * width:.4f}, '
            f'fillcolor="{diverging_color(phi[n.id], scale)}"];'
        )
    for n in ast.nodes:
        for c in n.children:
            lines.append(f"  n{n.id} -> n{c} [penwidth={max(MIN_PEN, MAX_PEN * rel[c]):.4f}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def load_attributed_json(text: str) -> dict:
    return json.loads(text)


# ---------------------------------------------------------------------------
# End to end


@dataclass(frozen=True)
class Explanation:
    ast: Ast
    tokens: TokenSequence
    members: tuple[TokenAttribution, ...]
    nodes: EnsembleAttribution
    probability: float

    @property
    def base_value(self) -> float:
        return math.fsum(m.base_value for m in self.members) / len(self.members)

    @property
    def full_value(self) -> float:
        return math.fsum(m.full_value for m in self.members) / len(self.members)

    @property
    def token_phi(self) -> np.ndarray:
        return np.mean([m.phi for m in self.members], axis=0)


def explain(
    models: Sequence[Model],
    source: str,
    method: str = "sampled",
    n_permutations: int = 200,
    seed: int = 0,
) -> Explanation:
    """Attribute every member's non-termination probability, map to the AST,
    and average node scores across members."""
    ast = parse(source)
    tokens = tokenize(source)
    members = []
    for model in models:
        scorer = model_scorer(model)
        if method == "exact":
            members.append(shapley_exact(scorer, tokens))
        elif method == "sampled":
            members.append(shapley_sampled(scorer, tokens, n_permutations, seed))
        else:
            raise ValueError("method must be 'exact' or 'sampled'")
    nodes = aggregate_models([map_tokens_to_ast(m, tokens.spans, ast) for m in members])
    prob = math.fsum(m.full_value for m in members) / len(members)
    return Explanation(ast, tokens, tuple(members), nodes, prob)


def top_nodes(phi: Sequence[float], k: int = 2, exclude: Sequence[int] = (0,)) -> list[int]:
    """Node ids with the largest ``|phi|`` (ties by node id), root excluded by default."""
    skip = set(exclude)
    order = sorted((i for i in range(len(phi)) if i not in skip), key=lambda i: (-abs(phi[i]), i))
    return order[:k]
