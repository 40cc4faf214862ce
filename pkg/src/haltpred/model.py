"""Lexeme tokenizer and a compact transformer-encoder classifier in numpy.

Everything runs in float64 with a hand-written backward pass so gradients
can be checked against finite differences.  The network is pre-LayerNorm:

    x = tok_emb[ids] + pos_emb[:T]
    per layer:  x += MHA(LN1(x));  x += W2 gelu(W1 LN2(x))
    logits = head(mean_valid(LN_f(x)))
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import NonFiniteGradient, SequenceTooLong
from .minilang import KEYWORDS, OPERATORS, Span, lex

# ---------------------------------------------------------------------------
# Tokenizer

PAD_ID = 0
UNK_ID = 1
MASK_ID = 2
_KW_BASE = 3
_KEYWORD_LIST = sorted(KEYWORDS)
_OP_BASE = _KW_BASE + len(_KEYWORD_LIST)
_OPERATOR_LIST = list(OPERATORS)
_INT_BASE = _OP_BASE + len(_OPERATOR_LIST)
N_SMALL_INTS = 32
_BIG_INT_ID = _INT_BASE + N_SMALL_INTS
_IDENT_BASE = _BIG_INT_ID + 1
VOCAB_SIZE = 128
N_IDENT_BUCKETS = VOCAB_SIZE - _IDENT_BASE

_KW_IDS = {kw: _KW_BASE + i for i, kw in enumerate(_KEYWORD_LIST)}
_OP_IDS = {op: _OP_BASE + i for i, op in enumerate(_OPERATOR_LIST)}


class TokenSequence(NamedTuple):
    ids: tuple[int, ...]
    spans: tuple[Span, ...]
    vocab_size: int = VOCAB_SIZE

    def __len__(self) -> int:
        return len(self.ids)

    def texts(self, source: str) -> list[str]:
        return [source[s.start : s.end] for s in self.spans]


def ident_id(name: str) -> int:
    return _IDENT_BASE + zlib.crc32(name.encode()) % N_IDENT_BUCKETS


def tokenize(source: str) -> TokenSequence:
    """Lexeme-level tokenization; unknown characters become UNK."""
    ids: list[int] = []
    spans: list[Span] = []
    for lx in lex(source, strict=False):
        if lx.kind == "kw":
            tid = _KW_IDS[lx.text]
        elif lx.kind == "op":
            tid = _OP_IDS[lx.text]
        elif lx.kind == "int":
            value = int(lx.text)
            tid = _INT_BASE + value if value < N_SMALL_INTS else _BIG_INT_ID
        elif lx.kind == "ident":
            tid = ident_id(lx.text)
        else:
            tid = UNK_ID
        ids.append(tid)
        spans.append(lx.span)
    return TokenSequence(tuple(ids), tuple(spans), VOCAB_SIZE)


# ---------------------------------------------------------------------------
# Model


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 256
    vocab_size: int = VOCAB_SIZE
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_classes != 2:
            raise ValueError("only binary classification is supported")
        if min(self.d_model, self.n_heads, self.n_layers, self.d_ff, self.max_len, self.vocab_size) < 1:
            raise ValueError("config dimensions must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_len, d),
    }
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.wq": (d, d),
                p + "attn.bq": (d,),
                p + "attn.wk": (d, d),
                p + "attn.bk": (d,),
                p + "attn.wv": (d, d),
                p + "attn.bv": (d,),
                p + "attn.wo": (d, d),
                p + "attn.bo": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "ffn.w1": (d, f),
                p + "ffn.b1": (f,),
                p + "ffn.w2": (f, d),
                p + "ffn.b2": (d,),
            }
        )
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, cfg.n_classes), "head.b": (cfg.n_classes,)})
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Closed form: embeddings + per-layer blocks + final norm + head."""
    d, f, c = cfg.d_model, cfg.d_ff, cfg.n_classes
    per_layer = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d)
    return (cfg.vocab_size + cfg.max_len) * d + cfg.n_layers * per_layer + 2 * d + d * c + c


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    @property
    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})


def init_model(cfg: ModelConfig) -> Model:
    """Seeded scaled-uniform initialisation (bound 1/sqrt(fan_in) for matrices)."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("tok_emb", "pos_emb"):
            params[name] = rng.uniform(-0.1, 0.1, size=shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(cfg, params)


# ---------------------------------------------------------------------------
# Forward / backward

_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_NEG_INF = -1e30


def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_back(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(h):
    t = np.tanh(_GELU_C * (h + 0.044715 * (h * h * h)))
    return 0.5 * h * (1.0 + t), t


def _gelu_back(dy, h, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * h * h)
    return dy * (0.5 * (1.0 + t) + 0.5 * h * dt)


def _outer_sum(a, b):
    """sum over batch and time of outer(a[b, t], b[b, t])."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _check_lengths(cfg: ModelConfig, lengths: Iterable[int]) -> None:
    longest = max(lengths, default=0)
    if longest > cfg.max_len:
        raise SequenceTooLong(f"sequence of {longest} tokens exceeds max_len={cfg.max_len}")


def pad_batch(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists into an ``(B, T)`` array plus a boolean validity mask."""
    width = max((len(s) for s in sequences), default=0)
    ids = np.full((len(sequences), max(width, 1)), PAD_ID, dtype=np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def forward_batch(model: Model, ids: np.ndarray, mask: np.ndarray | None = None):
    """Logits for an ``(B, T)`` id batch; returns ``(logits, cache)``."""
    cfg = model.config
    P = model.params
    ids = np.asarray(ids, dtype=np.int64)
    B, T = ids.shape
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    lengths = mask.sum(1)
    _check_lengths(cfg, [T])
    if np.any(lengths == 0):
        raise ValueError("every sequence needs at least one token")
    H, dh = cfg.n_heads, cfg.d_head

    x = P["tok_emb"][ids] + P["pos_emb"][:T][None]
    key_bias = np.where(mask, 0.0, _NEG_INF)[:, None, None, :]
    layers = []
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        c: dict = {"x_in": x}
        a, c["ln1"] = _layernorm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        c["a"] = a
        q = (a @ P[p + "attn.wq"] + P[p + "attn.bq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (a @ P[p + "attn.wk"] + P[p + "attn.bk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (a @ P[p + "attn.wv"] + P[p + "attn.bv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + key_bias
        scores -= scores.max(-1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(-1, keepdims=True)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        x = x + ctx @ P[p + "attn.wo"] + P[p + "attn.bo"]
        c.update(q=q, k=k, v=v, att=att, ctx=ctx, x_mid=x)
        b, c["ln2"] = _layernorm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        h = b @ P[p + "ffn.w1"] + P[p + "ffn.b1"]
        gh, t = _gelu(h)
        x = x + gh @ P[p + "ffn.w2"] + P[p + "ffn.b2"]
        c.update(b=b, h=h, t=t, gh=gh)
        layers.append(c)

    y, ln_f = _layernorm(x, P["ln_f.g"], P["ln_f.b"])
    weights = mask / lengths[:, None]
    pooled = np.matmul(weights[:, None, :], y)[:, 0]
    logits = pooled @ P["head.w"] + P["head.b"]
    cache = {"ids": ids, "weights": weights, "layers": layers, "ln_f": ln_f, "pooled": pooled, "T": T}
    return logits, cache


def backward_batch(model: Model, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dlogits * logits)`` w.r.t. every parameter."""
    cfg = model.config
    P = model.params
    dlogits = np.asarray(dlogits, dtype=np.float64)
    ids, weights, T = cache["ids"], cache["weights"], cache["T"]
    B = ids.shape[0]
    H, dh = cfg.n_heads, cfg.d_head
    grads = {name: np.zeros_like(value) for name, value in P.items()}

    grads["head.w"] = cache["pooled"].T @ dlogits
    grads["head.b"] = dlogits.sum(0)
    dpooled = dlogits @ P["head.w"].T
    dy = dpooled[:, None, :] * weights[:, :, None]
    dx, grads["ln_f.g"], grads["ln_f.b"] = _layernorm_back(dy, P["ln_f.g"], cache["ln_f"])

    for layer in reversed(range(cfg.n_layers)):
        p = f"layers.{layer}."
        c = cache["layers"][layer]
        # feed-forward block
        grads[p + "ffn.b2"] = dx.sum((0, 1))
        grads[p + "ffn.w2"] = _outer_sum(c["gh"], dx)
        dgh = dx @ P[p + "ffn.w2"].T
        dh_ = _gelu_back(dgh, c["h"], c["t"])
        grads[p + "ffn.b1"] = dh_.sum((0, 1))
        grads[p + "ffn.w1"] = _outer_sum(c["b"], dh_)
        db = dh_ @ P[p + "ffn.w1"].T
        dmid, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layernorm_back(db, P[p + "ln2.g"], c["ln2"])
        dx = dx + dmid
        # attention block
        grads[p + "attn.bo"] = dx.sum((0, 1))
        grads[p + "attn.wo"] = _outer_sum(c["ctx"], dx)
        dctx = (dx @ P[p + "attn.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        dscores = att * (datt - (datt * att).sum(-1, keepdims=True)) / math.sqrt(dh)
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        a = c["a"]
        da = np.zeros_like(a)
        for tag, dproj in (("q", dq), ("k", dk), ("v", dv)):
            flat = dproj.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            grads[p + f"attn.b{tag}"] = flat.sum((0, 1))
            grads[p + f"attn.w{tag}"] = _outer_sum(a, flat)
            da += flat @ P[p + f"attn.w{tag}"].T
        dln, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layernorm_back(da, P[p + "ln1.g"], c["ln1"])
        dx = dx + dln

    grads["pos_emb"][:T] = dx.sum(0)
    np.add.at(grads["tok_emb"], ids.reshape(-1), dx.reshape(-1, cfg.d_model))
    return grads


def softmax2(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def forward(model: Model, tokens: TokenSequence) -> tuple[np.ndarray, float]:
    """Two logits and the non-termination probability for one sequence."""
    _check_lengths(model.config, [len(tokens)])
    logits, _ = forward_batch(model, np.asarray([tokens.ids]))
    return logits[0], float(softmax2(logits)[0, 1])


def backward(model: Model, tokens: TokenSequence, loss_grad: Sequence[float]) -> dict[str, np.ndarray]:
    """Parameter gradients for one sequence given dloss/dlogits."""
    _check_lengths(model.config, [len(tokens)])
    _, cache = forward_batch(model, np.asarray([tokens.ids]))
    return backward_batch(model, cache, np.asarray(loss_grad, dtype=np.float64)[None])


def predict_proba(model: Model, sequences: Sequence[TokenSequence], batch_size: int = 256) -> np.ndarray:
    """Non-termination probabilities, batched by similar length."""
    _check_lengths(model.config, (len(s) for s in sequences))
    out = np.empty(len(sequences))
    order = sorted(range(len(sequences)), key=lambda i: len(sequences[i]))
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        ids, mask = pad_batch([sequences[i].ids for i in chunk])
        logits, _ = forward_batch(model, ids, mask)
        out[chunk] = softmax2(logits)[:, 1]
    return out


def score_rows(model: Model, rows: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Non-termination probabilities for equal-length id rows."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.int64))
    out = np.empty(len(rows))
    for start in range(0, len(rows), batch_size):
        logits, _ = forward_batch(model, rows[start : start + batch_size])
        out[start : start + batch_size] = softmax2(logits)[:, 1]
    return out


# ---------------------------------------------------------------------------
# Optimiser


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float = 3e-4,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update with decoupled weight decay; inputs are not mutated."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    b1, b2 = betas
    t = state.t + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        decayed = p - lr * weight_decay * p
        new_params[name] = decayed - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamWState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# Checkpoints


def model_to_json(model: Model) -> dict:
    return {
        "config": asdict(model.config),
        "parameters": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()} for name, arr in model.params.items()
        },
    }


def model_from_json(doc: dict) -> Model:
    cfg = ModelConfig(**doc["config"])
    expected = parameter_shapes(cfg)
    params = {}
    for name, shape in expected.items():
        entry = doc["parameters"][name]
        if tuple(entry["shape"]) != shape:
            raise ValueError(f"parameter {name} has shape {entry['shape']}, expected {list(shape)}")
        params[name] = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
    return Model(cfg, params)


def save_checkpoint(model: Model, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_json(model)), encoding="utf-8")


def load_checkpoint(path: str | Path) -> Model:
    return model_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
