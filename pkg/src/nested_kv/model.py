"""Toy decoder-only transformer with an optional low-rank projected KV path.

The same tape-based forward serves the teacher (no projections), the
student during distillation (projections built on the tape from skew
generators) and plain inference. Two independent numpy paths sit next to
it: full-sequence inference through merged output weights, and incremental
decoding against a :class:`CompressedKVCache`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, softmax


class ContextOverflow(ValueError):
    pass


class RankOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    n_kv_heads: int = 4
    head_dim: int = 16
    vocab: int = 256
    context: int = 64
    mlp_hidden: int = 128
    tie_embeddings: bool = False
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads:
            raise ValueError("n_heads must be divisible by n_kv_heads")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for RoPE")
        for name in ("n_layers", "n_heads", "n_kv_heads", "head_dim", "vocab", "context", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def kv_head_of(self, head: int) -> int:
        return head // self.group_size


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    D, F, d = config.d_model, config.mlp_hidden, config.head_dim
    shapes = {"tok_emb": (config.vocab, D)}
    for l in range(config.n_layers):
        shapes.update(
            {
                f"l{l}.attn_norm": (1, D),
                f"l{l}.wq": (D, config.n_heads * d),
                f"l{l}.wk": (D, config.n_kv_heads * d),
                f"l{l}.wv": (D, config.n_kv_heads * d),
                f"l{l}.wo": (config.n_heads * d, D),
                f"l{l}.mlp_norm": (1, D),
                f"l{l}.w_gate": (D, F),
                f"l{l}.w_up": (D, F),
                f"l{l}.w_down": (F, D),
            }
        )
    shapes["final_norm"] = (1, D)
    if not config.tie_embeddings:
        shapes["lm_head"] = (D, config.vocab)
    return shapes


@dataclass
class TransformerWeights:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "TransformerWeights":
        return TransformerWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name]).tobytes())
        return h.hexdigest()


def init_weights(config: ModelConfig, seed: int = 0) -> TransformerWeights:
    rng = np.random.default_rng(seed)
    out_scale = 1.0 / math.sqrt(2 * config.n_layers)
    tensors = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape)
        elif name == "tok_emb":
            tensors[name] = rng.normal(0.0, 1.0, shape)
        elif name == "lm_head":
            tensors[name] = rng.normal(0.0, 0.02, shape)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name.endswith((".wo", ".w_down")):
                std *= out_scale
            tensors[name] = rng.normal(0.0, std, shape)
    return TransformerWeights(config, tensors)


# -- RoPE ---------------------------------------------------------------------


def rope_tables(config: ModelConfig, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = config.head_dim
    inv_freq = config.rope_base ** (-np.arange(0, d, 2) / d)
    angles = np.outer(np.asarray(positions, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


def rotate_half_matrix(d: int) -> np.ndarray:
    """Constant R with x @ R == concat(-x[d/2:], x[:d/2])."""
    half = d // 2
    r = np.zeros((d, d))
    r[np.arange(half) + half, np.arange(half)] = -1.0
    r[np.arange(half), np.arange(half) + half] = 1.0
    return r


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return x * cos + (x @ rotate_half_matrix(x.shape[-1])) * sin


def _rope_var(x: Var, cos: np.ndarray, sin: np.ndarray, rot: np.ndarray) -> Var:
    return ad.mul(x, cos) + ad.mul(x @ rot, sin)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


# -- projections --------------------------------------------------------------


class BankLike(Protocol):
    config: ModelConfig

    def truncated(self, slot: tuple[int, int, str], r: int) -> np.ndarray: ...


# (layer, kv_head) -> (key projection d x r_k, value projection d x r_v)
Projector = Callable[[int, int], tuple[Var, Var]]


def check_ranks(config: ModelConfig, ranks) -> None:
    for arr, kind in ((ranks.r_k, "K"), (ranks.r_v, "V")):
        arr = np.asarray(arr)
        if arr.shape != (config.n_layers, config.n_kv_heads):
            raise RankOutOfRange(f"{kind} ranks have shape {arr.shape}")
        if arr.min() < 1 or arr.max() > config.head_dim:
            raise RankOutOfRange(f"{kind} ranks must lie in [1, {config.head_dim}]")


def bank_projector(tape: Tape, bank: BankLike, ranks) -> Projector:
    check_ranks(bank.config, ranks)
    cache: dict[tuple[int, int], tuple[Var, Var]] = {}

    def project(layer: int, g: int):
        if (layer, g) not in cache:
            uk = tape.const(bank.truncated((layer, g, "K"), int(ranks.r_k[layer, g])))
            uv = tape.const(bank.truncated((layer, g, "V"), int(ranks.r_v[layer, g])))
            cache[layer, g] = (uk, uv)
        return cache[layer, g]

    return project


# -- tape forward -------------------------------------------------------------


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim not in (1, 2):
        raise ValueError("tokens must be 1-D or 2-D (batch, time)")
    n = tokens.shape[-1]
    if n < 1:
        raise ValueError("empty token sequence")
    if n > config.context:
        raise ContextOverflow(f"{n} tokens exceed context {config.context}")
    if tokens.min() < 0 or tokens.max() >= config.vocab:
        raise ValueError("token id out of vocabulary range")
    return tokens


def param_vars(tape: Tape, weights: TransformerWeights, trainable: bool = False) -> dict[str, Var]:
    return {name: tape.leaf(v, trainable=trainable) for name, v in weights.tensors.items()}


def forward(
    tape: Tape,
    params: dict[str, Var],
    config: ModelConfig,
    tokens,
    projector: Projector | None = None,
    record: dict | None = None,
) -> Var:
    """Logits for ``tokens`` of shape (T,) or (B, T).

    ``record``, when given, receives numpy copies of the post-norm layer
    input (``("h", l)``), post-RoPE keys (``(l, g, "K")``) and values
    (``(l, g, "V")``) of every KV head.
    """
    tokens = _check_tokens(config, tokens)
    T = tokens.shape[-1]
    d = config.head_dim
    cos, sin = rope_tables(config, np.arange(T))
    rot = rotate_half_matrix(d)
    mask = causal_mask(T)
    scale = 1.0 / math.sqrt(d)

    x = ad.embed_lookup(params["tok_emb"], tokens)
    for l in range(config.n_layers):
        h = ad.rms_norm_rows(x, params[f"l{l}.attn_norm"])
        q = h @ params[f"l{l}.wq"]
        k = h @ params[f"l{l}.wk"]
        v = h @ params[f"l{l}.wv"]
        if record is not None:
            record["h", l] = h.value
        heads = []
        for g in range(config.n_kv_heads):
            kg = _rope_var(ad.slice_cols(k, g * d, (g + 1) * d), cos, sin, rot)
            vg = ad.slice_cols(v, g * d, (g + 1) * d)
            if record is not None:
                record[l, g, "K"] = kg.value
                record[l, g, "V"] = vg.value
            if projector is not None:
                uk, uv = projector(l, g)
                kg = kg @ uk
                vg = vg @ uv
                uv_t = ad.transpose(uv)
            kg_t = ad.transpose(kg)
            for head in range(g * config.group_size, (g + 1) * config.group_size):
                qh = _rope_var(ad.slice_cols(q, head * d, (head + 1) * d), cos, sin, rot)
                if projector is not None:
                    qh = qh @ uk
                att = ad.softmax_rows(ad.scalar_mul(qh @ kg_t, scale), mask)
                out = att @ vg
                if projector is not None:
                    out = out @ uv_t
                heads.append(out)
        x = x + ad.concat_cols(heads) @ params[f"l{l}.wo"]
        h = ad.rms_norm_rows(x, params[f"l{l}.mlp_norm"])
        gate = ad.silu(h @ params[f"l{l}.w_gate"])
        x = x + ad.mul(gate, h @ params[f"l{l}.w_up"]) @ params[f"l{l}.w_down"]
    x = ad.rms_norm_rows(x, params["final_norm"])
    head_w = params["lm_head"] if "lm_head" in params else ad.transpose(params["tok_emb"])
    return x @ head_w


def forward_baseline(weights: TransformerWeights, config: ModelConfig, tokens, record: dict | None = None) -> np.ndarray:
    tape = Tape(grad=False)
    return forward(tape, param_vars(tape, weights), config, tokens, record=record).value


def forward_projected(weights: TransformerWeights, config: ModelConfig, bank: BankLike, ranks, tokens) -> np.ndarray:
    tape = Tape(grad=False)
    proj = bank_projector(tape, bank, ranks)
    return forward(tape, param_vars(tape, weights), config, tokens, projector=proj).value


# -- numpy inference paths ---------------------------------------------------


def _rms(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _mlp(weights: TransformerWeights, l: int, x: np.ndarray) -> np.ndarray:
    h = _rms(x, weights[f"l{l}.mlp_norm"])
    return (_silu(h @ weights[f"l{l}.w_gate"]) * (h @ weights[f"l{l}.w_up"])) @ weights[f"l{l}.w_down"]


def _logits(weights: TransformerWeights, x: np.ndarray) -> np.ndarray:
    x = _rms(x, weights["final_norm"])
    head = weights.tensors.get("lm_head")
    return x @ (head if head is not None else weights["tok_emb"].T)


@dataclass
class MergedOutputWeights:
    """Per layer, W^OV: each query head's row block of W^O pre-multiplied by U_r^T of its value slot."""

    ranks_v: np.ndarray
    w_ov: list[np.ndarray]


def merge_output_weights(weights: TransformerWeights, bank: BankLike, ranks) -> MergedOutputWeights:
    config = weights.config
    check_ranks(config, ranks)
    d = config.head_dim
    w_ov = []
    for l in range(config.n_layers):
        wo = weights[f"l{l}.wo"]
        blocks = []
        for head in range(config.n_heads):
            g = config.kv_head_of(head)
            u = bank.truncated((l, g, "V"), int(ranks.r_v[l, g]))
            blocks.append(u.T @ wo[head * d : (head + 1) * d])
        w_ov.append(np.concatenate(blocks, axis=0))
    return MergedOutputWeights(np.array(ranks.r_v, copy=True), w_ov)


def forward_merged(
    weights: TransformerWeights,
    config: ModelConfig,
    bank: BankLike,
    ranks,
    tokens,
    merged: MergedOutputWeights | None = None,
) -> np.ndarray:
    """Full-sequence projected inference that never reconstructs full-width values."""
    tokens = _check_tokens(config, tokens)
    if tokens.ndim != 1:
        raise ValueError("forward_merged takes a single sequence")
    check_ranks(config, ranks)
    if merged is None:
        merged = merge_output_weights(weights, bank, ranks)
    T, d = tokens.size, config.head_dim
    cos, sin = rope_tables(config, np.arange(T))
    mask = causal_mask(T)
    x = weights["tok_emb"][tokens]
    for l in range(config.n_layers):
        h = _rms(x, weights[f"l{l}.attn_norm"])
        q, k, v = h @ weights[f"l{l}.wq"], h @ weights[f"l{l}.wk"], h @ weights[f"l{l}.wv"]
        outs = []
        for head in range(config.n_heads):
            g = config.kv_head_of(head)
            uk = bank.truncated((l, g, "K"), int(ranks.r_k[l, g]))
            uv = bank.truncated((l, g, "V"), int(ranks.r_v[l, g]))
            qt = apply_rope(q[:, head * d : (head + 1) * d], cos, sin) @ uk
            kt = apply_rope(k[:, g * d : (g + 1) * d], cos, sin) @ uk
            vt = v[:, g * d : (g + 1) * d] @ uv
            att = softmax(qt @ kt.T / math.sqrt(d), mask)
            outs.append(att @ vt)
        x = x + np.concatenate(outs, axis=-1) @ merged.w_ov[l]
        x = x + _mlp(weights, l, x)
    return _logits(weights, x)


@dataclass
class CompressedKVCache:
    """Per (layer, kv_head) compressed key/value rows for one decoding session."""

    config: ModelConfig
    ranks_k: np.ndarray
    ranks_v: np.ndarray
    keys: list[list[np.ndarray]] = field(default_factory=list)
    values: list[list[np.ndarray]] = field(default_factory=list)
    length: int = 0

    @classmethod
    def empty(cls, config: ModelConfig, ranks) -> "CompressedKVCache":
        check_ranks(config, ranks)
        rk = np.array(ranks.r_k, dtype=np.int64)
        rv = np.array(ranks.r_v, dtype=np.int64)
        keys = [[np.zeros((config.context, rk[l, g])) for g in range(config.n_kv_heads)] for l in range(config.n_layers)]
        values = [[np.zeros((config.context, rv[l, g])) for g in range(config.n_kv_heads)] for l in range(config.n_layers)]
        return cls(config, rk, rv, keys, values, 0)

    def key_rows(self, l: int, g: int) -> np.ndarray:
        return self.keys[l][g][: self.length]

    def value_rows(self, l: int, g: int) -> np.ndarray:
        return self.values[l][g][: self.length]

    def stored_scalars(self) -> int:
        return int(self.length * (self.ranks_k.sum() + self.ranks_v.sum()))

    def full_scalars(self) -> int:
        c = self.config
        return self.length * 2 * c.n_layers * c.n_kv_heads * c.head_dim

    def budget_fraction(self) -> float:
        c = self.config
        return float(self.ranks_k.sum() + self.ranks_v.sum()) / (2 * c.n_layers * c.n_kv_heads * c.head_dim)


def decode_step(
    state: CompressedKVCache,
    weights: TransformerWeights,
    config: ModelConfig,
    bank: BankLike,
    ranks,
    token: int,
    merged: MergedOutputWeights | None = None,
) -> tuple[np.ndarray, CompressedKVCache]:
    """Feed one token; appends one compressed row per slot and returns the next-token logits."""
    if state.length >= config.context:
        raise ContextOverflow(f"cache already holds {state.length} tokens")
    if not (np.array_equal(state.ranks_k, ranks.r_k) and np.array_equal(state.ranks_v, ranks.r_v)):
        raise RankOutOfRange("ranks differ from those the cache was created with")
    if merged is None:
        merged = merge_output_weights(weights, bank, ranks)
    d, pos = config.head_dim, state.length
    cos, sin = rope_tables(config, np.array([pos]))
    x = weights["tok_emb"][np.array([int(token)])]
    n = pos + 1
    for l in range(config.n_layers):
        h = _rms(x, weights[f"l{l}.attn_norm"])
        q, k, v = h @ weights[f"l{l}.wq"], h @ weights[f"l{l}.wk"], h @ weights[f"l{l}.wv"]
        for g in range(config.n_kv_heads):
            uk = bank.truncated((l, g, "K"), int(state.ranks_k[l, g]))
            uv = bank.truncated((l, g, "V"), int(state.ranks_v[l, g]))
            state.keys[l][g][pos] = (apply_rope(k[:, g * d : (g + 1) * d], cos, sin) @ uk)[0]
            state.values[l][g][pos] = (v[:, g * d : (g + 1) * d] @ uv)[0]
        outs = []
        for head in range(config.n_heads):
            g = config.kv_head_of(head)
            uk = bank.truncated((l, g, "K"), int(state.ranks_k[l, g]))
            qt = apply_rope(q[:, head * d : (head + 1) * d], cos, sin) @ uk
            att = softmax(qt @ state.keys[l][g][:n].T / math.sqrt(d))
            outs.append(att @ state.values[l][g][:n])
        x = x + np.concatenate(outs, axis=-1) @ merged.w_ov[l]
        x = x + _mlp(weights, l, x)
    state.length = n
    return _logits(weights, x)[0], state


# -- error analysis ---------------------------------------------------------------


@dataclass(frozen=True)
class ErrorDecomposition:
    direct_error: float
    term_attn: float
    term_trunc: float
    recombined: float
    mismatch: float


def attention_error_decomposition(
    weights: TransformerWeights,
    config: ModelConfig,
    bank: BankLike,
    layer: int,
    head: int,
    r_v: int,
    tokens,
    r_k: int | None = None,
) -> ErrorDecomposition:
    """Split one head's output error into attention-drift and value-truncation parts.

    With A / Ã the exact / projected attention maps and U_r, U_perp the kept
    and dropped value columns:

        A V W_h - Ã V U_r U_r^T W_h = (A - Ã) V U_r U_r^T W_h + A V U_perp U_perp^T W_h

    The reported terms are squared Frobenius norms of the two summands;
    ``recombined`` is the squared norm of their sum and ``mismatch`` the
    Frobenius distance between that sum and the direct difference.
    """
    d = config.head_dim
    r_k = d if r_k is None else r_k
    if not (1 <= r_k <= d and 1 <= r_v <= d):
        raise RankOutOfRange(f"ranks ({r_k}, {r_v}) outside [1, {d}]")
    tokens = _check_tokens(config, tokens)
    record: dict = {}
    forward_baseline(weights, config, tokens, record=record)
    h = record["h", layer]
    g = config.kv_head_of(head)
    T = tokens.shape[-1]
    cos, sin = rope_tables(config, np.arange(T))
    mask = causal_mask(T)
    q = apply_rope((h @ weights[f"l{layer}.wq"])[..., head * d : (head + 1) * d], cos, sin)
    k = record[layer, g, "K"]
    v = record[layer, g, "V"]
    wo_h = weights[f"l{layer}.wo"][head * d : (head + 1) * d]
    u_k = bank.truncated((layer, g, "K"), d)
    u_v = bank.truncated((layer, g, "V"), d)
    uk_r, uv_r, uv_perp = u_k[:, :r_k], u_v[:, :r_v], u_v[:, r_v:]

    a = softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(d), mask)
    a_t = softmax((q @ uk_r) @ np.swapaxes(k @ uk_r, -1, -2) / math.sqrt(d), mask)
    exact = a @ v @ wo_h
    approx = a_t @ (v @ uv_r) @ (uv_r.T @ wo_h)
    diff = exact - approx
    attn_part = (a - a_t) @ v @ uv_r @ uv_r.T @ wo_h
    trunc_part = a @ v @ uv_perp @ uv_perp.T @ wo_h
    both = attn_part + trunc_part

    def sq(m):
        return float(np.sum(m * m))

    return ErrorDecomposition(sq(diff), sq(attn_part), sq(trunc_part), sq(both), float(np.sqrt(sq(both - diff))))
