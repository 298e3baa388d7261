"""Pre-norm transformer blocks shared by the generator and the evaluator.

Parameters live in flat ``dict[str, Tensor]`` maps; each block reads the
entries under its dotted prefix.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .numerics import (
    Tensor,
    add,
    dropout,
    embedding,
    layer_norm,
    matmul,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)


@lru_cache(maxsize=32)
def _pe_table(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.flags.writeable = False
    return pe


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: even columns sin(pos / 10000^(2i/d)), odd columns cos."""
    if d_model % 2:
        raise ValueError(f"d_model must be even for sinusoidal encoding, got {d_model}")
    return _pe_table(length, d_model)


# ---------------------------------------------------------------------------
# initialisation


def init_linear(rng: np.random.Generator, params: dict, prefix: str, d_in: int, d_out: int, bias: bool = True) -> None:
    limit = math.sqrt(6.0 / (d_in + d_out))
    params[f"{prefix}.w"] = Tensor(rng.uniform(-limit, limit, size=(d_in, d_out)), requires_grad=True)
    if bias:
        params[f"{prefix}.b"] = Tensor(np.zeros(d_out), requires_grad=True)


def init_norm(params: dict, prefix: str, d: int) -> None:
    params[f"{prefix}.g"] = Tensor(np.ones(d), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(d), requires_grad=True)


def init_attention(rng, params, prefix, d_model):
    # A key bias only shifts each score row by a constant, which softmax
    # ignores; it would be a parameter with identically zero gradient.
    for part in ("q", "k", "v", "o"):
        init_linear(rng, params, f"{prefix}.{part}", d_model, d_model, bias=part != "k")


def init_encoder_layer(rng, params, prefix, d_model, d_ff):
    init_norm(params, f"{prefix}.norm1", d_model)
    init_attention(rng, params, f"{prefix}.attn", d_model)
    init_norm(params, f"{prefix}.norm2", d_model)
    init_linear(rng, params, f"{prefix}.ff1", d_model, d_ff)
    init_linear(rng, params, f"{prefix}.ff2", d_ff, d_model)


def init_decoder_layer(rng, params, prefix, d_model, d_ff):
    init_norm(params, f"{prefix}.norm1", d_model)
    init_attention(rng, params, f"{prefix}.self", d_model)
    init_norm(params, f"{prefix}.norm2", d_model)
    init_attention(rng, params, f"{prefix}.cross", d_model)
    init_norm(params, f"{prefix}.norm3", d_model)
    init_linear(rng, params, f"{prefix}.ff1", d_model, d_ff)
    init_linear(rng, params, f"{prefix}.ff2", d_ff, d_model)


# ---------------------------------------------------------------------------
# forward blocks


def linear(params, prefix: str, x: Tensor) -> Tensor:
    y = matmul(x, params[f"{prefix}.w"])
    b = params.get(f"{prefix}.b")
    return y if b is None else add(y, b)


def norm(params, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def attention(params, prefix: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray, n_heads: int) -> Tensor:
    """Multi-head attention.  ``mask`` is boolean ``(B, Tq, Tk)``, True = may attend."""
    b, tq, d = q_in.shape
    tk = kv_in.shape[1]
    dh = d // n_heads
    q = transpose(reshape(linear(params, f"{prefix}.q", q_in), (b, tq, n_heads, dh)), (0, 2, 1, 3))
    k = transpose(reshape(linear(params, f"{prefix}.k", kv_in), (b, tk, n_heads, dh)), (0, 2, 3, 1))
    v = transpose(reshape(linear(params, f"{prefix}.v", kv_in), (b, tk, n_heads, dh)), (0, 2, 1, 3))
    scores = scale(matmul(q, k), 1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1, mask=mask[:, None, :, :])
    ctx = transpose(matmul(weights, v), (0, 2, 1, 3))
    return linear(params, f"{prefix}.o", reshape(ctx, (b, tq, d)))


def feed_forward(params, prefix: str, x: Tensor) -> Tensor:
    return linear(params, f"{prefix}.ff2", relu(linear(params, f"{prefix}.ff1", x)))


def encoder_layer(params, prefix, x, mask, n_heads, p_drop=0.0, rng=None):
    n1 = norm(params, f"{prefix}.norm1", x)
    h = add(x, dropout(attention(params, f"{prefix}.attn", n1, n1, mask, n_heads), p_drop, rng))
    return add(h, dropout(feed_forward(params, prefix, norm(params, f"{prefix}.norm2", h)), p_drop, rng))


def decoder_layer(params, prefix, y, memory, self_mask, cross_mask, n_heads, p_drop=0.0, rng=None):
    n1 = norm(params, f"{prefix}.norm1", y)
    h = add(y, dropout(attention(params, f"{prefix}.self", n1, n1, self_mask, n_heads), p_drop, rng))
    n2 = norm(params, f"{prefix}.norm2", h)
    h = add(h, dropout(attention(params, f"{prefix}.cross", n2, memory, cross_mask, n_heads), p_drop, rng))
    return add(h, dropout(feed_forward(params, prefix, norm(params, f"{prefix}.norm3", h)), p_drop, rng))


def pad_batch(seqs, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences; returns (ids, is_pad)."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    lengths = np.array([len(s) for s in seqs])
    return ids, np.arange(width)[None, :] >= lengths[:, None]


def embed_tokens(params, table: str, ids: np.ndarray, d_model: int) -> Tensor:
    b, t = ids.shape
    x = scale(embedding(params[table], ids), math.sqrt(d_model))
    pe = np.broadcast_to(positional_encoding(t, d_model), (b, t, d_model))
    return add(x, Tensor(np.ascontiguousarray(pe)))
