"""Encoder-decoder transformer that maps a (context, answer) source to a question."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers
from .layers import positional_encoding
from .numerics import (
    Tensor,
    add,
    CheckpointError,
    atomic_write_bytes,
    index,
    layer_norm,
    load_params,
    matmul,
    no_grad,
    save_params,
    sequence_nll,
    transpose,
)
from .tokenizer import BOS, EOS, N_SPECIALS, PAD, TokenSeq

__all__ = [
    "GeneratorConfig", "GeneratorModel", "init_generator", "positional_encoding",
    "forward_batch", "forward_teacher_forced", "greedy_decode", "greedy_decode_batch",
    "save_generator", "load_generator",
]


@dataclass(frozen=True)
class GeneratorConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_src_len: int = 64
    max_tgt_len: int = 16
    dropout: float = 0.0
    seed: int = 0
    tie_embeddings: bool = True

    def violations(self) -> list[str]:
        out = []
        if self.n_heads < 1 or self.d_model % self.n_heads:
            out.append(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            out.append(f"d_model={self.d_model} must be even (sinusoidal positions)")
        if not 0.0 <= self.dropout < 1.0:
            out.append(f"dropout={self.dropout} outside [0, 1)")
        if self.vocab_size < N_SPECIALS + 1:
            out.append(f"vocab_size={self.vocab_size} < {N_SPECIALS + 1}")
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            out.append("need at least one encoder and one decoder layer")
        if self.max_tgt_len < 3:
            out.append(f"max_tgt_len={self.max_tgt_len} < 3")
        if self.max_src_len < 4:
            out.append(f"max_src_len={self.max_src_len} < 4")
        return out


@dataclass
class GeneratorModel:
    config: GeneratorConfig
    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: p.grad for k, p in self.params.items()}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data[...] = arrays[k]


def init_generator(config: GeneratorConfig) -> GeneratorModel:
    problems = config.violations()
    if problems:
        raise ValueError("invalid generator config: " + "; ".join(problems))
    rng = np.random.default_rng(config.seed)
    d, v = config.d_model, config.vocab_size
    params: dict[str, Tensor] = {
        "embed": Tensor(rng.normal(0.0, d ** -0.5, size=(v, d)), requires_grad=True),
    }
    for i in range(config.n_enc_layers):
        layers.init_encoder_layer(rng, params, f"enc.{i}", d, config.d_ff)
    layers.init_norm(params, "enc.norm", d)
    for i in range(config.n_dec_layers):
        layers.init_decoder_layer(rng, params, f"dec.{i}", d, config.d_ff)
    layers.init_norm(params, "dec.norm", d)
    if not config.tie_embeddings:
        params["out.w"] = Tensor(rng.normal(0.0, d ** -0.5, size=(d, v)), requires_grad=True)
    params["out.b"] = Tensor(np.zeros(v), requires_grad=True)
    return GeneratorModel(config, params)


# ---------------------------------------------------------------------------
# forward


def _encode(model: GeneratorModel, src_ids: np.ndarray, src_pad: np.ndarray, rng=None) -> Tensor:
    cfg, p = model.config, model.params
    x = layers.embed_tokens(p, "embed", src_ids, cfg.d_model)
    b, s = src_ids.shape
    mask = np.broadcast_to(~src_pad[:, None, :], (b, s, s))
    for i in range(cfg.n_enc_layers):
        x = layers.encoder_layer(p, f"enc.{i}", x, mask, cfg.n_heads, cfg.dropout, rng)
    return layers.norm(p, "enc.norm", x)


def _decode(model, memory, src_pad, tgt_in: np.ndarray, rng=None) -> Tensor:
    cfg, p = model.config, model.params
    b, t = tgt_in.shape
    s = src_pad.shape[1]
    y = layers.embed_tokens(p, "embed", tgt_in, cfg.d_model)
    causal = np.broadcast_to(np.tril(np.ones((t, t), dtype=bool)), (b, t, t))
    cross = np.broadcast_to(~src_pad[:, None, :], (b, t, s))
    for i in range(cfg.n_dec_layers):
        y = layers.decoder_layer(p, f"dec.{i}", y, memory, causal, cross, cfg.n_heads, cfg.dropout, rng)
    return layers.norm(p, "dec.norm", y)


def _project(model: GeneratorModel, h: Tensor) -> Tensor:
    p = model.params
    w = transpose(p["embed"]) if model.config.tie_embeddings else p["out.w"]
    return add(matmul(h, w), p["out.b"])


def _check_lengths(model: GeneratorModel, srcs, tgts=()) -> None:
    cfg = model.config
    for s in srcs:
        if len(s) > cfg.max_src_len:
            raise ValueError(f"source of length {len(s)} exceeds max_src_len={cfg.max_src_len}")
    for t in tgts:
        if len(t) > cfg.max_tgt_len:
            raise ValueError(f"target of length {len(t)} exceeds max_tgt_len={cfg.max_tgt_len}")


def _ids(seq) -> Sequence[int]:
    return seq.ids if isinstance(seq, TokenSeq) else seq


def forward_batch(
    model: GeneratorModel,
    srcs: Sequence[TokenSeq],
    tgts: Sequence[TokenSeq],
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    """Teacher-forced pass over a batch.

    Returns ``(logits[B, T, V], nll[B], targets[B, T], target_pad[B, T])``
    where position ``t`` predicts target token ``t + 1`` and ``nll`` is the
    per-example negative log-likelihood with padding excluded.
    """
    src_list = [_ids(s) for s in srcs]
    tgt_list = [_ids(t) for t in tgts]
    _check_lengths(model, src_list, tgt_list)
    src_ids, src_pad = layers.pad_batch(src_list, PAD)
    tgt_ids, tgt_pad = layers.pad_batch(tgt_list, PAD)
    tgt_in, targets, target_pad = tgt_ids[:, :-1], tgt_ids[:, 1:], tgt_pad[:, 1:]
    memory = _encode(model, src_ids, src_pad, rng)
    logits = _project(model, _decode(model, memory, src_pad, tgt_in, rng))
    return logits, sequence_nll(logits, targets, target_pad), targets, target_pad


def forward_teacher_forced(model: GeneratorModel, src: TokenSeq, tgt: TokenSeq):
    """Single-example pass: ``(logits[T, V], step_log_probs, sum_log_prob)``."""
    logits, nll, targets, pad = forward_batch(model, [src], [tgt])
    lp = logits.data[0]
    lse = lp.max(axis=-1) + np.log(np.exp(lp - lp.max(axis=-1, keepdims=True)).sum(axis=-1))
    step = lp[np.arange(lp.shape[0]), targets[0]] - lse
    step = np.where(pad[0], 0.0, step)
    return index(logits, 0), [float(x) for x in step], -float(nll.data[0])


# ---------------------------------------------------------------------------
# decoding

_BANNED = np.array([i for i in range(N_SPECIALS) if i != EOS])


def _ln(x, p, prefix, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    c = x - mu
    return c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps) * p[f"{prefix}.g"].data + p[f"{prefix}.b"].data


def _lin(x, p, prefix):
    y = x @ p[f"{prefix}.w"].data
    b = p.get(f"{prefix}.b")
    return y if b is None else y + b.data


def _heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _attend(q, k, v, keep=None):
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    if keep is not None:
        scores = np.where(keep, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    ctx = w @ v
    b, h, t, dh = ctx.shape
    return ctx.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


class _IncrementalDecoder:
    """Decoder that caches self-attention keys/values so each step only
    processes the newest position.  Inference only."""

    def __init__(self, model: GeneratorModel, memory: np.ndarray, src_pad: np.ndarray):
        self.model = model
        cfg, p = model.config, model.params
        self.keep = ~src_pad[:, None, None, :]
        self.cross = [
            (_heads(_lin(memory, p, f"dec.{i}.cross.k"), cfg.n_heads),
             _heads(_lin(memory, p, f"dec.{i}.cross.v"), cfg.n_heads))
            for i in range(cfg.n_dec_layers)
        ]
        self.cache: list[list[np.ndarray]] = [[None, None] for _ in range(cfg.n_dec_layers)]
        self.pos = 0

    def step(self, tokens: np.ndarray) -> np.ndarray:
        cfg, p = self.model.config, self.model.params
        h = cfg.n_heads
        y = p["embed"].data[tokens][:, None, :] * np.sqrt(cfg.d_model)
        y = y + positional_encoding(self.pos + 1, cfg.d_model)[self.pos]
        for i in range(cfg.n_dec_layers):
            pre = f"dec.{i}"
            n1 = _ln(y, p, f"{pre}.norm1")
            k = _heads(_lin(n1, p, f"{pre}.self.k"), h)
            v = _heads(_lin(n1, p, f"{pre}.self.v"), h)
            slot = self.cache[i]
            slot[0] = k if slot[0] is None else np.concatenate([slot[0], k], axis=2)
            slot[1] = v if slot[1] is None else np.concatenate([slot[1], v], axis=2)
            q = _heads(_lin(n1, p, f"{pre}.self.q"), h)
            y = y + _lin(_attend(q, slot[0], slot[1]), p, f"{pre}.self.o")
            n2 = _ln(y, p, f"{pre}.norm2")
            q = _heads(_lin(n2, p, f"{pre}.cross.q"), h)
            ck, cv = self.cross[i]
            y = y + _lin(_attend(q, ck, cv, self.keep), p, f"{pre}.cross.o")
            n3 = _ln(y, p, f"{pre}.norm3")
            y = y + _lin(np.maximum(_lin(n3, p, f"{pre}.ff1"), 0.0), p, f"{pre}.ff2")
        self.pos += 1
        hid = _ln(y[:, 0, :], p, "dec.norm")
        w = p["embed"].data.T if cfg.tie_embeddings else p["out.w"].data
        return hid @ w + p["out.b"].data


def next_token_logits(model: GeneratorModel, srcs: Sequence, prefixes: np.ndarray) -> np.ndarray:
    """Logits for every prefix position via the cached decoder, shape
    ``(B, T, V)``; matches the teacher-forced pass on the same prefix."""
    src_list = [_ids(s) for s in srcs]
    with no_grad():
        src_ids, src_pad = layers.pad_batch(src_list, PAD)
        memory = _encode(model, src_ids, src_pad).data
    dec = _IncrementalDecoder(model, memory, src_pad)
    return np.stack([dec.step(prefixes[:, t]) for t in range(prefixes.shape[1])], axis=1)


def greedy_decode_batch(model: GeneratorModel, srcs: Sequence, max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_len`` generated tokens.

    Special tokens other than EOS are never emitted; ties go to the lowest id.
    Outputs exclude BOS/EOS.
    """
    cfg = model.config
    if max_len is None:
        max_len = cfg.max_tgt_len - 2
    src_list = [_ids(s) for s in srcs]
    if not src_list:
        return []
    _check_lengths(model, src_list)
    b = len(src_list)
    out: list[list[int]] = [[] for _ in range(b)]
    with no_grad():
        src_ids, src_pad = layers.pad_batch(src_list, PAD)
        memory = _encode(model, src_ids, src_pad).data
    dec = _IncrementalDecoder(model, memory, src_pad)
    tokens = np.full(b, BOS, dtype=np.int64)
    alive = np.ones(b, dtype=bool)
    for _ in range(max_len):
        logits = dec.step(tokens)
        logits[:, _BANNED] = -np.inf
        tokens = np.argmax(logits, axis=-1)
        for r in np.flatnonzero(alive):
            if tokens[r] == EOS:
                alive[r] = False
            else:
                out[r].append(int(tokens[r]))
        if not alive.any():
            break
        tokens = np.where(alive, tokens, PAD)
    return out


def greedy_decode(model: GeneratorModel, src, max_len: int | None = None) -> list[int]:
    return greedy_decode_batch(model, [src], max_len)[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_generator(model: GeneratorModel, path: str | Path, extra: dict | None = None) -> None:
    """``path`` gets the parameters, ``path.with_suffix('.json')`` the config."""
    path = Path(path)
    save_params(path, model.params)
    sidecar = {"kind": "generator", "config": asdict(model.config)}
    if extra:
        sidecar.update(extra)
    atomic_write_bytes(path.with_suffix(".json"), (json.dumps(sidecar, indent=2, sort_keys=True) + "\n").encode())


def read_sidecar(path: str | Path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text(encoding="utf-8"))


def load_generator(path: str | Path) -> tuple[GeneratorModel, dict]:
    sidecar = read_sidecar(path)
    names = {f.name for f in fields(GeneratorConfig)}
    config = GeneratorConfig(**{k: v for k, v in sidecar["config"].items() if k in names})
    model = init_generator(config)
    arrays = load_params(path)
    if set(arrays) != set(model.params):
        raise CheckpointError(f"checkpoint {path} parameter names do not match the config")
    for k, p in model.params.items():
        if arrays[k].shape != p.shape:
            raise CheckpointError(f"checkpoint {path}: {k} has shape {arrays[k].shape}, expected {p.shape}")
        p.data[...] = arrays[k]
    return model, sidecar
