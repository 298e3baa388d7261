"""Transformer encoder pretrained by replaced-token detection, then frozen.

Its hidden state at the leading [CLS] position is the sentence embedding fed
into the semantic half of the reward.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers
from .numerics import (
    AdamState,
    CheckpointError,
    Tensor,
    adam_step,
    atomic_write_bytes,
    backward,
    bce_with_logits,
    load_params,
    no_grad,
    reshape,
    save_params,
)
from .tokenizer import CLS, N_SPECIALS, PAD, TokenSeq


class FrozenEvaluatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvaluatorConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 64
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.n_heads < 1 or self.d_model % self.n_heads:
            out.append(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            out.append(f"d_model={self.d_model} must be even")
        if self.vocab_size < N_SPECIALS + 1:
            out.append(f"vocab_size={self.vocab_size} < {N_SPECIALS + 1}")
        if self.n_layers < 1:
            out.append("need at least one layer")
        if self.max_len < 2:
            out.append(f"max_len={self.max_len} < 2")
        return out


@dataclass
class EvaluatorModel:
    config: EvaluatorConfig
    params: dict[str, Tensor]
    frozen: bool = False
    param_hash: str | None = None

    def parameter_hash(self) -> str:
        return params_hash(self.params)


def params_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def init_evaluator(config: EvaluatorConfig) -> EvaluatorModel:
    problems = config.violations()
    if problems:
        raise ValueError("invalid evaluator config: " + "; ".join(problems))
    rng = np.random.default_rng(config.seed)
    d = config.d_model
    params = {"embed": Tensor(rng.normal(0.0, d ** -0.5, size=(config.vocab_size, d)), requires_grad=True)}
    for i in range(config.n_layers):
        layers.init_encoder_layer(rng, params, f"enc.{i}", d, config.d_ff)
    layers.init_norm(params, "enc.norm", d)
    layers.init_linear(rng, params, "rtd", d, 1)
    return EvaluatorModel(config, params)


def freeze(evaluator: EvaluatorModel) -> EvaluatorModel:
    """Make every parameter read-only and record the parameter hash.

    Values are first rounded to float32, the checkpoint storage precision,
    so a frozen evaluator and its reloaded checkpoint are bit-identical.
    """
    if evaluator.frozen:
        return evaluator
    for p in evaluator.params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)
        p.requires_grad = False
        p.grad = None
        p.data.flags.writeable = False
    evaluator.frozen = True
    evaluator.param_hash = evaluator.parameter_hash()
    return evaluator


# ---------------------------------------------------------------------------
# encoding


def _with_cls(ids: Sequence[int]) -> list[int]:
    ids = [int(i) for i in (ids.ids if isinstance(ids, TokenSeq) else ids)]
    return ids if ids and ids[0] == CLS else [CLS, *ids]


def _hidden(evaluator: EvaluatorModel, seqs: list[list[int]]) -> tuple[Tensor, np.ndarray]:
    cfg, p = evaluator.config, evaluator.params
    ids, pad = layers.pad_batch(seqs, PAD)
    b, t = ids.shape
    x = layers.embed_tokens(p, "embed", ids, cfg.d_model)
    mask = np.broadcast_to(~pad[:, None, :], (b, t, t))
    for i in range(cfg.n_layers):
        x = layers.encoder_layer(p, f"enc.{i}", x, mask, cfg.n_heads)
    return layers.norm(p, "enc.norm", x), pad


def encode_batch(evaluator: EvaluatorModel, seqs: Sequence[Sequence[int]]) -> list[np.ndarray]:
    """Final hidden states ``(len + 1, d)`` per sequence, [CLS] row first.

    Sequences longer than ``max_len`` (after the [CLS]) are cut on the right.
    """
    prepared = []
    for s in seqs:
        if len(s) == 0:
            raise ValueError("cannot embed an empty sequence")
        prepared.append(_with_cls(s)[: evaluator.config.max_len])
    with no_grad():
        h, _ = _hidden(evaluator, prepared)
    return [h.data[i, : len(s)].copy() for i, s in enumerate(prepared)]


def embed_cls(evaluator: EvaluatorModel, ids: Sequence[int]) -> np.ndarray:
    return encode_batch(evaluator, [ids])[0][0]


def embed_cls_batch(evaluator: EvaluatorModel, seqs: Sequence[Sequence[int]]) -> np.ndarray:
    return np.stack([h[0] for h in encode_batch(evaluator, seqs)])


def token_embeddings(evaluator: EvaluatorModel, ids: Sequence[int]) -> np.ndarray:
    """Final hidden state at every position, including a prepended [CLS]."""
    return encode_batch(evaluator, [ids])[0]


# ---------------------------------------------------------------------------
# replaced-token detection


def unigram_distribution(corpus: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    counts = np.zeros(vocab_size)
    for seq in corpus:
        for i in seq:
            if i >= N_SPECIALS:
                counts[i] += 1
    if counts.sum() == 0:
        counts[N_SPECIALS:] = 1.0
    return counts / counts.sum()


def corrupt_for_rtd(ids, replacement_rate: float, unigram_dist, seed) -> tuple[list[int], list[bool]]:
    """Swap each non-special position for a unigram sample with probability
    ``replacement_rate``.  A sample equal to the original is redrawn once; if
    it matches again the position counts as not replaced.

    ``seed`` is an int or a ``numpy.random.Generator`` (consumed in place).
    """
    if not 0.0 <= replacement_rate <= 0.5:
        raise ValueError(f"replacement rate must lie in [0, 0.5], got {replacement_rate}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dist = np.asarray(unigram_dist, dtype=np.float64)
    cdf = np.cumsum(dist)
    cdf /= cdf[-1]
    out = [int(i) for i in ids]
    labels = [False] * len(out)
    hits = rng.random(len(out)) < replacement_rate
    for pos in np.flatnonzero(hits):
        orig = out[pos]
        if orig < N_SPECIALS:
            continue
        new = int(np.searchsorted(cdf, rng.random(), side="right"))
        if new == orig:
            new = int(np.searchsorted(cdf, rng.random(), side="right"))
        if new != orig:
            out[pos] = new
            labels[pos] = True
    return out, labels


def _rtd_batch(evaluator: EvaluatorModel, seqs: list[list[int]], labels: list[list[bool]]):
    h, pad = _hidden(evaluator, seqs)
    b, t, _ = h.shape
    logits = reshape(layers.linear(evaluator.params, "rtd", h), (b, t))
    y = np.zeros((b, t))
    eligible = np.zeros((b, t), dtype=bool)
    for i, (s, lab) in enumerate(zip(seqs, labels)):
        y[i, : len(lab)] = lab
        eligible[i, : len(s)] = np.asarray(s) >= N_SPECIALS
    return logits, y, eligible


def _rtd_metrics(evaluator, seqs, labels, batch_size: int) -> dict:
    loss_sum, count, correct, rep_total, rep_correct = 0.0, 0, 0, 0, 0
    with no_grad():
        for start in range(0, len(seqs), batch_size):
            logits, y, eligible = _rtd_batch(evaluator, seqs[start:start + batch_size], labels[start:start + batch_size])
            n = int(eligible.sum())
            loss_sum += bce_with_logits(logits, y, eligible).item() * n
            count += n
            pred = logits.data > 0
            correct += int(((pred == (y > 0.5)) & eligible).sum())
            rep = eligible & (y > 0.5)
            rep_total += int(rep.sum())
            rep_correct += int((pred & rep).sum())
    return {
        "loss": loss_sum / max(count, 1),
        "accuracy": correct / max(count, 1),
        "replaced_accuracy": rep_correct / rep_total if rep_total else float("nan"),
    }


def pretrain_rtd(
    evaluator: EvaluatorModel,
    corpus: Sequence[Sequence[int]],
    rate: float = 0.15,
    epochs: int = 20,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
    holdout_fraction: float = 0.1,
) -> tuple[EvaluatorModel, list[dict]]:
    """Train the per-token replaced/original classifier.

    A seeded ``holdout_fraction`` of the corpus is corrupted once and kept
    aside; training sequences are re-corrupted every epoch.  History records
    per-epoch training loss and held-out loss/accuracy, all in nats per
    non-special token.
    """
    if evaluator.frozen:
        raise FrozenEvaluatorError("cannot pretrain a frozen evaluator")
    if not corpus:
        raise ValueError("empty pretraining corpus")
    if epochs <= 0:
        return evaluator, []
    rng = np.random.default_rng(seed)
    max_len = evaluator.config.max_len
    seqs = [_with_cls(s)[:max_len] for s in corpus]
    order = rng.permutation(len(seqs))
    n_hold = min(max(1, int(round(holdout_fraction * len(seqs)))), len(seqs) - 1) if len(seqs) > 1 else 0
    held = [seqs[i] for i in order[:n_hold]]
    train = [seqs[i] for i in order[n_hold:]]
    dist = unigram_distribution(train, evaluator.config.vocab_size)
    held_pairs = [corrupt_for_rtd(s, rate, dist, rng) for s in held]
    held_seqs = [p[0] for p in held_pairs]
    held_labels = [p[1] for p in held_pairs]

    params = evaluator.params
    state = AdamState(lr=lr)
    history = []
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(train))
        losses, weights = [], []
        for start in range(0, len(train), batch_size):
            batch = [corrupt_for_rtd(train[i], rate, dist, rng) for i in perm[start:start + batch_size]]
            logits, y, eligible = _rtd_batch(evaluator, [b[0] for b in batch], [b[1] for b in batch])
            loss = bce_with_logits(logits, y, eligible)
            for p in params.values():
                p.grad = None
            backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, state)
            losses.append(loss.item())
            weights.append(int(eligible.sum()))
        record = {"epoch": epoch, "train_loss": float(np.average(losses, weights=weights))}
        if held:
            m = _rtd_metrics(evaluator, held_seqs, held_labels, batch_size)
            record.update(heldout_loss=m["loss"], heldout_accuracy=m["accuracy"],
                          heldout_replaced_accuracy=m["replaced_accuracy"])
        history.append(record)
    return evaluator, history


def rtd_entropy_baseline(rate: float) -> float:
    """Loss of a predictor that always outputs the replacement rate."""
    return float(-(rate * np.log(rate) + (1 - rate) * np.log(1 - rate)))


# ---------------------------------------------------------------------------
# checkpoints


def save_evaluator(evaluator: EvaluatorModel, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    save_params(path, evaluator.params)
    sidecar = {
        "kind": "evaluator",
        "config": asdict(evaluator.config),
        "frozen": evaluator.frozen,
        "param_hash": evaluator.param_hash,
    }
    if extra:
        sidecar.update(extra)
    atomic_write_bytes(path.with_suffix(".json"), (json.dumps(sidecar, indent=2, sort_keys=True) + "\n").encode())


def load_evaluator(path: str | Path) -> EvaluatorModel:
    """Load a checkpoint; frozen checkpoints come back frozen, and their
    stored hash must match the loaded parameters."""
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    names = {f.name for f in fields(EvaluatorConfig)}
    model = init_evaluator(EvaluatorConfig(**{k: v for k, v in sidecar["config"].items() if k in names}))
    arrays = load_params(path)
    if set(arrays) != set(model.params):
        raise CheckpointError(f"checkpoint {path} parameter names do not match the config")
    for k, p in model.params.items():
        if arrays[k].shape != p.shape:
            raise CheckpointError(f"checkpoint {path}: {k} has shape {arrays[k].shape}, expected {p.shape}")
        p.data[...] = arrays[k]
    if sidecar.get("frozen"):
        freeze(model)
        stored = sidecar.get("param_hash")
        if stored and stored != model.param_hash:
            raise CheckpointError(f"checkpoint {path}: parameter hash mismatch")
    return model
