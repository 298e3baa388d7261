"""Reward-weighted likelihood training of the generator against a frozen evaluator.

Per example the objective is

    L = gamma * L_base + (1 - gamma) * (1 - r) * L_base

where ``L_base`` is the teacher-forced NLL of the reference question and
``r`` in [0, 1] scores the greedy decode.  ``r`` is a constant for
differentiation, so the gradient is the MLE gradient scaled by
``gamma + (1 - gamma) * (1 - r)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import QaTriple
from .evaluator import FrozenEvaluatorError, embed_cls_batch, encode_batch
from .generator import GeneratorModel, forward_batch, greedy_decode_batch, save_generator
from .metrics import (
    QuestionClass,
    RewardBreakdown,
    bleu_corpus,
    bleu_reward,
    bleu_sentence,
    classify_question_type,
    cosine,
    match_score_from_embeddings,
    reward,
)
from .numerics import AdamState, adam_step, atomic_write_bytes, backward, no_grad, weighted_sum
from .tokenizer import CLS, TokenSeq, Vocab, assemble_input, assemble_target, encode

log = logging.getLogger(__name__)

REWARD_MODES = ("none", "bleu_only", "bleu_plus_semantic")
CLI_REWARD_MODES = {"none": "none", "bleu": "bleu_only", "bleu+semantic": "bleu_plus_semantic"}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.197
    gamma: float = 0.09
    lr: float = 1.17e-5
    batch_size: int = 32
    accum_steps: int = 1
    epochs: int = 10
    seed: int = 0
    max_src_len: int = 64
    max_tgt_len: int = 16
    reward_mode: str = "bleu_plus_semantic"
    max_steps: int = 0  # 0 = no cap
    lr_override: bool = False  # allow lr outside [1e-6, 1e-4]
    warmup_steps: int = 0  # linear lr warmup; 0 keeps lr constant

    def __post_init__(self):
        problems = []
        if not 0.05 < self.alpha <= 1.0:
            problems.append(f"alpha={self.alpha} outside (0.05, 1]")
        if not 0.05 < self.gamma <= 1.0:
            problems.append(f"gamma={self.gamma} outside (0.05, 1]")
        if not self.lr_override and not 1e-6 <= self.lr <= 1e-4:
            problems.append(f"lr={self.lr} outside [1e-6, 1e-4] (set lr_override to allow)")
        if self.lr <= 0:
            problems.append(f"lr={self.lr} must be positive")
        if self.batch_size < 1 or self.accum_steps < 1 or self.batch_size % self.accum_steps:
            problems.append(f"batch_size={self.batch_size} must be a positive multiple of accum_steps={self.accum_steps}")
        if self.epochs < 0 or self.max_steps < 0 or self.warmup_steps < 0:
            problems.append("epochs, max_steps and warmup_steps must be >= 0")
        if self.reward_mode not in REWARD_MODES:
            problems.append(f"reward_mode={self.reward_mode!r} not in {REWARD_MODES}")
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))

    @property
    def micro_batch_size(self) -> int:
        return self.batch_size // self.accum_steps


@dataclass(frozen=True)
class Example:
    src: TokenSeq
    tgt: TokenSeq
    id: str = ""
    question_class: QuestionClass = QuestionClass.Other

    @property
    def reference(self) -> list[int]:
        return list(self.tgt.ids[1:-1])


def make_examples(triples: Sequence[QaTriple], vocab: Vocab, max_src_len: int, max_tgt_len: int) -> list[Example]:
    out = []
    skipped = 0
    for t in triples:
        answer = encode(t.answer, vocab)
        question = encode(t.question, vocab)
        if not answer or not question or len(answer) + 3 > max_src_len:
            skipped += 1
            continue
        out.append(Example(
            assemble_input(encode(t.context, vocab), answer, max_src_len),
            assemble_target(question, max_tgt_len),
            t.id,
            classify_question_type(t.question),
        ))
    if skipped:
        log.warning("skipped %d triples whose answer or question does not fit", skipped)
    return out


# ---------------------------------------------------------------------------
# losses


def loss_base(sum_log_prob: float) -> float:
    if sum_log_prob > 0:
        raise ValueError(f"sum of log-probabilities must be <= 0, got {sum_log_prob}")
    return -float(sum_log_prob)


def loss_rl(sum_log_prob: float, r: float) -> float:
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"reward {r} outside [0, 1]")
    return (1.0 - r) * loss_base(sum_log_prob)


def loss_total(l_base: float, l_rl: float, gamma: float) -> float:
    if not 0.05 < gamma <= 1.0:
        raise ValueError(f"gamma={gamma} outside (0.05, 1]")
    return gamma * l_base + (1.0 - gamma) * l_rl


@dataclass
class LossBreakdown:
    l_base: float
    l_rl: float
    l_total: float
    rewards: list[RewardBreakdown] = field(default_factory=list)
    per_example_base: list[float] = field(default_factory=list)
    per_example_total: list[float] = field(default_factory=list)

    @property
    def mean_reward(self) -> float | None:
        return float(np.mean([r.r for r in self.rewards])) if self.rewards else None


# ---------------------------------------------------------------------------
# rewards


def score_hypotheses(
    hyps: Sequence[Sequence[int]],
    refs: Sequence[Sequence[int]],
    evaluator,
    mode: str,
    alpha: float,
) -> list[RewardBreakdown]:
    """Reward each greedy hypothesis against its reference question."""
    r1 = [bleu_sentence(h, r) for h, r in zip(hyps, refs)]
    if mode == "bleu_only":
        return [bleu_reward(x) for x in r1]
    if evaluator is None or not evaluator.frozen:
        raise FrozenEvaluatorError("the semantic reward needs a frozen evaluator")
    vecs = embed_cls_batch(evaluator, [[CLS, *h] for h in hyps] + [[CLS, *r] for r in refs])
    n = len(hyps)
    return [reward(r1[i], cosine(vecs[i], vecs[n + i]), alpha) for i in range(n)]


def _loss_weights(rs: Sequence[float], gamma: float) -> np.ndarray:
    return np.array([gamma + (1.0 - gamma) * (1.0 - r) for r in rs])


def train_step(
    model: GeneratorModel,
    evaluator,
    micro_batch: Sequence[Example],
    config: TrainConfig,
    *,
    reward_override: float | None = None,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Forward, reward and backward for one micro-batch.

    Gradients of the *summed* per-example objective are added to each
    parameter's ``.grad``; the caller divides by the effective batch size.
    ``reward_override`` pins every reward to a constant (skips decoding).
    """
    mode = config.reward_mode
    if mode == "bleu_plus_semantic" and reward_override is None and (evaluator is None or not evaluator.frozen):
        raise FrozenEvaluatorError("train_step with the semantic reward requires a frozen evaluator")
    srcs = [ex.src for ex in micro_batch]
    _, nll, _, _ = forward_batch(model, srcs, [ex.tgt for ex in micro_batch],
                                 rng if model.config.dropout > 0 else None)
    if not np.all(np.isfinite(nll.data)):
        raise TrainingError("non-finite likelihood")

    if reward_override is not None:
        c = float(reward_override)
        rewards = [RewardBreakdown(math.nan, math.nan, math.nan, c, config.alpha) for _ in micro_batch]
    elif mode == "none":
        rewards = []
    else:
        with no_grad():
            hyps = greedy_decode_batch(model, srcs, config.max_tgt_len - 2)
        rewards = score_hypotheses(hyps, [ex.reference for ex in micro_batch], evaluator, mode, config.alpha)

    rs = [rb.r for rb in rewards] if rewards else [0.0] * len(micro_batch)
    gamma = config.gamma if rewards else 1.0
    backward(weighted_sum(nll, _loss_weights(rs, gamma)))

    bases = [loss_base(-x) for x in nll.data]
    rls = [loss_rl(-x, r) for x, r in zip(nll.data, rs)]
    totals = [loss_total(b, l, gamma) for b, l in zip(bases, rls)]
    return LossBreakdown(float(np.mean(bases)), float(np.mean(rls)), float(np.mean(totals)),
                         rewards, bases, totals)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: GeneratorModel
    history: list[dict]
    best_params: dict[str, np.ndarray]
    best_epoch: int
    steps: int


def _batches(items: Sequence, size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def dev_pass(model: GeneratorModel, evaluator, dev_set: Sequence[Example], config: TrainConfig,
             chunk: int = 64) -> dict:
    """Teacher-forced dev loss under the configured objective plus greedy
    corpus BLEU and mean reward."""
    totals, bases, rewards, hyps = [], [], [], []
    with no_grad():
        for batch in _batches(dev_set, chunk):
            _, nll, _, _ = forward_batch(model, [ex.src for ex in batch], [ex.tgt for ex in batch])
            h = greedy_decode_batch(model, [ex.src for ex in batch], config.max_tgt_len - 2)
            hyps.extend(h)
            b = [loss_base(-x) for x in nll.data]
            if config.reward_mode == "none":
                rs = [0.0] * len(batch)
                gamma = 1.0
            else:
                rb = score_hypotheses(h, [ex.reference for ex in batch], evaluator, config.reward_mode, config.alpha)
                rewards.extend(x.r for x in rb)
                rs = [x.r for x in rb]
                gamma = config.gamma
            bases.extend(b)
            totals.extend(loss_total(bb, loss_rl(-bb, r), gamma)
                          for bb, r in zip(b, rs))
    return {
        "dev_loss": float(np.mean(totals)),
        "dev_l_base": float(np.mean(bases)),
        "dev_corpus_bleu": bleu_corpus(hyps, [ex.reference for ex in dev_set]),
        "dev_mean_reward": float(np.mean(rewards)) if rewards else None,
    }


def _write_checkpoint(model: GeneratorModel, path: Path, config: TrainConfig, extra: dict | None) -> None:
    sidecar = {"train_config": asdict(config)}
    if extra:
        sidecar.update(extra)
    save_generator(model, path, sidecar)


def train(
    model: GeneratorModel,
    evaluator,
    train_set: Sequence[Example],
    dev_set: Sequence[Example],
    config: TrainConfig,
    *,
    checkpoint_dir: str | Path | None = None,
    sidecar_extra: dict | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Seeded epoch loop with gradient accumulation.

    Each effective batch of ``batch_size`` examples is processed as
    ``accum_steps`` micro-batches whose summed gradients are divided by the
    number of examples before one Adam step.  After every epoch (or when
    ``max_steps`` is reached) the dev set is scored; the parameters with the
    lowest dev loss are kept as the best checkpoint.  With ``checkpoint_dir``
    set, ``final.qgf`` is rewritten atomically after every epoch (and
    ``best.qgf`` whenever dev loss improves), so an interrupted run leaves
    the last completed epoch on disk.
    """
    if not train_set or not dev_set:
        raise ValueError("train and dev sets must be non-empty")
    if config.reward_mode == "bleu_plus_semantic" and (evaluator is None or not evaluator.frozen):
        raise FrozenEvaluatorError("training with the semantic reward requires a frozen evaluator")
    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr)
    history: list[dict] = []
    best_params = model.snapshot()
    best_epoch, best_loss = 0, math.inf
    steps = 0
    batch_index = 0
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        sums = {"l_total": 0.0, "l_base": 0.0, "l_rl": 0.0}
        reward_sum, reward_n, seen = 0.0, 0, 0
        for batch_ids in _batches(order, config.batch_size):
            batch = [train_set[i] for i in batch_ids]
            model.zero_grad()
            for micro in _batches(batch, config.micro_batch_size):
                try:
                    bd = train_step(model, evaluator, micro, config, rng=rng)
                except TrainingError as exc:
                    raise TrainingError(f"{exc} in batch {batch_index}") from None
                n = len(micro)
                for key in sums:
                    sums[key] += getattr(bd, key) * n
                if bd.rewards:
                    reward_sum += sum(r.r for r in bd.rewards)
                    reward_n += len(bd.rewards)
                seen += n
            if not math.isfinite(sums["l_total"]):
                raise TrainingError(f"non-finite loss in batch {batch_index}")
            n_eff = len(batch)
            grads = {k: (None if p.grad is None else p.grad / n_eff) for k, p in model.params.items()}
            if config.warmup_steps:
                state.lr = config.lr * min(1.0, (steps + 1) / config.warmup_steps)
            adam_step(model.params, grads, state)
            steps += 1
            batch_index += 1
            if config.max_steps and steps >= config.max_steps:
                break

        record = {
            "epoch": epoch,
            "steps": steps,
            "train_loss": sums["l_total"] / seen,
            "train_l_base": sums["l_base"] / seen,
            "train_l_rl": sums["l_rl"] / seen,
            "train_mean_reward": reward_sum / reward_n if reward_n else None,
        }
        record.update(dev_pass(model, evaluator, dev_set, config))
        history.append(record)
        log.info("epoch %d: %s", epoch, record)
        if record["dev_loss"] < best_loss:
            best_loss, best_epoch = record["dev_loss"], epoch
            best_params = model.snapshot()
            if ckpt is not None:
                _write_checkpoint(model, ckpt / "best.qgf", config, {**(sidecar_extra or {}), "epoch": epoch})
        if ckpt is not None:
            _write_checkpoint(model, ckpt / "final.qgf", config, {**(sidecar_extra or {}), "epoch": epoch})
        if on_epoch is not None:
            on_epoch(record)
        if config.max_steps and steps >= config.max_steps:
            break

    return TrainResult(model, history, best_params, best_epoch, steps)


def token_accuracy(model: GeneratorModel, examples: Sequence[Example], chunk: int = 64) -> float:
    """Fraction of non-pad target steps whose teacher-forced argmax is the
    reference token (EOS included)."""
    hits = total = 0
    with no_grad():
        for batch in _batches(examples, chunk):
            logits, _, targets, pad = forward_batch(model, [ex.src for ex in batch], [ex.tgt for ex in batch])
            keep = ~pad
            hits += int(((logits.data.argmax(axis=-1) == targets) & keep).sum())
            total += int(keep.sum())
    return hits / total


def history_jsonl(history: Sequence[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history)


def write_history(history: Sequence[dict], path: str | Path) -> None:
    atomic_write_bytes(path, history_jsonl(history).encode("utf-8"))


def read_history(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# evaluation


def _mean(xs) -> float | None:
    return float(np.mean(xs)) if len(xs) else None


def evaluate(
    model: GeneratorModel,
    evaluator,
    test_set: Sequence[Example],
    config: TrainConfig,
    *,
    decode_fn: Callable[[Sequence[Example]], list[list[int]]] | None = None,
    chunk: int = 64,
) -> dict:
    """Greedy-decode the test set and score it.

    The report carries corpus BLEU (0-100), mean sentence BLEU, mean [CLS]
    cosine, mean blended reward, mean embedding-match score, and a
    per-question-class table (frequency plus the same means).
    """
    if not test_set:
        raise ValueError("empty test set")
    if evaluator is None or not evaluator.frozen:
        raise FrozenEvaluatorError("evaluate requires a frozen evaluator")
    hyps: list[list[int]] = []
    for batch in _batches(test_set, chunk):
        if decode_fn is not None:
            hyps.extend(list(h) for h in decode_fn(batch))
        else:
            hyps.extend(greedy_decode_batch(model, [ex.src for ex in batch], config.max_tgt_len - 2))
    refs = [ex.reference for ex in test_set]

    rows = []
    for start in range(0, len(test_set), chunk):
        hs, rs = hyps[start:start + chunk], refs[start:start + chunk]
        enc = encode_batch(evaluator, [[CLS, *h] for h in hs] + [[CLS, *r] for r in rs])
        n = len(hs)
        for i in range(n):
            hc, rc = enc[i], enc[n + i]
            b = bleu_sentence(hs[i], rs[i])
            cos = cosine(hc[0], rc[0])
            match = match_score_from_embeddings(hc[1:], rc[1:]) if hs[i] else 0.0
            rows.append({"bleu": b, "cosine": cos, "reward": reward(b, cos, config.alpha).r, "match_score": match})

    n_total = len(test_set)
    classes = {}
    for qc in QuestionClass:
        idx = [i for i, ex in enumerate(test_set) if ex.question_class is qc]
        entry = {"count": len(idx), "frequency": len(idx) / n_total}
        for key in ("bleu", "cosine", "reward", "match_score"):
            entry[key] = _mean([rows[i][key] for i in idx])
        entry["corpus_bleu"] = bleu_corpus([hyps[i] for i in idx], [refs[i] for i in idx]) if idx else None
        classes[qc.value] = entry

    return {
        "n": n_total,
        "alpha": config.alpha,
        "corpus_bleu": bleu_corpus(hyps, refs),
        "mean_sentence_bleu": _mean([r["bleu"] for r in rows]),
        "mean_cosine": _mean([r["cosine"] for r in rows]),
        "mean_reward": _mean([r["reward"] for r in rows]),
        "mean_match_score": _mean([r["match_score"] for r in rows]),
        "classes": classes,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def write_report(report: dict, path: str | Path) -> None:
    atomic_write_bytes(path, report_json(report).encode("utf-8"))


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
