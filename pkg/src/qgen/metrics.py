"""BLEU, cosine similarity, reward shaping, embedding matching, WH classes."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Hashable, Sequence

import numpy as np

from .evaluator import FrozenEvaluatorError, encode_batch
from .tokenizer import CLS, encode, tokenize

SMOOTHING_EPS = 1e-9


def ngram_counts(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(candidate: Sequence, reference: Sequence, n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-gram count) for order ``n``."""
    cand = ngram_counts(candidate, n)
    ref = ngram_counts(reference, n)
    clipped = sum(min(c, ref[g]) for g, c in cand.items())
    return clipped, max(len(candidate) - n + 1, 0)


def brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - ref_len / cand_len))


def bleu_sentence(candidate: Sequence, reference: Sequence, max_n: int = 4) -> float:
    """Smoothed sentence BLEU in [0, 1].

    Orders longer than the candidate have no n-grams and are left out of the
    geometric mean (uniform weights over the remaining orders).  A zero match
    count is replaced by ``1e-9``.
    """
    if not reference:
        raise ValueError("reference must not be empty")
    if not candidate:
        return 0.0
    orders = min(max_n, len(candidate))
    log_sum = 0.0
    for n in range(1, orders + 1):
        clipped, total = modified_precision(candidate, reference, n)
        log_sum += math.log((clipped or SMOOTHING_EPS) / total)
    return brevity_penalty(len(candidate), len(reference)) * math.exp(log_sum / orders)


def bleu_corpus(candidates: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Unsmoothed corpus BLEU on a 0-100 scale.

    Clipped counts, n-gram totals and lengths are summed over the corpus
    before the geometric mean and brevity penalty.  Orders with no candidate
    n-grams anywhere are left out; any order with zero matches gives 0.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")
    clipped = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c, t = modified_precision(cand, ref, n)
            clipped[n - 1] += c
            totals[n - 1] += t
    orders = [n for n in range(max_n) if totals[n] > 0]
    if not orders or any(clipped[n] == 0 for n in orders):
        return 0.0
    log_mean = sum(math.log(clipped[n] / totals[n]) for n in orders) / len(orders)
    return 100.0 * brevity_penalty(cand_len, ref_len) * math.exp(log_mean)


def cosine(u, v) -> float:
    """Cosine similarity, 0 when either vector is all zeros."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"cosine width mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


# ---------------------------------------------------------------------------
# reward


@dataclass(frozen=True)
class RewardBreakdown:
    r1: float
    r2: float
    r_tilde: float
    r: float
    alpha: float


def reward(r1: float, r2: float, alpha: float) -> RewardBreakdown:
    """Blend BLEU (``r1``) with embedding cosine (``r2``) and map the blend
    affinely onto [0, 1]."""
    if not 0.0 <= r1 <= 1.0:
        raise ValueError(f"r1={r1} outside [0, 1]")
    if not -1.0 <= r2 <= 1.0:
        raise ValueError(f"r2={r2} outside [-1, 1]")
    if not 0.05 < alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside (0.05, 1]")
    r_tilde = alpha * r1 + (1.0 - alpha) * r2
    return RewardBreakdown(r1, r2, r_tilde, (r_tilde + 1.0 - alpha) / (2.0 - alpha), alpha)


def bleu_reward(r1: float) -> RewardBreakdown:
    """BLEU-only reward: ``r = r1`` exactly (the ``alpha = 1`` blend, without
    its rounding)."""
    if not 0.0 <= r1 <= 1.0:
        raise ValueError(f"r1={r1} outside [0, 1]")
    return RewardBreakdown(r1, 0.0, r1, r1, 1.0)


# ---------------------------------------------------------------------------
# embedding matching


def embedding_match_score(candidate: Sequence[int], reference: Sequence[int], evaluator) -> float:
    """Greedy token matching over frozen-evaluator embeddings (F1 of the
    mean best-match cosines in each direction)."""
    if not candidate or not reference:
        raise ValueError("embedding_match_score needs non-empty candidate and reference")
    if not evaluator.frozen:
        raise FrozenEvaluatorError("embedding_match_score requires a frozen evaluator")
    hc, hr = encode_batch(evaluator, [[CLS, *candidate], [CLS, *reference]])
    return match_score_from_embeddings(hc[1:], hr[1:])


def match_score_from_embeddings(cand: np.ndarray, ref: np.ndarray) -> float:
    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)

    sim = np.clip(unit(cand) @ unit(ref).T, -1.0, 1.0)
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    if precision <= 0.0 or recall <= 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# question classes


class QuestionClass(Enum):
    WhatWhich = "What/Which"
    WhyHow = "Why/How"
    Where = "Where"
    When = "When"
    Who = "Who"
    HowMany = "How many"
    Other = "Other"


_FIRST_WORD = {
    "what": QuestionClass.WhatWhich,
    "which": QuestionClass.WhatWhich,
    "why": QuestionClass.WhyHow,
    "how": QuestionClass.WhyHow,
    "where": QuestionClass.Where,
    "when": QuestionClass.When,
    "who": QuestionClass.Who,
    "whom": QuestionClass.Who,
    "whose": QuestionClass.Who,
}


def classify_question_type(question: str) -> QuestionClass:
    words = tokenize(question)
    if words[:2] in (["how", "many"], ["how", "much"]):
        return QuestionClass.HowMany
    return _FIRST_WORD.get(words[0], QuestionClass.Other) if words else QuestionClass.Other


# ---------------------------------------------------------------------------
# batch scoring


def score_records(records: Sequence[dict], vocab, evaluator, alpha: float = 0.197) -> list[dict]:
    """Score ``{"id", "candidate", "reference"}`` text records.

    Each output record adds ``bleu``, ``cosine``, ``reward``,
    ``match_score`` (None for an empty candidate) and the reference's
    question ``class``.
    """
    if not evaluator.frozen:
        raise FrozenEvaluatorError("batch scoring requires a frozen evaluator")
    out = []
    for rec in records:
        missing = {"id", "candidate", "reference"} - set(rec)
        if missing:
            raise ValueError(f"record {rec!r} lacks {sorted(missing)}")
        cand = encode(rec["candidate"], vocab)
        ref = encode(rec["reference"], vocab)
        if not ref:
            raise ValueError(f"record {rec['id']!r}: empty reference")
        hc, hr = encode_batch(evaluator, [[CLS, *cand], [CLS, *ref]])
        b = bleu_sentence(cand, ref)
        cos = cosine(hc[0], hr[0])
        out.append({
            **rec,
            "bleu": b,
            "cosine": cos,
            "reward": reward(b, cos, alpha).r,
            "match_score": match_score_from_embeddings(hc[1:], hr[1:]) if cand else None,
            "class": classify_question_type(rec["reference"]).value,
        })
    return out


def read_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def dump_jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)
