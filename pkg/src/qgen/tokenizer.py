"""Word-level vocabulary and source/target sequence assembly."""

from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, CLS, SEP, BOS, EOS = range(6)
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]")
N_SPECIALS = len(SPECIAL_TOKENS)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, detach punctuation.

    >>> tokenize("Who won?")
    ['who', 'won', '?']
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    word_of: tuple[str, ...]

    def __post_init__(self):
        if self.word_of[:N_SPECIALS] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the six special tokens")
        id_of = {w: i for i, w in enumerate(self.word_of)}
        if len(id_of) != len(self.word_of):
            raise ValueError("duplicate word in vocabulary")
        object.__setattr__(self, "id_of", id_of)

    @property
    def size(self) -> int:
        return len(self.word_of)

    def __len__(self) -> int:
        return len(self.word_of)

    def save(self, path: str | Path) -> None:
        lines = [f"{w}\t{i}\n" for i, w in enumerate(self.word_of)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        words = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            word, _, idx = line.rpartition("\t")
            if not _ or int(idx) != len(words):
                raise ValueError(f"{path}:{lineno}: expected 'word<TAB>{len(words)}'")
            words.append(word)
        return cls(tuple(words))


def build_vocab(triples: Iterable, min_freq: int = 1, max_size: int = 20000) -> Vocab:
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if max_size < N_SPECIALS + 1:
        raise ValueError(f"max_size must be >= {N_SPECIALS + 1}")
    counts: Counter[str] = Counter()
    for t in triples:
        for text in (t.context, t.answer, t.question):
            counts.update(tokenize(text))
    if not counts:
        warnings.warn("empty corpus: vocabulary holds only the special tokens", stacklevel=2)
    kept = [(w, c) for w, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda wc: (-wc[1], wc[0]))
    kept = kept[: max_size - N_SPECIALS]
    return Vocab(SPECIAL_TOKENS + tuple(sorted(w for w, _ in kept)))


def encode(text: str, vocab: Vocab) -> list[int]:
    get = vocab.id_of.get
    return [get(w, UNK) for w in tokenize(text)]


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= vocab.size:
            raise IndexError(f"token id {i} outside vocabulary of size {vocab.size}")
        if i == UNK:
            words.append("[UNK]")
        elif i >= N_SPECIALS:
            words.append(vocab.word_of[i])
    return " ".join(words)


def strip_specials(ids: Iterable[int]) -> list[int]:
    """Drop every special except UNK."""
    return [int(i) for i in ids if int(i) >= N_SPECIALS or int(i) == UNK]


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    kind: str  # "source" or "target"

    def __post_init__(self):
        ids = self.ids
        if self.kind == "source":
            if not ids or ids[0] != CLS or ids.count(SEP) != 2 or ids[-1] != SEP:
                raise ValueError(f"malformed source sequence {ids}")
        elif self.kind == "target":
            if len(ids) < 2 or ids[0] != BOS or ids[-1] != EOS:
                raise ValueError(f"malformed target sequence {ids}")
        else:
            raise ValueError(f"unknown sequence kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.ids)


def assemble_input(context_ids: Sequence[int], answer_ids: Sequence[int], max_len: int) -> TokenSeq:
    """``[CLS] context [SEP] answer [SEP]``, truncating the context (never the
    answer) from the right to fit ``max_len``."""
    if not answer_ids:
        raise ValueError("answer must not be empty")
    budget = max_len - len(answer_ids) - 3
    if budget < 0:
        raise ValueError(f"answer of {len(answer_ids)} tokens plus 3 specials exceeds max_len={max_len}")
    ids = (CLS, *context_ids[:budget], SEP, *answer_ids, SEP)
    return TokenSeq(tuple(int(i) for i in ids), "source")


def split_source(seq: TokenSeq) -> tuple[list[int], list[int]]:
    """Recover (context, answer) ids from a source sequence."""
    first = seq.ids.index(SEP)
    return list(seq.ids[1:first]), list(seq.ids[first + 1:-1])


def assemble_target(question_ids: Sequence[int], max_len: int) -> TokenSeq:
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    if not question_ids:
        raise ValueError("question must not be empty")
    body = [int(i) for i in question_ids[: max_len - 2]]
    return TokenSeq((BOS, *body, EOS), "target")
