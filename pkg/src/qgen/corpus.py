"""SQuAD v1.1 ingestion, a synthetic QA generator, and train/dev/test splits."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class SquadParseError(ValueError):
    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (at byte {byte_offset})")
        self.byte_offset = byte_offset


class SquadSchemaError(ValueError):
    def __init__(self, json_path: str, message: str):
        super().__init__(f"{json_path}: {message}")
        self.json_path = json_path


@dataclass(frozen=True)
class QaTriple:
    context: str
    answer: str
    question: str
    answer_start: int | None = None
    id: str = ""

    def __post_init__(self):
        for name in ("context", "answer", "question"):
            if not getattr(self, name).strip():
                raise ValueError(f"triple {self.id!r}: {name} is empty")
        if self.answer_start is not None and not self.offset_matches():
            raise ValueError(f"triple {self.id!r}: answer_start {self.answer_start} does not point at the answer")

    def offset_matches(self) -> bool:
        s = self.answer_start
        return s is not None and 0 <= s and self.context[s:s + len(self.answer)] == self.answer


@dataclass(frozen=True)
class DataSplit:
    train: list[QaTriple]
    dev: list[QaTriple]
    test: list[QaTriple]
    seed: int


# ---------------------------------------------------------------------------
# SQuAD v1.1


def _require(obj, key: str, path: str, kind: type):
    if not isinstance(obj, dict):
        raise SquadSchemaError(path, f"expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise SquadSchemaError(f"{path}.{key}", "missing key")
    value = obj[key]
    if not isinstance(value, kind):
        raise SquadSchemaError(f"{path}.{key}", f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def parse_squad(text: str) -> tuple[list[QaTriple], Counter]:
    """Parse SQuAD v1.1 JSON text.  See :func:`load_squad`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SquadParseError(exc.msg, len(text[: exc.pos].encode("utf-8"))) from None
    tally: Counter = Counter()
    triples: list[QaTriple] = []
    articles = _require(doc, "data", "$", list)
    for ai, article in enumerate(articles):
        apath = f"$.data[{ai}]"
        for pi, para in enumerate(_require(article, "paragraphs", apath, list)):
            ppath = f"{apath}.paragraphs[{pi}]"
            context = _require(para, "context", ppath, str)
            for qi, qa in enumerate(_require(para, "qas", ppath, list)):
                qpath = f"{ppath}.qas[{qi}]"
                qid = _require(qa, "id", qpath, str)
                question = _require(qa, "question", qpath, str)
                answers = _require(qa, "answers", qpath, list)
                if not answers:
                    tally["empty_answers"] += 1
                    continue
                first = answers[0]
                text_ = _require(first, "text", f"{qpath}.answers[0]", str)
                start = first.get("answer_start") if isinstance(first, dict) else None
                if start is not None and not isinstance(start, int):
                    raise SquadSchemaError(f"{qpath}.answers[0].answer_start", "expected int")
                if start is not None and context[start:start + len(text_)] != text_:
                    tally["bad_answer_start"] += 1
                    start = None
                try:
                    triples.append(QaTriple(context, text_, question, start, qid))
                except ValueError:
                    tally["blank_fields"] += 1
    return triples, tally


def load_squad(path: str | Path) -> tuple[list[QaTriple], Counter]:
    """Load one (question, first answer) triple per ``qas`` entry.

    Returns the triples in document order plus a warning tally:
    ``empty_answers`` counts skipped entries, ``bad_answer_start`` counts
    offsets that did not point at the answer text (kept, offset cleared),
    ``blank_fields`` counts entries with an empty context, answer or question.
    """
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SquadParseError("file is not UTF-8", exc.start) from None
    return parse_squad(text)


def to_squad(triples: Sequence[QaTriple], title: str = "corpus") -> dict:
    """Group consecutive triples sharing a context into SQuAD paragraphs."""
    paragraphs: list[dict] = []
    for t in triples:
        if not paragraphs or paragraphs[-1]["context"] != t.context:
            paragraphs.append({"context": t.context, "qas": []})
        answer = {"text": t.answer}
        if t.answer_start is not None:
            answer["answer_start"] = t.answer_start
        paragraphs[-1]["qas"].append({"id": t.id, "question": t.question, "answers": [answer]})
    return {"version": "1.1", "data": [{"title": title, "paragraphs": paragraphs}]}


def dump_squad(triples: Sequence[QaTriple], path: str | Path, title: str = "corpus") -> None:
    text = json.dumps(to_squad(triples, title), ensure_ascii=False, indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# splits


def split_train_dev(triples: Sequence[QaTriple], dev_fraction: float, seed: int) -> tuple[list, list]:
    if not triples:
        raise ValueError("cannot split an empty list")
    if not 0.0 < dev_fraction < 1.0:
        raise ValueError(f"dev_fraction must lie in (0, 1), got {dev_fraction}")
    n = len(triples)
    n_dev = math.floor(dev_fraction * n + 1e-9)
    if n_dev == 0 and n >= 2:
        n_dev = 1
    order = np.random.default_rng(seed).permutation(n)
    dev = [triples[i] for i in order[:n_dev]]
    train = [triples[i] for i in order[n_dev:]]
    return train, dev


def make_split(
    triples: Sequence[QaTriple],
    seed: int,
    dev_fraction: float = 0.06,
    test_fraction: float = 0.1,
    test: Sequence[QaTriple] | None = None,
) -> DataSplit:
    """Train/dev/test partition.  Without an explicit ``test`` set, a seeded
    ``test_fraction`` cut is taken first and the remainder is split 94/6."""
    if test is None:
        rest, cut = split_train_dev(triples, test_fraction, seed)
        test = cut
    else:
        rest = list(triples)
    train, dev = split_train_dev(rest, dev_fraction, seed + 1)
    return DataSplit(train, dev, list(test), seed)


# ---------------------------------------------------------------------------
# synthetic corpus

QUESTION_CLASSES = ("What/Which", "Why/How", "Where", "When", "Who", "How many")

FIRST_NAMES = (
    "Alice", "Bruno", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas",
    "Kamala", "Luca", "Mara", "Nils", "Olga", "Pavel", "Quinn", "Rosa", "Samir", "Tess",
    "Umar", "Vera", "Walter", "Ximena", "Yusuf", "Zoe", "Anton", "Bianca", "Cyrus", "Daria",
)
LAST_NAMES = (
    "Abbott", "Berg", "Costa", "Dumont", "Eriksen", "Fischer", "Garcia", "Hartmann", "Ivanov",
    "Jansen", "Kowalski", "Lindqvist", "Moreau", "Novak", "Okafor", "Petrov", "Quist", "Rossi",
    "Schulz", "Tanaka", "Ueda", "Varga", "Weber", "Yilmaz", "Zeller",
)
CITIES = (
    "Paris", "Vienna", "Lisbon", "Oslo", "Prague", "Dublin", "Madrid", "Warsaw", "Athens",
    "Cairo", "Lima", "Quito", "Osaka", "Seoul", "Hanoi", "Nairobi", "Dakar", "Tunis", "Bogota",
    "Toronto", "Boston", "Denver", "Chicago", "Sydney", "Perth", "Geneva", "Munich", "Milan",
    "Naples", "Porto",
)
FIELDS = (
    "chemistry", "physics", "history", "law", "medicine", "biology", "geology", "music",
    "economics", "philosophy", "mathematics", "architecture", "astronomy", "linguistics", "botany",
)
INSTRUMENTS = ("violin", "piano", "cello", "flute", "guitar", "trumpet", "harp", "drums", "clarinet", "organ")
REASONS = ("war", "flood", "famine", "plague", "drought", "revolution", "earthquake", "fire", "strike", "crisis")
VEHICLES = ("train", "ship", "car", "bus", "plane", "bicycle")

# class -> list of (answer slot, [question paraphrases]); paraphrases keep the class opening
QUESTION_TEMPLATES: dict[str, list[tuple[str, tuple[str, ...]]]] = {
    "What/Which": [
        ("field", ("What did {name} study ?", "What subject did {name} study at the university ?")),
        ("instrument", ("Which instrument did {name} play ?", "What instrument did {name} play ?")),
    ],
    "Why/How": [
        ("reason", ("Why did {name} move to {city2} ?", "Why did {name} leave for {city2} ?")),
        ("vehicle", ("How did {name} travel to {city2} ?", "How did {name} get to {city2} ?")),
    ],
    "Where": [("city", ("Where was {name} born ?", "Where is the birthplace of {name} ?"))],
    "When": [("year", ("When was {name} born ?", "When is the birth year of {name} ?"))],
    "Who": [("name", ("Who was born in {city} in {year} ?", "Who is the person born in {city} in {year} ?"))],
    "How many": [("books", ("How many books did {name} write ?", "How many books were written by {name} ?"))],
}

_FACTS = (
    "{name} was born in {city} in {year} .",
    "{name} studied {field} at the university .",
    "{name} played the {instrument} .",
    "{name} moved to {city2} because of the {reason} .",
    "{name} travelled to {city2} by {vehicle} .",
    "{name} wrote {books} books .",
)


_FACT_OF_SLOT = {"city": 0, "year": 0, "name": 0, "field": 1, "instrument": 2, "reason": 3, "vehicle": 4, "books": 5}


def _answer_text(slot: str, v: dict) -> str:
    return {
        "field": v["field"],
        "instrument": f"the {v['instrument']}",
        "reason": f"because of the {v['reason']}",
        "vehicle": f"by {v['vehicle']}",
        "city": v["city"],
        "year": v["year"],
        "name": v["name"],
        "books": v["books"],
    }[slot]


def generate_synthetic(n: int, seed: int) -> list[QaTriple]:
    """``n`` biography-style triples.  Question classes are dealt in shuffled
    blocks of six, so each class gets ``n/6`` examples up to one."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    out: list[QaTriple] = []
    classes: list[str] = []
    while len(classes) < n:
        classes.extend(QUESTION_CLASSES[i] for i in rng.permutation(len(QUESTION_CLASSES)))
    for i, cls in enumerate(classes[:n]):
        city, city2 = rng.choice(len(CITIES), size=2, replace=False)
        v = {
            "name": f"{FIRST_NAMES[rng.integers(len(FIRST_NAMES))]} {LAST_NAMES[rng.integers(len(LAST_NAMES))]}",
            "city": CITIES[city],
            "city2": CITIES[city2],
            "year": str(int(rng.integers(1900, 2000))),
            "field": FIELDS[rng.integers(len(FIELDS))],
            "instrument": INSTRUMENTS[rng.integers(len(INSTRUMENTS))],
            "reason": REASONS[rng.integers(len(REASONS))],
            "vehicle": VEHICLES[rng.integers(len(VEHICLES))],
            "books": str(int(rng.integers(2, 21))),
        }
        facts = [_FACTS[j].format(**v) for j in rng.permutation(len(_FACTS))]
        context = " ".join(facts)
        options = QUESTION_TEMPLATES[cls]
        slot, paraphrases = options[rng.integers(len(options))]
        question = paraphrases[rng.integers(len(paraphrases))].format(**v)
        answer = _answer_text(slot, v)
        fact = _FACTS[_FACT_OF_SLOT[slot]].format(**v)
        start = context.index(fact) + fact.index(answer)
        out.append(QaTriple(context, answer, question, start, f"syn-{seed}-{i:06d}"))
    return out
