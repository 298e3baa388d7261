import json
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from qgen.corpus import (
    QUESTION_CLASSES,
    QaTriple,
    SquadParseError,
    SquadSchemaError,
    dump_squad,
    generate_synthetic,
    load_squad,
    make_split,
    parse_squad,
    split_train_dev,
    to_squad,
)
from qgen.metrics import classify_question_type


def squad_doc(qas, context="The Broncos beat the Panthers in Denver."):
    return {"version": "1.1", "data": [{"title": "t", "paragraphs": [{"context": context, "qas": qas}]}]}


def write(tmp_path, doc, name="d.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def test_minimal_file(tmp_path):
    doc = squad_doc([{"id": "q1", "question": "Where?", "answers": [{"text": "Denver", "answer_start": 33}]}])
    triples, tally = load_squad(write(tmp_path, doc))
    assert len(triples) == 1
    t = triples[0]
    assert (t.id, t.question, t.answer, t.answer_start) == ("q1", "Where?", "Denver", 33)
    assert t.context[t.answer_start:t.answer_start + len(t.answer)] == "Denver"
    assert sum(tally.values()) == 0


def test_bad_offset_is_kept_and_counted(tmp_path):
    doc = squad_doc([
        {"id": "a", "question": "Who won?", "answers": [{"text": "Broncos", "answer_start": 4}]},
        {"id": "b", "question": "Where?", "answers": [{"text": "Denver", "answer_start": 2}]},
    ])
    triples, tally = load_squad(write(tmp_path, doc))
    assert [t.answer_start for t in triples] == [4, None]
    assert tally["bad_answer_start"] == 1


def test_empty_answers_skipped_and_counted(tmp_path):
    doc = squad_doc([
        {"id": "a", "question": "Who won?", "answers": []},
        {"id": "b", "question": "Who lost?", "answers": [{"text": "Panthers", "answer_start": 21},
                                                          {"text": "the Panthers", "answer_start": 17}]},
    ])
    triples, tally = load_squad(write(tmp_path, doc))
    assert [t.id for t in triples] == ["b"]
    assert triples[0].answer == "Panthers"  # first answer only
    assert tally["empty_answers"] == 1


def test_malformed_json_reports_byte_offset():
    text = '{"data": [\n  {"title": "é", }]}'
    with pytest.raises(SquadParseError) as err:
        parse_squad(text)
    assert err.value.byte_offset == len('{"data": [\n  {"title": "é", '.encode("utf-8"))


def test_schema_error_names_json_path():
    doc = squad_doc([{"id": "a", "answers": [{"text": "x", "answer_start": 0}]}])
    with pytest.raises(SquadSchemaError) as err:
        parse_squad(json.dumps(doc))
    assert err.value.json_path == "$.data[0].paragraphs[0].qas[0].question"
    with pytest.raises(SquadSchemaError, match=r"\$\.data"):
        parse_squad("{}")


def test_document_order_is_preserved(tmp_path):
    triples = generate_synthetic(12, seed=1)
    path = tmp_path / "s.json"
    dump_squad(triples, path)
    loaded, _ = load_squad(path)
    assert [t.id for t in loaded] == [t.id for t in triples]


@given(st.integers(1, 40), st.integers(0, 10_000))
def test_squad_round_trip(n, seed):
    triples = generate_synthetic(n, seed)
    loaded, tally = parse_squad(json.dumps(to_squad(triples)))
    assert loaded == triples
    assert sum(tally.values()) == 0


def test_round_trip_without_offsets():
    t = [QaTriple("some context", "context", "what ?", None, "x")]
    doc = to_squad(t)
    assert "answer_start" not in doc["data"][0]["paragraphs"][0]["qas"][0]["answers"][0]
    assert parse_squad(json.dumps(doc))[0] == t


def test_triple_invariants():
    with pytest.raises(ValueError):
        QaTriple(" ", "a", "q")
    with pytest.raises(ValueError):
        QaTriple("abc", "b", "q", answer_start=0)
    assert QaTriple("abc", "b", "q", answer_start=1).offset_matches()


def test_split_sizes_94_6():
    triples = generate_synthetic(100, seed=0)
    train, dev = split_train_dev(triples, 0.06, seed=4)
    assert (len(train), len(dev)) == (94, 6)


def test_split_determinism_and_seed_sensitivity():
    triples = generate_synthetic(100, seed=0)
    assert split_train_dev(triples, 0.06, 4) == split_train_dev(triples, 0.06, 4)
    dev_a = {t.id for t in split_train_dev(triples, 0.06, 4)[1]}
    dev_b = {t.id for t in split_train_dev(triples, 0.06, 5)[1]}
    assert dev_a != dev_b


def test_split_errors_and_minimum_dev():
    with pytest.raises(ValueError):
        split_train_dev([], 0.06, 0)
    train, dev = split_train_dev(generate_synthetic(5, 0), 0.06, 0)
    assert len(dev) == 1 and len(train) == 4


@given(st.integers(2, 300), st.floats(0.01, 0.5), st.integers(0, 99))
def test_split_is_a_partition(n, frac, seed):
    triples = generate_synthetic(n, seed=3)
    train, dev = split_train_dev(triples, frac, seed)
    ids = [t.id for t in train + dev]
    assert sorted(ids) == sorted(t.id for t in triples)
    assert len(dev) == max(1, int(frac * n + 1e-9))


def test_make_split_counts():
    split = make_split(generate_synthetic(600, 7), seed=7)
    assert len(split.train) + len(split.dev) + len(split.test) == 600
    assert len(split.test) == 60
    assert (len(split.train), len(split.dev)) == (508, 32)
    ids = [{t.id for t in part} for part in (split.train, split.dev, split.test)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])


def test_make_split_with_given_test():
    data = generate_synthetic(120, 1)
    split = make_split(data[:100], seed=0, test=data[100:])
    assert split.test == data[100:]
    assert (len(split.train), len(split.dev)) == (94, 6)


def test_synthetic_basic():
    triples = generate_synthetic(6, seed=9)
    assert len(triples) == 6
    for t in triples:
        assert t.offset_matches()
    assert generate_synthetic(6, seed=9) == triples
    with pytest.raises(ValueError):
        generate_synthetic(0, 1)


def test_synthetic_class_balance():
    counts = Counter(classify_question_type(t.question).value for t in generate_synthetic(600, seed=2))
    assert set(counts) == set(QUESTION_CLASSES)
    for cls in QUESTION_CLASSES:
        assert 80 <= counts[cls] <= 120


@given(st.integers(1, 60), st.integers(0, 1000))
def test_synthetic_questions_open_with_a_class_word(n, seed):
    for t in generate_synthetic(n, seed):
        assert classify_question_type(t.question).value in QUESTION_CLASSES
