import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qgen.corpus import generate_synthetic
from qgen.evaluator import (
    EvaluatorConfig,
    FrozenEvaluatorError,
    corrupt_for_rtd,
    embed_cls,
    embed_cls_batch,
    encode_batch,
    freeze,
    init_evaluator,
    load_evaluator,
    pretrain_rtd,
    rtd_entropy_baseline,
    save_evaluator,
    token_embeddings,
    unigram_distribution,
)
from qgen.metrics import cosine
from qgen.tokenizer import CLS, N_SPECIALS, SEP, build_vocab, encode

V = 30


def small(seed=1, **kw):
    return init_evaluator(EvaluatorConfig(vocab_size=V, d_model=16, n_heads=2, n_layers=1, d_ff=32,
                                          max_len=24, seed=seed, **kw))


def test_config_violations():
    with pytest.raises(ValueError, match="divisible"):
        init_evaluator(EvaluatorConfig(vocab_size=V, d_model=10, n_heads=3))
    assert EvaluatorConfig(vocab_size=V).violations() == []


def test_rate_zero_changes_nothing():
    ids = [CLS, 7, 8, 9, SEP, 10]
    dist = unigram_distribution([ids], V)
    assert corrupt_for_rtd(ids, 0.0, dist, 3) == (ids, [False] * 6)


def test_rate_out_of_range():
    with pytest.raises(ValueError):
        corrupt_for_rtd([7], 0.6, np.ones(V) / V, 0)


@given(st.lists(st.integers(0, V - 1), min_size=1, max_size=30), st.integers(0, 999))
def test_corruption_invariants(ids, seed):
    dist = unigram_distribution([list(range(N_SPECIALS, V))], V)
    out, labels = corrupt_for_rtd(ids, 0.5, dist, seed)
    assert len(out) == len(ids)
    for a, b, lab in zip(ids, out, labels):
        if a < N_SPECIALS:
            assert b == a and not lab
        assert lab == (a != b)
        assert b >= N_SPECIALS or b == a


def test_corruption_rate_is_close_to_target():
    rng = np.random.default_rng(0)
    dist = unigram_distribution([list(range(N_SPECIALS, V))], V)
    labels = []
    for _ in range(400):
        labels += corrupt_for_rtd(list(range(N_SPECIALS, V)), 0.15, dist, rng)[1]
    assert abs(np.mean(labels) - 0.15) < 0.01


def test_unigram_distribution_ignores_specials():
    d = unigram_distribution([[CLS, 7, 7, 8, SEP]], V)
    assert d[7] == pytest.approx(2 / 3) and d[8] == pytest.approx(1 / 3)
    assert d[:N_SPECIALS].sum() == 0
    flat = unigram_distribution([[CLS]], V)
    assert flat[N_SPECIALS:] == pytest.approx(np.full(V - N_SPECIALS, 1 / (V - N_SPECIALS)))


def test_entropy_baseline():
    assert rtd_entropy_baseline(0.15) == pytest.approx(0.42271, abs=1e-5)


def test_freeze_is_idempotent_and_read_only():
    ev = freeze(small())
    h = ev.param_hash
    assert freeze(ev).param_hash == h == ev.parameter_hash()
    with pytest.raises(ValueError):
        ev.params["embed"].data[7, 0] = 1.0
    with pytest.raises(FrozenEvaluatorError):
        pretrain_rtd(ev, [[7, 8]], epochs=1)


def test_embedding_shapes_and_self_similarity():
    ev = freeze(small())
    e = embed_cls(ev, [7, 8, 9])
    assert e.shape == (16,)
    assert cosine(e, e) == pytest.approx(1.0)
    assert np.array_equal(embed_cls(ev, [CLS, 7, 8, 9]), e)
    assert token_embeddings(ev, [7, 8]).shape == (3, 16)
    assert embed_cls_batch(ev, [[7], [8, 9, 10]]).shape == (2, 16)
    with pytest.raises(ValueError):
        encode_batch(ev, [[]])


def test_batching_does_not_change_embeddings():
    ev = freeze(small())
    batched = encode_batch(ev, [[7, 8], [9, 10, 11, 12, 13]])
    assert np.allclose(batched[0], encode_batch(ev, [[7, 8]])[0], atol=1e-12)


def test_word_order_changes_the_embedding():
    ev = freeze(small())
    assert not np.allclose(embed_cls(ev, [7, 8, 9]), embed_cls(ev, [9, 8, 7]))


def test_unused_embedding_rows_do_not_matter():
    a, b = small(), small()
    b.params["embed"].data[20] += 1.0
    assert np.array_equal(embed_cls(a, [7, 8]), embed_cls(b, [7, 8]))
    assert not np.array_equal(embed_cls(a, [7, 20]), embed_cls(b, [7, 20]))


def test_long_inputs_are_truncated():
    ev = small()
    assert token_embeddings(ev, list(range(6, 30)) * 2).shape == (24, 16)


def _pattern_corpus(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        start = int(rng.integers(N_SPECIALS, V - 8))
        out.append(list(range(start, start + 8)))
    return out


def test_pretraining_is_deterministic_and_learns():
    corpus = _pattern_corpus(200, 0)
    _, h1 = pretrain_rtd(small(), corpus, rate=0.15, epochs=5, lr=3e-3, seed=4)
    _, h2 = pretrain_rtd(small(), corpus, rate=0.15, epochs=5, lr=3e-3, seed=4)
    assert h1 == h2
    assert len(h1) == 5 and {"train_loss", "heldout_loss", "heldout_accuracy"} <= set(h1[0])
    assert h1[-1]["train_loss"] < h1[0]["train_loss"]
    assert all(math.isfinite(r["heldout_loss"]) for r in h1)


def test_pretraining_edge_cases():
    ev = small()
    with pytest.raises(ValueError):
        pretrain_rtd(ev, [])
    assert pretrain_rtd(ev, [[7]], epochs=0)[1] == []


def test_checkpoint_keeps_frozen_state(tmp_path):
    ev = freeze(small())
    save_evaluator(ev, tmp_path / "e.qgf")
    back = load_evaluator(tmp_path / "e.qgf")
    assert back.frozen and back.param_hash == ev.param_hash
    assert np.array_equal(embed_cls(back, [7, 8]), embed_cls(ev, [7, 8]))
    save_evaluator(small(), tmp_path / "u.qgf")
    assert not load_evaluator(tmp_path / "u.qgf").frozen


def test_rtd_loss_falls_over_first_five_epochs():
    """Median over three seeds of the per-epoch training loss on synthetic questions."""
    triples = generate_synthetic(600, seed=3)
    vocab = build_vocab(triples)
    corpus = [encode(t.question, vocab) for t in triples]
    curves = []
    for seed in (0, 1, 2):
        ev = init_evaluator(EvaluatorConfig(vocab_size=vocab.size, d_model=16, n_heads=2, n_layers=1, d_ff=32,
                                            max_len=32, seed=seed))
        _, hist = pretrain_rtd(ev, corpus, rate=0.15, epochs=5, lr=1e-3, seed=seed)
        curves.append([r["train_loss"] for r in hist])
    medians = np.median(np.array(curves), axis=0)
    assert np.all(np.diff(medians) < 0)
