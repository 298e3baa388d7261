import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import jitter
from qgen.evaluator import FrozenEvaluatorError, init_evaluator
from qgen.generator import GeneratorConfig, init_generator
from qgen.metrics import QuestionClass
from qgen.training import (
    TrainConfig,
    dev_pass,
    evaluate,
    loss_base,
    loss_rl,
    loss_total,
    make_examples,
    read_history,
    read_report,
    token_accuracy,
    train,
    train_step,
    write_history,
    write_report,
)

gammas = st.floats(0.0501, 1.0)
log_probs = st.floats(-200.0, 0.0)
rewards = st.floats(0.0, 1.0)


def cfg(**kw):
    base = dict(lr=3e-4, lr_override=True, batch_size=8, epochs=1, max_src_len=64, max_tgt_len=16, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def grads_of(model):
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in model.params.items()}


# ---------------------------------------------------------------- config


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.alpha, c.gamma, c.lr, c.batch_size) == (0.197, 0.09, 1.17e-5, 32)
    with pytest.raises(ValueError, match="lr_override"):
        TrainConfig(lr=3e-4)
    assert TrainConfig(lr=3e-4, lr_override=True).lr == 3e-4
    with pytest.raises(ValueError, match="accum_steps"):
        TrainConfig(batch_size=30, accum_steps=4)
    with pytest.raises(ValueError, match="reward_mode"):
        TrainConfig(reward_mode="bleu")
    assert TrainConfig(batch_size=32, accum_steps=4).micro_batch_size == 8


# ---------------------------------------------------------------- scalar losses


def test_loss_examples():
    assert loss_total(10.0, loss_rl(-10.0, 1.0), 0.09) == pytest.approx(0.9, abs=1e-12)
    assert loss_base(-2.5) == 2.5
    with pytest.raises(ValueError):
        loss_base(0.1)
    with pytest.raises(ValueError):
        loss_rl(-1.0, 1.5)
    with pytest.raises(ValueError):
        loss_total(1.0, 1.0, 0.0)


@given(log_probs, gammas)
def test_zero_reward_leaves_base_loss(lp, g):
    assert loss_total(loss_base(lp), loss_rl(lp, 0.0), g) == pytest.approx(loss_base(lp), abs=1e-12)


@given(log_probs, rewards)
def test_gamma_one_is_pure_likelihood(lp, r):
    assert loss_total(loss_base(lp), loss_rl(lp, r), 1.0) == pytest.approx(loss_base(lp), abs=1e-12)


@given(log_probs, gammas)
def test_full_reward_scales_by_gamma(lp, g):
    assert loss_total(loss_base(lp), loss_rl(lp, 1.0), g) == pytest.approx(g * loss_base(lp), abs=1e-12)


@given(log_probs, rewards, rewards, gammas)
def test_higher_reward_never_raises_the_loss(lp, r1, r2, g):
    lo, hi = sorted((r1, r2))
    assert loss_total(loss_base(lp), loss_rl(lp, hi), g) <= loss_total(loss_base(lp), loss_rl(lp, lo), g) + 1e-12


# ---------------------------------------------------------------- train_step


def test_constant_reward_scales_the_likelihood_gradient(synthetic_small, tiny_generator):
    _, _, examples = synthetic_small
    m = jitter(tiny_generator)
    batch = examples[:4]
    train_step(m, None, batch, cfg(reward_mode="none"))
    mle = grads_of(m)
    for c, g in ((0.3, 0.09), (0.0, 0.5), (1.0, 0.2)):
        m.zero_grad()
        train_step(m, None, batch, cfg(gamma=g), reward_override=c)
        scale = g + (1 - g) * (1 - c)
        for k, v in grads_of(m).items():
            assert np.allclose(v, scale * mle[k], rtol=0, atol=1e-10)


def test_none_mode_matches_gamma_one(synthetic_small, tiny_generator, frozen_evaluator):
    _, _, examples = synthetic_small
    m = jitter(tiny_generator)
    bd_none = train_step(m, None, examples[:4], cfg(reward_mode="none", gamma=0.3))
    a = grads_of(m)
    m.zero_grad()
    train_step(m, frozen_evaluator, examples[:4], cfg(reward_mode="bleu_only", gamma=1.0))
    for k, v in grads_of(m).items():
        assert np.allclose(v, a[k], rtol=0, atol=1e-12)
    assert bd_none.rewards == [] and bd_none.l_total == pytest.approx(bd_none.l_base)


def test_semantic_mode_reports_rewards(synthetic_small, tiny_generator, frozen_evaluator):
    _, _, examples = synthetic_small
    bd = train_step(tiny_generator, frozen_evaluator, examples[:3], cfg())
    assert len(bd.rewards) == 3
    assert all(0.0 <= r.r <= 1.0 for r in bd.rewards)
    expect = [0.09 * b + 0.91 * (1 - r.r) * b for b, r in zip(bd.per_example_base, bd.rewards)]
    assert bd.per_example_total == pytest.approx(expect, abs=1e-12)


def test_semantic_mode_needs_frozen_evaluator(synthetic_small, tiny_generator, frozen_evaluator):
    _, _, examples = synthetic_small
    loose = init_evaluator(frozen_evaluator.config)
    with pytest.raises(FrozenEvaluatorError):
        train_step(tiny_generator, loose, examples[:2], cfg())
    with pytest.raises(FrozenEvaluatorError):
        train(tiny_generator, loose, examples[:4], examples[4:6], cfg())


def test_accumulation_matches_one_big_batch(synthetic_small, tiny_generator, frozen_evaluator):
    _, _, examples = synthetic_small
    batch = examples[:32]
    m = jitter(tiny_generator)
    config = cfg(batch_size=32)
    train_step(m, frozen_evaluator, batch, config)
    whole = grads_of(m)
    m.zero_grad()
    for i in range(4):
        train_step(m, frozen_evaluator, batch[8 * i:8 * i + 8], config)
    for k, v in grads_of(m).items():
        assert np.allclose(v / 32, whole[k] / 32, rtol=0, atol=1e-10)


# ---------------------------------------------------------------- loop


def test_training_loop_is_deterministic(synthetic_small, frozen_evaluator):
    _, _, examples = synthetic_small
    runs = []
    for _ in range(2):
        m = init_generator(GeneratorConfig(vocab_size=frozen_evaluator.config.vocab_size, d_model=16, n_heads=2,
                                           n_enc_layers=1, n_dec_layers=1, d_ff=32, max_src_len=64,
                                           max_tgt_len=16, seed=5))
        res = train(m, frozen_evaluator, examples[:24], examples[24:30], cfg(epochs=2))
        runs.append(res)
    assert runs[0].history == runs[1].history
    assert all(np.array_equal(runs[0].model.params[k].data, runs[1].model.params[k].data)
               for k in runs[0].model.params)
    h = runs[0].history
    assert [r["epoch"] for r in h] == [1, 2] and h[-1]["steps"] == 6
    assert {"train_loss", "dev_loss", "dev_corpus_bleu", "dev_mean_reward"} <= set(h[0])


def test_zero_epochs_changes_nothing(synthetic_small, tiny_generator, frozen_evaluator):
    _, _, examples = synthetic_small
    before = tiny_generator.snapshot()
    res = train(tiny_generator, frozen_evaluator, examples[:8], examples[8:10], cfg(epochs=0))
    assert res.history == [] and res.steps == 0
    assert all(np.array_equal(before[k], p.data) for k, p in tiny_generator.params.items())


def test_max_steps_and_checkpoints(tmp_path, synthetic_small, tiny_generator, frozen_evaluator):
    _, _, examples = synthetic_small
    res = train(tiny_generator, frozen_evaluator, examples[:32], examples[32:36],
                cfg(epochs=5, max_steps=3, reward_mode="bleu_only"), checkpoint_dir=tmp_path)
    assert res.steps == 3 and len(res.history) == 1
    assert (tmp_path / "best.qgf").exists() and (tmp_path / "final.qgf").exists()
    assert res.best_epoch == 1


def test_empty_sets_rejected(synthetic_small, tiny_generator):
    _, _, examples = synthetic_small
    with pytest.raises(ValueError):
        train(tiny_generator, None, [], examples[:2], cfg(reward_mode="none"))


def test_warmup_ramps_learning_rate(synthetic_small, tiny_generator):
    _, _, examples = synthetic_small
    config = tiny_generator.config
    plain = train(init_generator(config), None, examples[:8], examples[8:10],
                  cfg(reward_mode="none", max_steps=1)).model
    warm = train(init_generator(config), None, examples[:8], examples[8:10],
                 cfg(reward_mode="none", max_steps=1, warmup_steps=10)).model
    start = init_generator(config).params["embed"].data
    d_plain = np.abs(plain.params["embed"].data - start).max()
    d_warm = np.abs(warm.params["embed"].data - start).max()
    assert d_warm == pytest.approx(d_plain / 10, rel=1e-3)


def test_dev_pass_keys(synthetic_small, tiny_generator, frozen_evaluator):
    _, _, examples = synthetic_small
    out = dev_pass(tiny_generator, frozen_evaluator, examples[:5], cfg())
    assert set(out) == {"dev_loss", "dev_l_base", "dev_corpus_bleu", "dev_mean_reward"}
    assert out["dev_loss"] <= out["dev_l_base"] + 1e-12


def test_token_accuracy_bounds(synthetic_small, tiny_generator):
    _, _, examples = synthetic_small
    assert 0.0 <= token_accuracy(tiny_generator, examples[:6]) <= 1.0


def test_history_round_trip(tmp_path):
    hist = [{"epoch": 1, "train_loss": 1.5, "dev_mean_reward": None}]
    write_history(hist, tmp_path / "h.jsonl")
    assert read_history(tmp_path / "h.jsonl") == hist


# ---------------------------------------------------------------- evaluation


def test_reference_decoder_scores_perfectly(synthetic_small, tiny_generator, frozen_evaluator):
    _, _, examples = synthetic_small
    report = evaluate(tiny_generator, frozen_evaluator, examples, cfg(),
                      decode_fn=lambda batch: [ex.reference for ex in batch])
    assert report["corpus_bleu"] == pytest.approx(100.0)
    assert report["mean_cosine"] == pytest.approx(1.0)
    assert report["mean_reward"] == pytest.approx(1.0)
    assert report["mean_match_score"] == pytest.approx(1.0)
    assert {"corpus_bleu", "mean_reward", "mean_match_score", "classes"} <= set(report)


def test_class_table(synthetic_small, tiny_generator, frozen_evaluator, tmp_path):
    _, _, examples = synthetic_small
    report = evaluate(tiny_generator, frozen_evaluator, examples, cfg())
    classes = report["classes"]
    assert set(classes) == {qc.value for qc in QuestionClass}
    assert math.isclose(sum(c["frequency"] for c in classes.values()), 1.0)
    assert sum(c["count"] for c in classes.values()) == len(examples)
    assert classes["Other"]["count"] == 0 and classes["Other"]["bleu"] is None
    write_report(report, tmp_path / "r.json")
    assert read_report(tmp_path / "r.json") == report


def test_evaluate_requires_frozen_evaluator(synthetic_small, tiny_generator, frozen_evaluator):
    _, _, examples = synthetic_small
    with pytest.raises(FrozenEvaluatorError):
        evaluate(tiny_generator, init_evaluator(frozen_evaluator.config), examples[:2], cfg())
    with pytest.raises(ValueError):
        evaluate(tiny_generator, frozen_evaluator, [], cfg())


def test_make_examples_fields(synthetic_small):
    triples, vocab, examples = synthetic_small
    assert len(examples) == len(triples)
    ex = examples[0]
    assert ex.id == triples[0].id
    assert len(ex.src.ids) <= 64 and len(ex.tgt.ids) <= 16
    assert make_examples(triples[:2], vocab, 64, 16) == examples[:2]
