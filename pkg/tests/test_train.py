import math

import numpy as np
import pytest

from conftest import make_model
from entitynlm import tensor as T
from entitynlm import train as train_mod
from entitynlm.corpus import EncodedDocument, SynthSpec, build_vocab, encode_corpus, preprocess, synth_corpus
from entitynlm.entity_state import OUTSIDE, EntityAnnotation as A
from entitynlm.errors import ConfigurationError, NumericalError
from entitynlm.model import Document, EntityNLM, ModelConfig
from entitynlm.train import (
    OptimizerState,
    TrainConfig,
    clip_gradients,
    joint_perplexity,
    load_train_config,
    make_optimizer,
    select_model,
    train,
    train_epoch,
)

TOY = TrainConfig(optimizer="adam", lr=0.01, dropout=0.0, d_x=8, d_h=8, epochs=3, off_grid=True)


def toy_corpus(n=6, seed=0):
    docs = [preprocess(d) for d in synth_corpus(SynthSpec(num_docs=n, vocab_size=60, mean_entities=2.0), seed)]
    vocab = build_vocab(docs, min_count=1)
    return vocab, encode_corpus(docs, vocab)


def snapshot(model):
    return {k: p.data.copy() for k, p in model.parameters().items()}


def test_config_grid_and_defaults():
    assert TrainConfig(optimizer="adagrad").lr == 0.1
    assert TrainConfig().lr == 0.001
    with pytest.raises(ConfigurationError, match="off grid"):
        TrainConfig(lr=0.5)
    with pytest.raises(ConfigurationError, match="dropout"):
        TrainConfig(dropout=0.3)
    with pytest.raises(ConfigurationError, match="d_h"):
        TrainConfig(d_h=20)
    TrainConfig(d_h=20, d_x=20, off_grid=True)


def test_config_file_overrides_and_unknown_keys(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# toy\noptimizer = adagrad\nd_h = 64\nd_x=64\n")
    cfg = load_train_config(p, ["d_h=48", "d_x=48", "epochs=2"])
    assert (cfg.optimizer, cfg.d_h, cfg.d_x, cfg.epochs, cfg.lr) == ("adagrad", 48, 48, 2, 0.1)
    p.write_text("bogus = 1\n")
    with pytest.raises(ConfigurationError, match="unknown config key"):
        load_train_config(p)
    p.write_text('{"off_grid": true, "lr": 0.02}')
    assert load_train_config(p).lr == 0.02
    with pytest.raises(ConfigurationError, match="expected int"):
        load_train_config(None, ["epochs=many"])


def test_adagrad_steps_on_scalar():
    p = T.parameter(np.array([1.0]))
    opt = OptimizerState("adagrad", 0.1)
    g = 0.3
    before = p.data.copy()
    p.grad = np.array([g])
    opt.update({"p": p})
    step1 = before - p.data
    before = p.data.copy()
    p.grad = np.array([g])
    opt.update({"p": p})
    step2 = before - p.data
    assert step1[0] == pytest.approx(0.1 * g / math.sqrt(g * g), rel=1e-15)
    assert step2[0] == pytest.approx(0.1 * g / math.sqrt(2 * g * g), rel=1e-15)


def test_adam_first_step_is_lr_sign():
    p = T.parameter(np.array([0.0, 0.0]))
    opt = OptimizerState("adam", 0.01)
    p.grad = np.array([2.0, -0.5])
    opt.update({"p": p})
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)


def test_clip_gradients():
    a, b = T.parameter(np.zeros(2)), T.parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_gradients({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    assert math.hypot(*a.grad, *b.grad) == pytest.approx(1.0)
    a.grad, b.grad = np.array([0.3, 0.0]), np.array([0.4])
    clip_gradients({"a": a, "b": b}, 1.0)
    assert b.grad[0] == 0.4


def test_zero_lr_leaves_parameters_bit_identical():
    vocab, docs = toy_corpus()
    cfg = TrainConfig(optimizer="adam", lr=0.0, dropout=0.2, d_x=8, d_h=8, off_grid=True)
    model = train_mod.build_model(cfg, vocab)
    before = snapshot(model)
    train_epoch(model, make_optimizer(cfg), docs, cfg, np.random.default_rng(0))
    for k, v in snapshot(model).items():
        assert np.array_equal(v, before[k]), k


def test_overfit_single_document():
    model = make_model(vocab_size=6, d=6, l_max=3)
    doc = Document([1, 2, 3], [A(1, 1, 2), A(1, 1, 1), OUTSIDE])
    cfg = TrainConfig(optimizer="adam", lr=0.01, dropout=0.0, d_x=6, d_h=6, off_grid=True)
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(0)
    objectives = [train_epoch(model, opt, [doc], cfg, rng) for _ in range(12)]
    assert all(b > a for a, b in zip(objectives, objectives[1:]))


def test_single_small_step_decreases_loss():
    model = make_model(vocab_size=6, d=4, l_max=3, sigma=0.0)
    doc = Document([0, 1, 2, 3, 4, 5], [A(1, 1, 2), A(1, 1, 1), OUTSIDE, A(1, 2, 1), A(1, 1, 1), OUTSIDE])
    with T.Tape() as tape:
        lp, _ = model.doc_log_prob(doc)
        loss = -lp
    tape.backward(loss)
    for p in model.parameters().values():
        p.data -= 1e-4 * p.grad
    after, _ = model.doc_log_prob(doc)
    assert after.item() > lp.item()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_document():
    vocab, docs = toy_corpus()
    model = train_mod.build_model(TOY, vocab)
    model.cfsm.b_word.data[docs[0].words[0]] = np.inf
    bad = EncodedDocument("doc-bad", docs[0].words, docs[0].annotations, docs[0].sentence_ids)
    with pytest.raises(NumericalError, match="doc-bad"):
        train_epoch(model, make_optimizer(TOY), [bad], TOY, np.random.default_rng(0))


def test_training_is_deterministic():
    vocab, docs = toy_corpus()
    a = train(TOY, vocab, docs[:4], docs[4:]).model
    b = train(TOY, vocab, docs[:4], docs[4:]).model
    for k, v in snapshot(a).items():
        assert np.array_equal(v, snapshot(b)[k]), k


def test_dev_evaluation_deterministic_with_dropout():
    vocab, docs = toy_corpus()
    cfg = TrainConfig(optimizer="adam", lr=0.01, dropout=0.5, d_x=8, d_h=8, off_grid=True)
    model = train_mod.build_model(cfg, vocab)
    assert joint_perplexity(model, docs) == joint_perplexity(model, docs)


def test_joint_perplexity_hand_fixture():
    # zero weights: p(r=0) = 1/2, p(class) = 1/2, p(word | class) = 1/2 -> 1/8 per token
    model = EntityNLM(ModelConfig(4, d_x=3, d_h=3, n_classes=2), np.array([0, 0, 1, 1]), seed=None)
    doc = Document([0, 3], [OUTSIDE, OUTSIDE])
    assert joint_perplexity(model, [doc]) == pytest.approx(8.0, rel=1e-12)


def test_select_model_rules():
    vocab, docs = toy_corpus()
    a = train_mod.build_model(TOY, vocab)
    assert select_model(docs, [a, a.copy()])[0] == 0
    better = a.copy()
    opt = make_optimizer(TOY)
    for _ in range(3):
        train_epoch(better, opt, docs, TOY, np.random.default_rng(1))
    best, ppls = select_model(docs, [a, better])
    assert best == 1 and ppls[1] < ppls[0]
    with pytest.raises(ConfigurationError):
        select_model([], [a])


def test_early_stopping_patience(monkeypatch):
    vocab, docs = toy_corpus()
    values = iter([5.0, 4.0, 4.5, 4.6, 4.7, 1.0, 1.0])
    monkeypatch.setattr(train_mod, "joint_perplexity", lambda m, d: next(values))
    cfg = TrainConfig(optimizer="adam", lr=0.01, dropout=0.0, d_x=8, d_h=8, epochs=7, patience=3, off_grid=True)
    result = train(cfg, vocab, docs[:2], docs[2:3])
    assert [r.epoch for r in result.history] == [1, 2, 3, 4, 5]
    assert result.best_epoch == 2
