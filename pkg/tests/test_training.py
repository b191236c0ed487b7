import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mctrans.data import build_vocab, collate, synth_generate
from mctrans.model import Model, ModelConfig
from mctrans.tensor import ConfigError, Tape, Tensor
from mctrans.training import (EarlyStopping, LossConfig, OptimizerState, PlateauScheduler,
                              TrainConfig, TrainingError, adam_step, anchoring_loss, batch_losses,
                              total_loss, train_loop, translation_loss, translation_loss_product,
                              xavier_init)


# -- translation loss -------------------------------------------------------

def test_perfect_logits_give_zero_loss():
    targets = np.array([4, 5, 2])
    logits = np.full((3, 6), -50.0)
    logits[np.arange(3), targets] = 50.0
    assert translation_loss(Tensor(logits), targets).item() < 1e-12


def test_uniform_logits_give_log_vocab_size():
    g = 17
    logits = Tensor(np.zeros((2, 5, g)))
    targets = np.array([[4, 5, 6, 2, 0], [7, 2, 0, 0, 0]])
    loss = translation_loss(logits, targets, targets != 0, normalization="token")
    assert abs(loss.item() - math.log(g)) < 1e-9


def test_sequence_normalization_divides_by_batch_size():
    logits = Tensor(np.zeros((2, 5, 8)))
    targets = np.array([[4, 5, 6, 2, 0], [7, 2, 0, 0, 0]])
    mask = targets != 0
    seq = translation_loss(logits, targets, mask, "sequence").item()
    tok = translation_loss(logits, targets, mask, "token").item()
    np.testing.assert_allclose(seq, 6 * math.log(8) / 2)
    np.testing.assert_allclose(seq / tok, 6 / 2)


def test_product_diagnostic():
    probs = np.eye(5)[[4, 1, 2]]
    assert translation_loss_product(probs, [4, 1, 2]) == 0.0
    assert translation_loss_product(np.full((2, 4), 0.25), [1, 2]) == pytest.approx(1 - 1 / 16)


def test_pad_only_target_is_rejected():
    with pytest.raises(ValueError):
        translation_loss(Tensor(np.zeros((1, 3, 5))), np.zeros((1, 3), dtype=int),
                         np.zeros((1, 3), dtype=bool))


# -- anchoring loss ---------------------------------------------------------

def test_hard_anchoring_saturated_is_zero():
    labels = np.array([0, 3, 1])
    logits = np.full((3, 4), -40.0)
    logits[np.arange(3), labels] = 40.0
    assert anchoring_loss(Tensor(logits), labels).item() < 1e-12


def test_soft_anchoring_at_its_own_prediction_is_entropy(rng):
    logits = rng.normal(size=(5, 7))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    entropy = -(p * np.log(p)).sum()
    got = anchoring_loss(Tensor(logits), p, mode="soft").item()
    assert abs(got - entropy) < 1e-9


def test_anchor_class_range_36(rng):
    logits = Tensor(rng.normal(size=(4, 36)))
    assert np.isfinite(anchoring_loss(logits, [0, 35, 10, 20]).item())
    with pytest.raises(IndexError):
        anchoring_loss(logits, [0, 36, 10, 20])


def test_soft_targets_must_be_distributions(rng):
    with pytest.raises(ValueError):
        anchoring_loss(Tensor(rng.normal(size=(2, 3))), np.full((2, 3), 0.5), mode="soft")


def test_anchoring_padding_is_ignored(rng):
    logits = rng.normal(size=(2, 4, 5))
    labels = np.array([[1, 2, 3, 99], [4, 0, 99, 99]])     # 99 sits on padding
    mask = labels != 99
    got = anchoring_loss(Tensor(logits), labels, mask).item()
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    want = -sum(logp[b, t, labels[b, t]] for b in range(2) for t in range(4) if mask[b, t]) / 2
    assert got == pytest.approx(want, abs=1e-12)


# -- total loss -------------------------------------------------------------

def test_total_loss_examples():
    cfg = LossConfig(lambda_t=1.0, lambda_a=0.15)
    assert total_loss(Tensor(2.0), [Tensor(1.0), Tensor(1.0)], cfg).item() == pytest.approx(2.3)
    assert total_loss(Tensor(2.0), [Tensor(5.0), None], LossConfig(lambda_a=0.0)).item() == 2.0
    assert total_loss(Tensor(0.0), [Tensor(0.0), Tensor(0.0)], cfg).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 10), st.lists(st.floats(0, 10), max_size=3))
def test_total_loss_is_linear_in_weights(lt, la, l_t, l_a):
    got = total_loss(Tensor(l_t), [Tensor(a) for a in l_a], LossConfig(lambda_t=lt, lambda_a=la)).item()
    assert got == pytest.approx(lt * l_t + la * sum(l_a), abs=1e-9)


def test_negative_weights_rejected():
    with pytest.raises(ConfigError):
        LossConfig(lambda_a=-0.1)


# -- Adam -------------------------------------------------------------------

def adam_once(theta, grad, **kw):
    t = Tensor(np.array(theta, dtype=np.float64), requires_grad=True)
    t.grad = np.array(grad, dtype=np.float64)
    state = OptimizerState(**kw)
    adam_step({"p": t}, state)
    return t.data, state


def test_adam_zero_gradient_without_decay_is_a_no_op():
    data, _ = adam_once([0.5, -2.0], [0.0, 0.0], weight_decay=0.0)
    np.testing.assert_array_equal(data, [0.5, -2.0])


def test_adam_first_step_moves_by_lr():
    data, _ = adam_once([1.0], [0.37], weight_decay=0.0)
    assert data[0] == pytest.approx(1.0 - 1e-3, abs=1e-9)
    data, _ = adam_once([1.0], [-12.0], weight_decay=0.0)
    assert data[0] == pytest.approx(1.0 + 1e-3, abs=1e-9)


def test_adam_weight_decay_feeds_the_moments():
    data, state = adam_once([1.0], [0.0], weight_decay=1e-3)
    np.testing.assert_allclose(state.m["p"], [(1 - 0.9) * 1e-3])
    np.testing.assert_allclose(state.v["p"], [(1 - 0.998) * 1e-6])
    assert data[0] == pytest.approx(1.0 - 1e-3 * 1e-3 / (1e-3 + 1e-8), rel=1e-12)


def test_adam_shape_mismatch():
    t = Tensor(np.zeros(3), requires_grad=True)
    t.grad = np.zeros(4)
    with pytest.raises(ValueError):
        adam_step({"p": t}, OptimizerState())


# -- Xavier initialization --------------------------------------------------

def test_xavier_bounds_mean_and_determinism():
    w = xavier_init((200, 300), seed=5)
    bound = math.sqrt(6 / 500)
    assert np.abs(w).max() <= bound
    sigma = bound / math.sqrt(3)
    assert abs(w.mean()) < 3 * sigma / math.sqrt(w.size)
    assert w.tobytes() == xavier_init((200, 300), seed=5).tobytes()


def test_xavier_fallback_for_other_ranks():
    w = xavier_init((12, 3, 3), seed=0)
    assert np.abs(w).max() <= math.sqrt(3 / 12)


# -- schedule ---------------------------------------------------------------

def test_plateau_scheduler_halves_after_patience():
    state = OptimizerState(lr=1e-3)
    sched = PlateauScheduler(state, patience=3, factor=0.5)
    sched.step(10.0)
    for _ in range(2):
        sched.step(9.0)
    assert state.lr == 1e-3
    sched.step(10.0)
    assert state.lr == 5e-4


def test_early_stopping_counter():
    stop = EarlyStopping(patience=4)
    assert not stop.step(1.0)
    assert [stop.step(1.0) for _ in range(4)] == [False, False, False, True]


# -- training loop ----------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_task():
    corpus = synth_generate(40, seed=3)
    vocab = build_vocab(corpus)
    cfg = ModelConfig(channel_dims=[16, 16], vocab_size=len(vocab), d_model=16, d_ff=32,
                      enc_layers=1, dec_layers=1, anchor_classes=[12, 0])
    return corpus, vocab, cfg


def test_overfit_one_batch(tiny_task):
    corpus, vocab, cfg = tiny_task
    model = Model.build(cfg, 0)
    batch = collate(corpus[:8], vocab, np.float64)
    state = OptimizerState(lr=3e-3)
    losses = []
    for _ in range(200):
        model.params.zero_grad()
        with Tape() as tape:
            loss, _, _ = batch_losses(model, batch, LossConfig(), "train")
        tape.backward(loss, model.params.values())
        adam_step(model.params, state)
        losses.append(loss.item())
    assert losses[-1] < 0.2 * losses[0]
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    warm = 30
    assert np.all(np.diff(smooth[warm:]) <= 1e-9)


def test_early_stop_after_exactly_e_flat_evaluations(tiny_task):
    corpus, vocab, cfg = tiny_task
    calls = []

    def constant(_model):
        calls.append(1)
        return 12.5, 30.0

    e = 4
    result = train_loop(Model.build(cfg, 0), corpus, corpus[:4], vocab, LossConfig(),
                        TrainConfig(batch_size=8, max_steps=500, eval_every=2, early_stop=e,
                                    log_every=1000), evaluator=constant)
    assert result.stopped_early
    assert len(calls) == 1 + e
    assert result.steps == 2 * (1 + e)
    assert result.best_step == 2
    assert any(line.startswith("event=early_stop") for line in result.log)


def test_loss_trace_is_deterministic(tiny_task):
    corpus, vocab, cfg = tiny_task
    traces = []
    for _ in range(2):
        r = train_loop(Model.build(cfg, 11), corpus, corpus[:4], vocab, LossConfig(),
                       TrainConfig(batch_size=8, max_steps=12, eval_every=6, seed=11))
        traces.append(r.loss_trace)
    assert len(traces[0]) == 12
    assert traces[0] == traces[1]


def test_log_lines_are_key_value(tiny_task):
    corpus, vocab, cfg = tiny_task
    r = train_loop(Model.build(cfg, 0), corpus, corpus[:4], vocab, LossConfig(),
                   TrainConfig(batch_size=8, max_steps=4, eval_every=4, log_every=2))
    for line in r.log:
        fields = dict(kv.split("=", 1) for kv in line.split())
        assert "step" in fields
    assert any("bleu4" in line and "rougeL" in line for line in r.log)


def test_non_finite_loss_aborts(tiny_task):
    corpus, vocab, cfg = tiny_task
    model = Model.build(cfg, 0)
    model.params["out.W"].data[...] = 1e305
    with pytest.raises(TrainingError):
        train_loop(model, corpus, corpus[:4], vocab, LossConfig(),
                   TrainConfig(batch_size=8, max_steps=3, eval_every=3))


def test_empty_corpus_is_rejected(tiny_task):
    _, vocab, cfg = tiny_task
    with pytest.raises(ValueError):
        train_loop(Model.build(cfg, 0), [], [], vocab, LossConfig(), TrainConfig())
