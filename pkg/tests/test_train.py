import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
import synthetic
from bhavnet.data import EmbeddingTable, LabeledPair, VocabularyError
from bhavnet.model import HyperParams, ModelParams, load_checkpoint
from bhavnet.tensor import InvalidInputError, Rng, Tensor
from bhavnet.train import (
    METRIC_COLUMNS,
    LanguageData,
    TrainingError,
    evaluate,
    evaluate_predictions,
    predict,
    sgd_step,
    train,
)

from conftest import TINY


# -- optimizer ----------------------------------------------------------------


def _one_param():
    hp = HyperParams(d=1, d_prime=1, fused_dim=1, H=1, L_layers=0, hidden=1)
    return ModelParams.init(hp, Rng(0))


def test_sgd_scalar_example():
    p = _one_param()
    p["W_syn"].data = np.array([[1.0]])
    grads = {n: np.zeros(p[n].shape) for n in p.names()}
    grads["W_syn"] = np.array([[2.0]])
    sgd_step(p, grads, 0.1)
    assert p["W_syn"].data[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_grads_and_zero_lr(tiny_params, rng):
    before = tiny_params.copy()
    sgd_step(tiny_params, [np.zeros(t.shape) for t in tiny_params], 0.5)
    sgd_step(tiny_params, [rng.normal(size=t.shape) for t in tiny_params], 0.0)
    assert tiny_params.equal(before)


def test_sgd_scaling_invariance(tiny_params, rng):
    grads = [rng.normal(size=t.shape) for t in tiny_params]
    a, b = tiny_params.copy(), tiny_params.copy()
    sgd_step(a, grads, 0.1)
    sgd_step(b, [g / 8.0 for g in grads], 0.8)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.data, y.data, rtol=0, atol=1e-12)


def test_sgd_shape_mismatch(tiny_params):
    grads = [np.zeros(t.shape) for t in tiny_params]
    grads[0] = np.zeros((1, 1))
    with pytest.raises(InvalidInputError):
        sgd_step(tiny_params, grads, 0.1)


# -- metrics ------------------------------------------------------------------


def test_worked_metric_example():
    r = evaluate_predictions([1, 1, 0, 0], [1, 0, 0, 0])
    assert (r.tp, r.fp, r.tn, r.fn) == (1, 1, 2, 0)
    assert r.antonym.precision == 0.5 and r.antonym.recall == 1.0
    assert r.antonym.f1 == pytest.approx(2 / 3, abs=1e-15)
    assert r.synonym.precision == 1.0 and r.synonym.recall == pytest.approx(2 / 3, abs=1e-15)
    assert r.synonym.f1 == pytest.approx(0.8, abs=1e-15)
    assert r.macro_f1 == pytest.approx(0.7333, abs=1e-4)
    assert r.accuracy == 0.75


def test_perfect_predictions():
    r = evaluate_predictions([0, 1, 1, 0], [0, 1, 1, 0])
    assert r.macro_f1 == 1.0 and r.accuracy == 1.0 and r.zero_division == 0


def test_all_ones_on_balanced_data():
    r = evaluate_predictions([1] * 6, [0, 1] * 3)
    assert r.synonym.f1 == 0.0
    assert r.macro_f1 == pytest.approx(0.5 * r.antonym.f1, abs=1e-15)
    assert r.antonym.f1 == pytest.approx(2 / 3, abs=1e-15)


def test_zero_division_is_zero_not_nan(caplog):
    r = evaluate_predictions([0, 0], [0, 0])
    assert r.antonym.precision == 0.0 and r.antonym.f1 == 0.0
    assert r.zero_division > 0 and not np.isnan(r.macro_f1)
    assert "zero denominator" in caplog.text


def test_empty_evaluation_is_an_error(tiny_params, word_table):
    with pytest.raises(InvalidInputError):
        evaluate([], word_table, tiny_params)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_metrics_match_brute_force(pairs):
    pred, gold = zip(*pairs)
    r = evaluate_predictions(pred, gold)
    tp, fp, tn, fn = oracles.confusion(pred, gold)
    assert (r.tp, r.fp, r.tn, r.fn) == (tp, fp, tn, fn)
    p1, r1, f1 = oracles.f1_from_counts(tp, fp, fn)
    p0, r0, f0 = oracles.f1_from_counts(tn, fn, fp)
    assert (r.antonym.precision, r.antonym.recall, r.antonym.f1) == (p1, r1, f1)
    assert (r.synonym.precision, r.synonym.recall, r.synonym.f1) == (p0, r0, f0)
    assert r.macro_f1 == (f0 + f1) / 2 and r.accuracy == (tp + tn) / len(pred)


# -- prediction ---------------------------------------------------------------


def test_zero_classifier_predicts_half(tiny_hp, word_table):
    p = ModelParams.init(tiny_hp, Rng(0))
    for name in ("W_2", "b_2"):
        p[name].data = np.zeros(p[name].shape)
    out = predict("hot", "cold", "en", word_table, p)
    assert out.prob == 0.5 and out.label == 1
    assert len(out.line().split()) == 4


def test_predict_oov_names_token(tiny_params, word_table):
    with pytest.raises(VocabularyError) as err:
        predict("hot", "lukewarm", "en", word_table, tiny_params)
    assert err.value.token == "lukewarm"


# -- training loop ------------------------------------------------------------


def _tiny_run(tiny_task, **kw):
    pairs, table = tiny_task
    hp = HyperParams(**{**TINY, "batch_size": 4, **kw})
    return train({"en": LanguageData(pairs)}, {"en": table}, hp, epochs=kw.pop("epochs", None))


def test_zero_epochs_leaves_initialization(tiny_task):
    pairs, table = tiny_task
    hp = HyperParams(**TINY)
    state = train({"en": LanguageData(pairs)}, {"en": table}, hp, epochs=0)
    assert state.params.equal(ModelParams.init(hp, Rng(hp.seed).stream("init")))
    assert state.loss_trace == []


def test_one_batch_one_step(tiny_task):
    pairs, table = tiny_task
    hp = HyperParams(**TINY, batch_size=4)
    state = train({"en": LanguageData(pairs)}, {"en": table}, hp, epochs=1)
    assert len(state.loss_trace) == 1
    assert not state.params.equal(ModelParams.init(hp, Rng(hp.seed).stream("init")))


def test_trace_length_is_epochs_times_batches():
    pairs, table = synthetic.make_task(3, 40, 10, 10).train, synthetic.make_task(3, 40, 10, 10).table
    hp = HyperParams(d=32, batch_size=16)
    state = train({"en": LanguageData(pairs)}, {"en": table}, hp, epochs=3)
    assert state.batches_per_epoch == [3, 3, 3] and len(state.loss_trace) == 9


def test_two_languages_round_robin():
    a = synthetic.make_task(1, 20, 4, 4)
    b_pairs = [LabeledPair(p.w1, p.w2, p.label, "xx") for p in synthetic.make_task(2, 12, 4, 4).train]
    b_table = synthetic.make_task(2, 12, 4, 4).table
    hp = HyperParams(d=32, batch_size=4)
    state = train({"en": LanguageData(a.train), "xx": LanguageData(b_pairs)}, {"en": a.table, "xx": b_table}, hp, epochs=2)
    assert state.batches_per_epoch == [5 + 3] * 2


def test_loss_strictly_decreases_on_synthetic_task():
    task = synthetic.make_task()
    state = train({"en": LanguageData(task.train)}, {"en": task.table}, HyperParams(d=synthetic.DIM), epochs=10)
    losses = state.epoch_losses
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_training_is_deterministic(tiny_task):
    a = _tiny_run(tiny_task, batch_size=2, epochs=3)
    b = _tiny_run(tiny_task, batch_size=2, epochs=3)
    assert a.loss_trace == b.loss_trace
    assert a.params.equal(b.params)


def test_non_finite_loss_aborts_with_batch(tiny_task):
    pairs, table = tiny_task
    hp = HyperParams(**TINY)
    params = ModelParams.init(hp, Rng(0))
    params["b_2"].data = np.array([np.nan])
    with pytest.raises(TrainingError, match="non-finite"):
        train({"en": LanguageData(pairs)}, {"en": table}, hp, epochs=1, params=params)


def test_dimension_mismatch_is_config_error(tiny_task):
    from bhavnet.tensor import InvalidConfigError

    pairs, table = tiny_task
    with pytest.raises(InvalidConfigError):
        train({"en": LanguageData(pairs)}, {"en": table}, HyperParams(d=16), epochs=1)


def test_run_directory_and_best_checkpoint(tmp_path):
    task = synthetic.make_task(5, 60, 20, 20)
    hp = HyperParams(d=32, batch_size=16, patience=2)
    state = train({"en": LanguageData(task.train, task.dev)}, {"en": task.table}, hp, epochs=6, run_dir=tmp_path)
    assert json.loads((tmp_path / "config.json").read_text()) == hp.to_dict()
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == METRIC_COLUMNS
    assert {r[1] for r in rows[1:]} == {"train", "dev"}
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["epochs_completed"] == state.epoch
    loaded, _ = load_checkpoint(tmp_path / "checkpoints" / "best.ckpt")
    assert evaluate(task.dev, task.table, loaded).macro_f1 == state.best_macro_f1
    assert (tmp_path / "checkpoints" / "last.ckpt").exists()


def test_trained_model_flags_antonym_pair():
    task = synthetic.make_task()
    state = train({"en": LanguageData(task.train, task.dev)}, {"en": task.table}, HyperParams(d=32), epochs=20)
    ant = next(p for p in task.test if p.label == 1)
    syn = next(p for p in task.test if p.label == 0)
    assert predict(ant.w1, ant.w2, "en", task.table, state.best_params).label == 1
    assert predict(syn.w1, syn.w2, "en", task.table, state.best_params).label == 0
