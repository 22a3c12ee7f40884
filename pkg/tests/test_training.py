import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_seq
from tsdr import autodiff as ad
from tsdr import training
from tsdr.autodiff import Matrix, Tape
from tsdr.estimators import bce_error, dr_risk
from tsdr.models import make_batch
from tsdr.pipeline import prepare_result
from tsdr.synth import SynthConfig, generate_dataset
from tsdr.training import (
    TrainConfig,
    TrainingDivergence,
    bce_grid,
    dr_loss,
    imputation_loss,
    init_bundle,
    joint_train,
    naive_loss,
    naive_train,
    propensity_loss,
)

FAST = TrainConfig(embed_dim=16, batch_size=8, max_epochs=3, seed=4)


@pytest.fixture(scope="module")
def small():
    res = generate_dataset(SynthConfig(n_students=60, n_questions=12, n_concepts=4, steps_per_student=20, gamma=0.6, seed=2))
    return prepare_result(res, FAST)


def _grid(seed, shape=(6, 4)):
    r = np.random.default_rng(seed)
    o = r.integers(0, 2, shape).astype(float)
    o[0, 0] = 1
    return r.uniform(0, 2, shape), r.uniform(0, 2, shape), r.uniform(0.05, 1, shape), o


def test_config_validation():
    for bad in (dict(lam=-1), dict(early_stop_patience=0), dict(ts_target="x"), dict(ts_target="none", lam=0.5)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    TrainConfig(ts_target="none", lam=0.0).validate()


def test_propensity_loss_examples():
    o = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert propensity_loss(o, o).item() == pytest.approx(0.0, abs=1e-6)
    assert propensity_loss(o, np.full((2, 2), 0.5)).item() == pytest.approx(math.log(2), abs=1e-15)


@given(seed=st.integers(0, 10_000))
def test_propensity_loss_is_bce_mean(seed):
    r = np.random.default_rng(seed)
    o, p = r.integers(0, 2, (5, 3)).astype(float), r.uniform(0.01, 0.99, (5, 3))
    assert propensity_loss(o, p).item() == pytest.approx(bce_error(o, p).mean(), abs=1e-12)


def test_imputation_loss_perfect_is_zero():
    e, _, p_hat, o = _grid(1)
    states = [Matrix(np.ones((1, 3)))] * 4
    batch = make_batch([make_seq([0, 1, 2, 3], [1, 1, 0, 1])], 4)
    assert imputation_loss(e, e, p_hat, o, states, 1.0, batch).item() == pytest.approx(0.0, abs=1e-15)


@given(seed=st.integers(0, 10_000))
def test_imputation_loss_without_smoothness_is_ips_mse(seed):
    e, e_hat, p_hat, o = _grid(seed)
    ref = np.sum(o * (e_hat - e) ** 2 / p_hat) / o.sum()
    assert imputation_loss(e, e_hat, p_hat, o, lam=0.0).item() == pytest.approx(ref, abs=1e-12)


def test_imputation_loss_single_entry():
    o = np.array([[1.0, 0.0]])
    val = imputation_loss(np.array([[1.0, 5.0]]), np.array([[0.0, 0.0]]), np.array([[0.5, 0.5]]), o).item()
    assert val == pytest.approx(2.0, abs=1e-15)


def test_imputation_loss_skips_empty_batch(caplog):
    with caplog.at_level(logging.WARNING):
        assert imputation_loss(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2))) is None
    assert "no observed" in caplog.text


def test_dr_loss_examples():
    e, e_hat, p_hat, o = _grid(3)
    assert dr_loss(e, e, p_hat, o).item() == pytest.approx(e.mean(), abs=1e-14)
    ones = np.ones_like(e)
    assert dr_loss(e, e_hat, ones, ones).item() == pytest.approx(e.mean(), abs=1e-14)


@given(seed=st.integers(0, 10_000))
def test_dr_loss_matches_estimator(seed):
    e, e_hat, p_hat, o = _grid(seed)
    assert dr_loss(e, e_hat, p_hat, o).item() == pytest.approx(dr_risk(e, e_hat, p_hat, o), abs=1e-12)


def test_concept_subsample_averages_selected_columns():
    e, e_hat, p_hat, o = _grid(5)
    cols = [1, 3]
    sub = dr_loss(e, e_hat, p_hat, o, columns=cols).item()
    assert sub == pytest.approx(dr_risk(e[:, cols], e_hat[:, cols], p_hat[:, cols], o[:, cols]), abs=1e-12)


def _grads(loss_fn, bundle):
    with Tape() as t:
        loss = loss_fn()
    g = t.backward(loss)
    return {k: g[p] for k, p in bundle.params().items()}


def test_gradient_isolation(small):
    bundle = init_bundle(4, FAST)
    batch = make_batch(small.train[:6], 4)
    e = np.random.default_rng(0).uniform(0, 2, batch.obs.shape)
    p_hat = np.full(batch.obs.shape, 0.4)

    def imp():
        e_hat, states = bundle.imputation.forward(batch)
        return imputation_loss(e, e_hat, p_hat, batch.obs, states, 1.0, batch)

    def dr():
        e_hat = bundle.imputation.forward(batch)[0].data
        p = bundle.propensity.clip(bundle.propensity.raw(batch).data)
        return dr_loss(bce_grid(bundle.backbone.forward(batch)[0], batch.labels), e_hat, p, batch.obs, batch.valid_rows)

    g = _grads(imp, bundle)
    assert all(not np.any(v) for k, v in g.items() if not k.startswith("imp."))
    assert any(np.any(v) for k, v in g.items() if k.startswith("imp."))
    g = _grads(dr, bundle)
    assert all(not np.any(v) for k, v in g.items() if k.startswith(("imp.", "prop.")))
    assert any(np.any(v) for k, v in g.items() if k.startswith("kt."))


def test_naive_gradient_equals_dr_when_fully_observed(small):
    bundle = init_bundle(4, FAST)
    seqs = [s for s in small.train if s.has_grid][:5]
    batch = make_batch(seqs, 4)
    # full grid: every valid entry observed with its counterfactual response
    o = np.repeat(batch.valid_rows[:, None], 4, axis=1).astype(float)
    labels = batch.cf_response

    def naive():
        return naive_loss(bce_grid(bundle.backbone.forward(batch)[0], labels), o)

    def dr():
        r_hat = bundle.backbone.forward(batch)[0]
        e = bce_error(labels, r_hat.data)
        return dr_loss(bce_grid(r_hat, labels), e, np.ones_like(o), o, batch.valid_rows)

    gn, gd = _grads(naive, bundle), _grads(dr, bundle)
    for k in gn:
        np.testing.assert_allclose(gn[k], gd[k], rtol=1e-10, atol=1e-14)


def test_zero_epochs_returns_initial_models(small):
    cfg = FAST.replace(max_epochs=0)
    bundle, hist = joint_train(small.train, small.val, 4, cfg)
    ref = init_bundle(4, cfg)
    assert hist.records == []
    for k, p in ref.params().items():
        np.testing.assert_array_equal(bundle.params()[k].data, p.data)
    bb, hist = naive_train(small.train, small.val, 4, cfg)
    assert hist.records == []


def test_training_deterministic(small):
    a = joint_train(small.train, small.val, 4, FAST)[1]
    b = joint_train(small.train, small.val, 4, FAST)[1]
    assert a.records == b.records and a.final == b.final
    assert naive_train(small.train, small.val, 4, FAST)[1].records == naive_train(small.train, small.val, 4, FAST)[1].records


def test_history_has_all_losses(small):
    hist = joint_train(small.train, small.val, 4, FAST)[1]
    assert [r["epoch"] for r in hist.records] == [0, 1, 2, 3]
    for rec in hist.records[1:]:
        assert {"loss_prop", "loss_imp", "loss_dr", "val_auc", "val_acc", "val_rmse"} <= set(rec)
    assert hist.best_epoch is not None and hist.stop_reason in ("max_epochs", "early_stop")


def test_naive_loss_decreases(small):
    hist = naive_train(small.train, small.val, 4, FAST.replace(max_epochs=5, lr=0.01))[1]
    losses = [r["loss_naive"] for r in hist.records[1:]]
    assert losses[-1] < losses[0]


def test_dr_training_improves_validation_auc_on_heavy_skipping():
    res = generate_dataset(SynthConfig(n_students=120, n_questions=20, n_concepts=5, steps_per_student=40, gamma=0.999, seed=6))
    cfg = TrainConfig(embed_dim=32, batch_size=16, max_epochs=8, lr=0.005, seed=1)
    data = prepare_result(res, cfg)
    hist = joint_train(data.train, data.val, 5, cfg)[1]
    assert hist.best_metric > hist.records[0]["val_auc"]


def test_smoothness_shrinks_imputation_steps(small):
    cfg = FAST.replace(max_epochs=6, lr=0.01, early_stop_patience=50)
    smooth = joint_train(small.train, small.val, 4, cfg.replace(lam=1.0))[1].final["imp_mean_sq_step"]
    rough = joint_train(small.train, small.val, 4, cfg.replace(lam=0.0))[1].final["imp_mean_sq_step"]
    assert smooth < rough


def test_early_stopping_within_patience(small):
    cfg = FAST.replace(max_epochs=40, early_stop_patience=2, lr=0.02)
    hist = naive_train(small.train, small.val, 4, cfg)[1]
    last = hist.records[-1]["epoch"]
    assert last - hist.best_epoch <= 2
    if hist.stop_reason == "early_stop":
        assert last - hist.best_epoch == 2


def test_best_checkpoint_is_restored(small):
    cfg = FAST.replace(max_epochs=6, lr=0.02)
    snaps = {}
    bundle, hist = joint_train(
        small.train, small.val, 4, cfg, on_epoch=lambda ep, b, rec: snaps.__setitem__(ep, b.backbone.snapshot())
    )
    for k, v in snaps[hist.best_epoch].items():
        np.testing.assert_array_equal(bundle.backbone.snapshot()[k], v)


def test_divergence_names_phase(small, monkeypatch):
    def bad(*a, **kw):
        return ad.scale(ad.sum_all(dr_loss_orig(*a, **kw)), float("nan"))

    dr_loss_orig = training.dr_loss
    monkeypatch.setattr(training, "dr_loss", bad)
    with pytest.raises(TrainingDivergence, match="dr"):
        joint_train(small.train, small.val, 4, FAST)


@pytest.mark.parametrize("variant", [dict(joint_learning=False, pretrain_epochs=2), dict(ts_target="backbone"), dict(propensity_conditioning="backbone"), dict(concept_sample=2)])
def test_ablation_variants_run(small, variant):
    hist = joint_train(small.train, small.val, 4, FAST.replace(max_epochs=1, **variant))[1]
    assert len(hist.records) == 2 and math.isfinite(hist.records[-1]["loss_dr"])
