"""Losses and training loops for the naive and doubly robust KT objectives.

One joint mini-batch step runs three phases in a fixed order:

1. imputation model: IPS-weighted squared error against the backbone's
   current per-step errors plus the latent smoothness penalty;
2. propensity model: BCE of the observation grid (unlogged concepts are
   negatives);
3. backbone: the DR loss over the full step x concept grid, with imputed
   errors and propensities recomputed from the freshly updated auxiliaries
   and held constant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Matrix, Tape, adam_step
from .data import KTSequence
from .estimators import bce_error
from .metrics import SingleClassError, evaluate, EvalBatch
from .models import (
    Batch,
    ImputationModel,
    KTBackbone,
    ModelBundle,
    PropensityModel,
    make_batch,
    trajectory_penalty,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "TrainingDivergence",
    "LAMBDA_GRID",
    "bce_grid",
    "propensity_loss",
    "imputation_loss",
    "dr_loss",
    "naive_loss",
    "joint_train",
    "naive_train",
    "init_bundle",
    "predict_rows",
]

LAMBDA_GRID = (0.1, 0.3, 0.5, 0.7, 1.0, 2.0)
TS_TARGETS = ("imputation", "backbone", "none")


class TrainingDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 64
    embed_dim: int = 64
    dropout: float = 0.05
    seed: int = 42
    max_epochs: int = 50
    early_stop_patience: int = 15
    lam: float = 0.5
    joint_learning: bool = True
    ts_target: str = "imputation"
    p_min: float = 0.05
    propensity_conditioning: str = "own"
    concept_sample: int = 0
    imp_steps: int = 1
    prop_steps: int = 1
    pretrain_epochs: int = 20
    stop_metric: str = "auc"
    max_len: int = 50
    n_folds: int = 5
    fold: int = 0
    val_frac: float = 0.1

    def validate(self) -> None:
        errs = []
        if self.lam < 0:
            errs.append("lambda must be >= 0")
        if self.early_stop_patience < 1:
            errs.append("early_stop_patience must be >= 1")
        if self.lr <= 0:
            errs.append("lr must be > 0")
        if self.batch_size < 1 or self.embed_dim < 1:
            errs.append("batch_size and embed_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            errs.append("dropout must be in [0, 1)")
        if self.ts_target not in TS_TARGETS:
            errs.append(f"ts_target must be one of {TS_TARGETS}")
        if self.ts_target == "none" and self.lam != 0:
            errs.append("ts_target=none requires lambda=0")
        if not 0.0 < self.p_min <= 1.0:
            errs.append("p_min must be in (0, 1]")
        if self.propensity_conditioning not in ("own", "backbone"):
            errs.append("propensity_conditioning must be 'own' or 'backbone'")
        if self.stop_metric not in ("auc", "acc", "rmse"):
            errs.append("stop_metric must be auc, acc or rmse")
        if self.max_epochs < 0 or self.concept_sample < 0:
            errs.append("max_epochs and concept_sample must be >= 0")
        if self.imp_steps < 1 or self.prop_steps < 1:
            errs.append("auxiliary step counts must be >= 1")
        if errs:
            raise ValueError("invalid TrainConfig: " + "; ".join(errs))

    def replace(self, **kw) -> "TrainConfig":
        vals = asdict(self)
        vals.update(kw)
        return TrainConfig(**vals)


@dataclass
class TrainHistory:
    mode: str
    config: dict
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None
    stop_reason: str | None = None
    final: dict = field(default_factory=dict)

    def record(self, **row) -> None:
        self.records.append(row)


# -- losses -----------------------------------------------------------------


def _m(x) -> Matrix:
    return x if isinstance(x, Matrix) else Matrix(x)


def bce_grid(r_hat, labels) -> Matrix:
    """Elementwise BCE with predictions clamped to [1e-7, 1 - 1e-7]."""
    q = ad.clamp(_m(r_hat), ad.LOG_EPS, 1.0 - ad.LOG_EPS)
    y = np.asarray(labels, dtype=np.float64).reshape(q.shape)
    pos = ad.mul(ad.log(q), Matrix._wrap(y, False))
    negs = ad.mul(ad.log(ad.shift(ad.neg(q), 1.0)), Matrix._wrap(1.0 - y, False))
    return ad.neg(ad.add(pos, negs))


def _row_mask(valid_rows, shape) -> np.ndarray:
    if valid_rows is None:
        return np.ones(shape)
    return np.repeat(np.asarray(valid_rows, dtype=np.float64).reshape(-1, 1), shape[1], axis=1)


def propensity_loss(o, p_hat, valid_rows=None) -> Matrix:
    """Mean BCE of the observation grid over every (step, concept) entry."""
    p_hat = _m(p_hat)
    mask = _row_mask(valid_rows, p_hat.shape)
    bce = bce_grid(p_hat, o)
    return ad.scale(ad.sum_all(ad.mul(bce, Matrix._wrap(mask, False))), 1.0 / mask.sum())


def imputation_loss(e, e_hat, p_hat, o, states=None, lam: float = 0.0, batch: Batch | None = None) -> Matrix | None:
    """IPS-weighted squared error on observed entries plus lam * smoothness.

    ``e`` and ``p_hat`` are constants. Returns None (and logs) when the batch
    has no observed entry.
    """
    o = np.asarray(o, dtype=np.float64)
    n_obs = o.sum()
    if n_obs == 0:
        log.warning("imputation loss: batch has no observed entries, skipping")
        return None
    e_hat = _m(e_hat)
    e0 = np.where(o == 1, np.asarray(e, dtype=np.float64), 0.0)
    w = o / np.asarray(p_hat, dtype=np.float64) / n_obs
    resid = ad.sub(e_hat, Matrix._wrap(e0, False))
    base = ad.sum_all(ad.mul(ad.square(resid), Matrix._wrap(w, False)))
    if lam and states is not None:
        if batch is None:
            raise ValueError("the smoothness term needs the batch for sequence lengths")
        base = ad.add(base, ad.scale(trajectory_penalty(states, batch), lam))
    return base


def dr_loss(e, e_hat, p_hat, o, valid_rows=None, columns=None) -> Matrix:
    """Doubly robust risk over the grid; ``e_hat`` and ``p_hat`` are constants.

    ``e`` is the differentiable BCE grid; only its observed entries are read.
    ``columns`` restricts the average to a subset of concepts.
    """
    e = _m(e)
    o = np.asarray(o, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    mask = _row_mask(valid_rows, e.shape)
    if columns is not None:
        keep = np.zeros(e.shape[1])
        keep[np.asarray(columns)] = 1.0
        mask = mask * keep[None, :]
    n = mask.sum()
    w = mask * o / p_hat
    const = float(np.sum(mask * (e_hat - w * e_hat)))
    corr = ad.sum_all(ad.mul(e, Matrix._wrap(w, False)))
    return ad.scale(ad.shift(corr, const), 1.0 / n)


def naive_loss(e, o) -> Matrix:
    o = np.asarray(o, dtype=np.float64)
    return ad.scale(ad.sum_all(ad.mul(_m(e), Matrix._wrap(o, False))), 1.0 / o.sum())


# -- helpers ----------------------------------------------------------------


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    names = ["init_kt", "init_prop", "init_imp", "shuffle", "drop_kt", "drop_prop", "drop_imp", "columns"]
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def init_bundle(n_concepts: int, cfg: TrainConfig, with_aux: bool = True) -> ModelBundle:
    r = _rngs(cfg.seed)
    bb = KTBackbone(n_concepts, cfg.embed_dim, r["init_kt"])
    if not with_aux:
        return ModelBundle(bb)
    prop = PropensityModel(
        n_concepts, cfg.embed_dim, r["init_prop"], p_min=cfg.p_min, conditioning=cfg.propensity_conditioning
    )
    imp = ImputationModel(n_concepts, cfg.embed_dim, r["init_imp"])
    return ModelBundle(bb, prop, imp)


def _batches(seqs: Sequence[KTSequence], order, size: int, n_concepts: int):
    for i in range(0, len(order), size):
        yield make_batch([seqs[j] for j in order[i : i + size]], n_concepts)


def _check(value: float, phase: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise TrainingDivergence(f"non-finite {phase} loss at epoch {epoch}")


def _step(model, loss: Matrix, tape: Tape, state: AdamState, lr: float) -> None:
    grads = tape.backward(loss)
    params = model.params
    adam_step(params, {k: grads[p] for k, p in params.items()}, state, lr)


def predict_rows(backbone: KTBackbone, seqs: Sequence[KTSequence], n_concepts: int, batch_size: int = 64):
    """Yield (batch, r_hat grid) for inference, without recording."""
    order = np.arange(len(seqs))
    for batch in _batches(seqs, order, batch_size, n_concepts):
        r_hat, _ = backbone.forward(batch)
        yield batch, r_hat.data


def observed_metrics(backbone: KTBackbone, seqs, n_concepts: int, batch_size: int = 64) -> dict[str, float]:
    labels, scores = [], []
    for batch, r_hat in predict_rows(backbone, seqs, n_concepts, batch_size):
        sel = batch.obs == 1
        labels.append(batch.labels[sel])
        scores.append(r_hat[sel])
    y, s = np.concatenate(labels), np.concatenate(scores)
    try:
        return evaluate(EvalBatch(y, s, "observed"))
    except SingleClassError:
        return {"auc": float("nan"), "acc": float(np.mean((s >= 0.5) == y)), "rmse": float(np.sqrt(np.mean((s - y) ** 2)))}


def mean_sq_step(model, seqs, n_concepts: int, batch_size: int = 64) -> float:
    """Average over sequences of their mean squared latent step."""
    total, count = 0.0, 0
    for batch in _batches(seqs, np.arange(len(seqs)), batch_size, n_concepts):
        states = model.encoder.run(batch.inputs)
        total += trajectory_penalty(states, batch).item() * batch.size
        count += batch.size
    return total / count if count else float("nan")


class _EarlyStopper:
    def __init__(self, metric: str, patience: int):
        self.metric = metric
        self.sign = -1.0 if metric == "rmse" else 1.0
        self.patience = patience
        self.best = None
        self.best_epoch = None
        self.snapshot = None

    def update(self, epoch: int, value: float, bundle: ModelBundle) -> bool:
        """Record the epoch; True when training should stop."""
        if math.isfinite(value) and (self.best is None or self.sign * value > self.sign * self.best):
            self.best, self.best_epoch = value, epoch
            self.snapshot = [m.snapshot() for m in bundle.models()]
        return self.best_epoch is not None and epoch - self.best_epoch >= self.patience

    def restore(self, bundle: ModelBundle) -> None:
        if self.snapshot is not None:
            for m, snap in zip(bundle.models(), self.snapshot):
                m.restore(snap)


def _finish(history: TrainHistory, stopper: _EarlyStopper, bundle: ModelBundle, stopped: bool, train, n_concepts):
    stopper.restore(bundle)
    history.best_epoch = stopper.best_epoch
    history.best_metric = stopper.best
    history.stop_reason = "early_stop" if stopped else "max_epochs"
    if train:
        history.final["kt_mean_sq_step"] = mean_sq_step(bundle.backbone, train, n_concepts)
        if bundle.imputation is not None:
            history.final["imp_mean_sq_step"] = mean_sq_step(bundle.imputation, train, n_concepts)


# -- training loops ---------------------------------------------------------


def _epoch_zero(history, stopper, bundle, val, n_concepts, cfg, on_epoch) -> None:
    if cfg.max_epochs == 0:
        return
    vm = observed_metrics(bundle.backbone, val, n_concepts, cfg.batch_size)
    history.record(epoch=0, **{f"val_{k}": v for k, v in vm.items()})
    stopper.update(0, vm[cfg.stop_metric], bundle)
    if on_epoch is not None:
        on_epoch(0, bundle, history.records[-1])


def naive_train(train: Sequence[KTSequence], val: Sequence[KTSequence], n_concepts: int, cfg: TrainConfig, on_epoch=None):
    """Fit the backbone by mean BCE over observed entries.

    ``on_epoch(epoch, bundle, record)`` is called after every validation pass.
    """
    cfg.validate()
    bundle = init_bundle(n_concepts, cfg, with_aux=False)
    bb = bundle.backbone
    history = TrainHistory("naive", asdict(cfg))
    r = _rngs(cfg.seed)
    state = AdamState.for_params(bb.params)
    stopper = _EarlyStopper(cfg.stop_metric, cfg.early_stop_patience)
    stopped = False
    _epoch_zero(history, stopper, bundle, val, n_concepts, cfg, on_epoch)
    for epoch in range(1, cfg.max_epochs + 1):
        order = r["shuffle"].permutation(len(train))
        losses = []
        for batch in _batches(train, order, cfg.batch_size, n_concepts):
            with Tape() as tape:
                r_hat, _ = bb.forward(batch, cfg.dropout, r["drop_kt"])
                loss = naive_loss(bce_grid(r_hat, batch.labels), batch.obs)
            _check(loss.item(), "naive", epoch)
            _step(bb, loss, tape, state, cfg.lr)
            losses.append(loss.item())
        vm = observed_metrics(bb, val, n_concepts, cfg.batch_size)
        history.record(epoch=epoch, loss_naive=float(np.mean(losses)), **{f"val_{k}": v for k, v in vm.items()})
        if on_epoch is not None:
            on_epoch(epoch, bundle, history.records[-1])
        if stopper.update(epoch, vm[cfg.stop_metric], bundle):
            stopped = True
            break
    _finish(history, stopper, bundle, stopped, train, n_concepts)
    return bb, history


def _aux_inputs(bundle: ModelBundle, batch: Batch):
    """Backbone errors, clipped propensities and KT states, all as constants."""
    r_hat, kt_states = bundle.backbone.forward(batch)
    e = bce_error(batch.labels, r_hat.data)
    raw = bundle.propensity.raw(batch, backbone_states=kt_states).data
    return e, bundle.propensity.clip(raw), kt_states


def _imp_phase(bundle, batch, cfg, rng, state, epoch):
    e, p_hat, _ = _aux_inputs(bundle, batch)
    with Tape() as tape:
        e_hat, states = bundle.imputation.forward(batch, cfg.dropout, rng)
        lam = cfg.lam if cfg.ts_target == "imputation" else 0.0
        loss = imputation_loss(e, e_hat, p_hat, batch.obs, states, lam, batch)
    if loss is None:
        return None
    _check(loss.item(), "imputation", epoch)
    _step(bundle.imputation, loss, tape, state, cfg.lr)
    return loss.item()


def _prop_phase(bundle, batch, cfg, rng, state, epoch):
    kt_states = None
    if bundle.propensity.conditioning == "backbone":
        kt_states = bundle.backbone.encode(batch)
    with Tape() as tape:
        raw = bundle.propensity.raw(batch, cfg.dropout, rng, backbone_states=kt_states)
        loss = propensity_loss(batch.obs, raw, batch.valid_rows)
    _check(loss.item(), "propensity", epoch)
    _step(bundle.propensity, loss, tape, state, cfg.lr)
    return loss.item()


def _pretrain_aux(bundle, train, n_concepts, cfg, r, states) -> None:
    """Fit the propensity, then the imputation model, each until its epoch loss stalls."""
    for name, phase, key, st in (
        ("propensity", _prop_phase, "drop_prop", states["prop"]),
        ("imputation", _imp_phase, "drop_imp", states["imp"]),
    ):
        prev = math.inf
        for epoch in range(1, cfg.pretrain_epochs + 1):
            order = r["shuffle"].permutation(len(train))
            vals = [
                v
                for batch in _batches(train, order, cfg.batch_size, n_concepts)
                if (v := phase(bundle, batch, cfg, r[key], st, epoch)) is not None
            ]
            cur = float(np.mean(vals)) if vals else math.inf
            if prev - cur < 1e-4 * max(abs(prev), 1.0):
                break
            prev = cur
        log.info("pretrained %s model for %d epochs", name, epoch)


def joint_train(train: Sequence[KTSequence], val: Sequence[KTSequence], n_concepts: int, cfg: TrainConfig, on_epoch=None):
    """Alternate imputation, propensity and DR backbone updates per mini-batch."""
    cfg.validate()
    bundle = init_bundle(n_concepts, cfg)
    history = TrainHistory("tsdr", asdict(cfg))
    r = _rngs(cfg.seed)
    states = {
        "kt": AdamState.for_params(bundle.backbone.params),
        "prop": AdamState.for_params(bundle.propensity.params),
        "imp": AdamState.for_params(bundle.imputation.params),
    }
    stopper = _EarlyStopper(cfg.stop_metric, cfg.early_stop_patience)
    stopped = False
    if cfg.max_epochs > 0 and not cfg.joint_learning:
        _pretrain_aux(bundle, train, n_concepts, cfg, r, states)
    _epoch_zero(history, stopper, bundle, val, n_concepts, cfg, on_epoch)
    C = n_concepts
    for epoch in range(1, cfg.max_epochs + 1):
        order = r["shuffle"].permutation(len(train))
        l_imp, l_prop, l_dr = [], [], []
        for batch in _batches(train, order, cfg.batch_size, n_concepts):
            if cfg.joint_learning:
                for _ in range(cfg.imp_steps):
                    v = _imp_phase(bundle, batch, cfg, r["drop_imp"], states["imp"], epoch)
                    if v is not None:
                        l_imp.append(v)
                for _ in range(cfg.prop_steps):
                    l_prop.append(_prop_phase(bundle, batch, cfg, r["drop_prop"], states["prop"], epoch))
            kt_states = bundle.backbone.encode(batch) if bundle.propensity.conditioning == "backbone" else None
            e_hat = bundle.imputation.forward(batch)[0].data
            p_hat = bundle.propensity.clip(bundle.propensity.raw(batch, backbone_states=kt_states).data)
            cols = None
            if 0 < cfg.concept_sample < C:
                cols = np.sort(r["columns"].choice(C, size=cfg.concept_sample, replace=False))
            with Tape() as tape:
                r_hat, kt = bundle.backbone.forward(batch, cfg.dropout, r["drop_kt"])
                loss = dr_loss(bce_grid(r_hat, batch.labels), e_hat, p_hat, batch.obs, batch.valid_rows, cols)
                if cfg.ts_target == "backbone" and cfg.lam:
                    loss = ad.add(loss, ad.scale(trajectory_penalty(kt, batch), cfg.lam))
            _check(loss.item(), "dr", epoch)
            _step(bundle.backbone, loss, tape, states["kt"], cfg.lr)
            l_dr.append(loss.item())
        vm = observed_metrics(bundle.backbone, val, n_concepts, cfg.batch_size)
        history.record(
            epoch=epoch,
            loss_prop=float(np.mean(l_prop)) if l_prop else None,
            loss_imp=float(np.mean(l_imp)) if l_imp else None,
            loss_dr=float(np.mean(l_dr)),
            **{f"val_{k}": v for k, v in vm.items()},
        )
        if on_epoch is not None:
            on_epoch(epoch, bundle, history.records[-1])
        if stopper.update(epoch, vm[cfg.stop_metric], bundle):
            stopped = True
            break
    _finish(history, stopper, bundle, stopped, train, n_concepts)
    return bundle, history
