"""Observed and counterfactual-grid evaluation of trained models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import KTSequence
from .estimators import RiskReport, bce_error, risk_report
from .metrics import EvalBatch, evaluate
from .models import KTBackbone, ModelBundle, make_batch

__all__ = ["GridPredictions", "grid_predictions", "evaluate_regime", "bundle_risk_report", "REGIMES"]

REGIMES = ("observed", "counterfactual")


@dataclass
class GridPredictions:
    """Valid grid rows of a set of sequences, stacked in sequence order.

    Every array has shape (rows, C); ``student`` has one id per row.
    """

    r_hat: np.ndarray
    obs: np.ndarray
    labels: np.ndarray
    student: np.ndarray
    cf_response: np.ndarray | None = None
    propensity: np.ndarray | None = None
    e_hat: np.ndarray | None = None
    p_hat: np.ndarray | None = None

    @property
    def has_grid(self) -> bool:
        return self.cf_response is not None

    def errors(self) -> np.ndarray:
        """Per-entry BCE against the counterfactual responses."""
        if not self.has_grid:
            raise ValueError("no counterfactual grid for these sequences")
        return bce_error(self.cf_response, self.r_hat)


def _cat(parts):
    return None if any(p is None for p in parts) else np.concatenate(parts)


def grid_predictions(model: ModelBundle | KTBackbone, seqs: Sequence[KTSequence], batch_size: int = 64) -> GridPredictions:
    bundle = model if isinstance(model, ModelBundle) else ModelBundle(model)
    bb = bundle.backbone
    if not seqs:
        raise ValueError("no sequences to evaluate")
    cols: dict[str, list] = {k: [] for k in ("r_hat", "obs", "labels", "student", "cf", "prop", "e_hat", "p_hat")}
    for i in range(0, len(seqs), batch_size):
        batch = make_batch(list(seqs[i : i + batch_size]), bb.n_concepts)
        # time-major rows -> sequence-major rows
        order = np.arange(batch.steps * batch.size).reshape(batch.steps, batch.size).T.reshape(-1)
        keep = order[batch.valid_rows[order]]
        r_hat, states = bb.forward(batch)
        cols["r_hat"].append(r_hat.data[keep])
        cols["obs"].append(batch.obs[keep])
        cols["labels"].append(batch.labels[keep])
        ids = np.array(batch.student_ids, dtype=object)
        cols["student"].append(np.tile(ids, batch.steps)[keep])
        cols["cf"].append(None if batch.cf_response is None else batch.cf_response[keep])
        cols["prop"].append(None if batch.propensity is None else batch.propensity[keep])
        if bundle.imputation is not None:
            cols["e_hat"].append(bundle.imputation.forward(batch)[0].data[keep])
        else:
            cols["e_hat"].append(None)
        if bundle.propensity is not None:
            raw = bundle.propensity.raw(batch, backbone_states=states).data
            cols["p_hat"].append(bundle.propensity.clip(raw)[keep])
        else:
            cols["p_hat"].append(None)
    return GridPredictions(
        np.concatenate(cols["r_hat"]),
        np.concatenate(cols["obs"]),
        np.concatenate(cols["labels"]),
        np.concatenate(cols["student"]),
        _cat(cols["cf"]),
        _cat(cols["prop"]),
        _cat(cols["e_hat"]),
        _cat(cols["p_hat"]),
    )


def evaluate_regime(preds: GridPredictions, regime: str, per_student: bool = False) -> dict[str, float]:
    """AUC/ACC/RMSE on observed entries or on the full counterfactual grid."""
    if regime == "observed":
        sel = preds.obs == 1
        labels = preds.labels[sel]
    elif regime == "counterfactual":
        if not preds.has_grid:
            raise ValueError("counterfactual regime needs a counterfactual grid")
        sel = np.ones(preds.r_hat.shape, dtype=bool)
        labels = preds.cf_response[sel]
    else:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    groups = None
    if per_student:
        groups = np.broadcast_to(preds.student[:, None], sel.shape)[sel]
    return evaluate(EvalBatch(labels, preds.r_hat[sel], regime), groups)


def bundle_risk_report(preds: GridPredictions, p_min: float = 0.05, n_hypotheses: int = 1, eta: float = 0.05) -> RiskReport:
    """Risk estimates of the backbone's grid error on these sequences.

    DR fields are filled only when the bundle had auxiliary models.
    """
    return risk_report(
        preds.errors(),
        preds.obs,
        e_hat=preds.e_hat,
        p_hat=preds.p_hat,
        p=preds.propensity,
        n_hypotheses=n_hypotheses,
        eta=eta,
        p_min=p_min,
    )
