"""AUC, ACC and RMSE over pooled binary predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = ["EvalBatch", "SingleClassError", "auc", "acc", "rmse", "evaluate", "grouped_auc"]

REGIMES = ("observed", "counterfactual")


class SingleClassError(ValueError):
    """AUC is undefined when only one label class is present."""


@dataclass(frozen=True)
class EvalBatch:
    labels: np.ndarray
    scores: np.ndarray
    regime: str = "observed"

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.float64).ravel()
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        if labels.shape != scores.shape or labels.size == 0:
            raise ValueError(
                f"labels and scores must be equal-length and nonempty, got {labels.size} and {scores.size}"
            )
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "scores", scores)


def _arrays(labels, scores):
    y = np.asarray(labels, dtype=np.float64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {s.size} scores")
    if y.size == 0:
        raise ValueError("empty input")
    return y, s


def auc(labels, scores) -> float:
    """Mann-Whitney AUC; tied scores get half credit per tied pair."""
    y, s = _arrays(labels, scores)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def acc(labels, scores, threshold: float = 0.5) -> float:
    y, s = _arrays(labels, scores)
    return float(np.mean((s >= threshold).astype(np.float64) == y))


def rmse(labels, scores) -> float:
    y, s = _arrays(labels, scores)
    return float(np.sqrt(np.mean((s - y) ** 2)))


def grouped_auc(labels, scores, groups: Sequence) -> float:
    """Mean of per-group AUCs, skipping single-class groups."""
    y, s = _arrays(labels, scores)
    g = np.asarray(groups)
    vals = []
    for key in np.unique(g):
        sel = g == key
        try:
            vals.append(auc(y[sel], s[sel]))
        except SingleClassError:
            continue
    if not vals:
        raise SingleClassError("no group contains both label classes")
    return float(np.mean(vals))


def evaluate(batch: EvalBatch, groups: Sequence | None = None) -> dict[str, float]:
    """All three metrics; AUC is pooled unless ``groups`` is given."""
    if groups is None:
        a = auc(batch.labels, batch.scores)
    else:
        a = grouped_auc(batch.labels, batch.scores, groups)
    return {
        "auc": a,
        "acc": acc(batch.labels, batch.scores),
        "rmse": rmse(batch.labels, batch.scores),
    }
