"""Risk estimators over a (steps x concepts) prediction grid.

Grids are numpy arrays of identical shape. ``e`` may hold NaN wherever
``o == 0``; estimators that only need observed errors never read those
entries.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import LOG_EPS

__all__ = [
    "RiskInputs",
    "RiskReport",
    "bce_error",
    "true_risk",
    "naive_risk",
    "dr_risk",
    "ipw_risk",
    "expected_dr",
    "bias_bound",
    "variance_term",
    "risk_report",
    "DEFAULT_P_MIN",
]

DEFAULT_P_MIN = 0.05


def bce_error(r, r_hat):
    """Per-entry binary cross-entropy, with predictions clamped away from 0/1."""
    r = np.asarray(r, dtype=np.float64)
    q = np.clip(np.asarray(r_hat, dtype=np.float64), LOG_EPS, 1.0 - LOG_EPS)
    return -(r * np.log(q) + (1.0 - r) * np.log(1.0 - q))


def _observed_errors(e, o):
    e = np.asarray(e, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if e.shape != o.shape:
        raise ValueError(f"grid shapes differ: e {e.shape} vs o {o.shape}")
    if np.any((o != 0) & (o != 1)):
        raise ValueError("observation indicators must be 0 or 1")
    obs = o == 1
    if np.any(~np.isfinite(e[obs])):
        raise ValueError("true error missing on an observed entry")
    # unobserved entries are replaced, never read
    return np.where(obs, e, 0.0), o


def true_risk(e) -> float:
    e = np.asarray(e, dtype=np.float64)
    if e.size == 0:
        raise ValueError("empty grid")
    if np.any(~np.isfinite(e)):
        raise ValueError("true risk needs the error on every grid entry")
    return float(e.mean())


def naive_risk(e, o) -> float:
    e0, o = _observed_errors(e, o)
    n_obs = o.sum()
    if n_obs < 1:
        raise ValueError("naive risk needs at least one observed entry")
    return float((o * e0).sum() / n_obs)


def _check_prop(p_hat, p_min):
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if np.any(p_hat < p_min) or np.any(~np.isfinite(p_hat)):
        raise ValueError(f"estimated propensity below the clip floor {p_min}")
    return p_hat


def dr_risk(e, e_hat, p_hat, o, p_min: float = DEFAULT_P_MIN) -> float:
    """Imputed error plus inverse-propensity-weighted residual on observed entries."""
    e0, o = _observed_errors(e, o)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    p_hat = _check_prop(p_hat, p_min)
    if e_hat.shape != o.shape or p_hat.shape != o.shape:
        raise ValueError("grid shapes differ")
    return float(np.mean(e_hat + (o / p_hat) * (e0 - e_hat)))


def ipw_risk(e, p_hat, o, p_min: float = DEFAULT_P_MIN) -> float:
    e0, o = _observed_errors(e, o)
    p_hat = _check_prop(p_hat, p_min)
    return float(np.mean(o * e0 / p_hat))


def expected_dr(e, e_hat, p, p_hat) -> float:
    """Expectation of :func:`dr_risk` over o ~ Bernoulli(p)."""
    e = np.asarray(e, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    ratio = np.asarray(p, dtype=np.float64) / np.asarray(p_hat, dtype=np.float64)
    return float(np.mean(e_hat + ratio * (e - e_hat)))


def bias_bound(delta, Delta) -> float:
    """Mean absolute product of imputation error and relative propensity error."""
    return float(np.mean(np.abs(np.asarray(Delta) * np.asarray(delta))))


def variance_term(delta, p_hat, n_hypotheses: int = 1, eta: float = 0.05, n=None) -> float:
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if n_hypotheses < 1:
        raise ValueError("hypothesis count must be >= 1")
    ratio = np.asarray(delta, dtype=np.float64) / np.asarray(p_hat, dtype=np.float64)
    n = ratio.size if n is None else n
    return float(math.sqrt(math.log(2.0 * n_hypotheses / eta) / (2.0 * n * n) * np.sum(ratio**2)))


@dataclass(frozen=True)
class RiskInputs:
    e: np.ndarray
    e_hat: np.ndarray
    o: np.ndarray
    p_hat: np.ndarray
    p: np.ndarray | None = None

    def __post_init__(self):
        shapes = {np.shape(self.e), np.shape(self.e_hat), np.shape(self.o), np.shape(self.p_hat)}
        if self.p is not None:
            shapes.add(np.shape(self.p))
        if len(shapes) != 1:
            raise ValueError(f"risk grids are not shape-aligned: {sorted(shapes)}")

    @property
    def delta(self) -> np.ndarray:
        return np.asarray(self.e) - np.asarray(self.e_hat)

    @property
    def Delta(self) -> np.ndarray:
        if self.p is None:
            raise ValueError("relative propensity error needs true propensities")
        return 1.0 - np.asarray(self.p) / np.asarray(self.p_hat)


@dataclass
class RiskReport:
    true_risk: float | None
    naive_risk: float
    dr_risk: float | None
    expected_dr: float | None
    bias_bound: float | None
    variance_term: float | None
    n_entries: int
    n_observed: int
    delta_mean_abs: float | None = None
    delta_max_abs: float | None = None
    Delta_mean_abs: float | None = None
    Delta_max_abs: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def risk_report(
    e,
    o,
    e_hat=None,
    p_hat=None,
    p=None,
    n_hypotheses: int = 1,
    eta: float = 0.05,
    p_min: float = DEFAULT_P_MIN,
) -> RiskReport:
    """Every estimator that the supplied grids allow.

    ``e`` must be complete for the true risk and the bound terms; with only
    observed errors those fields are None.
    """
    e = np.asarray(e, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    full = bool(np.all(np.isfinite(e)))
    rep = RiskReport(
        true_risk=true_risk(e) if full else None,
        naive_risk=naive_risk(e, o),
        dr_risk=None,
        expected_dr=None,
        bias_bound=None,
        variance_term=None,
        n_entries=int(e.size),
        n_observed=int(o.sum()),
    )
    if e_hat is None or p_hat is None:
        return rep
    rep.dr_risk = dr_risk(e, e_hat, p_hat, o, p_min=p_min)
    if full:
        delta = e - np.asarray(e_hat)
        rep.variance_term = variance_term(delta, p_hat, n_hypotheses, eta)
        rep.delta_mean_abs = float(np.mean(np.abs(delta)))
        rep.delta_max_abs = float(np.max(np.abs(delta)))
        if p is not None:
            Delta = 1.0 - np.asarray(p) / np.asarray(p_hat)
            rep.expected_dr = expected_dr(e, e_hat, p, p_hat)
            rep.bias_bound = bias_bound(delta, Delta)
            rep.Delta_mean_abs = float(np.mean(np.abs(Delta)))
            rep.Delta_max_abs = float(np.max(np.abs(Delta)))
    return rep
