"""Numerical checks of the estimator's bias structure and the path-length bound.

Each check returns :class:`CheckResult` records that serialize to
``{check, seed, statistic, threshold, pass, ...}``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .estimators import bias_bound, expected_dr, true_risk

__all__ = [
    "CheckResult",
    "SyntheticWorld",
    "misspecified_world",
    "dr_draws",
    "enumerate_expected_dr",
    "verify_enumeration",
    "verify_unbiasedness",
    "verify_power",
    "verify_bias_bound",
    "path_length_terms",
    "verify_path_length",
    "verify_naive_bias",
    "CHECK_NAMES",
    "SIGMA_MULTIPLIER",
]

SIGMA_MULTIPLIER = 4.0
P_RANGE = (0.05, 1.0)
E_RANGE = (0.0, 3.0)


@dataclass
class CheckResult:
    check: str
    seed: int | None
    statistic: float
    threshold: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "check": self.check,
            "seed": self.seed,
            "statistic": _num(self.statistic),
            "threshold": _num(self.threshold),
            "pass": bool(self.passed),
        }
        if self.detail:
            out["detail"] = {k: _num(v) for k, v in self.detail.items()}
        return out


def _num(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


@dataclass(frozen=True)
class SyntheticWorld:
    e: np.ndarray
    e_hat: np.ndarray
    p: np.ndarray
    p_hat: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        shapes = {np.shape(a) for a in (self.e, self.e_hat, self.p, self.p_hat)}
        if len(shapes) != 1:
            raise ValueError(f"world arrays differ in shape: {sorted(shapes)}")
        for name in ("p", "p_hat"):
            a = getattr(self, name)
            if np.any(a <= 0) or np.any(a > 1):
                raise ValueError(f"{name} must lie in (0, 1]")

    @property
    def size(self) -> int:
        return int(np.size(self.e))

    @classmethod
    def random(cls, n: int, seed: int) -> "SyntheticWorld":
        if not 1 <= n <= 200:
            raise ValueError("world size must be in [1, 200]")
        rng = np.random.default_rng(seed)
        e = rng.uniform(*E_RANGE, n)
        e_hat = rng.uniform(*E_RANGE, n)
        p = rng.uniform(*P_RANGE, n)
        p_hat = rng.uniform(*P_RANGE, n)
        return cls(e, e_hat, p, p_hat, seed)

    def with_(self, **kw) -> "SyntheticWorld":
        vals = dict(e=self.e, e_hat=self.e_hat, p=self.p, p_hat=self.p_hat, seed=self.seed)
        vals.update(kw)
        return SyntheticWorld(**vals)


def misspecified_world(world: SyntheticWorld) -> SyntheticWorld:
    """Both auxiliaries wrong: halved propensities and halved errors."""
    return world.with_(p_hat=world.p / 2.0, e_hat=world.e / 2.0)


def dr_draws(e, e_hat, p, p_hat, n_trials: int, rng: np.random.Generator, chunk: int = 20000) -> np.ndarray:
    """DR estimates under ``n_trials`` independent draws o ~ Bernoulli(p)."""
    e, e_hat, p, p_hat = (np.asarray(a, dtype=np.float64).ravel() for a in (e, e_hat, p, p_hat))
    n = e.size
    base = float(e_hat.sum()) / n
    w = (e - e_hat) / p_hat / n
    out = np.empty(n_trials)
    for start in range(0, n_trials, chunk):
        k = min(chunk, n_trials - start)
        o = rng.random((k, n)) < p
        out[start : start + k] = base + o @ w
    return out


def enumerate_expected_dr(e, e_hat, p, p_hat) -> float:
    """Exact expectation of the DR estimate by summing over all 2^N patterns."""
    e, e_hat, p, p_hat = (np.asarray(a, dtype=np.float64).ravel() for a in (e, e_hat, p, p_hat))
    n = e.size
    if n > 16:
        raise ValueError("enumeration is limited to N <= 16")
    patterns = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
    prob = np.prod(np.where(patterns == 1.0, p, 1.0 - p), axis=1)
    values = np.mean(e_hat + patterns / p_hat * (e - e_hat), axis=1)
    return float(prob @ values)


def verify_enumeration(n_worlds: int = 20, max_n: int = 12, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_worlds):
        n = int(rng.integers(1, max_n + 1))
        w = SyntheticWorld.random(n, int(rng.integers(2**31)))
        exact = enumerate_expected_dr(w.e, w.e_hat, w.p, w.p_hat)
        worst = max(worst, abs(exact - expected_dr(w.e, w.e_hat, w.p, w.p_hat)))
    return CheckResult("enumeration", seed, worst, tol, worst <= tol, {"n_worlds": n_worlds, "max_n": max_n})


def _mc_check(check, world, e_hat, p_hat, n_trials, seed, rng) -> CheckResult:
    draws = dr_draws(world.e, e_hat, world.p, p_hat, n_trials, rng)
    target = true_risk(world.e)
    se = float(draws.std(ddof=1)) / math.sqrt(n_trials) if n_trials > 1 else math.inf
    gap = abs(float(draws.mean()) - target)
    thr = SIGMA_MULTIPLIER * se + 1e-10
    return CheckResult(
        check,
        seed,
        gap,
        thr,
        gap < thr,
        {"mc_mean": float(draws.mean()), "true_risk": target, "se": se, "n_trials": n_trials, "slack": thr - gap},
    )


def verify_unbiasedness(world: SyntheticWorld, n_trials: int = 100_000, seed: int = 0, arms: Sequence[str] = ("propensity", "imputation")) -> list[CheckResult]:
    """Monte Carlo mean of the DR estimate against the true risk.

    Arm ``propensity`` uses p_hat = p with the world's e_hat, arm
    ``imputation`` uses e_hat = e with the world's p_hat, and ``given`` uses
    the world's auxiliaries unchanged.
    """
    rng = np.random.default_rng(seed)
    out = []
    for arm in arms:
        if arm == "propensity":
            e_hat, p_hat = world.e_hat, world.p
        elif arm == "imputation":
            e_hat, p_hat = world.e, world.p_hat
        elif arm == "given":
            e_hat, p_hat = world.e_hat, world.p_hat
        else:
            raise ValueError(f"unknown arm {arm!r}")
        out.append(_mc_check(f"unbiasedness/{arm}", world, e_hat, p_hat, n_trials, seed, rng))
    return out


def verify_power(world: SyntheticWorld, n_trials: int = 100_000, seed: int = 0) -> CheckResult:
    """Passes when the unbiasedness assertion rejects the mis-specified world."""
    inner = verify_unbiasedness(misspecified_world(world), n_trials, seed, arms=("given",))[0]
    return CheckResult(
        "unbiasedness/negative-control",
        seed,
        inner.statistic,
        inner.threshold,
        not inner.passed,
        dict(inner.detail, detected=not inner.passed),
    )


def verify_bias_bound(n_worlds: int = 1000, seed: int = 0, max_n: int = 200) -> CheckResult:
    rng = np.random.default_rng(seed)
    violations, worst = 0, -math.inf
    for _ in range(n_worlds):
        w = SyntheticWorld.random(int(rng.integers(1, max_n + 1)), int(rng.integers(2**31)))
        lhs = abs(expected_dr(w.e, w.e_hat, w.p, w.p_hat) - true_risk(w.e))
        rhs = bias_bound(w.e - w.e_hat, 1.0 - w.p / w.p_hat)
        worst = max(worst, lhs - rhs)
        violations += lhs > rhs + 1e-12
    return CheckResult(
        "bias-bound", seed, float(violations), 0.0, violations == 0, {"n_worlds": n_worlds, "max_excess": worst}
    )


def path_length_terms(trajectory) -> tuple[float, float, int]:
    """(sum of step norms, sqrt(K * sum of squared step norms), K)."""
    H = np.asarray(trajectory, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 2:
        raise ValueError("trajectory must be a (T, d) array with T >= 2")
    d = np.linalg.norm(np.diff(H, axis=0), axis=1)
    k = d.size
    return float(d.sum()), math.sqrt(k * float(np.sum(d * d))), k


def _equal_step_trajectory(rng, T: int, dim: int) -> np.ndarray:
    steps = rng.normal(size=(T - 1, dim))
    steps *= rng.uniform(0.1, 2.0) / np.linalg.norm(steps, axis=1, keepdims=True)
    return np.vstack([rng.normal(size=(1, dim)), steps]).cumsum(axis=0)


def verify_path_length(
    trajectories: Iterable | None = None,
    n: int = 1000,
    dim: int = 64,
    seed: int = 0,
    max_T: int = 50,
) -> list[CheckResult]:
    """Cauchy-Schwarz bound on random trajectories, and tightness on equal steps."""
    rng = np.random.default_rng(seed)
    if trajectories is None:
        trajectories = [
            rng.normal(size=(int(rng.integers(2, max_T + 1)), dim)) * rng.uniform(0.01, 3.0, size=(1, 1))
            for _ in range(n)
        ]
    violations, worst, count = 0, -math.inf, 0
    for traj in trajectories:
        lhs, rhs, _ = path_length_terms(traj)
        worst = max(worst, lhs - rhs)
        violations += lhs > rhs + 1e-10
        count += 1
    bound = CheckResult(
        "path-length", seed, float(violations), 0.0, violations == 0, {"n": count, "max_excess": worst}
    )
    eq_gap = 0.0
    for _ in range(100):
        lhs, rhs, _ = path_length_terms(_equal_step_trajectory(rng, int(rng.integers(2, max_T + 1)), dim))
        eq_gap = max(eq_gap, abs(lhs - rhs) / max(rhs, 1e-300))
    tight = CheckResult("path-length/equality", seed, eq_gap, 1e-12, eq_gap <= 1e-12, {"n": 100})
    return [bound, tight]


def verify_naive_bias(
    gammas: Sequence[float] = (0.0, 0.4, 0.8, 0.999),
    n_seeds: int = 5,
    seed: int = 0,
    synth_overrides: dict | None = None,
    train_overrides: dict | None = None,
) -> list[CheckResult]:
    """Gap between naive and true risk of one fixed naive backbone across MNAR levels.

    The reference backbone is trained once on gamma=0 data and then
    evaluated on fresh datasets (generator seeds ``seed+1 .. seed+n_seeds``)
    at every gamma. Question popularity is uniform unless overridden: with
    skewed exposure the observed average weights concepts by popularity and
    differs from the grid mean even without skipping.
    """
    from .data import build_kt_sequences, split_students
    from .evaluation import grid_predictions
    from .estimators import naive_risk
    from .synth import DESK_PROFILE, SynthConfig, generate_dataset
    from .training import TrainConfig, naive_train

    if 0.0 not in gammas:
        raise ValueError("gammas must include 0 as the unbiased reference")
    base = SynthConfig(**{**DESK_PROFILE, "zipf_alpha": 0.0, **(synth_overrides or {})})
    tcfg = TrainConfig(**{"seed": seed, "batch_size": 16, **(train_overrides or {})})
    ref = generate_dataset(base.replace(gamma=0.0, seed=seed))
    seqs = build_kt_sequences(ref.sequences, ref.grid, tcfg.max_len)
    split = split_students(seqs, tcfg.n_folds, tcfg.val_frac, seed)[tcfg.fold]
    by = {s.student_id: s for s in seqs}
    backbone, _ = naive_train([by[i] for i in split.train], [by[i] for i in split.val], base.n_concepts, tcfg)

    gaps: dict[float, list[float]] = {g: [] for g in gammas}
    for g in gammas:
        for k in range(1, n_seeds + 1):
            res = generate_dataset(base.replace(gamma=g, seed=seed + k))
            preds = grid_predictions(backbone, build_kt_sequences(res.sequences, res.grid, tcfg.max_len))
            e = preds.errors()
            gaps[g].append(naive_risk(e, preds.obs) - true_risk(e))
    g0 = np.array(gaps[0.0])
    gmax = max(gammas)
    floor = SIGMA_MULTIPLIER * float(g0.std(ddof=1)) / math.sqrt(n_seeds) if n_seeds > 1 else math.inf
    mean0 = abs(float(g0.mean()))
    meanmax = abs(float(np.mean(gaps[gmax])))
    xs = [g for g in gammas for _ in gaps[g]]
    ys = [abs(v) for g in gammas for v in gaps[g]]
    rho = float(spearmanr(xs, ys).statistic)
    detail = {f"gap_mean@{g}": float(np.mean(gaps[g])) for g in gammas}
    return [
        CheckResult("naive-bias/zero-gamma", seed, mean0, floor, mean0 <= floor, detail),
        CheckResult("naive-bias/high-gamma", seed, meanmax, 3.0 * mean0, meanmax > 3.0 * mean0, {"gamma": gmax}),
        CheckResult("naive-bias/trend", seed, rho, 0.0, rho > 0.0, {"n_points": len(xs)}),
    ]


CHECK_NAMES = ("enumeration", "unbiasedness", "negative-control", "bias-bound", "path-length", "naive-bias")
