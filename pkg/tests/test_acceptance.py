"""Acceptance criteria at their stated tolerances.

Training-based criteria (7 to 10) share one cache of desk-profile runs:
generator seed, split seed and training seed are all the run seed.
"""

import json
import time
from functools import lru_cache

import numpy as np
import pytest
from scipy.stats import spearmanr

from helpers import gradcheck_losses, report
from tsdr.autodiff import gradient_check
from tsdr.cli import main
from tsdr.config import resolve_config
from tsdr.metrics import acc, auc, rmse
from tsdr.pipeline import evaluate_model, prepare_result, train_model
from tsdr.synth import GAMMA_LEVELS, FULL_PROFILE, SynthConfig, generate_dataset
from tsdr.theory import (
    SyntheticWorld,
    verify_bias_bound,
    verify_enumeration,
    verify_path_length,
    verify_power,
    verify_unbiasedness,
)

SEEDS = (1, 2, 3, 4, 5)
TREND_GAMMAS = (0.0, 0.4, 0.8, 0.999)


@lru_cache(maxsize=None)
def _data(gamma, seed):
    rc = resolve_config(overrides={"gamma": gamma, "seed": seed})
    return prepare_result(generate_dataset(rc.synth), rc.train), rc.train


@lru_cache(maxsize=None)
def run(mode, gamma, seed, lam=0.5):
    """(counterfactual test AUC, best validation AUC, history.final) for one desk run."""
    data, tcfg = _data(gamma, seed)
    bundle, history = train_model(mode, data, tcfg.replace(lam=lam))
    rows, _ = evaluate_model(bundle, data.test, ["counterfactual"], mode, gamma, lam, seed)
    return rows[0]["auc"], history.best_metric, dict(history.final)


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


def test_criterion_01_enumeration():
    res, dt = _timed(lambda: verify_enumeration(n_worlds=20, max_n=12, tol=1e-10))
    ok = res.passed and dt < 1.0
    assert report(1, ok, f"max |enumerated - closed form| = {res.statistic:.1e} (tol 1e-10), {dt:.2f}s (< 1s)")


def test_criterion_02_double_robustness():
    def go():
        world = SyntheticWorld.random(200, 0)
        return verify_unbiasedness(world, 100_000, seed=0), verify_power(world, 100_000, seed=0)

    (arms, neg), dt = _timed(go)
    ok = all(a.passed for a in arms) and neg.passed and dt < 30
    parts = ", ".join(f"{a.check.split('/')[1]} gap {a.statistic:.2e} < {a.threshold:.2e}" for a in arms)
    assert report(2, ok, f"{parts}; mis-specified world rejected: {neg.passed}; {dt:.1f}s (< 30s)")


def test_criterion_03_bias_bound():
    res, dt = _timed(lambda: verify_bias_bound(1000))
    ok = res.passed and dt < 5
    assert report(3, ok, f"{int(res.statistic)} violations in 1000 worlds, {dt:.2f}s (< 5s)")


def test_criterion_04_path_length():
    (bound, tight), dt = _timed(lambda: verify_path_length(n=1000, dim=64))
    ok = bound.passed and tight.passed and dt < 5
    assert report(4, ok, f"{int(bound.statistic)} violations in 1000 trajectories, equal-step rel. gap {tight.statistic:.1e}, {dt:.2f}s (< 5s)")


def test_criterion_05_gradient_fidelity():
    def go():
        return {k: gradient_check(fn, params, probes=50, seed=0) for k, (fn, params) in gradcheck_losses().items()}

    errs, dt = _timed(go)
    ok = max(errs.values()) <= 1e-4 and dt < 120
    assert report(5, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f" (<= 1e-4), {dt:.1f}s (< 2 min)")


def _pair_auc(y, s):
    pos, neg = s[y == 1], s[y == 0]
    gt = int(np.sum(pos[:, None] > neg[None, :]))
    eq = int(np.sum(pos[:, None] == neg[None, :]))
    return (2 * gt + eq) / (2 * pos.size * neg.size)


def test_criterion_06_metric_oracles():
    def go():
        r = np.random.default_rng(6)
        worst = 0.0
        auc_exact = True
        for _ in range(100):
            n = int(r.integers(10, 300))
            y = r.integers(0, 2, n)
            y[:2] = [0, 1]
            s = np.round(r.random(n), int(r.integers(1, 4)))  # coarse rounding makes ties
            auc_exact &= auc(y, s) == _pair_auc(y, s)
            direct_rmse = float(np.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(s, y)) / n))
            direct_acc = sum(1 for a, b in zip(s, y) if (a >= 0.5) == (b == 1)) / n
            worst = max(worst, abs(rmse(y, s) - direct_rmse), abs(acc(y, s) - direct_acc))
        return auc_exact, worst

    (exact, worst), dt = _timed(go)
    ok = exact and worst <= 1e-12 and dt < 5
    assert report(6, ok, f"AUC exact on 100 batches: {exact}; RMSE/ACC max dev {worst:.1e}; {dt:.2f}s (< 5s)")


def test_criterion_07_mnar_degradation():
    t = time.perf_counter()
    xs, ys = [], []
    for g in TREND_GAMMAS:
        for s in SEEDS:
            xs.append(g)
            ys.append(run("naive", g, s)[0])
    dt = time.perf_counter() - t
    rho = spearmanr(xs, ys).statistic
    means = {g: np.mean([y for x, y in zip(xs, ys) if x == g]) for g in TREND_GAMMAS}
    ok = rho <= -0.5 and dt < 1800
    trend = " ".join(f"{g:g}:{m:.4f}" for g, m in means.items())
    assert report(7, ok, f"naive cf AUC by gamma {trend}; Spearman {rho:.3f} (<= -0.5); {dt:.0f}s")


def test_criterion_08_tsdr_improvement():
    naive = [run("naive", 0.999, s)[0] for s in SEEDS]
    tsdr = [run("tsdr", 0.999, s)[0] for s in SEEDS]
    diff = float(np.mean(tsdr) - np.mean(naive))
    ok = diff >= 0.0
    assert report(8, ok, f"gamma 0.999 cf AUC tsdr {np.mean(tsdr):.4f} vs naive {np.mean(naive):.4f}, diff {diff:+.4f} (>= 0)")


def test_criterion_09_safety_at_zero_gamma():
    naive = [run("naive", 0.0, s)[0] for s in SEEDS]
    tsdr = [run("tsdr", 0.0, s)[0] for s in SEEDS]
    diff = float(np.mean(tsdr) - np.mean(naive))
    ok = diff >= -0.005
    assert report(9, ok, f"gamma 0 cf AUC tsdr {np.mean(tsdr):.4f} vs naive {np.mean(naive):.4f}, diff {diff:+.4f} (>= -0.005)")


def test_criterion_10_smoothness_effect():
    lams = (0.0, 0.3, 0.5, 1.0)
    res = {lam: run("tsdr", 0.999, SEEDS[0], lam) for lam in lams}
    val = {lam: r[1] for lam, r in res.items()}
    step = {lam: r[2]["imp_mean_sq_step"] for lam, r in res.items()}
    a = max(val[lam] for lam in lams if lam > 0) >= val[0.0]
    b = step[1.0] < step[0.0]
    vals = " ".join(f"{lam:g}:{v:.4f}" for lam, v in val.items())
    assert report(10, a and b, f"(a) val AUC {vals}: {a}; (b) imputation mean sq step lambda 1 {step[1.0]:.4f} < lambda 0 {step[0.0]:.4f}: {b}")


def test_criterion_11_generator_statistics():
    stats = {g: generate_dataset(SynthConfig(**FULL_PROFILE, gamma=g, seed=42)).stats() for g in GAMMA_LEVELS}
    skipped = [stats[g]["n_skipped"] for g in GAMMA_LEVELS]
    increasing = all(a < b for a, b in zip(skipped[1:], skipped[2:]))
    ok = increasing and skipped[0] == 0 and all(s["n_skipped_mid_band"] == 0 for s in stats.values())
    assert report(11, ok, "full-profile skipped counts " + " ".join(map(str, skipped)) + "; mid-band skips 0")


SMALL = ["--set", "n_students=40", "--set", "n_questions=10", "--set", "n_concepts=5", "--set", "steps_per_student=20"]
FAST = ["--set", "embed_dim=8", "--set", "batch_size=8"]


def test_criterion_12_manifest_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("TSDR_OUTPUT_ROOT", str(tmp_path))
    first = {
        "synth": ["synth", "--gamma", "0.6", "--out", "synth", *SMALL],
        "train": ["train", "--data", str(tmp_path / "synth"), "--epochs", "2", "--out", "train", *FAST],
        "eval": ["eval", "--checkpoint", str(tmp_path / "train" / "checkpoint.json"), "--data", str(tmp_path / "synth"), "--out", "eval"],
        "sweep": ["sweep", "--axis", "gamma", "--values", "0", "0.8", "--seeds", "1", "--epochs", "1", "--out", "sweep", *SMALL, *FAST],
        "verify": ["verify", "--only", "enumeration", "path-length", "--out", "verify"],
        "report": ["report", "--runs", str(tmp_path / "sweep" / "runs.csv"), "--out", "report"],
    }
    failures = []
    for name, argv in first.items():
        assert main(argv) == 0, name
        man_path = tmp_path / name / "manifest.json"
        assert main([name, "--manifest", str(man_path), "--out", f"{name}_replay"]) == 0, name
        for rel in json.loads(man_path.read_text())["outputs"]:
            if (tmp_path / name / rel).read_bytes() != (tmp_path / f"{name}_replay" / rel).read_bytes():
                failures.append(f"{name}/{rel}")
    ok = not failures
    assert report(12, ok, f"{len(first)} subcommands replayed from manifests; differing files: {failures or 'none'}")
