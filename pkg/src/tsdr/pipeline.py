"""Shared data-to-metrics plumbing used by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import ParseError, build_kt_sequences, load_grid, load_interactions, split_students
from .evaluation import bundle_risk_report, evaluate_regime, grid_predictions
from .models import ModelBundle, config_hash
from .synth import SynthResult
from .training import TrainConfig, joint_train, naive_train

__all__ = [
    "Prepared",
    "prepare_result",
    "load_dataset",
    "train_model",
    "evaluate_model",
    "RUN_COLUMNS",
    "SUMMARY_METRICS",
    "write_runs_csv",
    "read_runs_csv",
    "summarize",
    "write_summary_csv",
    "run_hash",
]

RUN_COLUMNS = (
    "run_id", "mode", "gamma", "lambda", "seed", "regime",
    "auc", "acc", "rmse", "true_risk", "naive_risk", "dr_risk", "bias_bound",
)
SUMMARY_METRICS = ("auc", "acc", "rmse", "true_risk", "naive_risk", "dr_risk", "bias_bound")


@dataclass
class Prepared:
    n_concepts: int
    train: list
    val: list
    test: list
    gamma: float | None
    fingerprint: str

    @property
    def has_grid(self) -> bool:
        return bool(self.test) and all(s.has_grid for s in self.test)


def _split(seqs, n_concepts, cfg: TrainConfig, gamma, fingerprint) -> Prepared:
    split = split_students(seqs, cfg.n_folds, cfg.val_frac, cfg.seed)[cfg.fold]
    by = {s.student_id: s for s in seqs}
    pick = lambda ids: [by[i] for i in ids]
    return Prepared(n_concepts, pick(split.train), pick(split.val), pick(split.test), gamma, fingerprint)


def _fingerprint_arrays(seqs) -> str:
    h = hashlib.sha256()
    for s in seqs:
        h.update(repr(s.student_id).encode())
        h.update(np.ascontiguousarray(s.concepts).tobytes())
        h.update(np.ascontiguousarray(s.responses).tobytes())
    return h.hexdigest()[:16]


def prepare_result(result: SynthResult, cfg: TrainConfig) -> Prepared:
    seqs = build_kt_sequences(result.sequences, result.grid, cfg.max_len)
    return _split(seqs, result.config.n_concepts, cfg, result.config.gamma, _fingerprint_arrays(seqs))


def load_dataset(path, cfg: TrainConfig) -> Prepared:
    """Read a dataset directory (interactions plus optional grid files)."""
    root = Path(path)
    inter = root / "interactions.jsonl"
    if not inter.is_file():
        raise FileNotFoundError(f"no interactions.jsonl in {root}")
    seqs = load_interactions(inter)
    grid = None
    if (root / "counterfactual.jsonl").is_file():
        prop = root / "propensity.jsonl"
        grid = load_grid(root / "counterfactual.jsonl", prop if prop.is_file() else None)
    gamma, n_concepts = None, None
    meta = root / "dataset.json"
    if meta.is_file():
        doc = json.loads(meta.read_text(encoding="utf-8"))
        gamma = doc.get("config", {}).get("gamma")
        n_concepts = doc.get("config", {}).get("n_concepts")
    if n_concepts is None:
        n_concepts = 1 + max(i.concept_id for s in seqs for i in s.interactions)
    kts = build_kt_sequences(seqs, grid, cfg.max_len)
    if len(kts) < cfg.n_folds:
        raise ParseError(f"only {len(kts)} usable sequences in {root}")
    return _split(kts, n_concepts, cfg, gamma, _fingerprint_arrays(kts))


def run_hash(mode: str, cfg: TrainConfig, fingerprint: str) -> str:
    return config_hash({"mode": mode, "train": asdict(cfg), "data": fingerprint})


def train_model(mode: str, data: Prepared, cfg: TrainConfig):
    if mode == "naive":
        backbone, history = naive_train(data.train, data.val, data.n_concepts, cfg)
        bundle = ModelBundle(backbone)
    elif mode == "tsdr":
        bundle, history = joint_train(data.train, data.val, data.n_concepts, cfg)
    else:
        raise ValueError(f"mode must be naive or tsdr, got {mode!r}")
    bundle.meta = {
        "mode": mode,
        "train": asdict(cfg),
        "data": data.fingerprint,
        "gamma": data.gamma,
        "test_ids": [s.student_id for s in data.test],
    }
    return bundle, history


def evaluate_model(bundle: ModelBundle, seqs, regimes: Sequence[str], run_id: str, gamma, lam, seed) -> tuple[list[dict], object]:
    """One CSV row per regime plus the RiskReport (None without a grid)."""
    preds = grid_predictions(bundle, seqs)
    report = None
    if preds.has_grid:
        p_min = bundle.propensity.p_min if bundle.propensity is not None else 0.05
        report = bundle_risk_report(preds, p_min=p_min)
    rows = []
    for regime in regimes:
        m = evaluate_regime(preds, regime)
        rows.append(
            {
                "run_id": run_id,
                "mode": bundle.meta.get("mode", ""),
                "gamma": gamma,
                "lambda": lam,
                "seed": seed,
                "regime": regime,
                **m,
                "true_risk": None if report is None else report.true_risk,
                "naive_risk": None if report is None else report.naive_risk,
                "dr_risk": None if report is None else report.dr_risk,
                "bias_bound": None if report is None else report.bias_bound,
            }
        )
    return rows, report


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_runs_csv(path, rows: Iterable[dict], columns: Sequence[str] = RUN_COLUMNS) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_runs_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(RUN_COLUMNS) - set(rows[0].keys() if rows else RUN_COLUMNS)
    if missing:
        raise ParseError(f"{path}: missing columns {sorted(missing)}")
    return rows


def _float(v):
    if v in (None, ""):
        return None
    return float(v)


def summarize(rows: Sequence[dict], axis: str) -> list[dict]:
    """Mean and sample std per (mode, axis value, regime), in first-seen order."""
    if axis not in ("gamma", "lambda"):
        raise ValueError("axis must be gamma or lambda")
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["mode"], _fmt(_float(r[axis])), r["regime"]), []).append(r)
    out = []
    for (mode, value, regime), members in groups.items():
        rec = {"mode": mode, "axis": axis, "value": value, "regime": regime, "n_runs": len(members)}
        for m in SUMMARY_METRICS:
            vals = [v for v in (_float(x.get(m)) for x in members) if v is not None and not math.isnan(v)]
            rec[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            rec[f"{m}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
        out.append(rec)
    return out


def summary_columns() -> list[str]:
    cols = ["mode", "axis", "value", "regime", "n_runs"]
    for m in SUMMARY_METRICS:
        cols += [f"{m}_mean", f"{m}_std"]
    return cols


def write_summary_csv(path, summary: Sequence[dict]) -> None:
    write_runs_csv(path, summary, summary_columns())
