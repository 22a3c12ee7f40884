"""Simulated students with Zipf exposure, BKT-style noise and MNAR skipping.

Each step a question is drawn by Zipf popularity, the student answers with
probability ``m (1 - slip) + (1 - m) guess`` given their mastery ``m`` of the
question's concept, and the interaction is skipped with a probability that
only depends on how extreme that success probability is. Correct, logged
answers raise mastery by ``m += rate (1 - m)``.

All randomness for student ``i`` comes from ``SeedSequence(seed).spawn`` child
``i``, and the number of draws per step does not depend on ``gamma``, so the
same seed yields the same question and answer draws at every bias level.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import (
    CounterfactualGrid,
    Interaction,
    StudentGrid,
    StudentSequence,
    write_grid,
    write_interactions,
)

__all__ = [
    "SynthConfig",
    "SynthResult",
    "zipf_probs",
    "success_prob",
    "mastery_update",
    "mnar_skip_prob",
    "concept_of",
    "generate_dataset",
    "write_dataset",
    "GENERATOR_VERSION",
    "GAMMA_LEVELS",
    "DESK_PROFILE",
    "FULL_PROFILE",
]

GENERATOR_VERSION = "tsdr-synth/1"
GAMMA_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8, 0.999)
INIT_MASTERY_RANGE = (0.0, 0.3)
LOW_BAND, HIGH_BAND = 0.25, 0.75


@dataclass(frozen=True)
class SynthConfig:
    n_students: int = 1000
    n_questions: int = 200
    n_concepts: int = 20
    zipf_alpha: float = 0.8
    learn_rate: float = 0.55
    guess: float = 0.1
    slip: float = 0.05
    gamma: float = 0.0
    steps_per_student: int = 50
    update_on_skip: bool = False
    seed: int = 42

    def validate(self) -> None:
        errs = []
        if self.n_students < 1:
            errs.append("n_students must be >= 1")
        if self.n_questions < 1:
            errs.append("n_questions must be >= 1")
        if not 1 <= self.n_concepts <= self.n_questions:
            errs.append("n_concepts must be in [1, n_questions] so every concept has a question")
        if self.zipf_alpha < 0:
            errs.append("zipf_alpha must be >= 0")
        if not 0.0 < self.learn_rate <= 1.0:
            errs.append("learn_rate must be in (0, 1]")
        for name in ("guess", "slip"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                errs.append(f"{name} must be in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            errs.append(f"gamma must be in [0, 1), got {self.gamma}")
        if self.steps_per_student < 1:
            errs.append("steps_per_student must be >= 1")
        if errs:
            raise ValueError("invalid SynthConfig: " + "; ".join(errs))

    def replace(self, **kw) -> "SynthConfig":
        vals = asdict(self)
        vals.update(kw)
        return SynthConfig(**vals)


DESK_PROFILE = dict(n_students=200, n_questions=50, n_concepts=10, steps_per_student=50)
FULL_PROFILE = dict(n_students=1000, n_questions=200, n_concepts=20, steps_per_student=50)


def zipf_probs(n: int, alpha: float) -> np.ndarray:
    if n < 1:
        raise ValueError("zipf_probs needs n >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** alpha
    return w / w.sum()


def success_prob(m, guess: float, slip: float):
    return m * (1.0 - slip) + (1.0 - m) * guess


def mastery_update(m: float, response: int, learn_rate: float) -> float:
    return m + learn_rate * (1.0 - m) if response == 1 else m


def mnar_skip_prob(p, gamma: float):
    p = np.asarray(p, dtype=np.float64)
    out = np.where(p < LOW_BAND, gamma * (1.0 - p), np.where(p > HIGH_BAND, gamma * p, 0.0))
    return float(out) if out.ndim == 0 else out


def concept_of(question: int, n_concepts: int) -> int:
    return question % n_concepts


@dataclass
class SynthResult:
    config: SynthConfig
    sequences: list[StudentSequence]
    grid: CounterfactualGrid

    def stats(self) -> dict:
        n_obs = sum(i.observed for s in self.sequences for i in s.interactions)
        n_events = sum(s.length for s in self.sequences)
        skipped_mid = sum(
            1
            for s in self.sequences
            for i in s.interactions
            if not i.observed and LOW_BAND <= i.true_p <= HIGH_BAND
        )
        return {
            "n_events": n_events,
            "n_observed": n_obs,
            "n_skipped": n_events - n_obs,
            "n_skipped_mid_band": skipped_mid,
            "n_sequences": len(self.sequences),
            "n_sequences_min5_observed": sum(
                1 for s in self.sequences if sum(i.observed for i in s.interactions) >= 5
            ),
        }


def _simulate_student(idx: int, ss: np.random.SeedSequence, cfg: SynthConfig, q_probs, concept_pop):
    rng = np.random.default_rng(ss)
    C = cfg.n_concepts
    m = rng.uniform(*INIT_MASTERY_RANGE, size=C)
    steps = cfg.steps_per_student
    true_p = np.empty((steps, C))
    resp = np.empty((steps, C), dtype=np.int64)
    prop = np.empty((steps, C))
    questions = rng.choice(cfg.n_questions, size=steps, p=q_probs)
    u_resp = rng.random((steps, C))
    u_skip = rng.random(steps)
    items = []
    for k in range(steps):
        q = int(questions[k])
        c = concept_of(q, C)
        p_all = success_prob(m, cfg.guess, cfg.slip)
        skip_all = mnar_skip_prob(p_all, cfg.gamma)
        r_all = (u_resp[k] < p_all).astype(np.int64)
        true_p[k] = p_all
        resp[k] = r_all
        prop[k] = concept_pop * (1.0 - skip_all)
        observed = int(u_skip[k] >= skip_all[c])
        r = int(r_all[c])
        items.append(Interaction(idx, k + 1, c, q, r, observed, float(p_all[c])))
        if observed or cfg.update_on_skip:
            m[c] = mastery_update(m[c], r, cfg.learn_rate)
    t = np.arange(1, steps + 1, dtype=np.int64)
    return StudentSequence(idx, tuple(items)), StudentGrid(t, true_p, resp, prop)


def generate_dataset(cfg: SynthConfig) -> SynthResult:
    """Observed/skipped logs plus the full ground-truth grid.

    The grid's propensity row is the probability that a given step presents
    concept c and is logged. Normalizing a row over concepts gives the
    probability that the next logged interaction is concept c, exactly so
    when skipped steps do not change mastery.
    """
    cfg.validate()
    q_probs = zipf_probs(cfg.n_questions, cfg.zipf_alpha)
    concept_pop = np.zeros(cfg.n_concepts)
    np.add.at(concept_pop, np.arange(cfg.n_questions) % cfg.n_concepts, q_probs)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_students)
    seqs, grid = [], CounterfactualGrid()
    for i, ss in enumerate(children):
        seq, g = _simulate_student(i, ss, cfg, q_probs, concept_pop)
        seqs.append(seq)
        grid.students[i] = g
    return SynthResult(cfg, seqs, grid)


def manifest_dict(result: SynthResult) -> dict:
    return {
        "generator_version": GENERATOR_VERSION,
        "config": asdict(result.config),
        "design_choices": {
            "initial_mastery": f"uniform[{INIT_MASTERY_RANGE[0]}, {INIT_MASTERY_RANGE[1]}] per (student, concept)",
            "success_prob": "m*(1-slip) + (1-m)*guess",
            "mastery_update": "m + learn_rate*(1-m) on a correct answer",
            "update_on_skip": result.config.update_on_skip,
            "question_to_concept": "q mod n_concepts",
            "skip_bands": [LOW_BAND, HIGH_BAND],
        },
        "stats": result.stats(),
    }


def write_dataset(result: SynthResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "interactions": out / "interactions.jsonl",
        "grid": out / "counterfactual.jsonl",
        "propensity": out / "propensity.jsonl",
        "dataset": out / "dataset.json",
    }
    write_interactions(paths["interactions"], result.sequences)
    write_grid(paths["grid"], result.grid, kind="counterfactual")
    write_grid(paths["propensity"], result.grid, kind="propensity")
    with open(paths["dataset"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest_dict(result), indent=2, sort_keys=True) + "\n")
    return paths
