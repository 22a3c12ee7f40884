"""Interaction records, counterfactual grids, file I/O and fold splits.

Interaction files are JSON Lines, one record per interaction::

    {"student_id": 7, "t": 1, "concept_id": 3, "question_id": 13,
     "response": 1, "observed": 1, "true_p": 0.41}

``true_p`` is optional. A row with ``observed == 0`` is a skipped
interaction; its ``response`` is the counterfactual answer on simulated data
and may be null on logged data.

Grid files hold one record per (student, t) with per-concept arrays::

    {"student_id": 7, "t": 1, "true_p": [...], "response": [...]}

and propensity files the same layout with a ``propensity`` array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Interaction",
    "StudentSequence",
    "StudentGrid",
    "CounterfactualGrid",
    "FoldSplit",
    "KTSequence",
    "ParseError",
    "load_interactions",
    "write_interactions",
    "load_grid",
    "write_grid",
    "truncate_sequences",
    "split_students",
    "build_kt_sequences",
    "MIN_SEQUENCE_LENGTH",
]

MIN_SEQUENCE_LENGTH = 5
REQUIRED_FIELDS = ("student_id", "t", "concept_id", "question_id", "response", "observed")


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    student_id: int | str
    t: int
    concept_id: int
    question_id: int | str
    response: int | None
    observed: int
    true_p: float | None = None

    def to_record(self) -> dict:
        rec = {
            "student_id": self.student_id,
            "t": self.t,
            "concept_id": self.concept_id,
            "question_id": self.question_id,
            "response": self.response,
            "observed": self.observed,
        }
        if self.true_p is not None:
            rec["true_p"] = self.true_p
        return rec


@dataclass(frozen=True)
class StudentSequence:
    student_id: int | str
    interactions: tuple[Interaction, ...]

    @property
    def length(self) -> int:
        return len(self.interactions)

    def observed_only(self) -> "StudentSequence":
        return StudentSequence(self.student_id, tuple(i for i in self.interactions if i.observed))


@dataclass(frozen=True)
class StudentGrid:
    """Per-step, per-concept ground truth for one simulated student.

    Row k describes the state at step ``t[k]`` before that step's answer.
    """

    t: np.ndarray
    true_p: np.ndarray
    response: np.ndarray
    propensity: np.ndarray | None = None

    def row_of(self, t: int) -> int:
        k = int(np.searchsorted(self.t, t))
        if k >= self.t.size or self.t[k] != t:
            raise KeyError(f"no grid row for t={t}")
        return k


@dataclass
class CounterfactualGrid:
    students: dict = field(default_factory=dict)

    def __getitem__(self, sid) -> StudentGrid:
        return self.students[sid]

    def __contains__(self, sid) -> bool:
        return sid in self.students

    def __len__(self) -> int:
        return len(self.students)


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    seed: int
    train: tuple
    val: tuple
    test: tuple


@dataclass(frozen=True)
class KTSequence:
    """Model-ready view of one student's observed log.

    On simulated data the grid arrays are aligned to the observed
    interactions: row j holds the ground truth at the time of interaction j,
    and ``propensity[j, c]`` is the probability that interaction j concerns
    concept c.
    """

    student_id: int | str
    concepts: np.ndarray
    responses: np.ndarray
    true_p: np.ndarray | None = None
    cf_response: np.ndarray | None = None
    propensity: np.ndarray | None = None

    @property
    def length(self) -> int:
        return int(self.concepts.size)

    @property
    def has_grid(self) -> bool:
        return self.cf_response is not None

    def tail(self, max_len: int) -> "KTSequence":
        if self.length <= max_len:
            return self
        s = slice(self.length - max_len, None)
        return KTSequence(
            self.student_id,
            self.concepts[s],
            self.responses[s],
            None if self.true_p is None else self.true_p[s],
            None if self.cf_response is None else self.cf_response[s],
            None if self.propensity is None else self.propensity[s],
        )


# -- interaction files ------------------------------------------------------


def _binary(value, name: str, lineno: int, allow_null: bool = False):
    if value is None and allow_null:
        return None
    if isinstance(value, bool) or value not in (0, 1):
        raise ParseError(f"line {lineno}: {name} must be 0 or 1, got {value!r}")
    return int(value)


def _parse_line(line: str, lineno: int) -> Interaction:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise ParseError(f"line {lineno}: expected an object")
    for name in REQUIRED_FIELDS:
        if name not in rec:
            raise ParseError(f"line {lineno}: missing required field {name!r}")
    observed = _binary(rec["observed"], "observed", lineno)
    response = _binary(rec["response"], "response", lineno, allow_null=observed == 0)
    t = rec["t"]
    if isinstance(t, bool) or not isinstance(t, int) or t < 1:
        raise ParseError(f"line {lineno}: t must be a positive integer, got {t!r}")
    c = rec["concept_id"]
    if isinstance(c, bool) or not isinstance(c, int) or c < 0:
        raise ParseError(f"line {lineno}: concept_id must be a non-negative integer, got {c!r}")
    true_p = rec.get("true_p")
    if true_p is not None:
        true_p = float(true_p)
        if not 0.0 <= true_p <= 1.0:
            raise ParseError(f"line {lineno}: true_p outside [0, 1]")
    return Interaction(rec["student_id"], t, c, rec["question_id"], response, observed, true_p)


def load_interactions(path) -> list[StudentSequence]:
    """Group records by student (first-appearance order), validating t order."""
    groups: dict = {}
    last_t: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            it = _parse_line(line, lineno)
            prev = last_t.get(it.student_id)
            if prev is not None and it.t == prev:
                raise ParseError(f"line {lineno}: duplicated (student_id, t) = ({it.student_id!r}, {it.t})")
            if prev is not None and it.t < prev:
                raise ParseError(f"line {lineno}: t={it.t} not increasing for student {it.student_id!r}")
            last_t[it.student_id] = it.t
            groups.setdefault(it.student_id, []).append(it)
    return [StudentSequence(sid, tuple(items)) for sid, items in groups.items()]


def write_interactions(path, seqs: Iterable[StudentSequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq in seqs:
            for it in seq.interactions:
                fh.write(json.dumps(it.to_record(), separators=(",", ":")) + "\n")


# -- grid files -------------------------------------------------------------


def write_grid(path, grid: CounterfactualGrid, kind: str = "counterfactual") -> None:
    """Write the counterfactual part (``kind='counterfactual'``) or the propensity part."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sid, g in grid.students.items():
            for k in range(g.t.size):
                rec = {"student_id": sid, "t": int(g.t[k])}
                if kind == "counterfactual":
                    rec["true_p"] = [float(x) for x in g.true_p[k]]
                    rec["response"] = [int(x) for x in g.response[k]]
                elif kind == "propensity":
                    if g.propensity is None:
                        raise ValueError("grid carries no propensities")
                    rec["propensity"] = [float(x) for x in g.propensity[k]]
                else:
                    raise ValueError(f"unknown grid kind {kind!r}")
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _read_grid_records(path) -> dict:
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path} line {lineno}: invalid JSON ({exc.msg})") from None
            if "student_id" not in rec or "t" not in rec:
                raise ParseError(f"{path} line {lineno}: grid record needs student_id and t")
            rows = out.setdefault(rec["student_id"], [])
            if rows and rec["t"] <= rows[-1]["t"]:
                raise ParseError(f"{path} line {lineno}: t not increasing")
            rows.append(rec)
    return out


def load_grid(path, propensity_path=None) -> CounterfactualGrid:
    raw = _read_grid_records(path)
    props = _read_grid_records(propensity_path) if propensity_path is not None else {}
    grid = CounterfactualGrid()
    for sid, rows in raw.items():
        t = np.array([r["t"] for r in rows], dtype=np.int64)
        true_p = np.array([r["true_p"] for r in rows], dtype=np.float64)
        resp = np.array([r["response"] for r in rows], dtype=np.int64)
        prop = None
        if sid in props:
            prow = props[sid]
            if [r["t"] for r in prow] != t.tolist():
                raise ParseError(f"propensity rows for student {sid!r} do not match the grid")
            prop = np.array([r["propensity"] for r in prow], dtype=np.float64)
        grid.students[sid] = StudentGrid(t, true_p, resp, prop)
    return grid


# -- transforms -------------------------------------------------------------


def truncate_sequences(seqs: Sequence[StudentSequence], max_len: int = 50) -> list[StudentSequence]:
    """Keep each sequence's latest ``max_len`` interactions, re-indexing t from 1."""
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    out = []
    for seq in seqs:
        items = seq.interactions[-max_len:]
        items = tuple(
            Interaction(i.student_id, k, i.concept_id, i.question_id, i.response, i.observed, i.true_p)
            for k, i in enumerate(items, start=1)
        )
        out.append(StudentSequence(seq.student_id, items))
    return out


def split_students(ids: Sequence, n_folds: int = 5, val_frac: float = 0.1, seed: int = 42) -> list[FoldSplit]:
    """Student-level folds; validation comes from the non-test remainder.

    Accepts student ids or StudentSequence objects.
    """
    ids = [s.student_id if isinstance(s, (StudentSequence, KTSequence)) else s for s in ids]
    if len(ids) < n_folds:
        raise ValueError(f"need at least {n_folds} students for {n_folds} folds, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(order, n_folds)
    splits = []
    for k in range(n_folds):
        test = chunks[k]
        rest = np.concatenate([chunks[j] for j in range(n_folds) if j != k])
        n_val = int(round(val_frac * rest.size))
        splits.append(
            FoldSplit(
                fold=k,
                seed=seed,
                train=tuple(ids[i] for i in rest[n_val:]),
                val=tuple(ids[i] for i in rest[:n_val]),
                test=tuple(ids[i] for i in test),
            )
        )
    return splits


def build_kt_sequences(
    seqs: Sequence[StudentSequence],
    grid: CounterfactualGrid | None = None,
    max_len: int = 50,
    min_len: int = MIN_SEQUENCE_LENGTH,
) -> list[KTSequence]:
    """Observed log per student, aligned to the grid, truncated, length-filtered."""
    out = []
    for seq in seqs:
        obs = [i for i in seq.interactions if i.observed]
        if len(obs) < min_len:
            continue
        concepts = np.array([i.concept_id for i in obs], dtype=np.int64)
        responses = np.array([i.response for i in obs], dtype=np.int64)
        true_p = cf = prop = None
        if grid is not None and seq.student_id in grid:
            g = grid[seq.student_id]
            rows = np.array([g.row_of(i.t) for i in obs], dtype=np.int64)
            true_p = g.true_p[rows]
            cf = g.response[rows]
            if g.propensity is not None:
                raw = g.propensity[rows]
                prop = raw / raw.sum(axis=1, keepdims=True)
        out.append(KTSequence(seq.student_id, concepts, responses, true_p, cf, prop).tail(max_len))
    return out
