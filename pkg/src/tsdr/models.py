"""Recurrent KT backbone, propensity model and error-imputation model.

All three share one encoder shape: a concept-by-response embedding
(2|C| x d) feeding a single-layer GRU. Heads map each hidden state to one
output per concept, so a batch forward yields a ((T-1)*B, |C|) grid ordered
time-major (row ``s * B + b`` is student b's prediction for step s + 1).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Matrix
from .data import KTSequence

__all__ = [
    "Batch",
    "make_batch",
    "GRUEncoder",
    "KTBackbone",
    "PropensityModel",
    "ImputationModel",
    "ModelBundle",
    "smoothness_penalty",
    "trajectory_penalty",
    "encode",
    "predict",
    "propensity_forward",
    "impute",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = "tsdr-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Batch:
    """Padded, time-major arrays for a group of sequences.

    ``inputs[s, b]`` is the embedding row of student b's interaction s + 1;
    grids have one row per (s, b) prediction target.
    """

    student_ids: list
    lengths: np.ndarray
    inputs: np.ndarray
    valid: np.ndarray
    obs: np.ndarray
    labels: np.ndarray
    n_concepts: int
    true_p: np.ndarray | None = None
    cf_response: np.ndarray | None = None
    propensity: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def size(self) -> int:
        return self.inputs.shape[1]

    @property
    def valid_rows(self) -> np.ndarray:
        return self.valid.reshape(-1)

    @property
    def row_weights(self) -> np.ndarray:
        """1/(T_b - 1) on valid rows, used for per-sequence averages."""
        denom = np.maximum(self.lengths - 1, 1).astype(np.float64)
        w = self.valid / denom[None, :]
        return w.reshape(-1, 1)


def make_batch(seqs: Sequence[KTSequence], n_concepts: int) -> Batch:
    if not seqs:
        raise ValueError("empty batch")
    lengths = np.array([s.length for s in seqs], dtype=np.int64)
    if np.any(lengths < 2):
        raise ValueError("every sequence needs at least 2 interactions")
    B = len(seqs)
    S = int(lengths.max()) - 1
    C = n_concepts
    inputs = np.zeros((S, B), dtype=np.int64)
    valid = np.zeros((S, B), dtype=bool)
    obs = np.zeros((S, B, C))
    labels = np.zeros((S, B, C))
    has_grid = all(s.has_grid for s in seqs)
    has_prop = all(s.propensity is not None for s in seqs)
    true_p = np.zeros((S, B, C)) if has_grid else None
    cf = np.zeros((S, B, C)) if has_grid else None
    prop = np.full((S, B, C), 1.0 / C) if has_prop else None
    for b, seq in enumerate(seqs):
        c, r = seq.concepts, seq.responses
        if c.max(initial=0) >= C or c.min(initial=0) < 0:
            raise ValueError(f"concept id out of range [0, {C}) for student {seq.student_id!r}")
        n = seq.length - 1
        inputs[:n, b] = c[:n] + C * r[:n]
        valid[:n, b] = True
        obs[np.arange(n), b, c[1:]] = 1.0
        labels[np.arange(n), b, c[1:]] = r[1:]
        if has_grid:
            true_p[:n, b] = seq.true_p[1:]
            cf[:n, b] = seq.cf_response[1:]
        if has_prop:
            prop[:n, b] = seq.propensity[1:]
    flat = lambda a: None if a is None else a.reshape(S * B, C)
    return Batch(
        [s.student_id for s in seqs],
        lengths,
        inputs,
        valid,
        flat(obs),
        flat(labels),
        C,
        flat(true_p),
        flat(cf),
        flat(prop),
    )


def _uniform(rng: np.random.Generator, shape, dim: int, name: str) -> Matrix:
    k = 1.0 / np.sqrt(dim)
    return Matrix(rng.uniform(-k, k, size=shape), requires_grad=True, name=name)


class GRUEncoder:
    """Interaction embedding followed by a gated recurrent cell."""

    GATES = ("z", "r", "n")

    def __init__(self, n_concepts: int, dim: int, rng: np.random.Generator, prefix: str):
        self.n_concepts = n_concepts
        self.dim = dim
        self.prefix = prefix
        p = {f"{prefix}.embed": _uniform(rng, (2 * n_concepts, dim), dim, f"{prefix}.embed")}
        for g in self.GATES:
            p[f"{prefix}.W{g}"] = _uniform(rng, (dim, dim), dim, f"{prefix}.W{g}")
            p[f"{prefix}.U{g}"] = _uniform(rng, (dim, dim), dim, f"{prefix}.U{g}")
            p[f"{prefix}.b{g}"] = _uniform(rng, (1, dim), dim, f"{prefix}.b{g}")
        self.params = p

    def run(self, inputs: np.ndarray, dropout: float = 0.0, rng=None) -> list[Matrix]:
        """Hidden states [h_0, h_1, ..., h_S]; h_0 is the zero initial state."""
        S, B = inputs.shape
        P, pre = self.params, self.prefix
        E = P[f"{pre}.embed"]
        eye = np.eye(2 * self.n_concepts)
        h = Matrix(np.zeros((B, self.dim)))
        states = [h]
        for s in range(S):
            x = Matrix._wrap(eye[inputs[s]], False) @ E
            if dropout > 0.0 and rng is not None:
                keep = (rng.random((B, self.dim)) >= dropout) / (1.0 - dropout)
                x = ad.mul(x, Matrix._wrap(keep, False))
            z = ad.sigmoid(ad.add(ad.add(x @ P[f"{pre}.Wz"], h @ P[f"{pre}.Uz"]), P[f"{pre}.bz"]))
            r = ad.sigmoid(ad.add(ad.add(x @ P[f"{pre}.Wr"], h @ P[f"{pre}.Ur"]), P[f"{pre}.br"]))
            n = ad.tanh(ad.add(ad.add(x @ P[f"{pre}.Wn"], ad.mul(r, h) @ P[f"{pre}.Un"]), P[f"{pre}.bn"]))
            h = ad.add(n, ad.mul(z, ad.sub(h, n)))
            states.append(h)
        return states


class _Head:
    def __init__(self, dim: int, n_out: int, rng, prefix: str):
        self.params = {
            f"{prefix}.W": _uniform(rng, (dim, n_out), dim, f"{prefix}.W"),
            f"{prefix}.b": _uniform(rng, (1, n_out), dim, f"{prefix}.b"),
        }
        self.prefix = prefix

    def logits(self, H: Matrix) -> Matrix:
        return ad.add(H @ self.params[f"{self.prefix}.W"], self.params[f"{self.prefix}.b"])


def _stack(states: list[Matrix]) -> Matrix:
    return ad.concat(states[1:], axis=0)


class _SequenceModel:
    kind = "model"

    def __init__(self, n_concepts: int, dim: int, rng: np.random.Generator):
        self.n_concepts = n_concepts
        self.dim = dim
        self.encoder = GRUEncoder(n_concepts, dim, rng, f"{self.kind}.enc")
        self.head = _Head(dim, n_concepts, rng, f"{self.kind}.head")

    @property
    def params(self) -> dict[str, Matrix]:
        return {**self.encoder.params, **self.head.params}

    def zero_(self) -> None:
        for p in self.params.values():
            p.data[...] = 0.0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data[...] = snap[k]


class KTBackbone(_SequenceModel):
    """Encoder f_theta and per-concept success predictor g_phi."""

    kind = "kt"

    def encode(self, batch: Batch, dropout: float = 0.0, rng=None) -> list[Matrix]:
        return self.encoder.run(batch.inputs, dropout, rng)

    def predict(self, states: list[Matrix]) -> Matrix:
        return ad.sigmoid(self.head.logits(_stack(states)))

    def forward(self, batch: Batch, dropout: float = 0.0, rng=None):
        states = self.encode(batch, dropout, rng)
        return self.predict(states), states


class PropensityModel(_SequenceModel):
    """Per-concept observation probability P(o_{t+1,c} = 1 | history, c).

    With ``conditioning='backbone'`` the head reads the KT backbone's hidden
    states (as constants) and this model's encoder goes unused.
    """

    kind = "prop"

    def __init__(self, n_concepts, dim, rng, p_min: float = 0.05, conditioning: str = "own"):
        super().__init__(n_concepts, dim, rng)
        if conditioning not in ("own", "backbone"):
            raise ValueError(f"unknown propensity conditioning {conditioning!r}")
        self.p_min = p_min
        self.conditioning = conditioning

    @property
    def params(self) -> dict[str, Matrix]:
        if self.conditioning == "backbone":
            return dict(self.head.params)
        return super().params

    def raw(self, batch: Batch, dropout=0.0, rng=None, backbone_states=None) -> Matrix:
        if self.conditioning == "backbone":
            if backbone_states is None:
                raise ValueError("backbone-conditioned propensity needs the KT hidden states")
            H = Matrix._wrap(_stack(backbone_states).data, False)
        else:
            H = _stack(self.encoder.run(batch.inputs, dropout, rng))
        return ad.sigmoid(self.head.logits(H))

    def clip(self, raw: np.ndarray) -> np.ndarray:
        return np.maximum(raw, self.p_min)


class ImputationModel(_SequenceModel):
    """Non-negative imputed error per (step, concept) from a separate encoder."""

    kind = "imp"

    def forward(self, batch: Batch, dropout=0.0, rng=None):
        states = self.encoder.run(batch.inputs, dropout, rng)
        return ad.softplus(self.head.logits(_stack(states))), states


@dataclass
class ModelBundle:
    backbone: KTBackbone
    propensity: PropensityModel | None = None
    imputation: ImputationModel | None = None
    meta: dict = field(default_factory=dict)

    def models(self) -> list[_SequenceModel]:
        return [m for m in (self.backbone, self.propensity, self.imputation) if m is not None]

    def params(self) -> dict[str, Matrix]:
        out: dict[str, Matrix] = {}
        for m in self.models():
            out.update(m.params)
        return out


# -- penalties --------------------------------------------------------------


def smoothness_penalty(trajectory, h0=None) -> float:
    """Mean squared step of a latent trajectory h_1..h_K, starting from h_0.

    ``h0`` defaults to the zero initial state of the encoder.
    """
    H = np.atleast_2d(np.asarray(trajectory, dtype=np.float64))
    if H.shape[0] < 1:
        raise ValueError("trajectory needs at least one state")
    start = np.zeros((1, H.shape[1])) if h0 is None else np.atleast_2d(h0)
    full = np.vstack([start, H])
    d = np.diff(full, axis=0)
    return float(np.sum(d * d) / H.shape[0])


def trajectory_penalty(states: list[Matrix], batch: Batch) -> Matrix:
    """Batch mean over students of their mean squared latent step (autodiff)."""
    cur = ad.concat(states[1:], axis=0)
    prev = ad.concat(states[:-1], axis=0)
    sq = ad.sum_rows(ad.square(ad.sub(cur, prev)))
    w = batch.row_weights / batch.size
    return ad.sum_all(ad.mul(sq, Matrix._wrap(w, False)))


# -- single-sequence conveniences -------------------------------------------


def _rows(grid: np.ndarray, n: int) -> np.ndarray:
    return grid.reshape(n, -1)


def encode(backbone: KTBackbone, seq: KTSequence) -> np.ndarray:
    """Hidden states after each of the first T-1 interactions, shape (T-1, d)."""
    batch = make_batch([seq], backbone.n_concepts)
    states = backbone.encode(batch)
    return np.vstack([h.data for h in states[1:]])


def predict(backbone: KTBackbone, seq: KTSequence) -> np.ndarray:
    """Success probability for every concept at every next step, (T-1, |C|)."""
    batch = make_batch([seq], backbone.n_concepts)
    r_hat, _ = backbone.forward(batch)
    return r_hat.data.copy()


def propensity_forward(model: PropensityModel, seq: KTSequence, backbone: KTBackbone | None = None) -> np.ndarray:
    batch = make_batch([seq], model.n_concepts)
    states = backbone.encode(batch) if backbone is not None else None
    return model.clip(model.raw(batch, backbone_states=states).data)


def impute(model: ImputationModel, seq: KTSequence) -> tuple[np.ndarray, np.ndarray]:
    """(imputed error grid (T-1, |C|), latent trajectory h_1..h_{T-1})."""
    batch = make_batch([seq], model.n_concepts)
    e_hat, states = model.forward(batch)
    return e_hat.data.copy(), np.vstack([h.data for h in states[1:]])


# -- checkpoints ------------------------------------------------------------


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path, bundle: ModelBundle, cfg_hash: str) -> None:
    """JSON checkpoint: header fields, then parameters in model/registration order.

    Layout (version 1)::

        {"format": "tsdr-checkpoint", "version": 1, "config_hash": str,
         "n_concepts": int, "dim": int, "models": [kind, ...],
         "propensity": {"p_min": float, "conditioning": str} | null,
         "meta": {...},
         "params": [{"name": str, "shape": [rows, cols], "data": [row-major floats]}, ...]}
    """
    bb = bundle.backbone
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg_hash,
        "n_concepts": bb.n_concepts,
        "dim": bb.dim,
        "models": [m.kind for m in bundle.models()],
        "propensity": None
        if bundle.propensity is None
        else {"p_min": bundle.propensity.p_min, "conditioning": bundle.propensity.conditioning},
        "meta": bundle.meta,
        "params": [],
    }
    for m in bundle.models():
        full = {**m.encoder.params, **m.head.params}
        for name, p in full.items():
            doc["params"].append(
                {"name": name, "shape": list(p.shape), "data": [float(x) for x in p.data.reshape(-1)]}
            )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelBundle, str]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    C, d = doc["n_concepts"], doc["dim"]
    rng = np.random.default_rng(0)
    backbone = KTBackbone(C, d, rng)
    prop = imp = None
    if "prop" in doc["models"]:
        pcfg = doc["propensity"]
        prop = PropensityModel(C, d, rng, p_min=pcfg["p_min"], conditioning=pcfg["conditioning"])
    if "imp" in doc["models"]:
        imp = ImputationModel(C, d, rng)
    bundle = ModelBundle(backbone, prop, imp, meta=doc.get("meta", {}))
    table = {}
    for m in bundle.models():
        table.update(m.encoder.params)
        table.update(m.head.params)
    for rec in doc["params"]:
        p = table.get(rec["name"])
        if p is None:
            raise ValueError(f"{path}: unexpected parameter {rec['name']!r}")
        arr = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
        if arr.shape != p.shape:
            raise ValueError(f"{path}: shape mismatch for {rec['name']!r}")
        p.data[...] = arr
    return bundle, doc["config_hash"]
