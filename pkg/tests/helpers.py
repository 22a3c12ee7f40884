"""Shared builders for the unit and acceptance suites."""

import numpy as np

from tsdr.data import KTSequence, build_kt_sequences
from tsdr.models import make_batch
from tsdr.synth import DESK_PROFILE, SynthConfig, generate_dataset
from tsdr.training import TrainConfig, bce_grid, dr_loss, imputation_loss, init_bundle, propensity_loss


def make_seq(concepts, responses, sid=0):
    return KTSequence(sid, np.asarray(concepts, dtype=np.int64), np.asarray(responses, dtype=np.int64))


def gradcheck_losses(seed=3, n_seqs=8, max_len=20):
    """Loss closures and parameter dicts for the three models on a small desk batch."""
    res = generate_dataset(SynthConfig(**DESK_PROFILE, gamma=0.6, seed=7))
    seqs = build_kt_sequences(res.sequences, res.grid, max_len=max_len)[:n_seqs]
    C = res.config.n_concepts
    b = make_batch(seqs, C)
    bu = init_bundle(C, TrainConfig(seed=seed))
    e = np.random.default_rng(0).uniform(0, 2, b.obs.shape)
    p_hat = np.full(b.obs.shape, 0.3)

    def kt():
        return dr_loss(bce_grid(bu.backbone.forward(b)[0], b.labels), e, p_hat, b.obs, b.valid_rows)

    def prop():
        return propensity_loss(b.obs, bu.propensity.raw(b), b.valid_rows)

    def imp():
        e_hat, states = bu.imputation.forward(b)
        return imputation_loss(e, e_hat, p_hat, b.obs, states, 1.0, b)

    return {
        "kt": (kt, bu.backbone.params),
        "propensity": (prop, bu.propensity.params),
        "imputation": (imp, bu.imputation.params),
    }


# one line per acceptance criterion, printed at the end of the session
CRITERIA: dict[int, str] = {}


def report(number: int, passed: bool, summary: str) -> bool:
    CRITERIA[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {summary}"
    return passed
