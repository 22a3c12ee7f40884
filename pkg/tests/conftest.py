import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tsdr.data import build_kt_sequences
from tsdr.synth import DESK_PROFILE, SynthConfig, generate_dataset

settings.register_profile("tsdr", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("tsdr")


@pytest.fixture(scope="session")
def tiny_result():
    cfg = SynthConfig(n_students=30, n_questions=12, n_concepts=4, steps_per_student=15, gamma=0.6, seed=5)
    return generate_dataset(cfg)


@pytest.fixture(scope="session")
def tiny_seqs(tiny_result):
    return build_kt_sequences(tiny_result.sequences, tiny_result.grid)


@pytest.fixture(scope="session")
def desk_result():
    return generate_dataset(SynthConfig(**DESK_PROFILE, gamma=0.8, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import CRITERIA

    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
