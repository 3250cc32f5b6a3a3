import numpy as np
import pytest
import torch

from replaygan.cohortsim import default_sim_config, sample_cohort
from replaygan.schema import hiv_schema

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def schema():
    return hiv_schema()


@pytest.fixture(scope="session")
def small_cohort():
    return sample_cohort(default_sim_config(n_patients=60, seed=11))


@pytest.fixture(scope="session")
def cohort500():
    return sample_cohort(default_sim_config(n_patients=500, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_schema():
    from replaygan.schema import BINARY, CATEGORICAL, NUMERIC, VariableSchema, VariableSpec

    return VariableSchema((
        VariableSpec("a", NUMERIC),
        VariableSpec("b", BINARY, levels=("no", "yes")),
        VariableSpec("c", CATEGORICAL, levels=("x", "y", "z"), embed_dim=2),
    ))


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts (one line per criterion) at the end of the run."""
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) == "call":
                lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
