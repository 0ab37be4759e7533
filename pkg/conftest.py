import os

import numpy as np
import pytest

from cellsim import Impairments, ScenarioConfig, generate
from grid import CellConfig

# Zero keeps the quick defaults; acceptance runs set the full trial count
MONTE_CARLO_TRIALS = int(os.environ.get("OWL_MONTE_CARLO_TRIALS", "0"))


def trials(default: int) -> int:
    return MONTE_CARLO_TRIALS or default


def acceptance_trials(minimum: int) -> int:
    return max(minimum, MONTE_CARLO_TRIALS)


# Long statistical runs only execute when a trial count is set
monte_carlo = pytest.mark.skipif(MONTE_CARLO_TRIALS == 0, reason="set OWL_MONTE_CARLO_TRIALS to run")


def small_scenario(**overrides) -> ScenarioConfig:
    """Six frames of a 15-RB cell with a few random-access arrivals and busy UEs."""
    settings = dict(cfg=CellConfig.for_bandwidth(15, pci=101), frames=6, seed=7, ue_arrival_rate=150.0,
                    ue_dci_rate=400.0, max_ues=4)
    settings.update(overrides)
    return ScenarioConfig(**settings)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cell15():
    return CellConfig.for_bandwidth(15, pci=101)


@pytest.fixture(scope="session")
def cell6():
    return CellConfig.for_bandwidth(6, pci=17)


@pytest.fixture(scope="session")
def clean_run():
    """Noiseless six-frame trace and its ground truth."""
    return generate(small_scenario(), workers=2)


@pytest.fixture(scope="session")
def noisy_run():
    """The same traffic model at 20 dB SNR with a carrier offset."""
    return generate(small_scenario(seed=11, impairments=Impairments(snr_db=20.0, cfo_hz=300.0)), workers=2)
