import sys

import numpy as np
import pytest
from loguru import logger

from authsim.channel_model import SystemParams
from authsim.experiments import Knobs
from authsim.stats_core import RandomStream


@pytest.fixture
def stream() -> RandomStream:
    return RandomStream(1234)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


@pytest.fixture
def table2_params() -> SystemParams:
    """rho_AE = 0.1, SNR_I = 15 dB, SNR_II = 20 dB, flat fading, one sub-carrier."""
    return SystemParams.uniform(1, 1.0, rho_ae=0.1, snr_i_db=15.0, snr_ii_db=20.0)


@pytest.fixture
def small_knobs() -> Knobs:
    return Knobs(
        block_size=2000,
        calibration_trials=20_000,
        threshold_trials=20_000,
        exponent_trials=5_000,
        training_size=200,
        g_folds=5,
        ocnn_realizations=2,
    )


@pytest.fixture
def restore_logger():
    yield
    logger.remove()
    logger.add(sys.stderr)
