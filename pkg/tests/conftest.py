import warnings

import numpy as np
import pytest

from sosgmm.gaussians import GaussianParams


def random_spd(rng, d, lo=0.3, hi=3.0):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (Q * rng.uniform(lo, hi, d)) @ Q.T


def random_gaussian(rng, d, spread=1.0):
    return GaussianParams(spread * rng.standard_normal(d), random_spd(rng, d))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_numba():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*TBB.*")
        yield


# filled by test_acceptance.record(); printed once at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
