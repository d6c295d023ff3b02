import numpy as np
import pytest

from hfvit import autodiff as ad
from hfvit.model import MICRO_CONFIG, HfvitModel


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_model():
    return HfvitModel(MICRO_CONFIG).eval()


def random_ctus(rng, n, dtype=np.float32):
    return rng.random((n, 64, 64, 1)).astype(dtype)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
