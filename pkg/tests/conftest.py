import numpy as np
import pytest

from spts.ltp import calibrate
from spts.model import ModelConfig, gen_toy_model, synthetic_token_sequences

DEFAULT_CONFIG = ModelConfig(8, 64, 4, 4, 16, 256, 256)
SMALL_CONFIG = ModelConfig(2, 8, 2, 2, 4, 16, 32)
GQA_CONFIG = ModelConfig(4, 32, 4, 2, 8, 64, 64)


@pytest.fixture(scope="session")
def toy_model():
    return gen_toy_model(DEFAULT_CONFIG, 42)


@pytest.fixture(scope="session")
def small_model():
    return gen_toy_model(SMALL_CONFIG, 7)


@pytest.fixture(scope="session")
def gqa_model():
    return gen_toy_model(GQA_CONFIG, 3)


@pytest.fixture(scope="session")
def calib_sequences():
    return synthetic_token_sequences(DEFAULT_CONFIG.vocab_size, 8, 48, seed=11)


@pytest.fixture(scope="session")
def toy_proxies(toy_model, calib_sequences):
    proxies, _ = calibrate(toy_model, calib_sequences, d_low=64, rank=16, rho=0.2)
    return proxies


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary -------------------------------------------------

_ACCEPTANCE: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome.upper()))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if outcome == 'PASSED' else 'FAIL'}  {name}")
