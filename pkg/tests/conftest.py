import numpy as np
import pytest

from tangentlab import library


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running Monte Carlo tests")


@pytest.fixture(scope="session")
def mixed():
    return library.mixed_2d()


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
