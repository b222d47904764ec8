import numpy as np
import pytest

from coda.simulation import generate, scenario


@pytest.fixture(scope="session")
def s1_pair():
    """Scenario 1, homogeneous covariates, N_E=1000, N_U=2000."""
    return generate(scenario(1), 1000, 2000, seed=123)


@pytest.fixture(scope="session")
def s1_he_pair():
    """Scenario 1 with the auxiliary covariates on the shifted range."""
    return generate(scenario(1), 1000, 2000, seed=321, hetero=True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance_log.RESULTS):
        ok, detail = acceptance_log.RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
