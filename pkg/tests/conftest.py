import numpy as np
import pytest

from quantdrift.systems import FamilyConfig, QuantityPrior


@pytest.fixture
def tent():
    return FamilyConfig("tent")


@pytest.fixture
def tent_prior(tent):
    return QuantityPrior.for_family(tent)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, printed as one line per criterion after the run
ACCEPTANCE = {}


@pytest.fixture
def record():
    def _record(criterion, title, ok, detail):
        ACCEPTANCE[criterion] = (title, bool(ok), detail)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {title} | {detail}")
