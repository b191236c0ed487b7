import numpy as np
import pytest

from mctrans.tensor import get_dtype, set_precision


@pytest.fixture(autouse=True)
def _float64_by_default():
    """Run every test in 64-bit and undo any precision switch it makes."""
    before = np.dtype(get_dtype())
    set_precision(64)
    yield
    set_precision(32 if before == np.float32 else 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdicts ----------------------------------------------------

_VERDICTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    number, title = marker.args
    if report.failed or (report.when == "call" and report.passed):
        verdict = "PASS" if report.passed else "FAIL"
        _VERDICTS[number] = f"criterion {number} {verdict}: {title}"


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
