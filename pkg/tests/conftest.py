import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from madun import tensor as T  # noqa: E402


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
