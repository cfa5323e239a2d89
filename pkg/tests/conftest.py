import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from helpers import CRITERIA, pretrained  # noqa: E402


@pytest.fixture(scope="session")
def base0():
    return pretrained(0)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
