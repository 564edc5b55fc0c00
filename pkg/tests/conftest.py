import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Call ``criterion(n, ok, detail)`` once per acceptance criterion."""

    def emit(n, ok, detail=""):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _LINES.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
