import math

import pytest

from degas.cli import bundled_text
from degas.frontend import load_program

PHI0 = 1.0 / math.sqrt(2.0 * math.pi)


def builtin(name: str):
    """Parsed and validated bundled program with its default parameters."""
    return load_program(bundled_text(name, ".soga"), bundled_text(name, ".params") or "")


def vals(xs):
    """Plain floats from a (nested) list of DiffScalars."""
    if isinstance(xs, (list, tuple)):
        return [vals(x) for x in xs]
    return float(getattr(xs, "value", xs))


@pytest.fixture
def fig2():
    return builtin("fig2")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
