import numpy as np
import pytest


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; returns the verdict."""
    lines = request.config.acceptance_lines

    def record(number, name, ok, detail):
        line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} | {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
