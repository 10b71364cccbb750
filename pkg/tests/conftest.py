"""Shared fixtures and the acceptance report hook.

Heavy solves are session-scoped so the suite computes each base solution
once.  Acceptance tests append one line per criterion to ACCEPTANCE_LINES;
the terminal-summary hook prints them and writes acceptance_report.txt.
"""

from pathlib import Path

import numpy as np
import pytest

from mfg_lab.mfg import solve_picard
from mfg_lab.models import builtin_quadratic

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
    report = Path(__file__).resolve().parent.parent / "acceptance_report.txt"
    report.write_text("\n".join(ACCEPTANCE_LINES) + "\n", encoding="utf-8")


@pytest.fixture(scope="session")
def monotone_model():
    return builtin_quadratic(coupling="monotone_local", T=0.5, m0="cosine")


@pytest.fixture(scope="session")
def monotone_grid(monotone_model):
    return monotone_model.make_grid(32, 48)


@pytest.fixture(scope="session")
def monotone_solution(monotone_model, monotone_grid):
    sol = solve_picard(
        monotone_model, monotone_grid, damping=0.5, tol=1e-12, max_iter=500
    )
    assert sol.converged
    return sol


@pytest.fixture(scope="session")
def decoupled_model():
    return builtin_quadratic(0.0, coupling="none", T=0.5, m0="cosine")


@pytest.fixture(scope="session")
def decoupled_solution(decoupled_model, monotone_grid):
    sol = solve_picard(
        decoupled_model, monotone_grid, damping=1.0, tol=1e-13, max_iter=20
    )
    assert sol.converged
    return sol


@pytest.fixture()
def rng():
    return np.random.default_rng(20260810)
