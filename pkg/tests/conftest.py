"""Monte Carlo studies shared by the simulation and acceptance tests.

Each study takes minutes on one core, so they run once per session.
"""
import pytest

from deconvcde.estimators import P1, P2, P3, P4
from deconvcde.simulation import DESK_R, Scenario, run_mc_study


def _by_method(rows):
    return {row.method: row for row in rows}


@pytest.fixture(scope="session")
def c1a_oracle():
    return _by_method(run_mc_study([Scenario("C1", "a")], R=DESK_R, bandwidth_mode="oracle", keep_grids=True))


@pytest.fixture(scope="session")
def c1a_data_driven():
    return _by_method(run_mc_study([Scenario("C1", "a")], R=DESK_R))


@pytest.fixture(scope="session")
def c1a_misspecified():
    """Corrected estimators run with the assumed reliability ratio 0.7 or 0.9."""
    return {lam: _by_method(run_mc_study([Scenario("C1", "a", assumed_lambda=lam)], [P3, P4], R=DESK_R))
            for lam in (0.7, 0.9)}


@pytest.fixture(scope="session")
def c3_data_driven():
    return {sec: _by_method(run_mc_study([Scenario("C3", sec)], [P1, P2, P3, P4], R=DESK_R)) for sec in ("a", "c")}


_VERDICTS = []


@pytest.fixture
def verdict():
    """Records one ``AC-k PASS/FAIL`` line; the lines are repeated in the terminal summary."""

    def record(label, ok, detail):
        line = f"{label} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        _VERDICTS.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
