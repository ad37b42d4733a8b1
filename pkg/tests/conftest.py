from pathlib import Path

import numpy as np
import pytest

from diffrates import MixtureTarget, ScheduleParams, build_schedule

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
TARGETS = ROOT / "targets"

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bimodal():
    return MixtureTarget.from_json(TARGETS / "bimodal_1d.json")


@pytest.fixture(scope="session")
def mixture2d():
    return MixtureTarget.from_json(TARGETS / "mixture_2d.json")


@pytest.fixture(scope="session")
def atom():
    return MixtureTarget.from_json(TARGETS / "point_atom_1d.json")


@pytest.fixture(scope="session")
def std_normal():
    return MixtureTarget.gaussian(np.zeros(1), np.eye(1))


@pytest.fixture(scope="session")
def sched100():
    return build_schedule(ScheduleParams(100, 1.5, 3.5))


@pytest.fixture(scope="session")
def sched25():
    return build_schedule(ScheduleParams(25, 1.5, 3.5))
