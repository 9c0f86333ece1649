import numpy as np
import pytest

from klyzflow import geometry as geo
from klyzflow.grid import Grid

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def grid1():
    return Grid.uniform(1, 32)


@pytest.fixture
def grid2():
    return Grid.uniform(2, 8)


def smooth_potential(grid, seed=0, amp=1e-3, modes=1):
    from klyzflow.scenarios import random_field

    return amp * random_field(grid, seed, modes)


def unit_metric(grid):
    return geo.constant_field(grid, np.eye(grid.n_complex))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
