from __future__ import annotations

import numpy as np
import pytest

from arzctl.grid import Grid
from arzctl.kernels import make_routing_gain, synthesize
from arzctl.model import ModelParams, compute_equilibrium


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def eq(params):
    return compute_equilibrium(params, 10.0)


@pytest.fixture(scope="session")
def grid400(params):
    return Grid(params.L, 400)


@pytest.fixture(scope="session")
def gauss_gain(grid400, eq):
    return make_routing_gain("gaussian", grid400, eq, amplitude=0.004)


@pytest.fixture(scope="session")
def kernels(eq, gauss_gain):
    return synthesize(eq, gauss_gain)


def smooth_field(rng, grid, scale=1e-3, modes=20):
    """Random smooth field built from decaying sine modes with random phases."""
    k = np.arange(1, modes + 1)
    coef = rng.normal(size=modes) / k
    phase = rng.uniform(0, 2 * np.pi, modes)
    return scale * np.sin(np.pi * np.outer(grid.x / grid.L, k) + phase) @ coef


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
