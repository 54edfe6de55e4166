"""Shared fixtures: packaged grids and their nominal operating points."""

from __future__ import annotations

import pytest

from powerfd.grid import GridModel, fixture_path, load_grid
from powerfd.powerflow import StateVector, solve_power_flow


def nominal_injections(grid: GridModel) -> dict[int, tuple[float, float]]:
    """Net (P, Q) setpoints for every non-slack bus at base loading."""
    return {
        bus.id: (bus.p_gen - bus.p_load, bus.q_gen - bus.q_load)
        for bus in grid.buses
        if bus.id != grid.slack_bus
    }


@pytest.fixture(scope="session")
def grid4() -> GridModel:
    return load_grid(fixture_path("grid4.json"))


@pytest.fixture(scope="session")
def grid14() -> GridModel:
    return load_grid(fixture_path("grid14.json"))


@pytest.fixture(scope="session")
def grid4_truth(grid4: GridModel) -> StateVector:
    return solve_power_flow(grid4, nominal_injections(grid4))


@pytest.fixture(scope="session")
def grid14_truth(grid14: GridModel) -> StateVector:
    return solve_power_flow(grid14, nominal_injections(grid14))
