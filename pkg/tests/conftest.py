import numpy as np
import pytest

from rdtlab.grid import Grid, MetricField


def sine_conformal(grid: Grid, amplitude: float = 0.1):
    """``u = A sin(kx) sin(ky)`` and its exact 2D scalar curvature."""
    k = 2 * np.pi / grid.length
    x, y = grid.coords[0], grid.coords[1]
    u = amplitude * np.sin(k * x) * np.sin(k * y)
    lap = -2 * k * k * u
    return MetricField.conformal(grid, u), -2 * np.exp(-2 * u) * lap


def mixed_perturbation(grid: Grid, scale: float = 1.0) -> np.ndarray:
    """A smooth, periodic, non-conformal perturbation ``h`` (2D)."""
    k = 2 * np.pi / grid.length
    x, y = grid.coords[0], grid.coords[1]
    h = np.zeros((2, 2) + grid.shape)
    h[0, 0] = 0.012 * scale * np.sin(k * x) * np.cos(k * y)
    h[0, 1] = h[1, 0] = 0.008 * scale * np.cos(k * x + 0.3) * np.sin(k * y)
    h[1, 1] = -0.01 * scale * np.cos(k * y) * np.sin(2 * k * x)
    return h


def compact_bump(grid: Grid, amplitude: float, width: float = 1.0) -> np.ndarray:
    from rdtlab.families import smooth_cutoff

    return amplitude * smooth_cutoff(grid.distance(), 0.0, width)


@pytest.fixture
def grid32():
    return Grid.from_length(2, 32, 4.0)


@pytest.fixture
def grid48():
    return Grid.from_length(2, 48, 6.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
