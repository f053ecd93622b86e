import numpy as np
import pytest

from choicesets.core import CovariateCell, FeasibleSet
from choicesets.simulation import application_cell

APPLICATION = FeasibleSet((100, 200, 250, 500, 1000))


def random_cell(rng: np.random.Generator, n_alts: int = 5, mu_range=(0.02, 0.2)) -> CovariateCell:
    """Vertically differentiated cell: higher deductibles are cheaper."""
    amounts = np.sort(rng.choice(np.arange(1, 41) * 50, size=n_alts, replace=False))
    feasible = FeasibleSet(tuple(amounts.tolist()))
    base = rng.uniform(50, 600)
    slope = rng.uniform(0.3, 1.2)
    g = 1.0 + slope * (amounts[-1] - amounts) / amounts[-1]
    g = g * np.exp(rng.uniform(-0.04, 0.04, n_alts))
    g = np.maximum.accumulate(g[::-1])[::-1] + np.linspace(1e-3 * n_alts, 0, n_alts)
    prices = np.round(g * base * 100).astype(int)
    mu = rng.uniform(*mu_range)
    return CovariateCell(feasible, mu, tuple(prices.tolist()))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def app_cell():
    return application_cell()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
