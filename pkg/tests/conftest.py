import numpy as np
import pytest
from scipy.optimize import brentq

from wcrouting.coalitions import CoalitionValueTable
from wcrouting.model import LatencyFunction, Scenario

# -- shared instances -------------------------------------------------------

SQRT2 = np.sqrt(2.0)
# c=(2,1), R=1: sqrt(2)/(2-f1) = 1/(1-f2) with f1+f2=1 gives f2 = (sqrt2-1)^2
F_STAR = (2 * SQRT2 - 2.0, 3.0 - 2 * SQRT2)
J_STAR = F_STAR[0] / (2.0 - F_STAR[0]) + F_STAR[1] / (1.0 - F_STAR[1])


def _follower_split():
    """Follower flow on residuals (1.5, 1) with demand 0.5, from its stationarity condition."""
    marg = lambda x: (1 / (1.5 - x) + x / (1.5 - x) ** 2
                      - 1 / (0.5 + x) - (0.5 - x) / (0.5 + x) ** 2)
    x = brentq(marg, 0.0, 0.5, xtol=1e-15)
    return x, 0.5 - x


X_BR = _follower_split()
V_HALF = X_BR[0] / (1.5 - X_BR[0]) + X_BR[1] / (0.5 + X_BR[0])


@pytest.fixture
def two_link():
    return Scenario.build([2.0, 1.0], [0.5, 0.5], ids=("1", "2"))


@pytest.fixture
def two_link_table(two_link):
    return CoalitionValueTable.build(two_link)


@pytest.fixture
def symmetric_net():
    return Scenario.build([2.0, 2.0], [0.5, 0.5], ids=("1", "2"))


def random_scenario(rng, n_users=(2, 6), n_links=(2, 3), n_classes=None, load=(0.3, 0.9),
                    family="mm1", p=2.0, distinct_caps=True):
    """Random feasible scenario; ``n_classes`` bounds the number of demand values."""
    n = int(rng.integers(n_users[0], n_users[1] + 1))
    L = int(rng.integers(n_links[0], n_links[1] + 1))
    caps = rng.uniform(0.5, 3.0, L)
    if not distinct_caps:
        caps[:] = caps[0]
    k = n if n_classes is None else int(rng.integers(1, min(n_classes, n) + 1))
    values = rng.uniform(0.1, 1.0, k)
    dem = values[rng.integers(0, k, n)] if k < n else values
    dem = dem * rng.uniform(*load) * caps.sum() / dem.sum()
    lat = LatencyFunction() if family == "mm1" else LatencyFunction("mm1_power", p)
    return Scenario.build(caps, dem, lat)


# -- acceptance summary -----------------------------------------------------

ACCEPTANCE = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abcd")), k)):
            terminalreporter.write_line(ACCEPTANCE[key])
