import numpy as np
import pytest

from conftest import F_STAR, J_STAR, V_HALF, random_scenario
from wcrouting.allocations import proportional_allocation
from wcrouting.coalitions import worst_case_value
from wcrouting.equilibria import atomic_best_response
from wcrouting.errors import CapExceeded, DimensionUnsupported, InfeasibleMove
from wcrouting.model import CostVector, LatencyFunction, Network, Scenario
from wcrouting.oracle import (
    exhaustive_core_oracle,
    exhaustive_nucleolus_oracle,
    flow_transfer_monotonicity_probe,
    follower_optimum_cost,
    grid_leader_oracle,
    worst_case_value_oracle,
)

NET = Network.from_input([2.0, 1.0])


# -- grid leader -------------------------------------------------------------

def test_grid_leader_on_two_link_fixture():
    flows, cost = grid_leader_oracle(NET, 0.5, 0.5, 1e-3)
    assert cost == pytest.approx(V_HALF, abs=1e-6)
    assert cost == pytest.approx(0.4747, abs=1e-4)
    np.testing.assert_allclose(flows, [0.5, 0.0], atol=1e-3)


def test_grid_leader_without_leader_is_follower_optimum():
    _, cost = grid_leader_oracle(NET, 0.0, 1.0, 1e-2)
    assert cost == pytest.approx(J_STAR, rel=1e-12)


def test_grid_leader_without_follower_costs_nothing():
    _, cost = grid_leader_oracle(NET, 0.5, 0.0, 1e-2)
    assert cost == 0.0


def test_grid_leader_three_links_matches_value_oracle():
    net = Network.from_input([1.5, 1.0, 0.8])
    _, cost = grid_leader_oracle(net, 1.0, 0.6, 5e-3)
    exact = worst_case_value_oracle(net, 1.0, 0.6)
    assert cost <= exact + 1e-9
    assert cost == pytest.approx(exact, abs=5e-3)


def test_grid_leader_rejects_other_dimensions():
    with pytest.raises(DimensionUnsupported):
        grid_leader_oracle(Network.from_input([1.0]), 0.2, 0.2, 1e-2)
    with pytest.raises(DimensionUnsupported):
        grid_leader_oracle(Network.from_input([1.0] * 4), 0.2, 0.2, 1e-2)


# -- monotonicity probe ------------------------------------------------------

def test_probe_zero_move_changes_nothing():
    before, after = flow_transfer_monotonicity_probe(NET, [0.25, 0.25], 1, 0, 0.0, 0.5)
    assert before == after


def test_probe_toward_larger_residual_raises_cost():
    # residuals (1.75, 0.75) -> (1.5, 1.0)
    before, after = flow_transfer_monotonicity_probe(NET, [0.25, 0.25], 1, 0, 0.25, 0.5)
    assert after >= before
    expected = atomic_best_response(NET, np.array([0.5, 0.0]), 0.5)[1]
    assert after == pytest.approx(expected, rel=1e-14)


def test_probe_reverse_move_lowers_cost():
    before, after = flow_transfer_monotonicity_probe(NET, [0.5, 0.0], 0, 1, 0.25, 0.5)
    assert after <= before + 1e-12


def test_probe_with_nominal_ordering_can_go_either_way():
    # moving onto the higher nominal capacity is not enough: here it leaves the
    # other link with far more room, so the follower's cost falls
    net = Network.from_input([2.0, 1.9])
    before, after = flow_transfer_monotonicity_probe(net, [0.8, 0.7], 1, 0, 0.7, 0.01)
    assert after < before - 1e-4


def test_probe_rejects_infeasible_moves():
    with pytest.raises(InfeasibleMove):
        flow_transfer_monotonicity_probe(NET, [0.1, 0.25], 0, 1, 0.2, 0.5)
    with pytest.raises(InfeasibleMove):
        flow_transfer_monotonicity_probe(NET, [0.5, 0.5], 0, 1, 0.6, 0.5)
    with pytest.raises(InfeasibleMove):
        flow_transfer_monotonicity_probe(NET, [1.0, 0.5], 0, 1, 0.6, 0.1)


# -- value oracle ------------------------------------------------------------

def test_follower_optimum_cost_fixture():
    assert follower_optimum_cost(NET, NET.capacities, 1.0) == pytest.approx(J_STAR, rel=1e-12)
    f1, f2 = F_STAR
    assert J_STAR == pytest.approx(f1 / (2 - f1) + f2 / (1 - f2))
    assert follower_optimum_cost(NET, [0.5, 0.2], 0.7) == np.inf


@pytest.mark.parametrize("seed", range(6))
def test_value_oracle_agrees_with_solver(seed):
    rng = np.random.default_rng(seed)
    family = "mm1" if seed % 2 == 0 else "power"
    s = random_scenario(rng, n_links=(2, 3), family=family, p=1.5 + seed / 4)
    d = float(rng.uniform(0.05, 1.0)) * s.total_demand
    exact = worst_case_value_oracle(s.network, s.total_demand - d, d)
    assert worst_case_value(s, d) == pytest.approx(exact, rel=1e-9)


# -- core and nucleolus ------------------------------------------------------

def test_core_oracle_fixtures(two_link):
    pa, _ = proportional_allocation(two_link)
    assert exhaustive_core_oracle(two_link, pa).verdict == "InCore"
    blocked = exhaustive_core_oracle(two_link, CostVector(np.array([0.48, 0.434214])))
    assert blocked.verdict == "Blocked"
    assert blocked.coalition == (0,)
    assert blocked.margin == pytest.approx(0.01051, abs=1e-5)
    assert exhaustive_core_oracle(two_link, CostVector(np.array([0.47, 0.444214]))).in_core


def test_core_oracle_single_user_is_vacuous():
    s = Scenario.build([2.0, 1.0], [0.5])
    pa, _ = proportional_allocation(s)
    assert exhaustive_core_oracle(s, pa).verdict == "InCore"


def test_core_oracle_cap():
    s = Scenario.build([4.0, 3.0], [0.1] * 13)
    with pytest.raises(CapExceeded):
        exhaustive_core_oracle(s, CostVector(np.ones(13)))


def test_nucleolus_oracle_two_equal_users_is_pa(two_link):
    pa, _ = proportional_allocation(two_link)
    np.testing.assert_allclose(exhaustive_nucleolus_oracle(two_link).costs, pa.costs, atol=1e-9)
    np.testing.assert_allclose(pa.costs, [J_STAR / 2] * 2, rtol=1e-12)


def test_nucleolus_oracle_single_user():
    s = Scenario.build([2.0, 1.0], [1.0])
    assert exhaustive_nucleolus_oracle(s).costs.tolist() == pytest.approx([J_STAR], rel=1e-12)


def test_nucleolus_oracle_symmetric_network_is_pa():
    s = Scenario.build([2.0, 2.0], [0.2, 0.5, 0.7], LatencyFunction("mm1_power", 2.0))
    pa, _ = proportional_allocation(s)
    np.testing.assert_allclose(exhaustive_nucleolus_oracle(s).costs, pa.costs, rtol=1e-12)


def test_nucleolus_oracle_cap():
    with pytest.raises(CapExceeded):
        exhaustive_nucleolus_oracle(Scenario.build([4.0, 3.0], [0.1] * 11))
