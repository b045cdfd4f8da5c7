import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import J_STAR, V_HALF, random_scenario
from wcrouting.allocations import (
    ExcessVector,
    OptimumContext,
    binding_coalition,
    compare_lex,
    core_check,
    core_exchange_allocation,
    excess_vector,
    exchange_allocation,
    inner_core_check_pa,
    nucleolus,
    proportional_allocation,
    randomized_deviation_falsifier,
    realize_allocation,
)
from wcrouting.coalitions import CoalitionValueTable, enumerate_demand_sums
from wcrouting.errors import AllocationMismatch, CapExceeded, IndexMismatch, TableIncomplete
from wcrouting.model import CostVector, FlowProfile, Scenario

BLOCKED = (0.48, J_STAR - 0.48)
INSIDE = (0.47, J_STAR - 0.47)


def nw_corner(rows, cols):
    """A vertex of the transportation polytope with the given margins."""
    rows, cols = rows.copy(), cols.copy()
    out = np.zeros((rows.size, cols.size))
    i = j = 0
    while i < rows.size and j < cols.size:
        t = min(rows[i], cols[j])
        out[i, j] = t
        rows[i] -= t
        cols[j] -= t
        if rows[i] <= cols[j]:
            i += 1
        else:
            j += 1
    return out


def random_optimal_split(scenario, rng, vertices=3):
    """Random per-user flows whose aggregate is the system optimum."""
    ctx = OptimumContext.of(scenario)
    r = scenario.demand.demands
    act = ctx.active
    F = ctx.link_flows[act] * (r.sum() / ctx.link_flows[act].sum())
    w = rng.dirichlet(np.ones(vertices + 1))
    mix = w[0] * np.outer(r / r.sum(), F)
    for k in range(vertices):
        pr, pc = rng.permutation(r.size), rng.permutation(act.size)
        v = nw_corner(r[pr], F[pc])
        back = np.empty_like(v)
        back[np.ix_(pr, pc)] = v
        mix += w[k + 1] * back
    flows = np.zeros((r.size, scenario.network.n_links))
    flows[:, act] = np.maximum(mix, 0.0)
    return FlowProfile(flows), CostVector(FlowProfile(flows).user_costs(scenario.network, ctx.latencies))


# -- proportional allocation ------------------------------------------------

def test_pa_examples(two_link):
    costs, flows = proportional_allocation(two_link)
    np.testing.assert_allclose(costs.costs, [0.5 * J_STAR] * 2, atol=1e-12)
    assert costs.costs == pytest.approx([0.457107, 0.457107], abs=1e-6)
    single = Scenario.build([2, 1], [1.0])
    assert proportional_allocation(single)[0].costs.tolist() == pytest.approx([J_STAR])
    costs, flows = proportional_allocation(Scenario.build([5, 3, 1], [1.0, 3.0]))
    assert costs[1] / costs[0] == pytest.approx(3.0, rel=1e-14)
    assert flows.violations(Scenario.build([5, 3, 1], [1.0, 3.0])) == []


# -- excesses and core ------------------------------------------------------

def test_excess_entries_and_blocking_value(two_link, two_link_table):
    ex = excess_vector(two_link, CostVector(np.array(BLOCKED)), two_link_table)
    assert len(ex.ids) == 2 ** 2 - 2
    assert dict(ex.entries)[(0,)] == pytest.approx((0.48 - V_HALF) / 0.5, abs=1e-12)
    assert dict(ex.entries)[(0,)] == pytest.approx(0.0105, abs=1e-4)
    assert np.all(np.diff(ex.sorted_view) <= 0)
    assert sorted(ex.sorted_view) == sorted(ex.values)


def test_core_check_examples(two_link, two_link_table):
    pa, _ = proportional_allocation(two_link)
    assert core_check(two_link, pa, two_link_table).verdict == "InCore"
    v = core_check(two_link, CostVector(np.array(BLOCKED)), two_link_table)
    assert v.verdict == "Blocked" and v.coalition == (0,)
    assert v.margin == pytest.approx(0.0105, abs=1e-4)
    assert v.to_dict(two_link.demand.ids) == {"verdict": "Blocked", "blocking_coalition": ["1"],
                                              "margin": v.margin}
    assert core_check(two_link, CostVector(np.array(INSIDE)), two_link_table).in_core


def test_allocation_must_sum_to_optimum(two_link, two_link_table):
    with pytest.raises(AllocationMismatch):
        core_check(two_link, CostVector(np.array([0.5, 0.5])), two_link_table)
    with pytest.raises(AllocationMismatch):
        excess_vector(two_link, CostVector(np.array([J_STAR])), two_link_table)


def test_excess_needs_matching_table(two_link):
    other = Scenario.build([2, 1], [0.25, 0.75])
    table = CoalitionValueTable.build(other)
    with pytest.raises(TableIncomplete):
        excess_vector(two_link, proportional_allocation(two_link)[0], table)


def test_exhaustive_excess_cap():
    s = Scenario.build([30, 20], [1.0] * 21)
    table = CoalitionValueTable.build(s)
    with pytest.raises(CapExceeded):
        excess_vector(s, proportional_allocation(s)[0], table, mode="exhaustive")


def test_binding_coalition_takes_costliest_members():
    s = Scenario.build([3, 2], [0.1, 0.2, 0.1, 0.2, 0.1])
    costs = np.array([0.3, 0.5, 0.2, 0.6, 0.3])
    # class order is ascending demand: class 0 = users {0,2,4}, class 1 = users {1,3}
    assert binding_coalition(s, costs, (2, 1)) == (0, 3, 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_composition_and_exhaustive_excess_agree_on_the_maximum(seed):
    rng = np.random.default_rng(seed)
    s = random_scenario(rng, n_users=(2, 7), n_classes=3)
    table = CoalitionValueTable.build(s)
    _, alloc = random_optimal_split(s, rng)
    ex = excess_vector(s, alloc, table, mode="exhaustive")
    comp = excess_vector(s, alloc, table, mode="composition")
    assert comp.values.max() == pytest.approx(ex.values.max(), abs=1e-12)
    assert len(comp.ids) == len(enumerate_demand_sums(s.demand))


# -- inner core and the deviation falsifier ---------------------------------

def test_inner_core_examples(two_link, symmetric_net):
    assert inner_core_check_pa(two_link).verdict == "InnerCore"
    assert inner_core_check_pa(Scenario.build([2, 2], [1.0])).verdict == "NotGuaranteed"
    assert inner_core_check_pa(Scenario.build([2], [0.4, 0.3])).verdict == "NotGuaranteed"


def test_falsifier_examples(two_link, two_link_table, symmetric_net):
    pa, _ = proportional_allocation(two_link)
    assert randomized_deviation_falsifier(two_link, pa, two_link_table) is None

    sym_pa, _ = proportional_allocation(symmetric_net)
    dev = randomized_deviation_falsifier(symmetric_net, sym_pa, CoalitionValueTable.build(symmetric_net))
    assert dev is not None and not dev.strict
    assert abs(dev.slack) <= 1e-9
    assert sum(dev.support.values()) == pytest.approx(1.0)

    dev = randomized_deviation_falsifier(two_link, CostVector(np.array(BLOCKED)), two_link_table)
    assert dev.strict and dev.realizable
    assert dev.support == {(0,): pytest.approx(1.0)}
    assert dev.transfers[(0,)][0] == pytest.approx(V_HALF)


def test_falsifier_cap():
    s = Scenario.build([30, 20], [1.0] * 11)
    with pytest.raises(CapExceeded):
        randomized_deviation_falsifier(s, proportional_allocation(s)[0], CoalitionValueTable.build(s))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_falsifier_is_consistent_with_core_check(seed):
    rng = np.random.default_rng(seed)
    s = random_scenario(rng, n_users=(2, 4), n_classes=2)
    table = CoalitionValueTable.build(s)
    _, alloc = random_optimal_split(s, rng, vertices=int(rng.integers(1, 4)))
    dev = randomized_deviation_falsifier(s, alloc, table)
    verdict = core_check(s, alloc, table)
    if dev is None:
        assert verdict.in_core
    if not verdict.in_core:
        assert dev is not None and dev.strict
    if dev is not None:
        # no user expects to lose and the budget identity holds
        expected = dev.expected_costs(s.n_users)
        prob = np.zeros(s.n_users)
        for S, p in dev.support.items():
            prob[list(S)] += p
            assert sum(dev.transfers[S]) == pytest.approx(p * table.value_of(S), abs=1e-9)
        assert np.all(prob * alloc.costs - expected >= -1e-8)


# -- realisation ------------------------------------------------------------

def test_realize_examples(two_link):
    pa, pa_flows = proportional_allocation(two_link)
    flows = realize_allocation(two_link, pa)
    np.testing.assert_allclose(flows.user_costs(two_link.network), pa.costs, atol=1e-9)

    target = CostVector(np.array(INSIDE))
    flows = realize_allocation(two_link, target)
    assert flows is not None and flows.violations(two_link) == []
    ctx = OptimumContext.of(two_link)
    np.testing.assert_allclose(flows.aggregate, ctx.link_flows, atol=1e-9)
    np.testing.assert_allclose(flows.user_costs(two_link.network, ctx.latencies), target.costs, atol=1e-9)
    # the same target by an explicit two-link exchange
    eps = (0.47 - 0.5 * J_STAR) / (ctx.latencies[1] - ctx.latencies[0])
    cv, _ = exchange_allocation(two_link, 0, 1, 0, 1, eps)
    np.testing.assert_allclose(cv.costs, target.costs, atol=1e-12)

    three = Scenario.build([3, 2, 1.5], [0.4, 0.3, 0.5])
    j = proportional_allocation(three)[0].total
    assert realize_allocation(three, CostVector(np.array([j, 0.0, 0.0]))) is None


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_realize_recovers_random_splits(seed):
    rng = np.random.default_rng(seed)
    s = random_scenario(rng, n_users=(2, 6))
    _, target = random_optimal_split(s, rng)
    flows = realize_allocation(s, target)
    assert flows is not None
    assert flows.violations(s) == []
    ctx = OptimumContext.of(s)
    np.testing.assert_allclose(flows.user_costs(s.network, ctx.latencies), target.costs, atol=1e-8)


# -- lexicographic comparison -----------------------------------------------

def ev(values, ids=None):
    ids = ids or tuple((k,) for k in range(len(values)))
    return ExcessVector(ids, np.array(values, dtype=float), ids)


def test_compare_lex_examples():
    assert compare_lex(ev([-0.1, -0.2]), ev([-0.1, -0.2])) == 0
    assert compare_lex(ev([-0.2, -0.1]), ev([-0.9, -0.05])) == -1
    assert compare_lex(ev([-0.1, -0.3]), ev([-0.2, -0.1])) == -1
    assert compare_lex(ev([-0.2, -0.1]), ev([-0.1, -0.3])) == 1
    with pytest.raises(IndexMismatch):
        compare_lex(ev([0.0, 0.0]), ev([0.0, 0.0, 0.0]))
    with pytest.raises(IndexMismatch):
        compare_lex(ev([0.0]), ev([0.0], ids=(("x",),)))


# -- nucleolus --------------------------------------------------------------

def check_result(s, res):
    ctx = OptimumContext.of(s)
    assert res.allocation.total == pytest.approx(ctx.optimal_cost, abs=1e-8)
    assert res.realizing_flows.violations(s) == []
    np.testing.assert_allclose(res.realizing_flows.aggregate, ctx.link_flows, atol=1e-8)
    np.testing.assert_allclose(res.realizing_flows.user_costs(s.network, ctx.latencies),
                               res.allocation.costs, atol=1e-10)


def test_nucleolus_symmetric_demands_is_pa(two_link, two_link_table):
    res = nucleolus(two_link, two_link_table)
    assert res.allocation.costs == pytest.approx([0.457107, 0.457107], abs=1e-6)
    check_result(two_link, res)


def test_nucleolus_symmetric_threats_is_pa():
    s = Scenario.build([3, 2, 1], [0.3, 0.5, 0.7, 0.2])
    for T in (0.5, 0.6, 0.9):
        table = CoalitionValueTable.from_function(s, lambda d: d * T)
        res = nucleolus(s, table)
        np.testing.assert_allclose(res.allocation.costs, proportional_allocation(s)[0].costs, atol=1e-6)
        ex = excess_vector(s, res.allocation, table)
        np.testing.assert_allclose(ex.values, OptimumContext.of(s).optimal_cost / s.total_demand - T,
                                   atol=1e-9)


def test_nucleolus_single_user():
    s = Scenario.build([2, 1], [1.0])
    res = nucleolus(s, CoalitionValueTable.build(s))
    assert res.allocation.costs.tolist() == pytest.approx([J_STAR])


def test_nucleolus_rejects_foreign_table(two_link):
    other = CoalitionValueTable.build(Scenario.build([2, 1], [0.5, 0.25]))
    with pytest.raises(TableIncomplete):
        nucleolus(two_link, other)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_nucleolus_modes_agree_and_lie_in_core(seed):
    rng = np.random.default_rng(seed)
    s = random_scenario(rng, n_users=(2, 7), n_classes=3,
                        family="mm1" if seed % 4 else "power")
    table = CoalitionValueTable.build(s)
    a = nucleolus(s, table)
    b = nucleolus(s, table, mode="exhaustive")
    check_result(s, a)
    check_result(s, b)
    np.testing.assert_allclose(a.allocation.costs, b.allocation.costs, atol=1e-6)
    pa, _ = proportional_allocation(s)
    max_nuc = excess_vector(s, a.allocation, table).values.max()
    max_pa = excess_vector(s, pa, table).values.max()
    assert max_nuc <= max_pa + 1e-9 <= 1e-9 + 1e-9
    assert core_check(s, a.allocation, table).in_core


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_nucleolus_is_unique_under_permutations(seed):
    rng = np.random.default_rng(seed)
    s = random_scenario(rng, n_users=(3, 7), n_classes=3)
    table = CoalitionValueTable.build(s)
    base = nucleolus(s, table).allocation.costs
    perm = rng.permutation(s.n_users)
    caps = s.network.to_input_order(s.network.capacities)
    s2 = Scenario.build(caps[rng.permutation(caps.size)], s.demand.demands[perm])
    again = nucleolus(s2, CoalitionValueTable.build(s2)).allocation.costs
    np.testing.assert_allclose(again, base[perm], atol=1e-6)
    n_rows = len(enumerate_demand_sums(s.demand))
    shuffled = nucleolus(s, table, row_order=rng.permutation(n_rows)).allocation.costs
    np.testing.assert_allclose(shuffled, base, atol=1e-6)
    ex = nucleolus(s, table, mode="exhaustive", row_order=rng.permutation(2 ** s.n_users - 2))
    np.testing.assert_allclose(ex.allocation.costs, base, atol=1e-6)
    with pytest.raises(IndexMismatch):
        nucleolus(s, table, row_order=[0])


@pytest.mark.parametrize("seed", range(4))
def test_nucleolus_is_lexicographically_minimal(seed):
    rng = np.random.default_rng(100 + seed)
    s = random_scenario(rng, n_users=(3, 6), n_classes=3)
    table = CoalitionValueTable.build(s)
    res = nucleolus(s, table)
    e_nuc = excess_vector(s, res.allocation, table)
    checked = 0
    for k in range(1000):
        if k % 2:
            _, alt = random_optimal_split(s, rng, vertices=int(rng.integers(1, 4)))
        else:
            # small perturbations of the nucleolus's own flows
            f = res.realizing_flows.per_user.copy()
            i, j = rng.choice(s.n_users, 2, replace=False)
            on = OptimumContext.of(s).active
            a, b = rng.choice(on, 2, replace=False)
            t = rng.uniform(0, 1) * min(f[i, a], f[j, b]) * 10.0 ** -rng.integers(0, 6)
            f[i, a] -= t
            f[i, b] += t
            f[j, a] += t
            f[j, b] -= t
            alt = CostVector(FlowProfile(f).user_costs(s.network, OptimumContext.of(s).latencies))
        assert realize_allocation(s, alt) is not None
        # cost noise of ~1e-10 becomes ~1e-9 in excess once divided by a small r(S)
        assert compare_lex(e_nuc, excess_vector(s, alt, table), tol=1e-8) <= 0
        checked += 1
    assert checked == 1000


# -- a second core point -----------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_exchange_allocation_stays_in_core(seed):
    rng = np.random.default_rng(seed)
    s = random_scenario(rng, n_users=(2, 6), n_links=(2, 3), n_classes=3)
    ctx = OptimumContext.of(s)
    if ctx.active.size < 2 or inner_core_check_pa(s).verdict != "InnerCore":
        return
    table = CoalitionValueTable.build(s)
    cv, flows, eps = core_exchange_allocation(s, table)
    assert eps > 0
    assert not np.allclose(cv.costs, proportional_allocation(s)[0].costs, rtol=0, atol=1e-12)
    assert flows.violations(s) == []
    assert core_check(s, cv, table).in_core
