"""Brute-force verifiers for the main solvers.

The grid and probe verifiers score each leader split with the follower's
atomic best response. The core and nucleolus verifiers share nothing with
the main solvers: worst-case values come from a numerical maximisation
over the leader's splits with a root-finding follower, and the nucleolus
is solved with HiGHS over every proper coalition. Flows are in the
network's internal (capacity-descending) link order.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import brentq, linprog, minimize_scalar

from .allocations import CoreVerdict
from .equilibria import atomic_best_response
from .errors import CapExceeded, DimensionUnsupported, InfeasibleMove, LpFailure
from .model import CostVector, Network, Scenario


# -- grid search over the leader ------------------------------------------

def _simplex_grid(total: float, n_links: int, step: float):
    k = int(np.floor(total / step + 1e-9))
    pts = np.arange(k + 1) * step
    if n_links == 2:
        for a in pts:
            yield np.array([a, total - a])
        if total - pts[-1] > 1e-12:
            yield np.array([total, 0.0])
        return
    for a in pts:
        for b in pts[pts <= total - a + 1e-12]:
            yield np.array([a, b, max(total - a - b, 0.0)])


def grid_leader_oracle(network: Network, leader_demand: float, follower_demand: float,
                       grid_step: float) -> tuple[np.ndarray, float]:
    """Leader split on a grid that maximises the follower's best-response cost.

    Splits that leave the follower without room are skipped.
    """
    L = network.n_links
    if L not in (2, 3):
        raise DimensionUnsupported(f"grid search supports 2 or 3 links, got {L}")
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    caps = network.capacities
    best_flows, best_cost = None, -np.inf
    for f0 in _simplex_grid(leader_demand, L, grid_step):
        if np.any(f0 >= caps) or follower_demand >= float(np.sum(caps - f0)):
            continue
        _, cost = atomic_best_response(network, f0, follower_demand)
        if cost > best_cost:
            best_flows, best_cost = f0, cost
    if best_flows is None:
        raise InfeasibleMove("no feasible leader split on the grid")
    return best_flows, float(best_cost)


def flow_transfer_monotonicity_probe(network: Network, leader_flows, from_link: int, to_link: int,
                                     delta: float, follower_demand: float) -> tuple[float, float]:
    """Follower best-response cost before and after moving ``delta`` of leader flow."""
    f0 = np.asarray(leader_flows, dtype=float)
    caps = network.capacities
    if delta < 0 or f0[from_link] < delta - 1e-15:
        raise InfeasibleMove(f"cannot move {delta} off link {from_link} carrying {f0[from_link]}")
    moved = f0.copy()
    moved[from_link] -= delta
    moved[to_link] += delta
    for f in (f0, moved):
        if np.any(f < 0) or np.any(f >= caps) or follower_demand >= float(np.sum(caps - f)):
            raise InfeasibleMove("leader flows leave no room for the follower")
    before = atomic_best_response(network, f0, follower_demand)[1]
    after = atomic_best_response(network, moved, follower_demand)[1]
    return float(before), float(after)


# -- independent worst-case values ----------------------------------------

def _link_flow_at(c: float, mu: float, lat) -> float:
    """Flow on a residual-capacity-``c`` link whose marginal cost equals ``mu``."""
    p = lat.power
    if c <= 0 or mu <= c ** -p:
        return 0.0
    if p == 1.0:
        return c - np.sqrt(c / mu)
    marg = lambda f: (c - f) ** -p + p * f * (c - f) ** (-p - 1) - mu  # noqa: E731
    return brentq(marg, 0.0, c * (1 - 1e-15), xtol=1e-15, rtol=1e-15)


def follower_optimum_cost(network: Network, residual, demand: float) -> float:
    """Minimal cost of routing ``demand`` on the residual network, by root-finding on the marginal."""
    lat = network.latency
    c = np.asarray(residual, dtype=float)
    if demand <= 0:
        return 0.0
    usable = c[c > 0]
    if demand >= usable.sum():
        return np.inf
    total = lambda mu: sum(_link_flow_at(ci, mu, lat) for ci in usable) - demand  # noqa: E731
    lo = float(np.min(usable ** -lat.power))
    hi = 2 * lo
    while total(hi) < 0:
        hi *= 2
    mu = brentq(total, lo, hi, xtol=1e-200, rtol=1e-15, maxiter=500)
    flows = np.array([_link_flow_at(ci, mu, lat) for ci in usable])
    flows *= demand / flows.sum()
    res = usable - flows
    return float(np.sum(np.where(flows > 0, flows * res ** -lat.power, 0.0)))


def _max_over_splits(fun, total: float, caps, prefix=(), grid: int = 25) -> float:
    """Maximise ``fun(split)`` over splits of ``total`` below ``caps``.

    One coordinate at a time: a coarse grid, then bounded Brent around the
    best grid point, recursing on the remaining links.
    """
    if len(caps) == 1:
        if total >= caps[0]:
            return -np.inf
        return fun(np.array(prefix + (total,)))
    lo = max(0.0, total - float(np.sum(caps[1:])) + 1e-12)
    hi = min(total, caps[0] * (1 - 1e-12))
    if lo > hi:
        return -np.inf
    inner = lambda a: _max_over_splits(fun, total - a, caps[1:], prefix + (a,), grid)  # noqa: E731
    pts = np.linspace(lo, hi, grid) if hi > lo else np.array([lo])
    vals = np.array([inner(a) for a in pts])
    k = int(np.argmax(vals))
    best = float(vals[k])
    a0, a1 = pts[max(k - 1, 0)], pts[min(k + 1, pts.size - 1)]
    if a1 > a0:
        r = minimize_scalar(lambda a: -inner(a), bounds=(a0, a1), method="bounded",
                            options={"xatol": 1e-12 * max(1.0, hi), "maxiter": 500})
        best = max(best, -float(r.fun))
    return best


def worst_case_value_oracle(network: Network, leader_demand: float, follower_demand: float) -> float:
    """Max over leader splits of the follower's optimal cost, by direct maximisation."""
    caps = network.capacities
    if caps.size > 3:
        raise DimensionUnsupported(f"value oracle supports up to 3 links, got {caps.size}")
    if follower_demand <= 0:
        return 0.0
    if leader_demand <= 0:
        return follower_optimum_cost(network, caps, follower_demand)

    def cost(f0):
        val = follower_optimum_cost(network, caps - f0, follower_demand)
        return -np.inf if val == np.inf else val

    return _max_over_splits(cost, leader_demand, tuple(caps))


class _Values:
    """Per-call lookup so equal coalition demands are solved once."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.store = {}

    def __call__(self, members) -> float:
        d = float(sum(self.scenario.demand.demands[i] for i in members))
        key = round(d, 12)
        if key not in self.store:
            R = self.scenario.total_demand
            self.store[key] = worst_case_value_oracle(self.scenario.network, max(R - d, 0.0), d)
        return self.store[key]


def _optimum_oracle(network: Network, demand: float):
    """System-optimal link flows, by root-finding on the common marginal cost."""
    lat = network.latency
    caps = network.capacities
    total = lambda mu: sum(_link_flow_at(c, mu, lat) for c in caps) - demand  # noqa: E731
    lo = float(np.min(caps ** -lat.power))
    hi = 2 * lo
    while total(hi) < 0:
        hi *= 2
    mu = brentq(total, lo, hi, xtol=1e-200, rtol=1e-15, maxiter=500)
    flows = np.array([_link_flow_at(c, mu, lat) for c in caps])
    flows *= demand / flows.sum()
    return flows, lat.of_residual(caps - flows)


# -- core and nucleolus by enumeration --------------------------------------

def exhaustive_core_oracle(scenario: Scenario, allocation: CostVector, cap: int = 12) -> CoreVerdict:
    """Literal check of every proper coalition.

    A blocked verdict names the first coalition of maximal excess in
    enumeration order (by size, then lexicographic).
    """
    n = scenario.n_users
    if n > cap:
        raise CapExceeded(f"exhaustive core check needs N <= {cap}, got {n}")
    values = _Values(scenario)
    J = np.asarray(allocation.costs, dtype=float)
    r = scenario.demand.demands
    best, arg = -np.inf, None
    for size in range(1, n):
        for S in itertools.combinations(range(n), size):
            e = (sum(J[i] for i in S) - values(S)) / sum(r[i] for i in S)
            if e > best:
                best, arg = e, S
    if arg is not None and best > scenario.tolerances.excess:
        return CoreVerdict("Blocked", arg, float(best))
    return CoreVerdict("InCore", None, float(best))


def exhaustive_nucleolus_oracle(scenario: Scenario, cap: int = 10) -> CostVector:
    """Nucleolus from sequential LPs over all ``2^N - 2`` coalitions (HiGHS).

    Rows with a positive dual at a stage optimum are fixed at equality.
    """
    n = scenario.n_users
    if n > cap:
        raise CapExceeded(f"exhaustive nucleolus needs N <= {cap}, got {n}")
    R = scenario.total_demand
    flows, tau = _optimum_oracle(scenario.network, R)
    r = scenario.demand.demands
    optimal_cost = float(np.dot(flows, tau))
    if n == 1:
        return CostVector(np.array([optimal_cost]))
    act = np.flatnonzero(flows > 1e-12 * R)
    la = act.size
    t = tau[act]
    if la == 1 or np.ptp(t) <= 1e-12 * t.max():
        return CostVector(r / R * optimal_cost)

    values = _Values(scenario)
    coalitions = [S for size in range(1, n) for S in itertools.combinations(range(n), size)]
    W = np.zeros((len(coalitions), n))
    for k, S in enumerate(coalitions):
        W[k, list(S)] = 1.0
    vS = np.array([values(S) for S in coalitions])
    dS = W @ r

    # x = (y[i, l] for each user and active link, eps)
    nv = n * la + 1
    P = np.zeros((n, nv))
    A_eq, b_eq = [], []
    for i in range(n):
        P[i, i * la:(i + 1) * la] = t
        row = np.zeros(nv)
        row[i * la:(i + 1) * la] = 1.0
        A_eq.append(row)
        b_eq.append(r[i])
    F = flows[act] * (r.sum() / flows[act].sum())
    for l in range(la - 1):
        row = np.zeros(nv)
        row[l:n * la:la] = 1.0
        A_eq.append(row)
        b_eq.append(F[l])
    WP = W @ P
    fixed_rows, fixed_vals = [], []
    free = list(range(len(coalitions)))
    bounds = [(0, None)] * (n * la) + [(None, None)]
    cost = np.zeros(nv)
    cost[-1] = 1.0
    x = None
    for _ in range(len(coalitions) + 1):
        span = np.vstack([np.ones(n)] + [W[k] for k in fixed_rows])
        if np.linalg.matrix_rank(span, tol=1e-10) >= n or not free:
            break
        A_ub = np.array([WP[k] - np.eye(nv)[-1] * dS[k] for k in free])
        b_ub = vS[free]
        Aeq = np.array(A_eq + [WP[k] for k in fixed_rows])
        beq = np.array(b_eq + [vS[k] + dS[k] * e for k, e in zip(fixed_rows, fixed_vals)])
        res = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=Aeq, b_eq=beq, bounds=bounds, method="highs")
        if res.status != 0:
            raise LpFailure(f"HiGHS: {res.message}")
        x = res.x
        eps = float(x[-1])
        duals = -res.ineqlin.marginals
        newly = [free[j] for j in np.flatnonzero(duals > 1e-9)]
        if not newly:
            raise LpFailure("no positive dual at a stage optimum")
        fixed_rows += newly
        fixed_vals += [eps] * len(newly)
        span = np.vstack([np.ones(n)] + [W[k] for k in fixed_rows])
        _, sv, vt = np.linalg.svd(span, full_matrices=False)
        q = vt[sv > 1e-10 * sv.max()].T
        free = [k for k in free if k not in newly
                and np.linalg.norm(W[k] - q @ (q.T @ W[k])) > 1e-9 * np.linalg.norm(W[k])]
    J = P @ x
    return CostVector(J)
