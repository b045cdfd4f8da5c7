"""Cooperative solution concepts at the system optimum.

Every allocation considered here is a split of the optimal system cost
that some per-user routing realises while the aggregate link flows stay at
the system optimum. Each user then pays ``sum_l f^i_l T_l(f*_l)``, so costs
can be shifted between users by exchanging flow across links of different
latency.

Coalition excesses are per unit of demand: ``(sum_S J^i - v(S)) / r(S)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .coalitions import CoalitionValueTable, enumerate_demand_sums
from .equilibria import system_optimum, wardrop, worst_case_stackelberg
from .errors import (
    AllocationMismatch,
    CapExceeded,
    IndexMismatch,
    LpFailure,
    NoConvergence,
    NumericalBreakdown,
    TableIncomplete,
)
from .lp import EQ, GE, LE, LpProblem, solve_lp
from .model import CostVector, FlowProfile, Scenario

EXHAUSTIVE_CAP = 20


@dataclass(frozen=True, eq=False)
class OptimumContext:
    """System optimum data shared by the allocation routines."""

    link_flows: np.ndarray
    latencies: np.ndarray
    optimal_cost: float
    active: np.ndarray

    @classmethod
    def of(cls, scenario: Scenario) -> "OptimumContext":
        opt = system_optimum(scenario.network, scenario.total_demand)
        f = np.array(opt.link_flows)
        lat = scenario.network.latencies(f)
        return cls(f, lat, opt.optimal_cost, np.flatnonzero(f > 0))

    @property
    def single_point(self) -> bool:
        """True when all users must pay the same per-unit cost."""
        tau = self.latencies[self.active]
        return tau.size <= 1 or float(tau.max() - tau.min()) <= 1e-12 * float(tau.max())


def _check_total(scenario: Scenario, allocation: CostVector, ctx: OptimumContext) -> None:
    if len(allocation) != scenario.n_users:
        raise AllocationMismatch(f"allocation has {len(allocation)} entries for {scenario.n_users} users")
    tol = scenario.tolerances.allocation * max(1.0, ctx.optimal_cost)
    if abs(allocation.total - ctx.optimal_cost) > tol:
        raise AllocationMismatch(
            f"allocation sums to {allocation.total!r}, optimal system cost is {ctx.optimal_cost!r}")


def proportional_allocation(scenario: Scenario) -> tuple[CostVector, FlowProfile]:
    """Every user routes the same fraction ``r^i/R`` of the optimal link flows."""
    opt = system_optimum(scenario.network, scenario.total_demand)
    share = scenario.demand.demands / scenario.total_demand
    flows = FlowProfile(np.outer(share, opt.link_flows))
    return CostVector(share * opt.optimal_cost), flows


# -- excesses -------------------------------------------------------------

@dataclass(frozen=True)
class ExcessVector:
    """Excess per coalition (exhaustive mode) or per demand composition.

    ``ids`` are sorted member tuples or composition counts; ``members``
    gives the coalition each entry stands for.
    """

    ids: tuple
    values: np.ndarray = field(compare=False)
    members: tuple = field(default=(), compare=False)
    mode: str = "exhaustive"

    @property
    def entries(self) -> list[tuple]:
        return list(zip(self.ids, self.values.tolist()))

    @property
    def sorted_view(self) -> np.ndarray:
        return np.sort(self.values)[::-1]

    def max_entry(self) -> tuple[tuple, float, tuple]:
        k = int(np.argmax(self.values))
        return self.ids[k], float(self.values[k]), self.members[k]


def compare_lex(a: ExcessVector, b: ExcessVector, tol: float = 0.0) -> int:
    """-1 if ``a`` is lexicographically smaller than ``b``, 1 if larger, 0 if equal.

    Compares the excesses sorted in non-increasing order; the first entry
    differing by more than ``tol`` decides.
    """
    if len(a.ids) != len(b.ids) or set(a.ids) != set(b.ids):
        raise IndexMismatch("excess vectors range over different coalitions")
    for x, y in zip(a.sorted_view, b.sorted_view):
        if x < y - tol:
            return -1
        if x > y + tol:
            return 1
    return 0


def _coalition_bits(n: int) -> np.ndarray:
    masks = np.arange(1, 2 ** n - 1, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n)) & 1).astype(np.int8)


def _bits_demands_values(scenario: Scenario, bits: np.ndarray, table: CoalitionValueTable):
    profile = scenario.demand
    onehot = np.zeros((profile.n_users, profile.n_classes), dtype=int)
    onehot[np.arange(profile.n_users), profile.user_class] = 1
    counts = bits.astype(int) @ onehot
    uniq, inverse = np.unique(counts, axis=0, return_inverse=True)
    d_u = np.array([profile.composition_demand(row) for row in uniq])
    v_u = np.array([table.value(d) for d in d_u])
    inverse = inverse.reshape(-1)
    return d_u[inverse], v_u[inverse]


def binding_coalition(scenario: Scenario, costs, counts) -> tuple[int, ...]:
    """Max-excess coalition of a composition: the ``k_j`` costliest users of each class.

    Ties go to the lower user index.
    """
    costs = np.asarray(costs, dtype=float)
    members = []
    for j, k in enumerate(counts):
        users = np.flatnonzero(scenario.demand.user_class == j)
        order = sorted(users.tolist(), key=lambda i: (-costs[i], i))
        members.extend(order[:k])
    return tuple(sorted(members))


def excess_vector(scenario: Scenario, allocation: CostVector, table: CoalitionValueTable,
                  mode: str = "exhaustive", cap: int = EXHAUSTIVE_CAP) -> ExcessVector:
    ctx = OptimumContext.of(scenario)
    _check_total(scenario, allocation, ctx)
    J = allocation.costs
    n = scenario.n_users
    if mode == "exhaustive":
        if n > cap:
            raise CapExceeded(f"exhaustive excesses need N <= {cap}, got {n}")
        if n < 2:
            return ExcessVector((), np.zeros(0), (), mode)
        bits = _coalition_bits(n)
        d, v = _bits_demands_values(scenario, bits, table)
        values = (bits @ J - v) / d
        ids = tuple(tuple(np.flatnonzero(row).tolist()) for row in bits)
        return ExcessVector(ids, values, ids, mode)
    if mode == "composition":
        ids, vals, members = [], [], []
        for comp, d in enumerate_demand_sums(scenario.demand):
            group = binding_coalition(scenario, J, comp.counts)
            ids.append(comp.counts)
            members.append(group)
            vals.append((J[list(group)].sum() - table.value(d)) / d)
        return ExcessVector(tuple(ids), np.array(vals), tuple(members), mode)
    raise ValueError(f"unknown excess mode {mode!r}")


# -- core -------------------------------------------------------------------

@dataclass(frozen=True)
class CoreVerdict:
    verdict: str
    coalition: tuple | None
    margin: float

    @property
    def in_core(self) -> bool:
        return self.verdict == "InCore"

    def to_dict(self, ids=None) -> dict:
        coalition = None
        if self.coalition is not None:
            coalition = [ids[i] for i in self.coalition] if ids else list(self.coalition)
        return {"verdict": self.verdict, "blocking_coalition": coalition, "margin": self.margin}


def core_check(scenario: Scenario, allocation: CostVector, table: CoalitionValueTable) -> CoreVerdict:
    """``InCore`` iff no coalition has excess above the excess tolerance.

    The composition form is exact here: within a composition the costliest
    members give the largest excess.
    """
    if scenario.n_users < 2:
        ctx = OptimumContext.of(scenario)
        _check_total(scenario, allocation, ctx)
        return CoreVerdict("InCore", None, float("-inf"))
    ex = excess_vector(scenario, allocation, table, mode="composition")
    _, margin, members = ex.max_entry()
    if margin > scenario.tolerances.excess:
        return CoreVerdict("Blocked", members, margin)
    return CoreVerdict("InCore", None, margin)


@dataclass(frozen=True)
class InnerCoreVerdict:
    verdict: str
    wardrop_optimum_gap: float

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "wardrop_optimum_gap": self.wardrop_optimum_gap}


def inner_core_check_pa(scenario: Scenario, gap_tol: float = 1e-7) -> InnerCoreVerdict:
    """``InnerCore`` when the Wardrop flows differ from the optimum, else ``NotGuaranteed``."""
    R = scenario.total_demand
    gap = float(np.max(np.abs(wardrop(scenario.network, R).link_flows
                              - system_optimum(scenario.network, R).link_flows)))
    return InnerCoreVerdict("InnerCore" if gap > gap_tol else "NotGuaranteed", gap)


# -- flow realisation -------------------------------------------------------

def _split_flows(demands, link_flows, latencies, targets, tol: float, cost_tol: float):
    """Per-member flows with given row sums, column sums and member costs, or None."""
    demands = np.asarray(demands, dtype=float)
    F = np.asarray(link_flows, dtype=float)
    tau = np.asarray(latencies, dtype=float)
    targets = np.asarray(targets, dtype=float)
    n = demands.size
    act = np.flatnonzero(F > 0)
    out = np.zeros((n, F.size))
    Fa = F[act] * (demands.sum() / F[act].sum())
    ta = tau[act]
    if act.size == 1:
        out[:, act[0]] = demands
    else:
        la = act.size
        nv = n * la
        rows, rhs, rel = [], [], []
        for i in range(n):
            r = np.zeros(nv)
            r[i * la:(i + 1) * la] = 1.0
            rows.append(r), rhs.append(demands[i]), rel.append(EQ)
        for l in range(la - 1):
            r = np.zeros(nv)
            r[l::la] = 1.0
            rows.append(r), rhs.append(Fa[l]), rel.append(EQ)
        for i in range(n - 1):
            r = np.zeros(nv)
            r[i * la:(i + 1) * la] = ta
            rows.append(r), rhs.append(targets[i]), rel.append(EQ)
        sol = solve_lp(LpProblem(np.zeros(nv), np.array(rows), rel, np.array(rhs)), tol=tol)
        if not sol.optimal:
            return None
        out[:, act] = np.maximum(sol.x.reshape(n, la), 0.0)
    costs = out @ np.where(F > 0, tau, 0.0)
    if np.any(np.abs(costs - targets) > cost_tol):
        return None
    return out


def realize_allocation(scenario: Scenario, target: CostVector) -> FlowProfile | None:
    """Per-user flows at the system optimum whose costs equal ``target``, or None."""
    ctx = OptimumContext.of(scenario)
    _check_total(scenario, target, ctx)
    cost_tol = scenario.tolerances.allocation * max(1.0, ctx.optimal_cost)
    try:
        flows = _split_flows(scenario.demand.demands, ctx.link_flows, ctx.latencies,
                             target.costs, scenario.tolerances.lp, cost_tol)
    except NumericalBreakdown as exc:
        raise LpFailure(str(exc)) from exc
    return None if flows is None else FlowProfile(flows)


def exchange_allocation(scenario: Scenario, i: int, j: int, low: int, high: int,
                        eps: float) -> tuple[CostVector, FlowProfile]:
    """Proportional routing with users ``i`` and ``j`` swapping ``eps`` of flow.

    User ``i`` moves ``eps`` from link ``low`` to link ``high``; user ``j``
    moves the same amount back, so aggregate flows stay optimal.
    """
    _, pa_flows = proportional_allocation(scenario)
    f = np.array(pa_flows.per_user)
    if not (0 < eps < min(f[i, low], f[j, high])):
        raise ValueError(f"exchange amount {eps} outside (0, {min(f[i, low], f[j, high])})")
    f[i, low] -= eps
    f[i, high] += eps
    f[j, low] += eps
    f[j, high] -= eps
    flows = FlowProfile(f)
    ctx = OptimumContext.of(scenario)
    return CostVector(flows.user_costs(scenario.network, ctx.latencies)), flows


def core_exchange_allocation(scenario: Scenario, table: CoalitionValueTable,
                             i: int = 0, j: int = 1) -> tuple[CostVector, FlowProfile, float]:
    """A second Core allocation next to the proportional one.

    Picks the cheapest and dearest active links at the optimum and an
    exchange small enough that every coalition keeps a nonpositive excess.
    """
    ctx = OptimumContext.of(scenario)
    if scenario.n_users < 2 or ctx.active.size < 2:
        raise ValueError("needs two users and two active links at the optimum")
    tau = ctx.latencies
    low = int(ctx.active[np.argmin(tau[ctx.active])])
    high = int(ctx.active[np.argmax(tau[ctx.active])])
    share = scenario.demand.demands / scenario.total_demand
    eps_max = min(share[i] * ctx.link_flows[low], share[j] * ctx.link_flows[high])
    floor = ctx.optimal_cost / scenario.total_demand
    rows = [r for r in table.rows() if abs(r[0] - scenario.total_demand) > 1e-12 * scenario.total_demand]
    margin = min((avg - floor for _, _, avg in rows), default=0.0)
    d_min = min((d for d, _, _ in rows), default=scenario.total_demand)
    spread = float(tau[high] - tau[low])
    eps = 0.5 * eps_max
    if spread > 0 and margin > 0:
        eps = min(eps, 0.5 * margin * d_min / spread)
    cv, flows = exchange_allocation(scenario, i, j, low, high, eps)
    return cv, flows, eps


# -- randomized deviations --------------------------------------------------

@dataclass(frozen=True)
class RandomizedDeviation:
    """A mediator proposal: coalition probabilities and scaled member costs.

    ``transfers[S][k]`` is ``eta(S) * Y^i(S)`` for the k-th member of ``S``.
    ``slack`` is the total expected saving over all users; ``strict`` says
    whether it exceeds the strictness threshold.
    """

    support: dict
    transfers: dict
    slack: float
    strict: bool
    realizable: bool

    def expected_costs(self, n_users: int) -> np.ndarray:
        out = np.zeros(n_users)
        for S, z in self.transfers.items():
            for i, zi in zip(S, z):
                out[i] += zi
        return out

    def to_dict(self, ids) -> dict:
        return {"support": [{"coalition": [ids[i] for i in S], "probability": p}
                            for S, p in self.support.items()],
                "slack": self.slack, "strict": self.strict, "realizable": self.realizable}


def randomized_deviation_falsifier(scenario: Scenario, allocation: CostVector,
                                   table: CoalitionValueTable, cap: int = 10
                                   ) -> RandomizedDeviation | None:
    """Search for a randomized deviation no user objects to.

    A first LP minimises the total amount by which users would lose; if
    that is positive every proposal hurts someone and None is returned
    (the allocation is strongly inhibitive). Otherwise a second LP
    maximises the total expected saving subject to no user losing.
    Coalition costs are only required to sum to ``v(S)``; the returned
    proposal is then checked for flow-realisability.
    """
    n = scenario.n_users
    if n > cap:
        raise CapExceeded(f"deviation search needs N <= {cap}, got {n}")
    ctx = OptimumContext.of(scenario)
    _check_total(scenario, allocation, ctx)
    if n < 2:
        return None
    tol = scenario.tolerances.excess
    J = allocation.costs
    coalitions = [tuple(np.flatnonzero(row).tolist()) for row in _coalition_bits(n)]
    P = len(coalitions)
    values = [table.value_of(S) for S in coalitions]
    z_index = []
    for s, S in enumerate(coalitions):
        for i in S:
            z_index.append((s, i))
    nz = len(z_index)
    n_eta = P
    # variables: eta (P), z (nz), u (n)
    nv = n_eta + nz + n
    A, b, rel = [], [], []
    row = np.zeros(nv)
    row[:n_eta] = 1.0
    A.append(row), b.append(1.0), rel.append(EQ)
    for s, S in enumerate(coalitions):
        row = np.zeros(nv)
        row[s] = -values[s]
        for k, (s2, _) in enumerate(z_index):
            if s2 == s:
                row[n_eta + k] = 1.0
        A.append(row), b.append(0.0), rel.append(EQ)
    user_rows = []
    for i in range(n):
        row = np.zeros(nv)
        for s, S in enumerate(coalitions):
            if i in S:
                row[s] = J[i]
        for k, (_, i2) in enumerate(z_index):
            if i2 == i:
                row[n_eta + k] = -1.0
        user_rows.append(row)
        r = row.copy()
        r[n_eta + nz + i] = 1.0
        A.append(r), b.append(0.0), rel.append(GE)
    obj = np.zeros(nv)
    obj[n_eta + nz:] = 1.0
    try:
        first = solve_lp(LpProblem(obj, np.array(A), rel, np.array(b)), tol=scenario.tolerances.lp)
    except NumericalBreakdown as exc:
        raise LpFailure(str(exc)) from exc
    if not first.optimal:
        raise LpFailure(f"violation LP returned {first.status.value}")
    if first.objective > tol:
        return None

    # second stage: nobody loses more than in the first-stage solution, maximise saving
    upper = np.full(nv, np.inf)
    upper[n_eta + nz:] = np.maximum(first.x[n_eta + nz:], 0.0)
    obj2 = np.sum(user_rows, axis=0)
    try:
        second = solve_lp(LpProblem(obj2, np.array(A), rel, np.array(b), sense="max", upper=upper),
                          tol=scenario.tolerances.lp)
    except NumericalBreakdown as exc:
        raise LpFailure(str(exc)) from exc
    if not second.optimal:
        raise LpFailure(f"saving LP returned {second.status.value}")
    x = second.x
    support, transfers = {}, {}
    for s, S in enumerate(coalitions):
        if x[s] > tol:
            support[S] = float(x[s])
            transfers[S] = [float(x[n_eta + k]) for k, (s2, _) in enumerate(z_index) if s2 == s]
    slack = float(second.objective)
    realizable = all(_member_costs_realizable(scenario, S, np.array(transfers[S]) / p)
                     for S, p in support.items())
    return RandomizedDeviation(support, transfers, slack, slack > tol, realizable)


def _member_costs_realizable(scenario: Scenario, members, costs) -> bool:
    members = list(members)
    d = scenario.demand.demands[members]
    res = worst_case_stackelberg(scenario.network, max(0.0, scenario.total_demand - d.sum()), d.sum())
    lat = scenario.network.latencies(res.link_flows)
    cost_tol = scenario.tolerances.allocation * max(1.0, res.follower_cost)
    costs = np.asarray(costs) * (res.follower_cost / max(costs.sum(), 1e-300))
    return _split_flows(d, res.follower_flows, lat, costs, scenario.tolerances.lp, cost_tol) is not None


# -- nucleolus --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NucleolusResult:
    allocation: CostVector
    realizing_flows: FlowProfile
    stage_log: list

    def to_dict(self, scenario: Scenario) -> dict:
        out = self.allocation.to_dict(scenario.demand.ids)
        out["realizing_flows"] = scenario.network.to_input_order(self.realizing_flows.per_user).tolist()
        out["stage_log"] = self.stage_log
        return out


class _Game:
    """Linear description of system-optimal allocations and coalition rows.

    ``x`` are flow variables; player payments are ``J = P @ x``. Coalition
    row ``k`` reads ``W[k] @ J - dem[k] * eps <= val[k]``.
    """

    def __init__(self, P, A_eq, b_eq, W, dem, val, sum_row, ids):
        self.P, self.A_eq, self.b_eq = P, A_eq, b_eq
        self.W, self.dem, self.val = W, dem, val
        self.sum_row = sum_row
        self.ids = ids
        self.WP = W @ P

    @property
    def n_vars(self):
        return self.P.shape[1]

    def excess(self, x, rows=None):
        rows = slice(None) if rows is None else rows
        return (self.WP[rows] @ x - self.val[rows]) / self.dem[rows]


def _transport_game(demands, classes_size, ctx: OptimumContext):
    """Flow variables y[p, l] per player and active link.

    ``classes_size[p]`` users share player ``p``'s per-user flow vector,
    so the aggregate constraint weights player rows by class size.
    """
    n = demands.size
    act = ctx.active
    la = act.size
    tau = ctx.latencies[act]
    F = ctx.link_flows[act] * (float(np.dot(classes_size, demands)) / ctx.link_flows[act].sum())
    nv = n * la
    P = np.zeros((n, nv))
    A, b = [], []
    for p in range(n):
        P[p, p * la:(p + 1) * la] = tau
        r = np.zeros(nv)
        r[p * la:(p + 1) * la] = 1.0
        A.append(r), b.append(demands[p])
    for l in range(la - 1):
        r = np.zeros(nv)
        r[l::la] = classes_size
        A.append(r), b.append(F[l])
    return P, np.array(A), np.array(b)


def _solve_rowgen(game: _Game, objective, fixed, active, eps_fixed=None, initial=(), tol=1e-9,
                  batch=40):
    """LP over flows (and eps unless ``eps_fixed``) with lazily added coalition rows.

    Returns ``(x, eps, value, rows_used)``.
    """
    nv = game.n_vars
    with_eps = eps_fixed is None
    width = nv + (1 if with_eps else 0)
    base_A = [np.concatenate([r, [0.0] * with_eps]) for r in game.A_eq]
    base_b = list(game.b_eq)
    base_rel = [EQ] * len(base_A)
    for k, e in fixed:
        base_A.append(np.concatenate([game.WP[k], [0.0] * with_eps]))
        base_b.append(game.val[k] + game.dem[k] * e)
        base_rel.append(EQ)
    active = np.asarray(active, dtype=int)
    used = list(dict.fromkeys(int(k) for k in initial if k in set(active.tolist())))
    lower = np.zeros(width)
    if with_eps:
        lower[-1] = -np.inf
    for _ in range(10_000):
        A = list(base_A)
        b = list(base_b)
        rel = list(base_rel)
        for k in used:
            if with_eps:
                A.append(np.concatenate([game.WP[k], [-game.dem[k]]]))
                b.append(game.val[k])
            else:
                A.append(game.WP[k])
                b.append(game.val[k] + game.dem[k] * eps_fixed)
            rel.append(LE)
        obj = np.concatenate([objective, [0.0] * with_eps]) if not with_eps or objective is not None else None
        if with_eps and objective is None:
            obj = np.zeros(width)
            obj[-1] = 1.0
        try:
            sol = solve_lp(LpProblem(obj, np.array(A), rel, np.array(b), lower=lower), tol=tol)
        except NumericalBreakdown as exc:
            raise LpFailure(str(exc)) from exc
        if not sol.optimal:
            if with_eps and not used:
                used = [int(active[0])]
                continue
            raise LpFailure(f"nucleolus LP returned {sol.status.value}")
        x = sol.x[:nv]
        eps = float(sol.x[-1]) if with_eps else eps_fixed
        if active.size == 0:
            return x, eps, sol.objective, used
        ex = game.excess(x, active)
        viol = ex - eps
        bad = np.flatnonzero(viol > 10 * tol)
        bad = [int(active[k]) for k in bad[np.argsort(-viol[bad], kind="stable")] if int(active[k]) not in used]
        if not bad:
            return x, eps, sol.objective, used
        used.extend(bad[:batch])
    raise NoConvergence("row generation did not terminate")


def _in_span(basis: np.ndarray, rows: np.ndarray, tol=1e-9) -> np.ndarray:
    _, sv, vt = np.linalg.svd(basis, full_matrices=False)
    q = vt[sv > 1e-10 * sv.max()].T
    resid = rows - (rows @ q) @ q.T
    return np.linalg.norm(resid, axis=1) <= tol * np.maximum(1.0, np.linalg.norm(rows, axis=1))


def _sequential_nucleolus(game: _Game, x0, tol: float, tight_tol: float, max_stages: int):
    n_players = game.P.shape[0]
    fixed = []                       # (row, eps at which it is fixed)
    basis = game.sum_row[None, :].astype(float)
    all_rows = np.arange(game.W.shape[0])
    active = all_rows[~_in_span(basis, game.W.astype(float))] if all_rows.size else all_rows
    log = []
    x_last = x0
    seed = active[np.argsort(-game.excess(x0, active), kind="stable")[:2 * n_players + 2]] if active.size else []
    stage = 0
    while active.size and np.linalg.matrix_rank(basis, tol=1e-10) < n_players:
        stage += 1
        if stage > max_stages:
            raise NoConvergence(f"nucleolus needed more than {max_stages} stages")
        x, eps, _, used = _solve_rowgen(game, None, fixed, active, initial=seed, tol=tol)
        x_last = x
        ex = game.excess(x, active)
        candidates = [int(k) for k in active[np.argsort(-ex, kind="stable")] if game.excess(x, [k])[0] >= eps - tight_tol]
        ruled_out, newly = set(), []
        for k in candidates:
            if k in ruled_out:
                continue
            xs, _, low, _ = _solve_rowgen(game, game.WP[k] / game.dem[k], fixed, active,
                                          eps_fixed=eps + tol, initial=used, tol=tol)
            low -= game.val[k] / game.dem[k]
            if low >= eps - 10 * tol:
                newly.append(k)
            else:
                ruled_out.add(k)
                exs = game.excess(xs, candidates)
                ruled_out.update(c for c, e in zip(candidates, exs) if e < eps - 10 * tol)
        if not newly:
            raise NoConvergence(f"stage {stage}: no coalition row could be fixed")
        fixed.extend((k, eps) for k in newly)
        log.append({"stage": stage, "epsilon": eps, "fixed": [game.ids[k] for k in newly],
                    "rows": len(used)})
        basis = np.vstack([basis, game.W[newly].astype(float)])
        keep = ~_in_span(basis, game.W[active].astype(float))
        active = active[keep]
        seed = [k for k in used if k in set(active.tolist())]

    # one feasibility solve pins the flows to every fixed row
    if fixed:
        try:
            x_last, _, _, _ = _solve_rowgen(game, np.zeros(game.n_vars), fixed, [], eps_fixed=0.0, tol=tol)
        except LpFailure:
            pass
    return x_last, log


def nucleolus(scenario: Scenario, table: CoalitionValueTable, mode: str = "composition",
              cap: int = 12, row_order=None) -> NucleolusResult:
    """Lexicographic minimiser of the sorted per-unit excesses over system-optimal allocations.

    ``mode="composition"`` uses one row per demand composition and
    searches class-symmetric allocations (the nucleolus is unique and users
    of equal demand are interchangeable, so it is class-symmetric).
    ``mode="exhaustive"`` keeps one flow vector per user and one row per
    coalition; it is limited to ``N <= cap``. ``row_order`` permutes the
    constraint rows, which changes the pivoting path but not the result.
    """
    if not table.matches(scenario):
        raise TableIncomplete("value table was built for a different scenario")
    ctx = OptimumContext.of(scenario)
    profile = scenario.demand
    tol = scenario.tolerances
    pa, pa_flows = proportional_allocation(scenario)
    if ctx.single_point or scenario.n_users == 1:
        return NucleolusResult(pa, pa_flows, [])

    if mode == "composition":
        sizes = profile.class_sizes.astype(float)
        players_demand = profile.class_values.astype(float)
        comps = enumerate_demand_sums(profile)
        W = np.array([c.counts for c, _ in comps], dtype=float).reshape(-1, profile.n_classes)
        dem = np.array([d for _, d in comps])
        ids = [c.counts for c, _ in comps]
        to_user = profile.user_class
    elif mode == "exhaustive":
        if scenario.n_users > cap:
            raise CapExceeded(f"exhaustive nucleolus needs N <= {cap}, got {scenario.n_users}")
        sizes = np.ones(scenario.n_users)
        players_demand = profile.demands.astype(float)
        W = _coalition_bits(scenario.n_users).astype(float)
        dem, _ = _bits_demands_values(scenario, W.astype(np.int8), table)
        ids = [tuple(np.flatnonzero(r).tolist()) for r in W]
        to_user = np.arange(scenario.n_users)
    else:
        raise ValueError(f"unknown nucleolus mode {mode!r}")
    if row_order is not None:
        order = np.asarray(row_order, dtype=int)
        if sorted(order.tolist()) != list(range(W.shape[0])):
            raise IndexMismatch(f"row_order must permute {W.shape[0]} rows")
        W, dem, ids = W[order], dem[order], [ids[k] for k in order]
    val = np.array([table.value(d) for d in dem])
    P, A_eq, b_eq = _transport_game(players_demand, sizes, ctx)
    game = _Game(P, A_eq, b_eq, W, dem, val, sizes, ids)

    la = ctx.active.size
    share = players_demand / scenario.total_demand
    x0 = np.outer(share, ctx.link_flows[ctx.active]).reshape(-1)
    x, log = _sequential_nucleolus(game, x0, tol.lp, tol.tight, max_stages=W.shape[1] + 1)

    per_player = np.maximum(x.reshape(-1, la), 0.0)
    flows = np.zeros((scenario.n_users, scenario.network.n_links))
    flows[:, ctx.active] = per_player[to_user]
    # exact per-user demand after clipping
    flows *= (profile.demands / flows.sum(axis=1))[:, None]
    profile_out = FlowProfile(flows)
    costs = profile_out.user_costs(scenario.network, ctx.latencies)
    for entry in log:
        if mode == "composition":
            entry["coalitions"] = [list(binding_coalition(scenario, costs, c)) for c in entry["fixed"]]
        entry["fixed"] = [list(c) for c in entry["fixed"]]
    return NucleolusResult(CostVector(costs), profile_out, log)


def all_coalitions(n: int):
    """Proper nonempty coalitions of ``n`` users as sorted tuples."""
    for size in range(1, n):
        yield from itertools.combinations(range(n), size)
