"""Worst-case coalition values.

The value of a coalition is the follower's cost in the worst-case
Stackelberg game against its complement. It depends on the coalition only
through its aggregate demand, so values are tabulated per demand sum and
coalitions are enumerated per demand composition: how many members are
taken from each demand class.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Iterable

from .equilibria import system_optimum, worst_case_stackelberg
from .errors import NumericalBreakdown, TableIncomplete
from .model import CoalitionSpec, DemandProfile, Scenario


def demand_key(d: float) -> float:
    """Quantise a demand sum to 13 significant digits for table lookup."""
    return float(f"{d:.12e}")


@dataclass(frozen=True)
class DemandComposition:
    counts: tuple
    aggregate_demand: float

    @property
    def size(self) -> int:
        return sum(self.counts)


def enumerate_demand_sums(profile: DemandProfile, include_grand: bool = False
                          ) -> list[tuple[DemandComposition, float]]:
    """All demand compositions of nonempty proper coalitions.

    Each composition respects the class multiplicities. Entries are in
    lexicographic order of their counts; several compositions may share
    one aggregate demand.
    """
    out = []
    grand = tuple(int(m) for m in profile.class_sizes)
    for counts in itertools.product(*(range(m + 1) for m in grand)):
        if not any(counts) or (counts == grand and not include_grand):
            continue
        d = profile.composition_demand(counts)
        out.append((DemandComposition(counts, d), d))
    return out


def composition_bound(n_users: int, n_classes: int) -> int:
    """Compositions of proper coalitions when class sizes are unconstrained."""
    return sum(math.comb(s + n_classes - 1, n_classes - 1) for s in range(1, n_users))


def distinct_demand_sums(profile: DemandProfile, include_grand: bool = True) -> list[float]:
    seen = {}
    for _, d in enumerate_demand_sums(profile, include_grand=include_grand):
        seen.setdefault(demand_key(d), d)
    return [seen[k] for k in sorted(seen)]


def worst_case_value(scenario: Scenario, demand: float, method: str = "waterfill") -> float:
    """Follower cost when ``demand`` faces the rest of the traffic as adversary."""
    leader = max(0.0, scenario.total_demand - demand)
    res = worst_case_stackelberg(scenario.network, leader, demand, method=method,
                                 kkt_tol=scenario.tolerances.kkt)
    return res.follower_cost


class ValueCache:
    """Memo of coalition values keyed by scenario and quantised demand."""

    def __init__(self):
        self._store = {}
        self.hits = 0
        self.misses = 0

    def get(self, scenario: Scenario, demand: float, compute: Callable[[], float]) -> float:
        key = (scenario.fingerprint(), demand_key(demand))
        if key in self._store:
            self.hits += 1
        else:
            self.misses += 1
            self._store[key] = compute()
        return self._store[key]


def coalition_value(scenario: Scenario, coalition: CoalitionSpec | Iterable[int],
                    cache: ValueCache | None = None) -> float:
    if not isinstance(coalition, CoalitionSpec):
        coalition = CoalitionSpec.of(scenario, coalition)
    d = coalition.aggregate_demand
    compute = lambda: worst_case_value(scenario, d)  # noqa: E731
    return compute() if cache is None else cache.get(scenario, d, compute)


def _solve_value(args):
    scenario, d = args
    return worst_case_value(scenario, d)


class CoalitionValueTable:
    """Frozen map from aggregate coalition demand to worst-case value."""

    def __init__(self, scenario: Scenario, values: dict, optimal_cost: float):
        self.fingerprint = scenario.fingerprint()
        self.total_demand = scenario.total_demand
        self.optimal_cost = float(optimal_cost)
        self._profile = scenario.demand
        self._entries = MappingProxyType({demand_key(d): (float(d), float(v)) for d, v in values.items()})

    @classmethod
    def build(cls, scenario: Scenario, threads: int = 1) -> "CoalitionValueTable":
        """Solve every distinct demand sum (optionally in worker processes).

        Raises :class:`NumericalBreakdown` if the finished table breaks the
        average-value invariants.
        """
        demands = distinct_demand_sums(scenario.demand, include_grand=True)
        if threads > 1 and len(demands) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                values = list(pool.map(_solve_value, [(scenario, d) for d in demands], chunksize=8))
        else:
            values = [worst_case_value(scenario, d) for d in demands]
        opt = system_optimum(scenario.network, scenario.total_demand).optimal_cost
        table = cls(scenario, dict(zip(demands, values)), opt)
        problems = table.check_invariants()
        if problems:
            raise NumericalBreakdown("value table is inconsistent: " + "; ".join(problems[:3]))
        return table

    @classmethod
    def from_function(cls, scenario: Scenario, fn: Callable[[float], float]) -> "CoalitionValueTable":
        """Table with synthetic values ``fn(d)`` for every demand sum."""
        demands = distinct_demand_sums(scenario.demand, include_grand=True)
        opt = system_optimum(scenario.network, scenario.total_demand).optimal_cost
        return cls(scenario, {d: fn(d) for d in demands}, opt)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, demand: float) -> bool:
        return demand_key(demand) in self._entries

    def value(self, demand: float) -> float:
        try:
            return self._entries[demand_key(demand)][1]
        except KeyError:
            raise TableIncomplete(f"no coalition value for aggregate demand {demand!r}") from None

    def value_of(self, members) -> float:
        return self.value(self._profile.composition_demand(self._profile.composition_of(members)))

    def matches(self, scenario: Scenario) -> bool:
        return scenario.fingerprint() == self.fingerprint

    def rows(self) -> list[tuple[float, float, float]]:
        """``(aggregate_demand, v, v/d)`` sorted by demand."""
        return [(d, v, v / d) for d, v in sorted(self._entries.values())]

    def check_invariants(self, tol: float = 1e-8) -> list[str]:
        problems = []
        rows = self.rows()
        grand = self._entries.get(demand_key(self.total_demand))
        if grand is not None and abs(grand[1] - self.optimal_cost) > tol * max(1.0, self.optimal_cost):
            problems.append(f"v(R)={grand[1]!r} differs from optimal cost {self.optimal_cost!r}")
        floor = self.optimal_cost / self.total_demand
        for (d0, _, a0), (d1, _, a1) in zip(rows, rows[1:]):
            if a1 > a0 + tol:
                problems.append(f"average value rises from {a0!r} at d={d0!r} to {a1!r} at d={d1!r}")
        for d, _, a in rows:
            if a < floor - tol:
                problems.append(f"average value {a!r} at d={d!r} below J*/R={floor!r}")
        return problems

    def to_csv(self, stream=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["aggregate_demand", "v", "avg"])
        for row in self.rows():
            writer.writerow([f"{x:.17g}" for x in row])
        text = buf.getvalue()
        if stream is not None:
            stream.write(text)
        return text

    def to_dict(self) -> dict:
        return {"fingerprint": self.fingerprint,
                "optimal_cost": self.optimal_cost,
                "entries": [{"aggregate_demand": d, "v": v, "avg": a} for d, v, a in self.rows()]}
