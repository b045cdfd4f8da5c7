"""Domain types for parallel-link routing games.

A game instance (:class:`Scenario`) is a set of parallel links with
capacities and a shared latency family, plus the demands of the users.
Links are kept sorted by capacity, largest first; ``Network.input_order``
maps internal positions back to the order of the input document.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import (
    CapacityInfeasible,
    MalformedDocument,
    NonpositiveCapacity,
    NonpositiveDemand,
)

INF = math.inf

# demands equal within this relative distance share a demand class
DEMAND_CLASS_RTOL = 1e-12


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Tolerances:
    """Numeric settings shared by the solvers.

    ``allocation`` is the slack allowed between the sum of a user-supplied
    cost vector and the optimal system cost.
    """

    flow: float = 1e-9
    kkt: float = 1e-6
    lp: float = 1e-9
    excess: float = 1e-9
    tight: float = 1e-7
    allocation: float = 1e-6

    def with_solver_tolerance(self, tol: float) -> "Tolerances":
        return Tolerances(flow=tol, kkt=self.kkt, lp=tol, excess=tol,
                          tight=self.tight, allocation=self.allocation)


@dataclass(frozen=True)
class LatencyFunction:
    """Per-unit link cost depending only on the residual capacity ``c - f``.

    ``family`` is ``"mm1"`` for ``1/(c-f)`` or ``"mm1_power"`` for
    ``1/(c-f)**p`` with ``p >= 1``. At or above capacity the value is
    ``INF``.
    """

    family: str = "mm1"
    p: float = 1.0

    def __post_init__(self):
        if self.family not in ("mm1", "mm1_power"):
            raise MalformedDocument(f"unknown latency family {self.family!r}")
        if self.family == "mm1" and self.p != 1.0:
            raise MalformedDocument("mm1 latency takes no exponent")
        if not (math.isfinite(self.p) and self.p >= 1.0):
            raise MalformedDocument(f"latency exponent must be >= 1, got {self.p}")

    @property
    def power(self) -> float:
        return 1.0 if self.family == "mm1" else self.p

    def of_residual(self, residual):
        """Latency as a function of residual capacity (vectorised)."""
        y = np.asarray(residual, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(y > 0, np.power(np.where(y > 0, y, 1.0), -self.power), INF)
        return out if out.ndim else float(out)

    def derivative_of_residual(self, residual):
        """Derivative of latency with respect to flow, ``p / y**(p+1)``."""
        y = np.asarray(residual, dtype=float)
        p = self.power
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(y > 0, p * np.power(np.where(y > 0, y, 1.0), -p - 1.0), INF)
        return out if out.ndim else float(out)

    def residual_for_latency(self, latency):
        """Inverse of :meth:`of_residual`."""
        return np.power(np.asarray(latency, dtype=float), -1.0 / self.power)

    def to_dict(self) -> dict:
        if self.family == "mm1":
            return {"family": "mm1"}
        return {"family": "mm1_power", "p": self.p}


@dataclass(frozen=True, eq=False)
class Network:
    """Parallel links sorted by capacity, largest first."""

    capacities: np.ndarray
    latency: LatencyFunction = field(default_factory=LatencyFunction)
    input_order: np.ndarray = None

    def __post_init__(self):
        caps = np.asarray(self.capacities, dtype=float)
        if caps.ndim != 1 or caps.size == 0:
            raise MalformedDocument("network needs at least one link")
        if not np.all(np.isfinite(caps)):
            raise MalformedDocument("capacities must be finite numbers")
        if np.any(caps <= 0):
            raise NonpositiveCapacity(f"capacities must be positive, got {caps.tolist()}")
        if self.input_order is None:
            order = np.argsort(-caps, kind="stable")
            caps = caps[order]
        else:
            order = np.asarray(self.input_order, dtype=int)
            if sorted(order.tolist()) != list(range(caps.size)) or np.any(np.diff(caps) > 0):
                raise MalformedDocument("input_order must accompany descending capacities")
        object.__setattr__(self, "capacities", _frozen(caps))
        object.__setattr__(self, "input_order", _frozen(order, dtype=int))

    @classmethod
    def from_input(cls, capacities: Sequence[float], latency: LatencyFunction | None = None) -> "Network":
        return cls(np.asarray(capacities, dtype=float), latency or LatencyFunction())

    @property
    def n_links(self) -> int:
        return int(self.capacities.size)

    @property
    def total_capacity(self) -> float:
        return float(self.capacities.sum())

    def latencies(self, flows) -> np.ndarray:
        return self.latency.of_residual(self.capacities - np.asarray(flows, dtype=float))

    def latency_derivatives(self, flows) -> np.ndarray:
        return self.latency.derivative_of_residual(self.capacities - np.asarray(flows, dtype=float))

    def system_cost(self, flows) -> float:
        """``sum_l f_l T_l(f_l)``; zero flow on a saturated link costs nothing."""
        f = np.asarray(flows, dtype=float)
        lat = self.latencies(f)
        return float(np.sum(np.where(f > 0, f * lat, 0.0)))

    def to_input_order(self, values) -> np.ndarray:
        """Reorder a per-link vector (or the last axis of a matrix) to input order."""
        values = np.asarray(values)
        out = np.empty_like(values)
        out[..., self.input_order] = values
        return out

    def from_input_order(self, values) -> np.ndarray:
        return np.asarray(values)[..., self.input_order]

    def __eq__(self, other):
        return (isinstance(other, Network)
                and self.latency == other.latency
                and np.array_equal(self.capacities, other.capacities)
                and np.array_equal(self.input_order, other.input_order))

    def __hash__(self):
        return hash((self.latency, self.capacities.tobytes(), self.input_order.tobytes()))


def latency(network: Network, link: int, flow: float) -> float:
    """Latency of one link (internal index) carrying ``flow``; ``INF`` at capacity."""
    return float(network.latency.of_residual(network.capacities[link] - flow))


def latency_derivative(network: Network, link: int, flow: float) -> float:
    return float(network.latency.derivative_of_residual(network.capacities[link] - flow))


@dataclass(frozen=True, eq=False)
class DemandProfile:
    """User demands with their partition into distinct demand classes.

    ``class_values`` holds the K distinct magnitudes in ascending order,
    ``class_sizes`` their multiplicities and ``user_class`` the class of
    each user.
    """

    demands: np.ndarray
    ids: tuple = ()

    def __post_init__(self):
        d = np.asarray(self.demands, dtype=float)
        if d.ndim != 1 or d.size == 0:
            raise MalformedDocument("at least one user is required")
        if not np.all(np.isfinite(d)):
            raise MalformedDocument("demands must be finite numbers")
        if np.any(d <= 0):
            raise NonpositiveDemand(f"demands must be positive, got {d.tolist()}")
        ids = tuple(self.ids) if self.ids else tuple(f"u{i + 1}" for i in range(d.size))
        if len(ids) != d.size or len(set(ids)) != len(ids):
            raise MalformedDocument("user ids must be unique, one per demand")
        object.__setattr__(self, "demands", _frozen(d))
        object.__setattr__(self, "ids", ids)

        order = np.argsort(d, kind="stable")
        values, sizes = [], []
        user_class = np.empty(d.size, dtype=int)
        for idx in order:
            if values and d[idx] - values[-1] <= DEMAND_CLASS_RTOL * d[idx]:
                sizes[-1] += 1
            else:
                values.append(float(d[idx]))
                sizes.append(1)
            user_class[idx] = len(values) - 1
        object.__setattr__(self, "class_values", _frozen(values))
        object.__setattr__(self, "class_sizes", _frozen(sizes, dtype=int))
        object.__setattr__(self, "user_class", _frozen(user_class, dtype=int))

    @property
    def n_users(self) -> int:
        return int(self.demands.size)

    @property
    def total(self) -> float:
        return float(self.demands.sum())

    @property
    def n_classes(self) -> int:
        return int(self.class_values.size)

    def composition_of(self, members) -> tuple[int, ...]:
        counts = np.zeros(self.n_classes, dtype=int)
        for i in members:
            counts[self.user_class[i]] += 1
        return tuple(int(k) for k in counts)

    def composition_demand(self, counts) -> float:
        """Aggregate demand of a composition, summed in class order.

        Every coalition with the same composition gets a bit-identical sum,
        which keeps value-table lookups exact.
        """
        total = 0.0
        for k, value in zip(counts, self.class_values):
            total += k * float(value)
        return total

    def __eq__(self, other):
        return (isinstance(other, DemandProfile) and self.ids == other.ids
                and np.array_equal(self.demands, other.demands))

    def __hash__(self):
        return hash((self.ids, self.demands.tobytes()))


@dataclass(frozen=True)
class Scenario:
    network: Network
    demand: DemandProfile
    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self):
        if not self.demand.total < self.network.total_capacity:
            raise CapacityInfeasible(
                f"total demand {self.demand.total} must be below total capacity "
                f"{self.network.total_capacity}")

    @classmethod
    def build(cls, capacities, demands, latency: LatencyFunction | None = None,
              ids=(), tolerances: Tolerances | None = None) -> "Scenario":
        return cls(Network.from_input(capacities, latency),
                   DemandProfile(np.asarray(demands, dtype=float), tuple(ids)),
                   tolerances or Tolerances())

    @property
    def n_users(self) -> int:
        return self.demand.n_users

    @property
    def total_demand(self) -> float:
        return self.demand.total

    def fingerprint(self) -> str:
        blob = json.dumps(serialize_scenario(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def coalition(self, members) -> "CoalitionSpec":
        return CoalitionSpec.of(self, members)


@dataclass(frozen=True, eq=False)
class FlowProfile:
    """Per-user, per-link flows (links in internal order)."""

    per_user: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.per_user, dtype=float)
        if m.ndim != 2:
            raise ValueError("per_user must be an N x L matrix")
        object.__setattr__(self, "per_user", _frozen(m))
        object.__setattr__(self, "aggregate", _frozen(m.sum(axis=0)))

    def user_costs(self, network: Network, link_latencies=None) -> np.ndarray:
        lat = network.latencies(self.aggregate) if link_latencies is None else link_latencies
        with np.errstate(invalid="ignore"):
            return np.where(self.per_user > 0, self.per_user * lat, 0.0).sum(axis=1)

    def violations(self, scenario: Scenario) -> list[str]:
        tol = scenario.tolerances.flow
        out = []
        if self.per_user.shape != (scenario.n_users, scenario.network.n_links):
            return [f"shape {self.per_user.shape} does not match scenario"]
        if np.any(self.per_user < -tol):
            out.append("negative flow")
        gap = np.abs(self.per_user.sum(axis=1) - scenario.demand.demands)
        if np.any(gap > tol * np.maximum(1.0, scenario.demand.demands)):
            out.append(f"demand mismatch up to {gap.max():.3g}")
        if np.any(self.aggregate >= scenario.network.capacities):
            out.append("link at or above capacity")
        return out


@dataclass(frozen=True, eq=False)
class CostVector:
    costs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "costs", _frozen(np.asarray(self.costs, dtype=float)))

    @property
    def total(self) -> float:
        return float(self.costs.sum())

    def __len__(self):
        return int(self.costs.size)

    def __getitem__(self, i):
        return float(self.costs[i])

    def to_dict(self, ids) -> dict:
        return {"users": [{"id": uid, "cost": float(c)} for uid, c in zip(ids, self.costs)]}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], ids) -> "CostVector":
        try:
            entries = {str(u["id"]): float(u["cost"]) for u in doc["users"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedDocument(f"bad allocation document: {exc}") from exc
        if set(entries) != set(ids) or len(entries) != len(doc["users"]):
            raise MalformedDocument("allocation must list every scenario user exactly once")
        if not all(math.isfinite(v) for v in entries.values()):
            raise MalformedDocument("allocation costs must be finite")
        return cls(np.array([entries[uid] for uid in ids]))

    def __eq__(self, other):
        return isinstance(other, CostVector) and np.array_equal(self.costs, other.costs)


@dataclass(frozen=True)
class CoalitionSpec:
    members: frozenset
    aggregate_demand: float

    @classmethod
    def of(cls, scenario: Scenario, members) -> "CoalitionSpec":
        members = frozenset(int(i) for i in members)
        if not members:
            raise MalformedDocument("a coalition needs at least one member")
        if min(members) < 0 or max(members) >= scenario.n_users:
            raise MalformedDocument(f"coalition members out of range: {sorted(members)}")
        d = scenario.demand.composition_demand(scenario.demand.composition_of(members))
        return cls(members, d)

    def complement_demand(self, scenario: Scenario) -> float:
        """Demand of the adversarial complement, clipped at zero."""
        return max(0.0, scenario.total_demand - self.aggregate_demand)


# -- documents -------------------------------------------------------------

def _reject_constant(name):
    raise MalformedDocument(f"non-finite literal {name} is not allowed")


def load_json(text: str):
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"invalid JSON: {exc}") from exc


def _number(value, what):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedDocument(f"{what} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise MalformedDocument(f"{what} must be finite")
    return value


def validate_scenario(raw: Any, tolerances: Tolerances | None = None) -> Scenario:
    """Build a :class:`Scenario` from a parsed scenario document.

    >>> s = validate_scenario({"links": [{"capacity": 2}, {"capacity": 1}],
    ...                        "users": [{"id": "a", "demand": 0.5},
    ...                                  {"id": "b", "demand": 0.5}]})
    >>> s.demand.n_classes, s.total_demand
    (1, 1.0)
    """
    if isinstance(raw, (str, bytes)):
        raw = load_json(raw)
    if not isinstance(raw, Mapping):
        raise MalformedDocument("scenario must be a JSON object")
    links, users = raw.get("links"), raw.get("users")
    if not isinstance(links, list) or not isinstance(users, list):
        raise MalformedDocument("scenario needs 'links' and 'users' arrays")
    caps = []
    for k, link in enumerate(links):
        if not isinstance(link, Mapping) or "capacity" not in link:
            raise MalformedDocument(f"link {k} lacks a capacity")
        caps.append(_number(link["capacity"], f"capacity of link {k}"))

    lat_doc = raw.get("latency", {"family": "mm1"})
    if not isinstance(lat_doc, Mapping) or "family" not in lat_doc:
        raise MalformedDocument("latency must be an object with a 'family'")
    family = lat_doc["family"]
    if family == "mm1":
        if set(lat_doc) - {"family"}:
            raise MalformedDocument("mm1 latency takes no parameters")
        lat = LatencyFunction("mm1")
    elif family == "mm1_power":
        if "p" not in lat_doc:
            raise MalformedDocument("mm1_power latency needs 'p'")
        lat = LatencyFunction("mm1_power", _number(lat_doc["p"], "latency exponent"))
    else:
        raise MalformedDocument(f"unsupported latency family {family!r}")

    ids, demands = [], []
    for k, user in enumerate(users):
        if not isinstance(user, Mapping) or "demand" not in user or "id" not in user:
            raise MalformedDocument(f"user {k} needs 'id' and 'demand'")
        if not isinstance(user["id"], str):
            raise MalformedDocument(f"user {k} id must be a string")
        ids.append(user["id"])
        demands.append(_number(user["demand"], f"demand of user {user['id']}"))

    network = Network.from_input(caps, lat)
    profile = DemandProfile(np.array(demands, dtype=float), tuple(ids))
    return Scenario(network, profile, tolerances or Tolerances())


def serialize_scenario(scenario: Scenario) -> dict:
    net = scenario.network
    caps = net.to_input_order(net.capacities)
    return {
        "links": [{"capacity": float(c)} for c in caps],
        "latency": net.latency.to_dict(),
        "users": [{"id": uid, "demand": float(d)}
                  for uid, d in zip(scenario.demand.ids, scenario.demand.demands)],
    }
