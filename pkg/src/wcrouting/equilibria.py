"""Noncooperative solvers on parallel links.

All solvers reduce to a scalar search for a common multiplier: the common
marginal cost at the system optimum, the common latency at a Wardrop
equilibrium. Because latencies depend on a link only through its residual
capacity, a Wardrop equilibrium is a water-filling of residual capacity
and the adversarial leader of the worst-case Stackelberg game plays
exactly that water-filling on the bare network (it loads the links of
largest capacity until their residuals meet). The follower then solves a
system optimum on what is left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import Infeasible, NoConvergence
from .model import LatencyFunction, Network, _frozen

# a link joins the active set only if its zero-flow marginal is below the
# multiplier by more than this (relative) margin; exact ties stay inactive
ACTIVE_SET_RTOL = 1e-12
# iterates never get closer to capacity than this fraction
CAPACITY_GUARD = 1e-12

_MAX_ITERS = 200


@dataclass(frozen=True, eq=False)
class OptimumResult:
    link_flows: np.ndarray
    optimal_cost: float
    multiplier: float

    def to_dict(self, network: Network) -> dict:
        return {"link_flows": network.to_input_order(self.link_flows).tolist(),
                "optimal_cost": self.optimal_cost,
                "multiplier": self.multiplier}

    @classmethod
    def from_dict(cls, doc: dict, network: Network) -> "OptimumResult":
        return cls(_frozen(network.from_input_order(np.array(doc["link_flows"]))),
                   float(doc["optimal_cost"]), float(doc["multiplier"]))


@dataclass(frozen=True, eq=False)
class WardropResult:
    link_flows: np.ndarray
    common_latency: float

    def to_dict(self, network: Network) -> dict:
        return {"link_flows": network.to_input_order(self.link_flows).tolist(),
                "common_latency": self.common_latency}

    @classmethod
    def from_dict(cls, doc: dict, network: Network) -> "WardropResult":
        return cls(_frozen(network.from_input_order(np.array(doc["link_flows"]))),
                   float(doc["common_latency"]))


@dataclass(frozen=True, eq=False)
class StackelbergResult:
    """Outcome of the worst-case Stackelberg game.

    ``follower_cost`` is the coalition's guaranteed (worst-case) cost.
    ``kkt_residual`` is the largest violation of the leader and follower
    optimality conditions, relative to the link latency scale.
    """

    leader_flows: np.ndarray
    follower_flows: np.ndarray
    follower_cost: float
    residual_capacities: np.ndarray
    kkt_residual: float
    iterations: int = 0

    @property
    def link_flows(self) -> np.ndarray:
        return self.leader_flows + self.follower_flows

    def to_dict(self, network: Network) -> dict:
        return {"leader_flows": network.to_input_order(self.leader_flows).tolist(),
                "follower_flows": network.to_input_order(self.follower_flows).tolist(),
                "follower_cost": self.follower_cost,
                "residual_capacities": network.to_input_order(self.residual_capacities).tolist(),
                "kkt_residual": self.kkt_residual,
                "iterations": self.iterations}

    @classmethod
    def from_dict(cls, doc: dict, network: Network) -> "StackelbergResult":
        back = lambda key: _frozen(network.from_input_order(np.array(doc[key])))  # noqa: E731
        return cls(back("leader_flows"), back("follower_flows"), float(doc["follower_cost"]),
                   back("residual_capacities"), float(doc["kkt_residual"]), int(doc["iterations"]))


# -- scalar kernels on raw capacity vectors ---------------------------------

def _check_demand(caps: np.ndarray, demand: float) -> None:
    if not demand >= 0:
        raise Infeasible(f"demand must be nonnegative, got {demand}")
    usable = float(np.sum(caps[caps > 0]))
    if not demand < usable:
        raise Infeasible(f"demand {demand} is not below usable capacity {usable}")


def _enters(marginal_at_zero: float, multiplier: float) -> bool:
    return marginal_at_zero < multiplier - ACTIVE_SET_RTOL * max(1.0, abs(multiplier))


def _water_level(caps: np.ndarray, demand: float, lat: LatencyFunction) -> float:
    """Common residual capacity ``y`` with ``sum_l (c_l - y)^+ = demand``."""
    c = np.sort(caps[caps > 0])[::-1]
    cum = np.cumsum(c)
    for k in range(1, c.size + 1):
        y = (cum[k - 1] - demand) / k
        if y <= 0:
            continue
        if k == c.size or not _enters(float(lat.of_residual(c[k])), float(lat.of_residual(y))):
            return float(y)
    raise Infeasible("demand exceeds capacity")  # unreachable after _check_demand


def wardrop_flows(caps: np.ndarray, demand: float, lat: LatencyFunction) -> tuple[np.ndarray, float]:
    caps = np.asarray(caps, dtype=float)
    _check_demand(caps, demand)
    y = _water_level(caps, demand, lat)
    flows = np.where(caps > y, caps - y, 0.0)
    if demand == 0:
        flows = np.zeros_like(caps)
    return flows, float(lat.of_residual(y))


def _mm1_optimum(caps: np.ndarray, demand: float) -> tuple[np.ndarray, float]:
    # marginal cost c/(c-f)^2 = mu gives f = c - s*sqrt(c) with s = mu**-0.5
    alive = np.flatnonzero(caps > 0)
    order = alive[np.argsort(-caps[alive], kind="stable")]
    c = caps[order]
    cum_c = np.cumsum(c)
    cum_sq = np.cumsum(np.sqrt(c))
    for k in range(1, c.size + 1):
        slack = cum_c[k - 1] - demand
        if slack <= 0:
            continue
        s = slack / cum_sq[k - 1]
        mu = 1.0 / (s * s)
        if k == c.size or not _enters(1.0 / c[k], mu):
            break
    flows = np.zeros_like(caps)
    active = order[:k]
    flows[active] = np.maximum(caps[active] - s * np.sqrt(caps[active]), 0.0)
    return flows, float(mu)


def _power_optimum(caps: np.ndarray, demand: float, p: float) -> tuple[np.ndarray, float]:
    alive = caps > 0
    c = np.where(alive, caps, 1.0)
    m0 = np.where(alive, c ** -p, np.inf)

    log_c = np.log(c)

    def flows_at(mu):
        # marginal cost in terms of the residual y: y^(-p-1) ((1-p) y + p c) = mu.
        # Its log has slope in [-2p, -(p+1)] against log y, so Newton converges from y = c.
        active = alive & (m0 < mu - ACTIVE_SET_RTOL * max(1.0, abs(mu)))
        u = log_c.copy()
        target = math.log(mu)
        for _ in range(_MAX_ITERS):
            y = np.exp(u)
            inner = (1.0 - p) * y + p * c
            phi = -(p + 1.0) * u + np.log(inner) - target
            step = np.where(active, phi / (-(p + 1.0) + (1.0 - p) * y / inner), 0.0)
            u = np.minimum(u - step, log_c)
            if np.all(np.abs(step) <= 4 * np.finfo(float).eps):
                break
        f = np.minimum(c - np.exp(u), c * (1.0 - CAPACITY_GUARD))
        return np.where(active, np.maximum(f, 0.0), 0.0)

    mu_lo = float(np.min(m0))
    mu_hi = 2.0 * mu_lo
    while flows_at(mu_hi).sum() < demand:
        mu_hi *= 2.0
        if not math.isfinite(mu_hi):
            raise NoConvergence("could not bracket the optimum multiplier")
    # total flow is continuous and nondecreasing in mu; root-find on log(mu)
    gap = lambda t: flows_at(math.exp(t)).sum() - demand  # noqa: E731
    t = brentq(gap, math.log(mu_lo), math.log(mu_hi), xtol=1e-15, rtol=4 * np.finfo(float).eps,
               maxiter=_MAX_ITERS)
    mu = math.exp(t)
    flows = flows_at(mu)
    total = flows.sum()
    if total > 0:
        flows = flows * (demand / total)
    return flows, mu


def optimum_flows(caps: np.ndarray, demand: float, lat: LatencyFunction) -> tuple[np.ndarray, float]:
    """System-optimal split of ``demand`` over links with capacities ``caps``.

    Links with nonpositive capacity are unusable and get zero flow.
    Returns the flows and the common marginal cost of the active links.
    """
    caps = np.asarray(caps, dtype=float)
    _check_demand(caps, demand)
    if demand == 0:
        alive = caps > 0
        mu = float(np.min(lat.of_residual(caps[alive])))
        return np.zeros_like(caps), mu
    if lat.family == "mm1":
        return _mm1_optimum(caps, demand)
    return _power_optimum(caps, demand, lat.power)


def _cost_on(caps, own, total_flows, lat: LatencyFunction) -> float:
    lat_vals = lat.of_residual(caps - total_flows)
    return float(np.sum(np.where(own > 0, own * lat_vals, 0.0)))


# -- public solvers -----------------------------------------------------------

def system_optimum(network: Network, total_demand: float) -> OptimumResult:
    """Link flows minimising ``sum_l f_l T_l(f_l)`` for the given demand.

    >>> from wcrouting.model import Network
    >>> res = system_optimum(Network.from_input([2.0, 2.0]), 1.0)
    >>> res.link_flows.tolist(), round(res.optimal_cost, 12)
    ([0.5, 0.5], 0.666666666667)
    """
    flows, mu = optimum_flows(network.capacities, total_demand, network.latency)
    return OptimumResult(_frozen(flows), network.system_cost(flows), mu)


def wardrop(network: Network, total_demand: float) -> WardropResult:
    flows, latency = wardrop_flows(network.capacities, total_demand, network.latency)
    return WardropResult(_frozen(flows), latency)


def atomic_best_response(network: Network, background, demand: float) -> tuple[np.ndarray, float]:
    """Best split of an atomic user's ``demand`` against fixed background flows.

    Equivalent to the system optimum of the residual network
    ``c - background``; links the background saturates are avoided.
    Returns ``(flows, cost)``.
    """
    bg = np.asarray(background, dtype=float)
    if bg.shape != network.capacities.shape or np.any(bg < 0):
        raise Infeasible("background must be a nonnegative per-link vector")
    residual = network.capacities - bg
    flows, _ = optimum_flows(residual, demand, network.latency)
    return flows, _cost_on(network.capacities, flows, bg + flows, network.latency)


def stackelberg_kkt_residual(network: Network, leader, follower, flow_tol: float = 1e-9) -> float:
    """Largest relative violation of the leader (nonatomic) and follower (atomic) conditions."""
    leader = np.asarray(leader, dtype=float)
    follower = np.asarray(follower, dtype=float)
    total = leader + follower
    lat = network.latencies(total)
    marg = lat + follower * network.latency_derivatives(total)
    scale = max(1.0, float(np.min(lat)))
    worst = 0.0
    used0 = leader > flow_tol * max(1.0, leader.sum())
    if used0.any():
        worst = max(worst, float(np.max(lat[used0]) - np.min(lat)))
    used1 = follower > flow_tol * max(1.0, follower.sum())
    if used1.any():
        worst = max(worst, float(np.max(marg[used1]) - np.min(marg)))
    return worst / scale


def worst_case_stackelberg(network: Network, leader_demand: float, follower_demand: float,
                           method: str = "waterfill", kkt_tol: float = 1e-6,
                           damping: float = 0.5, flow_tol: float = 1e-9,
                           max_iter: int = 100_000) -> StackelbergResult:
    """Worst-case Stackelberg outcome: adversarial leader, cost-minimising follower.

    ``method="waterfill"`` computes the leader's nonatomic equilibrium play
    directly (water-filling the largest capacities). ``"diagonalization"``
    runs damped alternating best responses from the empty profile instead.
    Both finish with a KKT verification and raise :class:`NoConvergence`
    when the residual exceeds ``kkt_tol``.
    """
    caps = network.capacities
    if leader_demand < 0 or follower_demand < 0:
        raise Infeasible("demands must be nonnegative")
    if not leader_demand + follower_demand < network.total_capacity:
        raise Infeasible("leader and follower demand must be below total capacity")

    iterations = 0
    if method == "waterfill":
        leader, _ = wardrop_flows(caps, leader_demand, network.latency)
        follower, _ = optimum_flows(caps - leader, follower_demand, network.latency)
    elif method == "diagonalization":
        leader, follower, iterations = _diagonalize(network, leader_demand, follower_demand,
                                                    damping, flow_tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")

    residual = stackelberg_kkt_residual(network, leader, follower)
    if residual > kkt_tol:
        raise NoConvergence(f"equilibrium check failed, KKT residual {residual:.3g}")
    cost = _cost_on(caps, follower, leader + follower, network.latency)
    return StackelbergResult(_frozen(leader), _frozen(follower), cost,
                             _frozen(caps - leader), residual, iterations)


def _diagonalize(network, r0, r1, damping, flow_tol, max_iter):
    caps, lat = network.capacities, network.latency
    leader = np.zeros_like(caps)
    follower = np.zeros_like(caps)
    scale = max(1.0, r0 + r1)
    for it in range(1, max_iter + 1):
        best0, _ = wardrop_flows(caps - follower, r0, lat)
        best1, _ = optimum_flows(caps - leader, r1, lat)
        new0 = (1 - damping) * leader + damping * best0
        new1 = (1 - damping) * follower + damping * best1
        # keep the combined load strictly below capacity
        room = caps * (1.0 - CAPACITY_GUARD) - new0 - new1
        if np.any(room < 0):
            new1 = np.maximum(new1 + np.minimum(room, 0.0), 0.0)
            new1 *= r1 / new1.sum() if new1.sum() > 0 else 0.0
        change = max(np.max(np.abs(new0 - leader)), np.max(np.abs(new1 - follower)))
        leader, follower = new0, new1
        if change <= flow_tol * scale:
            break
    else:
        raise NoConvergence(f"alternating best responses did not settle in {max_iter} iterations")
    # undamped closing step snaps inactive links to exactly zero
    leader, _ = wardrop_flows(caps - follower, r0, lat)
    follower, _ = optimum_flows(caps - leader, r1, lat)
    return leader, follower, it
