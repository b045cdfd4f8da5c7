"""Command-line interface.

Every subcommand reads a scenario document, calls one library routine and
prints its result as JSON. ``--csv`` additionally writes the tabular part
(flows, excesses or value table) for plotting.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 size cap.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import allocations, coalitions, equilibria, oracle
from .errors import CapExceeded, NumericalFailure, ValidationError
from .model import CostVector, Scenario, load_json, validate_scenario

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_CAP = 0, 2, 3, 4


def _g(x: float) -> str:
    return f"{x:.17g}"


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_g(v) if isinstance(v, float) else v for v in row])


def _link_rows(scenario: Scenario, **columns):
    net = scenario.network
    caps = net.to_input_order(net.capacities)
    cols = {k: net.to_input_order(v) for k, v in columns.items()}
    header = ["link", "capacity", *cols]
    rows = [[k, float(caps[k]), *(float(v[k]) for v in cols.values())] for k in range(caps.size)]
    return header, rows


def _user_rows(scenario: Scenario, flows, costs):
    net = scenario.network
    per_user = net.to_input_order(flows.per_user)
    header = ["user", "cost", *(f"link{k}" for k in range(net.n_links))]
    rows = [[uid, float(c), *map(float, f)]
            for uid, c, f in zip(scenario.demand.ids, costs, per_user)]
    return header, rows


def _flows_doc(scenario: Scenario, flows) -> list:
    per_user = scenario.network.to_input_order(flows.per_user)
    return [{"id": uid, "link_flows": f.tolist()} for uid, f in zip(scenario.demand.ids, per_user)]


def _load_scenario(args) -> Scenario:
    with open(args.scenario, encoding="utf-8") as fh:
        scenario = validate_scenario(load_json(fh.read()))
    if args.tol is not None:
        scenario = Scenario(scenario.network, scenario.demand,
                            scenario.tolerances.with_solver_tolerance(args.tol))
    return scenario


def _load_allocation(path: str, scenario: Scenario) -> CostVector:
    with open(path, encoding="utf-8") as fh:
        return CostVector.from_dict(load_json(fh.read()), scenario.demand.ids)


def _members(scenario: Scenario, spec: str) -> list[int]:
    ids = list(scenario.demand.ids)
    out = []
    for uid in filter(None, (s.strip() for s in spec.split(","))):
        if uid not in ids:
            raise ValidationError(f"unknown user id {uid!r}")
        out.append(ids.index(uid))
    if not out:
        raise ValidationError("--members needs at least one user id")
    return out


def _table(args, scenario):
    return coalitions.CoalitionValueTable.build(scenario, threads=args.threads)


# -- subcommands ------------------------------------------------------------

def cmd_optimum(args, scenario):
    res = equilibria.system_optimum(scenario.network, scenario.total_demand)
    if args.csv:
        _write_csv(args.csv, *_link_rows(scenario, flow=res.link_flows,
                                         latency=scenario.network.latencies(res.link_flows)))
    return res.to_dict(scenario.network)


def cmd_wardrop(args, scenario):
    res = equilibria.wardrop(scenario.network, scenario.total_demand)
    if args.csv:
        _write_csv(args.csv, *_link_rows(scenario, flow=res.link_flows,
                                         latency=scenario.network.latencies(res.link_flows)))
    return res.to_dict(scenario.network)


def cmd_pa(args, scenario):
    costs, flows = allocations.proportional_allocation(scenario)
    if args.csv:
        _write_csv(args.csv, *_user_rows(scenario, flows, costs.costs))
    out = costs.to_dict(scenario.demand.ids)
    out["realizing_flows"] = _flows_doc(scenario, flows)
    return out


def cmd_stackelberg(args, scenario):
    res = equilibria.worst_case_stackelberg(scenario.network, args.leader, args.follower,
                                            method=args.method, kkt_tol=scenario.tolerances.kkt)
    if args.csv:
        _write_csv(args.csv, *_link_rows(scenario, leader=res.leader_flows, follower=res.follower_flows))
    return res.to_dict(scenario.network)


def cmd_value(args, scenario):
    if (args.members is None) == (args.demand is None):
        raise ValidationError("give exactly one of --members or --demand")
    if args.members is not None:
        spec = scenario.coalition(_members(scenario, args.members))
        d = spec.aggregate_demand
        v = coalitions.coalition_value(scenario, spec)
    else:
        d = args.demand
        if not 0 < d <= scenario.total_demand:
            raise ValidationError(f"demand must lie in (0, {scenario.total_demand}]")
        v = coalitions.worst_case_value(scenario, d)
    return {"aggregate_demand": d, "value": v, "average": v / d}


def cmd_table(args, scenario):
    table = _table(args, scenario)
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            table.to_csv(fh)
    return table.to_dict()


def cmd_core_check(args, scenario):
    alloc = _load_allocation(args.allocation, scenario)
    table = _table(args, scenario)
    verdict = allocations.core_check(scenario, alloc, table)
    if args.csv:
        ex = allocations.excess_vector(scenario, alloc, table, mode="composition")
        ids = scenario.demand.ids
        rows = [[" ".join(ids[i] for i in members), float(e)]
                for members, e in zip(ex.members, ex.values)]
        _write_csv(args.csv, ["coalition", "excess"], rows)
    return verdict.to_dict(scenario.demand.ids)


def cmd_inner_core(args, scenario):
    return allocations.inner_core_check_pa(scenario).to_dict()


def cmd_nucleolus(args, scenario):
    table = _table(args, scenario)
    res = allocations.nucleolus(scenario, table, mode="exhaustive" if args.exhaustive else "composition")
    if args.csv:
        _write_csv(args.csv, *_user_rows(scenario, res.realizing_flows, res.allocation.costs))
    out = res.allocation.to_dict(scenario.demand.ids)
    out["realizing_flows"] = _flows_doc(scenario, res.realizing_flows)
    ids = scenario.demand.ids
    out["stage_log"] = [{"stage": e["stage"], "epsilon": e["epsilon"],
                         "fixed": [[ids[i] for i in c] for c in e.get("coalitions", e["fixed"])]}
                        for e in res.stage_log]
    return out


def cmd_realize(args, scenario):
    alloc = _load_allocation(args.allocation, scenario)
    flows = allocations.realize_allocation(scenario, alloc)
    if flows is None:
        return {"realizable": False, "realizing_flows": None}
    if args.csv:
        _write_csv(args.csv, *_user_rows(scenario, flows, alloc.costs))
    return {"realizable": True, "realizing_flows": _flows_doc(scenario, flows)}


def cmd_verify(args, scenario):
    net = scenario.network
    name = args.oracle
    if name == "grid-leader":
        r0 = scenario.total_demand / 2 if args.leader is None else args.leader
        r1 = scenario.total_demand - r0 if args.follower is None else args.follower
        flows, cost = oracle.grid_leader_oracle(net, r0, r1, args.step)
        solver = equilibria.worst_case_stackelberg(net, r0, r1).follower_cost
        return {"oracle": name, "leader_flows": net.to_input_order(flows).tolist(),
                "max_follower_cost": cost, "solver_follower_cost": solver,
                "agrees": bool(cost <= solver + args.step)}
    if name == "core":
        alloc = (_load_allocation(args.allocation, scenario) if args.allocation
                 else allocations.proportional_allocation(scenario)[0])
        found = oracle.exhaustive_core_oracle(scenario, alloc)
        solver = allocations.core_check(scenario, alloc, _table(args, scenario))
        out = found.to_dict(scenario.demand.ids)
        out.update(oracle=name, agrees=found.verdict == solver.verdict)
        return out
    if name == "nucleolus":
        found = oracle.exhaustive_nucleolus_oracle(scenario)
        solver = allocations.nucleolus(scenario, _table(args, scenario)).allocation
        out = found.to_dict(scenario.demand.ids)
        gap = float(np.max(np.abs(found.costs - solver.costs)))
        out.update(oracle=name, max_difference=gap, agrees=gap <= 1e-6)
        return out
    if name == "monotonicity":
        if args.leader_flows is None or args.from_link is None or args.to_link is None:
            raise ValidationError("monotonicity needs --leader-flows, --from and --to")
        f0 = net.from_input_order(np.array([float(x) for x in args.leader_flows.split(",")]))
        order = list(net.input_order)
        before, after = oracle.flow_transfer_monotonicity_probe(
            net, f0, order.index(args.from_link), order.index(args.to_link), args.delta,
            scenario.total_demand - float(f0.sum()) if args.follower is None else args.follower)
        return {"oracle": name, "cost_before": before, "cost_after": after}
    raise ValidationError(f"unknown oracle {name!r}")


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, help="scenario JSON file")
    common.add_argument("--csv", help="also write tabular output to this CSV file")
    common.add_argument("--threads", type=int, default=1, help="workers for value tables")
    common.add_argument("--tol", type=float, help="override solver and LP tolerances")

    parser = argparse.ArgumentParser(prog="wcrouting",
                                     description="Worst-case coalition analysis of parallel-link routing.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("optimum", parents=[common], help="system-optimal link flows")
    sub.add_parser("wardrop", parents=[common], help="Wardrop equilibrium")
    sub.add_parser("pa", parents=[common], help="proportional allocation")
    p = sub.add_parser("stackelberg", parents=[common], help="worst-case Stackelberg game")
    p.add_argument("--leader", type=float, required=True)
    p.add_argument("--follower", type=float, required=True)
    p.add_argument("--method", choices=["waterfill", "diagonalization"], default="waterfill")
    p = sub.add_parser("value", parents=[common], help="worst-case value of a coalition")
    p.add_argument("--members", help="comma-separated user ids")
    p.add_argument("--demand", type=float, help="aggregate coalition demand")
    sub.add_parser("table", parents=[common], help="coalition value table")
    p = sub.add_parser("core-check", parents=[common], help="test an allocation for Core membership")
    p.add_argument("--allocation", required=True)
    sub.add_parser("inner-core", parents=[common], help="Inner Core condition for the PA")
    p = sub.add_parser("nucleolus", parents=[common], help="nucleolus allocation")
    p.add_argument("--exhaustive", action="store_true", help="one constraint per coalition")
    p = sub.add_parser("realize", parents=[common], help="flows realising an allocation")
    p.add_argument("--allocation", required=True)
    p = sub.add_parser("verify", parents=[common], help="run a brute-force oracle")
    p.add_argument("oracle", choices=["grid-leader", "monotonicity", "core", "nucleolus"])
    p.add_argument("--leader", type=float)
    p.add_argument("--follower", type=float)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--allocation")
    p.add_argument("--leader-flows", help="comma-separated leader flows in input link order")
    p.add_argument("--from", dest="from_link", type=int)
    p.add_argument("--to", dest="to_link", type=int)
    p.add_argument("--delta", type=float, default=0.0)
    return parser


COMMANDS = {
    "optimum": cmd_optimum, "wardrop": cmd_wardrop, "pa": cmd_pa,
    "stackelberg": cmd_stackelberg, "value": cmd_value, "table": cmd_table,
    "core-check": cmd_core_check, "inner-core": cmd_inner_core,
    "nucleolus": cmd_nucleolus, "realize": cmd_realize, "verify": cmd_verify,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        scenario = _load_scenario(args)
        result = COMMANDS[args.command](args, scenario)
    except CapExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAP
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    json.dump(result, sys.stdout, indent=2, allow_nan=False)
    sys.stdout.write("\n")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
