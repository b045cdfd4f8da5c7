"""Worst-case coalition analysis of selfish routing on parallel links."""

from .allocations import (
    CoreVerdict,
    ExcessVector,
    NucleolusResult,
    RandomizedDeviation,
    compare_lex,
    core_check,
    excess_vector,
    inner_core_check_pa,
    nucleolus,
    proportional_allocation,
    randomized_deviation_falsifier,
    realize_allocation,
)
from .coalitions import (
    CoalitionValueTable,
    DemandComposition,
    ValueCache,
    coalition_value,
    enumerate_demand_sums,
)
from .equilibria import atomic_best_response, system_optimum, wardrop, worst_case_stackelberg
from .lp import LpProblem, LpSolution, LpStatus, solve_lp
from .model import (
    CoalitionSpec,
    CostVector,
    DemandProfile,
    FlowProfile,
    LatencyFunction,
    Network,
    Scenario,
    Tolerances,
    validate_scenario,
)

__version__ = "0.1.0"
