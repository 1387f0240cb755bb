"""Deterministic multi-replica simulation with Byzantine adversaries."""

from .config import ScenarioConfig, Strategy, Workload, load_scenario, parse_scenario
from .costs import CostParams, cost_of, optimal_cost
from .engine import ReconRecord, ReconStats, SimResult, Simulator, full_exchange, oracle_full_exchange, run_scenario
from .trace import TraceReport, assert_trace_properties, check_decisions

__all__ = [
    "CostParams",
    "ReconRecord",
    "ReconStats",
    "ScenarioConfig",
    "SimResult",
    "Simulator",
    "Strategy",
    "TraceReport",
    "Workload",
    "assert_trace_properties",
    "check_decisions",
    "cost_of",
    "full_exchange",
    "load_scenario",
    "optimal_cost",
    "oracle_full_exchange",
    "parse_scenario",
    "run_scenario",
]
