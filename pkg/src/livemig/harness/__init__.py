"""Scenario runner, strategy comparisons, sweeps and the command line."""

from .runner import (
    Policy,
    RunResult,
    TraceViolation,
    check_trace,
    compare_strategies,
    format_table,
    rank_peaks,
    rows_to_csv,
    run_scenario,
    state_digest,
    sweep,
    verify_trace_path,
)
from .scenario import (
    BandwidthSweep,
    Cluster,
    Fail,
    IncompatibleStrategy,
    Migrate,
    Rebalance,
    Recovery,
    Scenario,
    Straggler,
    Strategy,
    load_scenario,
    parse_strategy,
    scenario_from_dict,
)

__all__ = [
    "BandwidthSweep", "Cluster", "Fail", "IncompatibleStrategy", "Migrate", "Policy", "Rebalance",
    "Recovery", "RunResult", "Scenario", "Straggler", "Strategy", "TraceViolation", "check_trace",
    "compare_strategies", "format_table", "load_scenario", "parse_strategy", "rank_peaks", "rows_to_csv",
    "run_scenario", "scenario_from_dict", "state_digest", "sweep", "verify_trace_path",
]
