"""``livemig`` command line: run, compare, sweep and verify-trace."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import yaml

from ..costmodel import ConfigError, load_table
from ..trace import TraceError
from .runner import (
    bandwidth_sweep_values,
    compare_strategies,
    format_table,
    rows_to_csv,
    run_scenario,
    sweep,
    verify_trace_path,
    TraceViolation,
)
from .scenario import IncompatibleStrategy, load_scenario

log = logging.getLogger("livemig")

BANDWIDTH_KEY = "costs.per_gpu_storage_bandwidth_Bps"


def _value(text: str):
    """Sweep values are YAML scalars: 2e9, 0.5, true, TRAINMOVER."""
    v = yaml.safe_load(text)
    if isinstance(v, str):
        # YAML 1.1 wants a dot in floats, so "2e9" arrives as a string.
        try:
            v = float(v)
        except ValueError:
            return v
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def _emit(rows, args) -> None:
    print(format_table(rows))
    if args.csv:
        rows_to_csv(rows, args.csv)
        log.info("wrote %s", args.csv)


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    costs = load_table(args.costs) if args.costs else None
    values = bandwidth_sweep_values(scenario)
    if values:
        rows = sweep(scenario, BANDWIDTH_KEY, list(values), costs=costs, jobs=args.jobs)
        _emit(rows, args)
        return 0
    res = run_scenario(scenario, costs)
    if args.out:
        path = res.write(args.out)
        log.info("wrote %s", path)
    m = res.metrics
    print(f"scenario      {scenario.name}")
    print(f"strategy      {scenario.strategy_label}")
    print(f"status        {res.summary['status']}")
    print(f"downtime_s    {m.downtime_s:.6f}")
    print(f"efficiency    {m.training_efficiency:.6f}")
    print(f"extra_jct_s   {m.extra_jct_s:.6f}")
    print(f"lost_iters    {m.lost_iterations}")
    print(f"trace_digest  {res.digest}")
    return 0 if res.summary["status"] == "ok" else 3


def cmd_compare(args) -> int:
    scenario = load_scenario(args.scenario)
    costs = load_table(args.costs) if args.costs else None
    rows = compare_strategies(scenario, [s for s in args.strategies.split(",") if s], costs, jobs=args.jobs)
    _emit(rows, args)
    return 0


def cmd_sweep(args) -> int:
    scenario = load_scenario(args.scenario)
    costs = load_table(args.costs) if args.costs else None
    strategies = [s for s in args.strategies.split(",") if s] if args.strategies else None
    rows = sweep(scenario, args.param, [_value(v) for v in args.values], strategies, costs, jobs=args.jobs)
    _emit(rows, args)
    return 0


def cmd_verify(args) -> int:
    try:
        m = verify_trace_path(args.trace)
    except TraceViolation as exc:
        print(f"FAIL {exc.invariant}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"ok": True, "downtime_s": m.downtime_s, "training_efficiency": m.training_efficiency,
                      "extra_jct_s": m.extra_jct_s, "lost_iterations": m.lost_iterations}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="livemig", description="Simulate live migration of distributed training jobs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("scenario", type=Path)
    run.add_argument("--costs", type=Path, help="cost table file (overrides the scenario's costs section)")
    run.add_argument("--out", type=Path, help="directory for trace.jsonl and summary.json")
    run.add_argument("--csv", type=Path, help="CSV output for bandwidth sweeps")
    run.add_argument("--jobs", type=int, default=1)
    run.set_defaults(fn=cmd_run)

    cmp_ = sub.add_parser("compare", help="run one scenario under several strategies")
    cmp_.add_argument("scenario", type=Path)
    cmp_.add_argument("--strategies", required=True, help="comma list, e.g. TRAINMOVER,SAVE_RESTART,RESTART_50")
    cmp_.add_argument("--costs", type=Path)
    cmp_.add_argument("--csv", type=Path)
    cmp_.add_argument("--jobs", type=int, default=1)
    cmp_.set_defaults(fn=cmd_compare)

    sw = sub.add_parser("sweep", help="vary one dotted scenario key")
    sw.add_argument("param", help="e.g. costs.per_gpu_storage_bandwidth_Bps or cluster.hosts")
    sw.add_argument("values", nargs="+")
    sw.add_argument("--scenario", type=Path, required=True)
    sw.add_argument("--strategies")
    sw.add_argument("--costs", type=Path)
    sw.add_argument("--csv", type=Path)
    sw.add_argument("--jobs", type=int, default=1)
    sw.set_defaults(fn=cmd_sweep)

    ver = sub.add_parser("verify-trace", help="recompute metrics and invariants from a trace")
    ver.add_argument("trace", type=Path, help="trace.jsonl or the run directory")
    ver.set_defaults(fn=cmd_verify)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except IncompatibleStrategy as exc:
        print(f"incompatible strategy: {exc}", file=sys.stderr)
        return 2
    except (TraceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
