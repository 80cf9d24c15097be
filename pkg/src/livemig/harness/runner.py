"""Run scenarios, compare strategies, sweep parameters and check traces."""

from __future__ import annotations

import csv
import hashlib
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ..controller import CCGMode, Controller, MigrationPlan, Trigger
from ..costmodel import ConfigError, CostTable, MetricsReport, efficiency
from ..runtime import CONTROLLER, Runtime
from ..topology import HostSpec
from ..trace import Trace, digest_records, read_summary, read_trace
from ..worker.model import ModelState
from ..worker.records import encode_state
from .scenario import (
    BandwidthSweep,
    Fail,
    Migrate,
    Rebalance,
    Recovery,
    Scenario,
    Straggler,
    Strategy,
    override,
    scenario_from_dict,
)

LIVE_MODES = {
    Strategy.TRAINMOVER: CCGMode.TWO_STAGE,
    Strategy.CCG_SEPARATE: CCGMode.SEPARATE,
    Strategy.CCG_OVERLAP: CCGMode.OVERLAP,
    Strategy.NAIVE_LIVE: CCGMode.NAIVE,
}


class Policy:
    """Turns scenario events into controller actions for one strategy."""

    def __init__(self, scenario: Scenario, rt: Runtime, ctl: Controller):
        self.s = scenario
        self.rt = rt
        self.ctl = ctl
        self.fired: set[int] = set()
        self.deferred: dict[int, dict[str, str]] = {}
        self.rebalance_cursor = 0
        if scenario.strategy.recovers_live:
            ctl.failure_handler = ctl.handle_unexpected_failure
            ctl.recovery_path = "checkpoint" if scenario.recovery is Recovery.CHECKPOINT else "auto"
        else:
            ctl.failure_handler = ctl.fail_and_restart
        rt.listeners.append(self.on_event)

    # --- event plumbing ---------------------------------------------------

    def on_event(self, name: str, *args: Any) -> None:
        if name == "launched":
            for position in self.s.cluster.preheat:
                self.ctl.preheat(self.rt.acquire_spare(), position)
        elif name == "before_iteration":
            self._before(args[0])
        elif name == "iteration_started":
            self._started(*args)

    def _present(self, host: str, what: str) -> bool:
        if host in self.rt.placement.used_hosts():
            return True
        self.rt.trace.emit(CONTROLLER, "PHASE", name="event_skipped", event=what, host=host,
                           reason="host no longer in the job")
        return False

    def _before(self, it: int) -> None:
        for i, ev in enumerate(self.s.events):
            if isinstance(ev, Straggler) and ev.at_iter == it and i not in self.fired:
                self.fired.add(i)
                if self._present(ev.host, "straggler"):
                    self.rt.slowdown[ev.host] = ev.factor
                    self.rt.trace.emit(CONTROLLER, "PHASE", name="straggler_detected", host=ev.host, factor=ev.factor)
                    self.move([ev.host], Trigger.STRAGGLER, it)
            elif isinstance(ev, Migrate) and ev.at_iter == it and i not in self.fired:
                self.fired.add(i)
                hosts = [h for h in ev.hosts if self._present(h, "migrate")]
                if hosts:
                    self.move(hosts, Trigger.MAINTENANCE, it)
            elif isinstance(ev, Rebalance) and it > 0 and it % ev.period == 0:
                if self.ctl.active_migration is not None or self.rt.trainer.freeze_requested:
                    continue
                used = self.rt.placement.used_hosts()
                host = used[self.rebalance_cursor % len(used)]
                self.rebalance_cursor += 1
                self.move([host], Trigger.REBALANCE, it)

    def _started(self, it: int, dur: int) -> None:
        for i, ev in enumerate(self.s.events):
            if isinstance(ev, Fail) and ev.at_iter == it and i not in self.fired:
                self.fired.add(i)
                if self._present(ev.host, "fail"):
                    # Failures land mid-iteration; the in-flight iteration is lost.
                    self.rt.sim.after(dur // 2, CONTROLLER, {"kind": "fail", "host": ev.host})
        pairs = self.deferred.pop(it + 1, None)
        if pairs is not None:
            self.ctl.cold_restart(pairs, save=False, resume_from="current")

    # --- strategy dispatch ------------------------------------------------

    def move(self, hosts: Sequence[str], trigger: Trigger, it: int) -> None:
        pairs = {h: self.rt.acquire_spare() for h in hosts}
        st = self.s.strategy
        if st in LIVE_MODES:
            self.ctl.start_live_migration(MigrationPlan.for_hosts(self.rt, pairs, trigger), LIVE_MODES[st])
        elif st is Strategy.SAVE_RESTART:
            self.ctl.cold_restart(pairs, save=True, resume_from="current")
        elif st is Strategy.PER_ITER_CKPT:
            self.ctl.cold_restart(pairs, save=False, resume_from="current")
        elif st is Strategy.RESTART_K:
            self.ctl.cold_restart(pairs, save=False, resume_from="latest")
        elif st is Strategy.DEFER_K:
            # Keep running to the next checkpoint boundary, then restart from it.
            k = int(self.s.k)
            boundary = ((it + 1 + k - 1) // k) * k
            if boundary >= self.rt.job.total_iterations:
                self.rt.trace.emit(CONTROLLER, "PHASE", name="restart_deferred_past_end", boundary=boundary)
                return
            self.deferred.setdefault(boundary, {}).update(pairs)
            self.rt.trace.emit(CONTROLLER, "PHASE", name="restart_deferred", boundary=boundary)
        else:  # pragma: no cover
            raise ValueError(st)


# --- running ------------------------------------------------------------------


@dataclass
class RunResult:
    scenario: Scenario
    costs: CostTable
    trace: Trace
    metrics: MetricsReport
    summary: dict
    final_states: dict[int, ModelState] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return self.trace.digest()

    def write(self, out_dir: str | Path) -> Path:
        return self.trace.write(out_dir, self.summary)


def state_digest(states: Mapping[int, ModelState]) -> str:
    h = hashlib.sha256()
    for r in sorted(states):
        h.update(r.to_bytes(4, "little"))
        h.update(encode_state(states[r]))
    return h.hexdigest()


def build_runtime(scenario: Scenario, costs: CostTable) -> tuple[Runtime, Controller, Policy]:
    dph = scenario.cluster.devices_per_host
    hosts = [HostSpec(h, dph) for h in scenario.cluster.host_ids()]
    spares = [HostSpec(h, dph) for h in scenario.cluster.spare_ids()]
    rt = Runtime(
        scenario.job,
        hosts,
        costs,
        spare_hosts=spares,
        simulate_data=scenario.simulate_data,
        strict_memory=scenario.effective_strict_memory(),
        warmup=scenario.warmup,
        checkpoint_interval=scenario.effective_checkpoint_interval(costs),
    )
    ctl = Controller(rt)
    policy = Policy(scenario, rt, ctl)
    return rt, ctl, policy


def rank_peaks(peaks: Mapping[str, int], device_ranks: Mapping[str, int]) -> dict[int, int]:
    """Per-rank peak: the largest device peak among devices that held the rank."""
    out: dict[int, int] = {}
    for dev, peak in peaks.items():
        r = device_ranks.get(dev)
        if r is not None:
            out[r] = max(out.get(r, 0), peak)
    return out


def run_scenario(scenario: Scenario, costs: CostTable | None = None) -> RunResult:
    """Execute one scenario to completion on a fresh event loop."""
    scenario.validate()
    table = scenario.cost_table(costs)
    rt, ctl, _ = build_runtime(scenario, table)
    rt.run()
    records = rt.trace.records
    metrics = efficiency(records)
    device_ranks = dict(sorted(rt.held.items()))
    summary = {
        "scenario": scenario.name,
        "strategy": scenario.strategy_label,
        "status": rt.aborted or "ok",
        "metrics": metrics.to_dict(),
        "rank_peak_bytes": {str(r): p for r, p in sorted(rank_peaks(metrics.peak_memory_by_device, device_ranks).items())},
        "device_ranks": device_ranks,
        "final_iteration": rt.iteration,
        "migrations": [
            {
                "mode": m.mode.value,
                "trigger": m.plan.trigger.value,
                "pairs": dict(m.plan.mapping.pairs),
                "switch_iteration": m.plan.switch_iteration,
                "downtime_ns": m.downtime_ns if m.completed else None,
                "overlap_ns": m.overlap_ns if m.completed else None,
                "warm": m.warm,
                "fallback": m.fallback,
                "retries": m.retries,
                "errors": m.errors,
                "completed": m.completed,
            }
            for m in ctl.reports
        ],
        "recoveries": [
            {
                "failed_host": r.failed_host,
                "replacement": r.replacement,
                "path": r.path,
                "downtime_ns": r.downtime_ns if r.recovered else None,
                "lost_iterations": r.lost_iterations,
                "preheated": r.preheated,
            }
            for r in ctl.recoveries
        ],
        "trace_digest": rt.trace.digest(),
    }
    final_states: dict[int, ModelState] = {}
    if rt.aborted is None:
        final_states = {r: w.state for r, w in rt.active().items()}
        summary["state_digest"] = state_digest(final_states)
    if rt.oom_detail:
        summary["oom_detail"] = rt.oom_detail
    return RunResult(scenario, table, rt.trace, metrics, summary, final_states)


# --- comparisons and sweeps -----------------------------------------------


TABLE_COLUMNS = ("label", "strategy", "status", "downtime_s", "training_efficiency", "extra_jct_s",
                 "lost_iterations", "downtime_ratio_vs_trainmover")


def _row(label: str, res: RunResult) -> dict:
    m = res.metrics
    return {
        "label": label,
        "strategy": res.scenario.strategy_label,
        "status": res.summary["status"],
        "downtime_s": round(m.downtime_s, 6),
        "training_efficiency": round(m.training_efficiency, 6),
        "extra_jct_s": round(m.extra_jct_s, 6),
        "lost_iterations": m.lost_iterations,
        "downtime_ratio_vs_trainmover": None,
    }


def compare_strategies(base: Scenario, strategies: Iterable[str | Strategy], costs: CostTable | None = None,
                       jobs: int = 1) -> list[dict]:
    """One row per strategy, with downtime ratios against TRAINMOVER when it is present."""
    variants = [base.with_strategy(s) for s in strategies]
    for v in variants:
        v.validate()
    results = _run_many(variants, costs, jobs)
    rows = [_row(v.strategy_label, r) for v, r in zip(variants, results)]
    ref = next((r for r in rows if r["strategy"] == Strategy.TRAINMOVER.value), None)
    if ref is not None and ref["downtime_s"] > 0:
        for r in rows:
            r["downtime_ratio_vs_trainmover"] = round(r["downtime_s"] / ref["downtime_s"], 6)
    return rows


def sweep(base: Scenario, param: str, values: Sequence[Any], strategies: Iterable[str | Strategy] | None = None,
          costs: CostTable | None = None, jobs: int = 1) -> list[dict]:
    """Re-run ``base`` with one dotted key (e.g. ``costs.per_gpu_storage_bandwidth_Bps``) set to each value."""
    labels = [s if isinstance(s, str) else s.value for s in (strategies or [base.strategy_label])]
    variants, tags = [], []
    for value in values:
        s = scenario_from_dict(override(base.raw or _raw(base), param, value))
        for label in labels:
            variants.append(s.with_strategy(label))
            tags.append(value)
    results = _run_many(variants, costs, jobs)
    rows = []
    for value, v, r in zip(tags, variants, results):
        row = _row(f"{param}={value}", r)
        row["param"] = param
        row["value"] = value
        rows.append(row)
    return rows


def bandwidth_sweep_values(s: Scenario) -> tuple[int, ...] | None:
    for ev in s.events:
        if isinstance(ev, BandwidthSweep):
            return ev.values
    return None


def _raw(s: Scenario) -> dict:
    raise ConfigError("sweep", "scenario was not loaded from a mapping; sweeps need the source document")


def _run_one(args: tuple[Scenario, CostTable | None]) -> RunResult:
    return run_scenario(*args)


def _run_many(variants: Sequence[Scenario], costs: CostTable | None, jobs: int) -> list[RunResult]:
    # Each run owns its event loop, so runs can go to separate processes.
    if jobs > 1 and len(variants) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, [(v, costs) for v in variants]))
    return [run_scenario(v, costs) for v in variants]


def rows_to_csv(rows: Sequence[Mapping[str, Any]], path: str | Path | None = None) -> str:
    cols = list(TABLE_COLUMNS)
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def format_table(rows: Sequence[Mapping[str, Any]], columns: Sequence[str] = TABLE_COLUMNS) -> str:
    cols = [c for c in columns if any(c in r for r in rows)]
    cells = [[("" if r.get(c) is None else str(r.get(c))) for c in cols] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


# --- trace verification -----------------------------------------------------


class TraceViolation(Exception):
    def __init__(self, invariant: str, detail: str):
        super().__init__(f"{invariant}: {detail}")
        self.invariant = invariant


def check_trace(records: Sequence[Mapping[str, Any]], summary: Mapping[str, Any] | None = None) -> MetricsReport:
    """Recompute metrics from a trace and check its structural invariants.

    Raises :class:`TraceViolation` naming the first invariant that fails.
    """
    prev = None
    for rec in records:
        key = (rec["time"], rec["seq"])
        if prev is not None and key <= prev:
            raise TraceViolation("ordering", f"record seq {rec['seq']} at {rec['time']} is not after {prev}")
        prev = key

    # Blocking steps: acks follow their step's start, and the next step of the
    # same procedure starts only after every awaited ack arrived.
    awaited: dict[str, set[str]] = {}
    acked: dict[str, set[str]] = {}
    open_step: dict[str, str] = {}
    for rec in records:
        d = rec.get("detail") or {}
        if rec["kind"] == "PHASE" and d.get("name") == "step_begin":
            key = d["key"]
            proc = key.split(".", 1)[0]
            prior = open_step.get(proc)
            if prior is not None and not awaited[prior] <= acked[prior]:
                missing = sorted(awaited[prior] - acked[prior])
                raise TraceViolation("blocking-steps", f"{key} began while {prior} still awaited {missing}")
            awaited[key] = set(d["hosts"])
            acked[key] = set()
            open_step[proc] = key
        elif rec["kind"] == "STEP_ACK":
            key = d["key"]
            if key not in awaited:
                raise TraceViolation("blocking-steps", f"ack for {key} before its step began")
            acked[key].add(d["host"])

    # Phase ordering within each live migration.
    order = ("migration_begin", "freeze_begin", "migration_done")
    seen: dict[str, list[str]] = {}
    for rec in records:
        d = rec.get("detail") or {}
        if rec["kind"] == "PHASE" and d.get("name") in order and "mig" in d:
            names = seen.setdefault(d["mig"], [])
            expect = order[len(names)] if len(names) < len(order) else None
            if d["name"] != expect:
                raise TraceViolation("phase-ordering", f"{d['mig']}: {d['name']} after {names}")
            names.append(d["name"])

    # Downtime intervals: a resume never precedes its halt.
    depth = 0
    for rec in records:
        if rec["kind"] == "DOWNTIME_BEGIN":
            depth += 1
        elif rec["kind"] == "DOWNTIME_END":
            if depth == 0:
                raise TraceViolation("downtime-intervals", f"resume at {rec['time']} without a halt")
            depth = 0

    # Transient buffers: every transfer channel is given back.
    live: dict[str, int] = {}
    for rec in records:
        d = rec.get("detail") or {}
        if rec["kind"] in ("ALLOC", "FREE") and d.get("tag") == "TRANSFER_CHANNEL":
            sign = 1 if rec["kind"] == "ALLOC" else -1
            live[rec["node"]] = live.get(rec["node"], 0) + sign * d["bytes"]
    leaked = {dev: b for dev, b in live.items() if b}
    if leaked:
        dev = sorted(leaked)[0]
        raise TraceViolation("transient-memory", f"{dev} still holds {leaked[dev]} B of transfer channel")

    metrics = efficiency(records)
    if summary is not None:
        if summary.get("trace_digest") not in (None, digest_records(records)):
            raise TraceViolation("digest", "summary digest does not match the trace")
        want = summary.get("metrics") or {}
        got = metrics.to_dict()
        for key in ("downtime_ns", "total_ns", "useful_iterations", "lost_iterations", "freeze_ns", "lazy_ns"):
            if key in want and want[key] != got[key]:
                raise TraceViolation("table-consistency", f"{key}: summary {want[key]} vs trace {got[key]}")
    return metrics


def verify_trace_path(path: str | Path) -> MetricsReport:
    """Check a trace file or run directory; the summary is compared when present."""
    return check_trace(read_trace(path), read_summary(path))
