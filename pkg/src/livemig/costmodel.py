"""Virtual-time cost parameters and the metrics derived from a run.

Durations are configured in seconds (floats, keys ending in ``_s``) and
converted once to integer nanoseconds; every composite cost below is integer
arithmetic so analytic expectations can be compared with ``==``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .simcore import NS_PER_S, ceil_div, seconds, transmission_ns

GB = 1_000_000_000
GiB = 1 << 30

# NCCL setup breakdown (8 machines, 7 groups) with / without CUDA_VISIBLE_DEVICES.
SETUP_WITHOUT_FLAG = {
    "bootstrap_s": 2.48,
    "topo_discovery_s": 9.1,
    "intra_establish_s": 20.52,
    "inter_establish_s": 4.07,
}
SETUP_WITH_FLAG = {
    "bootstrap_s": 2.50,
    "topo_discovery_s": 8.48,
    "intra_establish_s": 62.03,
    "inter_establish_s": 4.02,
}
STEADY_ITERATION_S = 6.8
FIRST_ITERATION_S = 44.0

# Steps on the freeze-phase critical path that each cost one control-plane hop:
# frozen report, teardown cmd+ack, transfer cmd+ack, establish cmd+ack, resume.
LIVE_FREEZE_CONTROL_HOPS = 8


class ConfigError(Exception):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class MemoryProfile:
    """Per-device buffer sizes feeding the memory ledger."""

    params_bytes: int = 5 * GB
    gradient_bytes: int = 10 * GB
    optimizer_bytes: int = 30 * GB
    activation_bytes: int = 20 * GB
    channel_buffer_bytes: int = 1 * GB
    transfer_channel_bytes: int = 1 * GB
    device_capacity_bytes: int = 80 * GB

    def optimizer_share(self, dp: int, distributed: bool) -> int:
        return ceil_div(self.optimizer_bytes, dp) if distributed else self.optimizer_bytes


@dataclass(frozen=True)
class CostTable:
    bootstrap_s: float = SETUP_WITHOUT_FLAG["bootstrap_s"]
    topo_discovery_s: float = SETUP_WITHOUT_FLAG["topo_discovery_s"]
    intra_establish_s: float = SETUP_WITHOUT_FLAG["intra_establish_s"]
    inter_establish_s: float = SETUP_WITHOUT_FLAG["inter_establish_s"]
    cuda_visible_devices_flag: bool = False
    iteration_compute_s: float = STEADY_ITERATION_S
    lazy_init_total_s: float = round(FIRST_ITERATION_S - STEADY_ITERATION_S, 9)
    data_plane_bandwidth_Bps: int = int(2.5 * GiB)
    data_plane_latency_s: float = 0.0
    control_plane_latency_s: float = 0.001
    per_gpu_storage_bandwidth_Bps: int = 2 * GB
    # 0 means "same as per_gpu_storage_bandwidth_Bps".
    save_bandwidth_per_gpu_Bps: int = 0
    state_bytes_per_device: int = 40 * GiB
    checkpoint_interval_iters: int = 50
    straggler_slowdown_factor: float = 1.2
    teardown_s: float = 0.0
    job_restart_s: float = 0.0
    setup_per_host_s: float = 0.0
    step_timeout_s: float = 10.0
    step_retries: int = 1
    failure_detection_s: float = 0.0
    memory: MemoryProfile = field(default_factory=MemoryProfile)

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (int, float)) and not isinstance(value, bool) and value < 0:
                raise ConfigError(f.name, "must be non-negative")
        for name, value in dataclasses.asdict(self.memory).items():
            if value < 0:
                raise ConfigError(f"memory.{name}", "must be non-negative")
        if self.straggler_slowdown_factor < 1.0:
            raise ConfigError("straggler_slowdown_factor", "must be >= 1")

    # --- nanosecond views -------------------------------------------------

    @property
    def control_plane_latency_ns(self) -> int:
        return seconds(self.control_plane_latency_s)

    @property
    def data_plane_latency_ns(self) -> int:
        return seconds(self.data_plane_latency_s)

    def ns(self, name: str) -> int:
        return seconds(getattr(self, name))

    @property
    def stage1_ns(self) -> int:
        """Joiner-local setup: bootstrap, topology and intra-host connections."""
        return self.ns("bootstrap_s") + self.ns("topo_discovery_s") + self.ns("intra_establish_s")

    @property
    def stage2_ns(self) -> int:
        return self.ns("inter_establish_s")

    def full_setup_ns(self, host_count: int = 0) -> int:
        return self.stage1_ns + self.stage2_ns + host_count * self.ns("setup_per_host_s")

    @property
    def iteration_ns(self) -> int:
        return self.ns("iteration_compute_s")

    def slowed_iteration_ns(self, factor: float) -> int:
        return seconds(self.iteration_compute_s * factor)

    @property
    def lazy_ns(self) -> int:
        return self.ns("lazy_init_total_s")

    @property
    def sandbox_ns(self) -> int:
        """One emulated iteration on a cold joiner."""
        return self.iteration_ns + self.lazy_ns

    def transfer_ns(self, state_bytes: int | None = None) -> int:
        size = self.state_bytes_per_device if state_bytes is None else state_bytes
        return self.data_plane_latency_ns + transmission_ns(size, self.data_plane_bandwidth_Bps)

    def load_ns(self, total_state_bytes: int | None = None, gpu_count: int = 1) -> int:
        total = self.state_bytes_per_device * gpu_count if total_state_bytes is None else total_state_bytes
        return transmission_ns(total, self.per_gpu_storage_bandwidth_Bps * gpu_count)

    def save_ns(self, total_state_bytes: int | None = None, gpu_count: int = 1) -> int:
        bw = self.save_bandwidth_per_gpu_Bps or self.per_gpu_storage_bandwidth_Bps
        total = self.state_bytes_per_device * gpu_count if total_state_bytes is None else total_state_bytes
        return transmission_ns(total, bw * gpu_count)

    # --- variants ------------------------------------------------------------

    def replace(self, **changes: Any) -> "CostTable":
        return dataclasses.replace(self, **changes)

    def with_flag(self, flag: bool) -> "CostTable":
        column = SETUP_WITH_FLAG if flag else SETUP_WITHOUT_FLAG
        return self.replace(cuda_visible_devices_flag=flag, **column)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_table(flag: bool = False) -> CostTable:
    return CostTable().with_flag(flag)


_FIELDS = {f.name: f for f in dataclasses.fields(CostTable)}
_MEMORY_FIELDS = {f.name for f in dataclasses.fields(MemoryProfile)}


def table_from_mapping(data: Mapping[str, Any], base: CostTable | None = None, path: str = "costs") -> CostTable:
    """Overlay a (possibly partial) key/value mapping on ``base``."""
    base = base or default_table(bool(data.get("cuda_visible_devices_flag", False)))
    changes: dict[str, Any] = {}
    memory_changes: dict[str, int] = {}
    for key, value in data.items():
        if key == "memory":
            if not isinstance(value, Mapping):
                raise ConfigError(f"{path}.memory", "expected a mapping")
            for mkey, mval in value.items():
                if mkey not in _MEMORY_FIELDS:
                    raise ConfigError(f"{path}.memory.{mkey}", "unknown key")
                memory_changes[mkey] = _coerce_int(mval, f"{path}.memory.{mkey}")
            continue
        if key == "preset":
            continue
        f = _FIELDS.get(key)
        if f is None:
            raise ConfigError(f"{path}.{key}", "unknown key")
        if f.type in ("bool",):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}.{key}", "expected true/false")
            changes[key] = value
        elif f.type in ("int",):
            changes[key] = _coerce_int(value, f"{path}.{key}")
        else:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}.{key}", f"expected a number, got {value!r}")
            changes[key] = float(value)
    if "cuda_visible_devices_flag" in changes and not any(k in changes for k in SETUP_WITH_FLAG):
        base = base.with_flag(changes["cuda_visible_devices_flag"])
    if memory_changes:
        changes["memory"] = dataclasses.replace(base.memory, **memory_changes)
    try:
        return base.replace(**changes)
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc.path}", str(exc).split(": ", 1)[-1]) from None


def _coerce_int(value: Any, path: str) -> int:
    if isinstance(value, bool):
        raise ConfigError(path, "expected an integer")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        try:
            return int(float(value))
        except ValueError:
            pass
    raise ConfigError(path, f"expected an integer, got {value!r}")


PRESETS = ("gpt20b", "gpt39b")


def load_preset(name: str, flag: bool | None = None) -> CostTable:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("livemig.presets").joinpath(f"{name}.yaml").read_text()
    table = table_from_mapping(yaml.safe_load(text) or {}, path=name)
    return table if flag is None else table.with_flag(flag)


def load_table(path: str | Path) -> CostTable:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, Mapping):
        raise ConfigError(str(path), "cost table must be a mapping")
    base = load_preset(data["preset"]) if "preset" in data else None
    return table_from_mapping(data, base=base, path="costs")


# --- analytic expectations --------------------------------------------------


def live_freeze_ns(costs: CostTable, stage2: bool = True) -> int:
    """Freeze-phase length of a live migration with warmed joiners."""
    return (
        LIVE_FREEZE_CONTROL_HOPS * costs.control_plane_latency_ns
        + costs.ns("teardown_s")
        + costs.transfer_ns()
        + (costs.stage2_ns if stage2 else 0)
    )


def restart_downtime_ns(costs: CostTable, host_count: int, save: bool, load: bool = True) -> int:
    """Whole-job cold restart: optional save, reboot, full setup, load, lazy first iteration."""
    return (
        (costs.save_ns() if save else 0)
        + costs.ns("job_restart_s")
        + costs.full_setup_ns(host_count)
        + (costs.load_ns() if load else 0)
        + costs.lazy_ns
    )


@dataclass
class MetricsReport:
    downtime_s: float
    extra_jct_s: float
    training_efficiency: float
    lost_iterations: int
    peak_memory_by_device: dict[str, int] = field(default_factory=dict)
    downtime_ns: int = 0
    total_ns: int = 0
    useful_iterations: int = 0
    freeze_ns: int = 0
    lazy_ns: int = 0
    max_iteration_ns: int = 0
    oom: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def efficiency(records: Iterable[Mapping[str, Any]], iteration_compute_s: float | None = None) -> MetricsReport:
    """Recompute run metrics from trace records alone.

    The measurement window opens at the ``launch_done`` phase record and
    closes at ``job_done``. Useful iterations are distinct iteration indices
    completed in the window; re-executed iterations after a rollback cost
    time but add nothing.
    """
    start = end = None
    iteration_ns = None if iteration_compute_s is None else seconds(iteration_compute_s)
    done: set[int] = set()
    freeze_ns = lazy_ns = lost = 0
    open_freeze: int | None = None
    last_iter_end: int | None = None
    max_iter = 0
    live: dict[str, int] = {}
    peaks: dict[str, int] = {}
    oom = False
    for rec in records:
        kind, detail, t = rec["kind"], rec.get("detail") or {}, rec["time"]
        if kind == "PHASE":
            name = detail.get("name")
            if name == "launch_done":
                start = last_iter_end = t
                if iteration_ns is None:
                    iteration_ns = detail["iteration_ns"]
            elif name == "job_done":
                end = t
            elif name == "oom":
                oom = True
        elif kind == "ITER_DONE" and start is not None:
            done.add(detail["iteration"])
            lazy_ns += detail.get("lazy_ns", 0)
            if last_iter_end is not None:
                max_iter = max(max_iter, t - last_iter_end)
            last_iter_end = t
        elif kind == "DOWNTIME_BEGIN" and start is not None:
            # A failure while frozen extends the open interval.
            if open_freeze is None:
                open_freeze = t
        elif kind == "DOWNTIME_END" and open_freeze is not None:
            freeze_ns += t - open_freeze
            open_freeze = None
        elif kind == "FAILURE":
            lost += detail.get("lost_iterations", 0)
        elif kind in ("ALLOC", "FREE"):
            dev = rec["node"]
            live[dev] = live.get(dev, 0) + (detail["bytes"] if kind == "ALLOC" else -detail["bytes"])
            peaks[dev] = max(peaks.get(dev, 0), live[dev])
    if start is None or end is None:
        return MetricsReport(0.0, 0.0, 0.0, lost, peaks, oom=oom)
    total = end - start
    useful = len(done)
    ideal = useful * (iteration_ns or 0)
    downtime = freeze_ns + lazy_ns
    eff = ideal / total if total else 1.0
    return MetricsReport(
        downtime_s=downtime / NS_PER_S,
        extra_jct_s=(total - ideal) / NS_PER_S,
        training_efficiency=eff,
        lost_iterations=lost,
        peak_memory_by_device=peaks,
        downtime_ns=downtime,
        total_ns=total,
        useful_iterations=useful,
        freeze_ns=freeze_ns,
        lazy_ns=lazy_ns,
        max_iteration_ns=max_iter,
        oom=oom,
    )
