"""Scenario files: cluster, job, events and strategy, parsed with field-path errors."""

from __future__ import annotations

import copy
import dataclasses
import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..costmodel import ConfigError, CostTable, default_table, load_preset, table_from_mapping
from ..job import JobConfig
from ..topology import TopologyError


class IncompatibleStrategy(Exception):
    """The strategy cannot run on this job as configured."""


class Strategy(str, enum.Enum):
    TRAINMOVER = "TRAINMOVER"
    NAIVE_LIVE = "NAIVE_LIVE"
    SAVE_RESTART = "SAVE_RESTART"
    PER_ITER_CKPT = "PER_ITER_CKPT"
    DEFER_K = "DEFER_K"
    RESTART_K = "RESTART_K"
    CCG_SEPARATE = "CCG_SEPARATE"
    CCG_OVERLAP = "CCG_OVERLAP"

    @property
    def live(self) -> bool:
        return self in (Strategy.TRAINMOVER, Strategy.NAIVE_LIVE, Strategy.CCG_SEPARATE, Strategy.CCG_OVERLAP)

    @property
    def recovers_live(self) -> bool:
        """Failures are handled by in-place replacement rather than a job restart."""
        return self in (Strategy.TRAINMOVER, Strategy.CCG_SEPARATE, Strategy.CCG_OVERLAP)

    @property
    def needs_k(self) -> bool:
        return self in (Strategy.DEFER_K, Strategy.RESTART_K)


_K_FORM = re.compile(r"^(DEFER|RESTART)_(\d+)$")


def parse_strategy(text: str, path: str = "strategy") -> tuple[Strategy, int | None]:
    """``"RESTART_50"`` -> (RESTART_K, 50); plain names -> (strategy, None)."""
    name = str(text).strip().upper().replace("-", "_")
    m = _K_FORM.match(name)
    if m:
        k = int(m.group(2))
        if k < 1:
            raise ConfigError(path, "K must be >= 1")
        return Strategy(f"{m.group(1)}_K"), k
    try:
        return Strategy(name), None
    except ValueError:
        choices = ", ".join(s.value for s in Strategy)
        raise ConfigError(path, f"unknown strategy {text!r}; choose from {choices} (or DEFER_<k>/RESTART_<k>)") from None


class Recovery(str, enum.Enum):
    AUTO = "auto"
    REDUNDANCY = "redundancy"
    CHECKPOINT = "checkpoint"


@dataclass(frozen=True)
class Straggler:
    host: str
    factor: float
    at_iter: int


@dataclass(frozen=True)
class Migrate:
    hosts: tuple[str, ...]
    at_iter: int


@dataclass(frozen=True)
class Fail:
    host: str
    at_iter: int


@dataclass(frozen=True)
class Rebalance:
    period: int


@dataclass(frozen=True)
class BandwidthSweep:
    values: tuple[int, ...]


Event = Straggler | Migrate | Fail | Rebalance | BandwidthSweep


@dataclass(frozen=True)
class Cluster:
    hosts: int = 4
    devices_per_host: int = 8
    spares: int = 0
    preheat: tuple[str, ...] = ()

    def host_ids(self) -> list[str]:
        return [f"h{i}" for i in range(self.hosts)]

    def spare_ids(self) -> list[str]:
        return [f"s{i}" for i in range(self.spares)]


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    cluster: Cluster = field(default_factory=Cluster)
    job: JobConfig = field(default_factory=JobConfig)
    events: tuple[Event, ...] = ()
    strategy: Strategy = Strategy.TRAINMOVER
    k: int | None = None
    recovery: Recovery = Recovery.AUTO
    warmup: bool = True
    simulate_data: bool = True
    # None: strict for TRAINMOVER only, whose guarantee is zero extra memory.
    strict_memory: bool | None = None
    checkpoint_interval: int | None = None
    costs: Mapping[str, Any] = field(default_factory=dict)
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def strategy_label(self) -> str:
        if self.strategy.needs_k:
            return self.strategy.value.replace("_K", f"_{self.k}")
        return self.strategy.value

    def cost_table(self, override: CostTable | None = None) -> CostTable:
        if override is not None:
            return override
        data = dict(self.costs)
        if "preset" in data:
            base = load_preset(str(data["preset"]))
        else:
            base = default_table(bool(data.get("cuda_visible_devices_flag", False)))
        return table_from_mapping(data, base=base, path="costs")

    def effective_checkpoint_interval(self, costs: CostTable) -> int:
        if self.strategy is Strategy.PER_ITER_CKPT:
            return 1
        if self.strategy.needs_k:
            return int(self.k)
        return self.checkpoint_interval or costs.checkpoint_interval_iters

    def effective_strict_memory(self) -> bool:
        if self.strict_memory is None:
            return self.strategy is Strategy.TRAINMOVER
        return self.strict_memory

    def with_strategy(self, strategy: Strategy | str, k: int | None = None) -> "Scenario":
        if isinstance(strategy, str):
            strategy, parsed_k = parse_strategy(strategy)
            k = parsed_k if parsed_k is not None else k
        if strategy.needs_k and k is None:
            k = self.k or 50
        return _replace(self, strategy=strategy, k=k if strategy.needs_k else None)

    def without_events(self) -> "Scenario":
        return _replace(self, events=(), name=f"{self.name}-baseline")

    def validate(self) -> None:
        """Cross-field checks; raises ConfigError or IncompatibleStrategy."""
        need = self.job.world_size
        have = self.cluster.hosts * self.cluster.devices_per_host
        if need > have:
            raise ConfigError("job", f"TP x PP x DP = {need} devices but the cluster has {have}")
        hosts = set(self.cluster.host_ids())
        for i, ev in enumerate(self.events):
            p = f"events[{i}]"
            at = getattr(ev, "at_iter", None)
            if at is not None and not 0 < at < self.job.total_iterations:
                raise ConfigError(f"{p}.at_iter", f"must lie in 1..{self.job.total_iterations - 1}")
            for h in getattr(ev, "hosts", ()) or ((ev.host,) if hasattr(ev, "host") else ()):
                if h not in hosts:
                    raise ConfigError(f"{p}.host", f"unknown host {h!r}")
            if isinstance(ev, Rebalance) and ev.period >= self.job.total_iterations:
                raise ConfigError(f"{p}.period", "must be shorter than the job")
        for i, h in enumerate(self.cluster.preheat):
            if h not in hosts:
                raise ConfigError(f"cluster.preheat[{i}]", f"unknown host {h!r}")
        if self.strategy.needs_k and not self.k:
            raise ConfigError("k", f"{self.strategy.value} needs k")
        if self.recovery is Recovery.REDUNDANCY:
            if self.job.distributed_optimizer:
                raise IncompatibleStrategy(
                    "redundancy recovery needs full optimizer replicas; disable distributed_optimizer"
                )
            if self.job.dp < 2:
                raise IncompatibleStrategy("redundancy recovery needs DP >= 2")
        if self.recovery is not Recovery.AUTO and not self.strategy.recovers_live:
            raise IncompatibleStrategy(f"{self.strategy.value} always recovers by restarting the job")


def _replace(s: Scenario, **changes) -> Scenario:
    return dataclasses.replace(s, **changes)


# --- parsing ----------------------------------------------------------------


def _mapping(value: Any, path: str) -> Mapping[str, Any]:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(path, "expected a mapping")
    return value


def _check_keys(data: Mapping[str, Any], allowed: set[str], path: str) -> None:
    for key in data:
        if key not in allowed:
            prefix = f"{path}." if path else ""
            raise ConfigError(f"{prefix}{key}", "unknown key")


def _int(value: Any, path: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return value


def _bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(path, f"expected true/false, got {value!r}")
    return value


def _float(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    return float(value)


def _hosts(value: Any, path: str) -> tuple[str, ...]:
    if isinstance(value, str):
        return (value,)
    if not isinstance(value, list) or not value or not all(isinstance(h, str) for h in value):
        raise ConfigError(path, "expected a host id or a non-empty list of host ids")
    if len(set(value)) != len(value):
        raise ConfigError(path, "duplicate host")
    return tuple(value)


_EVENT_FIELDS = {
    "straggler": {"host", "factor", "at_iter"},
    "migrate": {"hosts", "at_iter"},
    "fail": {"host", "at_iter"},
    "rebalance": {"period"},
    "bandwidth_sweep": {"values"},
}


def _event(item: Any, path: str) -> Event:
    item = _mapping(item, path)
    if len(item) != 1:
        raise ConfigError(path, f"expected exactly one of {', '.join(sorted(_EVENT_FIELDS))}")
    (kind, body), = item.items()
    if kind not in _EVENT_FIELDS:
        raise ConfigError(f"{path}.{kind}", "unknown event")
    p = f"{path}.{kind}"
    body = _mapping(body, p)
    _check_keys(body, _EVENT_FIELDS[kind], p)
    for req in sorted(_EVENT_FIELDS[kind] - ({"factor"} if kind == "straggler" else set())):
        if req not in body:
            raise ConfigError(f"{p}.{req}", "required")
    if kind == "straggler":
        factor = _float(body.get("factor", 1.2), f"{p}.factor")
        if factor < 1.0:
            raise ConfigError(f"{p}.factor", "must be >= 1")
        return Straggler(_hosts(body["host"], f"{p}.host")[0], factor, _int(body["at_iter"], f"{p}.at_iter"))
    if kind == "migrate":
        return Migrate(_hosts(body["hosts"], f"{p}.hosts"), _int(body["at_iter"], f"{p}.at_iter"))
    if kind == "fail":
        return Fail(_hosts(body["host"], f"{p}.host")[0], _int(body["at_iter"], f"{p}.at_iter"))
    if kind == "rebalance":
        return Rebalance(_int(body["period"], f"{p}.period", 1))
    values = body["values"]
    if not isinstance(values, list) or not values:
        raise ConfigError(f"{p}.values", "expected a non-empty list")
    return BandwidthSweep(tuple(_int(int(v) if isinstance(v, float) and v.is_integer() else v,
                                     f"{p}.values[{i}]", 1) for i, v in enumerate(values)))


_TOP = {"name", "cluster", "job", "events", "strategy", "k", "recovery", "warmup", "simulate_data",
        "strict_memory", "checkpoint_interval", "costs"}
_CLUSTER = {"hosts", "devices_per_host", "spares", "preheat"}
_JOB = {"tp", "pp", "dp", "distributed_optimizer", "total_iterations", "params_per_device", "seed",
        "record_gradients"}


def scenario_from_dict(data: Mapping[str, Any]) -> Scenario:
    data = _mapping(data, "scenario")
    _check_keys(data, _TOP, "")
    c = _mapping(data.get("cluster"), "cluster")
    _check_keys(c, _CLUSTER, "cluster")
    preheat = c.get("preheat", [])
    cluster = Cluster(
        hosts=_int(c.get("hosts", 4), "cluster.hosts", 1),
        devices_per_host=_int(c.get("devices_per_host", 8), "cluster.devices_per_host", 1),
        spares=_int(c.get("spares", 0), "cluster.spares", 0),
        preheat=_hosts(preheat, "cluster.preheat") if preheat else (),
    )
    j = _mapping(data.get("job"), "job")
    _check_keys(j, _JOB, "job")
    kwargs: dict[str, Any] = {}
    for key in ("tp", "pp", "dp", "total_iterations", "params_per_device"):
        if key in j:
            kwargs[key] = _int(j[key], f"job.{key}", 1)
    if "seed" in j:
        kwargs["seed"] = _int(j["seed"], "job.seed", 0)
    for key in ("distributed_optimizer", "record_gradients"):
        if key in j:
            kwargs[key] = _bool(j[key], f"job.{key}")
    try:
        job = JobConfig(**kwargs)
    except TopologyError as exc:
        raise ConfigError("job", str(exc)) from None

    raw_events = data.get("events") or []
    if not isinstance(raw_events, list):
        raise ConfigError("events", "expected a list")
    events = tuple(_event(e, f"events[{i}]") for i, e in enumerate(raw_events))

    strategy, k = parse_strategy(data.get("strategy", "TRAINMOVER"))
    if "k" in data:
        k = _int(data["k"], "k", 1)
    if strategy.needs_k and k is None:
        raise ConfigError("k", f"{strategy.value} needs k (or write e.g. {strategy.value[:-2]}_50)")
    try:
        recovery = Recovery(str(data.get("recovery", "auto")).lower())
    except ValueError:
        raise ConfigError("recovery", "expected auto, redundancy or checkpoint") from None

    costs = _mapping(data.get("costs"), "costs")
    s = Scenario(
        name=str(data.get("name", "scenario")),
        cluster=cluster,
        job=job,
        events=events,
        strategy=strategy,
        k=k if strategy.needs_k else None,
        recovery=recovery,
        warmup=_bool(data.get("warmup", True), "warmup"),
        simulate_data=_bool(data.get("simulate_data", True), "simulate_data"),
        strict_memory=None if data.get("strict_memory") is None else _bool(data["strict_memory"], "strict_memory"),
        checkpoint_interval=None if data.get("checkpoint_interval") is None
        else _int(data["checkpoint_interval"], "checkpoint_interval", 1),
        costs=dict(costs),
        raw=copy.deepcopy(dict(data)),
    )
    s.cost_table()  # surface cost errors at load time
    s.validate()
    return s


def load_scenario(path: str | Path) -> Scenario:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML: {exc}") from None
    return scenario_from_dict(data or {})


def override(data: Mapping[str, Any], dotted: str, value: Any) -> dict:
    """Copy of a raw scenario mapping with one dotted key set, e.g. ``costs.teardown_s``."""
    out = copy.deepcopy(dict(data))
    node = out
    parts = dotted.split(".")
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(dotted, f"{part} is not a section")
        node = nxt
    node[parts[-1]] = value
    return out
