"""A simulated training device and the operations the runtime invokes on it."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from ..costmodel import CostTable
from ..job import Coords, JobConfig
from ..topology import Edge
from .fabric import Connections, GroupIndex, Recorder, drive
from .model import ModelState, iteration_program
from .records import AlreadyRecorded, CheckpointStore, RecordedComms
from .resources import LazyInitRegistry, LedgerHook, MemoryLedger, Tag


class Mode(str, enum.Enum):
    NORMAL = "NORMAL"
    RECORD = "RECORD"
    SANDBOX = "SANDBOX"


class RedundancyUnavailable(Exception):
    """No surviving DP peer holds a full copy of the lost state."""


def device_id(host_id: str, local_device_index: int) -> str:
    return f"{host_id}/{local_device_index}"


@dataclass
class Worker:
    host_id: str
    local_device_index: int
    ledger: MemoryLedger
    lazy: LazyInitRegistry
    rank: int | None = None
    state: ModelState | None = None
    recording: RecordedComms | None = None
    # Recording interception stays installed until iteration 0 has run.
    hook_installed: bool = True

    @classmethod
    def create(
        cls,
        host_id: str,
        local_device_index: int,
        costs: CostTable,
        limit: int | None = None,
        hook: LedgerHook | None = None,
    ) -> "Worker":
        dev = device_id(host_id, local_device_index)
        cap = costs.memory.device_capacity_bytes if limit is None else limit
        return cls(
            host_id,
            local_device_index,
            MemoryLedger(dev, cap, hook),
            LazyInitRegistry.split_evenly(costs.lazy_init_total_s),
        )

    @property
    def device(self) -> str:
        return device_id(self.host_id, self.local_device_index)

    def allocate_training_buffers(self, job: JobConfig, costs: CostTable) -> None:
        m = costs.memory
        self.ledger.allocate(Tag.PARAMS, m.params_bytes, "params")
        self.ledger.allocate(Tag.OPTIMIZER, m.optimizer_share(job.dp, job.distributed_optimizer), "optimizer")
        self.ledger.allocate(Tag.GRADIENT_BUFFER, m.gradient_bytes, "gradients")
        self.ledger.allocate(Tag.ACTIVATIONS, m.activation_bytes, "activations")


def charge_channels(workers_by_device: Mapping[str, Worker], edges: Iterable[Edge], costs: CostTable, sign: int, why: str) -> None:
    """Each edge holds one channel buffer on both of its endpoint devices."""
    per_edge = costs.memory.channel_buffer_bytes
    for e in sorted(edges, key=Edge.as_tuple):
        for ep in (e.src, e.dst):
            w = workers_by_device.get(device_id(ep.host_id, ep.local_device_index))
            if w is None:
                continue
            if sign > 0:
                w.ledger.allocate(Tag.GROUP_CHANNEL, per_edge, why)
            else:
                w.ledger.release(Tag.GROUP_CHANNEL, per_edge, why)


@dataclass
class IterationResult:
    states: dict[int, ModelState]
    elapsed_ns: dict[int, int] = field(default_factory=dict)
    lazy_ns: dict[int, int] = field(default_factory=dict)
    recordings: dict[int, RecordedComms] = field(default_factory=dict)

    @property
    def wall_ns(self) -> int:
        return max(self.elapsed_ns.values(), default=0)

    @property
    def max_lazy_ns(self) -> int:
        return max(self.lazy_ns.values(), default=0)


def run_iteration(
    workers: Mapping[int, Worker],
    mode: Mode,
    job: JobConfig,
    index: GroupIndex,
    graphs,
    connections: Connections,
    costs: CostTable,
    *,
    iteration_ns: int | None = None,
    recordings: Mapping[int, RecordedComms] | None = None,
    simulate_data: bool = True,
) -> IterationResult:
    """One iteration over ``workers`` (keyed by rank).

    NORMAL and RECORD commit the new state to each worker. SANDBOX runs the
    same program from a scratch iteration-0 state, answers off-host traffic
    from ``recordings`` and throws the result away; only the lazy flags stick.
    """
    base = costs.iteration_ns if iteration_ns is None else iteration_ns
    recorder = None
    if mode is Mode.RECORD:
        for r, w in workers.items():
            if w.state is None or w.state.iteration != 0:
                raise AlreadyRecorded(f"rank {r}: recording only happens in iteration 0")
            if not w.hook_installed or w.recording is not None:
                raise AlreadyRecorded(f"rank {r}: first iteration already recorded")
        recorder = Recorder(zero_gradients=not job.record_gradients)

    if mode is Mode.SANDBOX:
        starts = {r: ModelState.initial(job, job.coords(r)) for r in workers}
    else:
        starts = {r: w.state for r, w in workers.items()}

    if simulate_data:
        programs = {r: iteration_program(job, s) for r, s in starts.items()}
        states = drive(
            programs,
            index,
            graphs,
            connections,
            sandbox=mode is Mode.SANDBOX,
            recordings=recordings,
            recorder=recorder,
        )
    else:
        states = {r: s for r, s in starts.items()}

    result = IterationResult(states)
    for r, w in workers.items():
        lazy = w.lazy.trigger_all()
        result.lazy_ns[r] = lazy
        result.elapsed_ns[r] = base + lazy
        if mode is not Mode.SANDBOX:
            if simulate_data:
                w.state = states[r]
            else:
                s = w.state
                w.state = ModelState(s.params, s.optimizer, s.iteration + 1, s.shard_coords, s.optimizer_offset)
        w.hook_installed = False
    if recorder is not None:
        for r, w in workers.items():
            rec = recorder.out.get(r, RecordedComms())
            rec.recorded_at_iteration = 0
            w.recording = rec.seal()
            result.recordings[r] = w.recording
    return result


def record_first_iteration(workers: Mapping[int, Worker], *args, **kwargs) -> dict[int, RecordedComms]:
    """RECORD-mode iteration 0; returns the sealed boundary recordings."""
    return run_iteration(workers, Mode.RECORD, *args, **kwargs).recordings


def begin_transfer(src: Worker, dst: Worker, costs: CostTable) -> None:
    """Both sides carve the transfer channel out of their released gradient buffer."""
    if src.state is None:
        raise ValueError(f"{src.device} holds no state")
    chan = costs.memory.transfer_channel_bytes
    for w in (src, dst):
        held = w.ledger.allocations[Tag.GRADIENT_BUFFER]
        if held < chan:
            raise ValueError(f"{w.device}: gradient buffer {held} B cannot host a {chan} B transfer channel")
        w.ledger.release(Tag.GRADIENT_BUFFER, held, "repurpose for transfer")
        w.ledger.allocate(Tag.TRANSFER_CHANNEL, chan, "state transfer")


def finish_transfer(
    src: Worker,
    dst: Worker,
    costs: CostTable,
    *,
    src_leaves: bool = True,
    as_rank: tuple[int, Coords] | None = None,
) -> None:
    if as_rank is None:
        dst.state, dst.rank = src.state, src.rank
    else:
        s = src.state
        dst.rank = as_rank[0]
        dst.state = ModelState(s.params, s.optimizer, s.iteration, as_rank[1], s.optimizer_offset)
    chan = costs.memory.transfer_channel_bytes
    for w in (src, dst):
        w.ledger.release(Tag.TRANSFER_CHANNEL, chan, "transfer done")
    dst.ledger.allocate(Tag.GRADIENT_BUFFER, costs.memory.gradient_bytes, "gradients")
    if not src_leaves:
        src.ledger.allocate(Tag.GRADIENT_BUFFER, costs.memory.gradient_bytes, "gradients")


def transfer_state(
    src: Worker,
    dst: Worker,
    costs: CostTable,
    *,
    src_leaves: bool = True,
    as_rank: tuple[int, Coords] | None = None,
) -> int:
    """Copy src's training state onto dst over the data plane.

    The gradient buffer on each side is released and hosts the transfer
    channel; it comes back once the channel is freed, except on a sender
    that is leaving. ``as_rank`` re-labels a DP replica's state for the
    rank it stands in for. Returns the point-to-point transfer time.
    """
    begin_transfer(src, dst, costs)
    finish_transfer(src, dst, costs, src_leaves=src_leaves, as_rank=as_rank)
    return costs.transfer_ns()


def save_checkpoint(workers: Mapping[int, Worker], store: CheckpointStore, costs: CostTable) -> int:
    iters = {w.state.iteration for w in workers.values()}
    if len(iters) != 1:
        raise ValueError(f"workers disagree on the iteration boundary: {sorted(iters)}")
    store.put(iters.pop(), {r: w.state for r, w in workers.items()})
    return costs.save_ns()


def load_checkpoint(store: CheckpointStore, iteration: int, workers: Mapping[int, Worker], costs: CostTable) -> int:
    states = store.get(iteration)
    for r, w in workers.items():
        w.state = states[r]
    return costs.load_ns()


def redundancy_source(job: JobConfig, rank: int, lost: Iterable[int]) -> int:
    """A surviving DP peer that holds a full copy of ``rank``'s state."""
    if job.distributed_optimizer:
        raise RedundancyUnavailable("distributed optimizer keeps a single copy of each optimizer slice")
    dead = set(lost)
    c = job.coords(rank)
    for k in range(1, job.dp):
        peer = job.rank_of(Coords(c.tp, c.pp, (c.dp + k) % job.dp))
        if peer not in dead:
            return peer
    raise RedundancyUnavailable(f"rank {rank}: every DP replica was lost")
