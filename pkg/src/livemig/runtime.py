"""Cluster runtime: actors on the event loop, the job clock and host agents.

Every node is an :class:`Actor` whose procedures are generators. A
procedure yields ``("sleep", ns)`` to let virtual time pass or
``("wait", name[, deadline_ns])`` to block on a named signal; signals are
latched so a wait that starts late still sees an earlier signal.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterable, Mapping

from .costmodel import CostTable
from .job import JobConfig, Placement
from .simcore import Message, Plane, Simulator
from .topology import CommGraph, Edge, HostSpec, ReplacementMapping, ReplacementPlan, build_comm_graph, replace_members
from .trace import Trace
from .worker.fabric import Connections, GroupIndex
from .worker.model import ModelState
from .worker.node import Mode, Worker, device_id, run_iteration
from .worker.records import CheckpointStore, RecordedComms
from .worker.resources import MemoryOverflow, Tag

TIMEOUT = object()
TRAINER = "trainer"
CONTROLLER = "controller"

Proc = Generator[tuple, Any, Any]


def agent_id(host_id: str) -> str:
    return f"agent:{host_id}"


class Actor:
    def __init__(self, rt: "Runtime", node_id: str):
        self.rt = rt
        self.id = node_id
        self._procs: dict[int, Proc] = {}
        self._tokens = itertools.count()
        self._waiting: dict[str, list[int]] = {}
        self._latched: dict[str, Any] = {}
        rt.sim.register(node_id, self)

    # --- procedures -------------------------------------------------------

    def spawn(self, proc: Proc) -> int:
        token = next(self._tokens)
        self._procs[token] = proc
        self._advance(token, None)
        return token

    def cancel(self, token: int) -> None:
        proc = self._procs.pop(token, None)
        if proc is not None:
            proc.close()
        for waiters in self._waiting.values():
            if token in waiters:
                waiters.remove(token)

    def cancel_all(self) -> None:
        for token in list(self._procs):
            self.cancel(token)

    @property
    def busy(self) -> bool:
        return bool(self._procs)

    def signal(self, name: str, value: Any = True) -> None:
        waiters = self._waiting.pop(name, [])
        if not waiters:
            self._latched[name] = value
        for token in waiters:
            self._advance(token, value)

    def _advance(self, token: int, value: Any) -> None:
        while True:
            proc = self._procs.get(token)
            if proc is None:
                return
            try:
                cmd = proc.send(value)
            except StopIteration:
                self._procs.pop(token, None)
                return
            if cmd[0] == "sleep":
                self.rt.sim.after(cmd[1], self.id, {"kind": "wake", "token": token})
                return
            if cmd[0] == "wait":
                name = cmd[1]
                if name in self._latched:
                    value = self._latched.pop(name)
                    continue
                self._waiting.setdefault(name, []).append(token)
                if len(cmd) > 2 and cmd[2] is not None:
                    self.rt.sim.at(cmd[2], self.id, {"kind": "timeout", "token": token, "name": name})
                return
            raise ValueError(f"unknown procedure command {cmd!r}")

    # --- messaging --------------------------------------------------------

    def send(self, dst: str, body: dict, plane: Plane = Plane.CONTROL, size_bytes: int = 0) -> None:
        self.rt.sim.send(Message(self.id, dst, plane, size_bytes, body))

    def step(self, sim: Simulator, event) -> None:
        payload = event.payload
        body = payload.body if isinstance(payload, Message) else payload
        kind = body["kind"]
        if kind == "wake":
            self._advance(body["token"], None)
        elif kind == "timeout":
            waiters = self._waiting.get(body["name"], [])
            if body["token"] in waiters:
                waiters.remove(body["token"])
                self._advance(body["token"], TIMEOUT)
        else:
            self.receive(body)

    def receive(self, body: dict) -> None:
        raise NotImplementedError(body["kind"])


@dataclass
class Faults:
    # (host, step name) -> number of commands the agent silently drops
    stall: dict[tuple[str, str], int] = field(default_factory=dict)
    # hosts whose group heartbeat reads dead once a migration starts
    dead_heartbeat: set[str] = field(default_factory=set)
    corrupt_recordings: bool = False


class HostAgent(Actor):
    """Executes timed work on one host and acknowledges it to the controller."""

    def __init__(self, rt: "Runtime", host_id: str):
        super().__init__(rt, agent_id(host_id))
        self.host_id = host_id
        self.expected: dict[str, int] = {}
        self.received: dict[str, int] = {}

    def receive(self, body: dict) -> None:
        kind = body["kind"]
        if kind == "cmd":
            key = (self.host_id, body["step"])
            if self.rt.faults.stall.get(key, 0) > 0:
                self.rt.faults.stall[key] -= 1
                return
            self.spawn(self._work(body))
        elif kind == "state":
            self.rt.finish_pair_transfer(body)
            step = body["step_key"]
            self.received[step] = self.received.get(step, 0) + 1
            if self.received[step] == self.expected.get(step, -1):
                self._ack(body["step_key"], body["step"], body["transfer_ns"])
        else:
            raise ValueError(f"agent {self.host_id}: unexpected {kind}")

    def _work(self, body: dict) -> Proc:
        op = body["op"]
        if op == "transfer_recv":
            self.expected[body["step_key"]] = body["pairs"]
            self.received.setdefault(body["step_key"], 0)
            if body["pairs"] == 0:
                self._ack(body["step_key"], body["step"], 0)
            return
        work = self.rt.work_ns(op, self.host_id, body)
        if work:
            yield ("sleep", work)
        result = self.rt.apply(op, self.host_id, body) or {}
        if op != "transfer_send":
            self._ack(body["step_key"], body["step"], work, **result)
        else:
            self._ack(body["step_key"], body["step"], 0, role="sender")

    def _ack(self, step_key: str, step: str, work_ns: int, **extra: Any) -> None:
        self.rt.trace.emit(self.id, "STEP_ACK", step=step, key=step_key, host=self.host_id, work_ns=work_ns, **extra)
        self.send(CONTROLLER, {"kind": "ack", "step_key": step_key, "host": self.host_id, **extra})


class Trainer(Actor):
    """The synchronous job clock: every active device advances together."""

    def __init__(self, rt: "Runtime"):
        super().__init__(rt, TRAINER)
        self.freeze_requested = False
        self.frozen = False
        self.running = False
        self.iteration_started_at = 0
        self.current_ns = 0

    def receive(self, body: dict) -> None:
        kind = body["kind"]
        if kind == "freeze":
            self.freeze_requested = True
        elif kind == "resume":
            self.signal("resume", body)
        elif kind == "restart":
            self.spawn(self._restart())
        else:
            raise ValueError(f"trainer: unexpected {kind}")

    def launch(self) -> Proc:
        rt = self.rt
        rt.trace.emit(self.id, "PHASE", name="launch")
        rt.boot(rt.placement.used_hosts())
        yield from rt.full_setup(rt.placement.used_hosts())
        # Iteration 0 runs cold and records boundary traffic.
        workers = rt.active()
        dur = rt.iteration_ns() + max(w.lazy.pending_ns for w in workers.values())
        yield ("sleep", dur)
        res = run_iteration(workers, Mode.RECORD, rt.job, rt.index, rt.graphs, rt.connections, rt.costs,
                            simulate_data=rt.simulate_data)
        for r, rec in sorted(res.recordings.items()):
            rt.store.put_recording(r, rec)
        rt.iteration = 1
        rt.trace.emit(self.id, "ITER_DONE", iteration=0, duration_ns=dur, lazy_ns=res.max_lazy_ns)
        rt.steady_peak = {r: w.ledger.peak_observed for r, w in workers.items()}
        if rt.strict_memory:
            for r, w in workers.items():
                w.ledger.limit = rt.steady_peak[r]
        if rt.initial_checkpoint:
            rt.checkpoint(free=True)
        rt.trace.emit(self.id, "PHASE", name="launch_done", iteration_ns=rt.costs.iteration_ns)
        rt.notify("launched")
        yield from self.loop()

    def loop(self) -> Proc:
        rt = self.rt
        self.running = True
        while rt.iteration < rt.job.total_iterations:
            it = rt.iteration
            rt.notify("before_iteration", it)
            if self.freeze_requested:
                yield from self._freeze()
                continue
            workers = rt.active()
            base = rt.iteration_ns()
            lazy = max(w.lazy.pending_ns for w in workers.values())
            dur = base + lazy
            self.iteration_started_at = rt.sim.now
            self.current_ns = dur
            rt.notify("iteration_started", it, dur)
            yield ("sleep", dur)
            res = run_iteration(workers, Mode.NORMAL, rt.job, rt.index, rt.graphs, rt.connections, rt.costs,
                                iteration_ns=base, simulate_data=rt.simulate_data)
            rt.iteration = it + 1
            rt.trace.emit(self.id, "ITER_DONE", iteration=it, duration_ns=dur, lazy_ns=res.max_lazy_ns)
            if rt.checkpoint_interval and rt.iteration % rt.checkpoint_interval == 0:
                rt.checkpoint(free=True)
            rt.notify("after_iteration", it)
            if self.freeze_requested and rt.iteration < rt.job.total_iterations:
                yield from self._freeze()
        self.running = False
        rt.finish()

    def _restart(self) -> Proc:
        """Resume the job clock after the controller rebuilt a failed job."""
        self.rt.trace.emit(self.id, "DOWNTIME_END", iteration=self.rt.iteration)
        yield from self.loop()

    def _freeze(self) -> Proc:
        rt = self.rt
        self.freeze_requested = False
        self.frozen = True
        rt.trace.emit(self.id, "DOWNTIME_BEGIN", iteration=rt.iteration, reason="freeze")
        self.send(CONTROLLER, {"kind": "frozen", "iteration": rt.iteration})
        yield ("wait", "resume")
        self.frozen = False
        rt.trace.emit(self.id, "DOWNTIME_END", iteration=rt.iteration)


class Runtime:
    """All mutable cluster state for one scenario run."""

    def __init__(
        self,
        job: JobConfig,
        hosts: list[HostSpec],
        costs: CostTable,
        *,
        spare_hosts: Iterable[HostSpec] = (),
        simulate_data: bool = True,
        strict_memory: bool = False,
        warmup: bool = True,
        initial_checkpoint: bool = True,
        checkpoint_interval: int | None = None,
        horizon_ns: int | None = None,
        faults: Faults | None = None,
    ):
        self.job = job
        self.costs = costs
        self.sim = Simulator(costs, horizon_ns)
        self.trace = Trace(lambda: self.sim.now)
        self.hosts: dict[str, HostSpec] = {}
        for h in list(hosts) + list(spare_hosts):
            self.hosts[h.host_id] = h
        self.placement = Placement(job, hosts)
        self.spares = [h.host_id for h in spare_hosts]
        self.retired: set[str] = set()
        self.simulate_data = simulate_data
        self.strict_memory = strict_memory
        self.warmup = warmup
        self.initial_checkpoint = initial_checkpoint
        self.checkpoint_interval = (
            costs.checkpoint_interval_iters if checkpoint_interval is None else checkpoint_interval
        )
        self.faults = faults or Faults()
        self.connections = Connections()
        self.store = CheckpointStore()
        self.devices: dict[str, Worker] = {}
        self.rank_device: dict[int, str] = {}
        self.device_ranks: dict[str, int] = {}
        self.slowdown: dict[str, float] = {}
        self.steady_peak: dict[int, int] = {}
        # Every device that ever held a rank, with the last rank it held.
        self.held: dict[str, int] = {}
        self.iteration = 0
        self.done = False
        self.aborted: str | None = None
        self.listeners: list[Callable[..., None]] = []
        self._spare_seq = itertools.count()
        # Agent op handlers, installed by the controller for the ops it issues.
        self.ops: dict[str, Callable[[str, dict], dict | None]] = {}
        self.oom_detail: str | None = None
        self._refresh_groups()
        self.trainer = Trainer(self)
        self.agents: dict[str, HostAgent] = {}
        for h in self.hosts:
            self.agent(h)

    # --- topology bookkeeping --------------------------------------------

    def _refresh_groups(self, graphs: Mapping[str, CommGraph] | None = None) -> None:
        self.specs = self.placement.group_specs()
        hosts = list(self.hosts.values())
        self.graphs = {
            gid: (graphs[gid] if graphs and gid in graphs else build_comm_graph(spec, hosts))
            for gid, spec in self.specs.items()
        }
        self.index = GroupIndex.from_placement(self.placement)

    def agent(self, host_id: str) -> HostAgent:
        if host_id not in self.agents:
            self.agents[host_id] = HostAgent(self, host_id)
        return self.agents[host_id]

    def acquire_spare(self) -> str:
        """Take an unused host, provisioning a fresh one when none is idle."""
        if self.spares:
            return self.spares.pop(0)
        n = self.placement.devices_per_host
        while True:
            hid = f"spare{next(self._spare_seq)}"
            if hid not in self.hosts:
                break
        self.hosts[hid] = HostSpec(hid, n)
        self.agent(hid)
        return hid

    def host_list(self) -> list[HostSpec]:
        return list(self.hosts.values())

    def plan_replacement(self, pairs: Mapping[str, str]) -> dict[str, ReplacementPlan]:
        mapping = ReplacementMapping(dict(pairs))
        hosts = self.host_list()
        plans = {}
        for gid, spec in self.specs.items():
            if spec.hosts() & set(mapping.pairs):
                plans[gid] = replace_members(self.graphs[gid], spec, mapping, hosts)
        return plans

    def substituted(self, pairs: Mapping[str, str]) -> Placement:
        return self.placement.substitute(dict(pairs), [self.hosts[j] for j in pairs.values()])

    def switch(self, pairs: Mapping[str, str], graphs: Mapping[str, CommGraph] | None = None) -> None:
        """Joiners take over the leavers' ranks."""
        self.placement = self.substituted(pairs)
        self._refresh_groups(graphs)
        for leaver, joiner in pairs.items():
            self.slowdown.pop(leaver, None)
        for r in range(self.job.world_size):
            s = self.placement.slot(r)
            dev = device_id(s.host_id, s.local_device_index)
            self.rank_device[r] = dev
            self.device_ranks[dev] = r

    # --- devices and memory -----------------------------------------------

    def _ledger_hook(self, kind: str, device: str, tag: Tag, nbytes: int, why: str) -> None:
        self.trace.emit(device, kind, tag=tag.value, bytes=nbytes, why=why)

    def provision(self, host_id: str, ranks: Mapping[int, int]) -> dict[int, Worker]:
        """Fresh workers on ``host_id`` for ``ranks`` (local index -> rank)."""
        out = {}
        for local, rank in sorted(ranks.items()):
            limit = self.steady_peak.get(rank) if self.strict_memory and self.steady_peak else None
            w = Worker.create(host_id, local, self.costs, limit=limit, hook=self._ledger_hook)
            w.rank = rank
            self.devices[w.device] = w
            self.held[w.device] = rank
            w.allocate_training_buffers(self.job, self.costs)
            out[rank] = w
        return out

    def ranks_for(self, host_id: str, placement: Placement | None = None) -> dict[int, int]:
        p = placement or self.placement
        return {p.slot(r).local_device_index: r for r in p.ranks_on(host_id)}

    def active(self) -> dict[int, Worker]:
        return {r: self.devices[self.rank_device[r]] for r in range(self.job.world_size)}

    def workers_on(self, host_id: str) -> list[Worker]:
        return [w for d, w in sorted(self.devices.items()) if w.host_id == host_id]

    def _charge(self, edges: Iterable[Edge], host: str | None, sign: int, why: str) -> None:
        per_edge = self.costs.memory.channel_buffer_bytes
        for e in sorted(edges, key=Edge.as_tuple):
            for ep in (e.src, e.dst):
                if host is not None and ep.host_id != host:
                    continue
                w = self.devices.get(device_id(ep.host_id, ep.local_device_index))
                if w is None:
                    continue
                if sign > 0:
                    w.ledger.allocate(Tag.GROUP_CHANNEL, per_edge, why)
                else:
                    w.ledger.release(Tag.GROUP_CHANNEL, per_edge, why)

    def establish(self, gid: str, edges: Iterable[Edge], host: str | None = None, why: str = "establish") -> None:
        """Bring edges up; with ``host`` only that host's endpoints are charged."""
        edges = list(edges)
        self._charge(edges, host, +1, f"{gid} {why}")
        self.connections.establish(gid, edges)

    def teardown(self, gid: str, edges: Iterable[Edge], host: str | None = None, why: str = "teardown") -> None:
        """Release edges; an edge stops being usable as soon as one side lets go."""
        edges = list(edges)
        self._charge(edges, host, -1, f"{gid} {why}")
        self.connections.teardown(gid, edges)

    def edges_touching(self, host_id: str) -> dict[str, list[Edge]]:
        out = {}
        for gid in sorted(self.connections.edges):
            es = sorted(
                (e for e in self.connections.established(gid) if host_id in (e.src.host_id, e.dst.host_id)),
                key=Edge.as_tuple,
            )
            if es:
                out[gid] = es
        return out

    def retire_host(self, host_id: str, why: str = "leave") -> None:
        """A host leaves the job: its edges vanish and its devices free everything."""
        for gid, es in self.edges_touching(host_id).items():
            self.connections.teardown(gid, es)
        for w in self.workers_on(host_id):
            w.ledger.release_all(why)
            w.state = None
            w.rank = None
        self.retired.add(host_id)

    def recharge_channels(self, why: str) -> None:
        """Reset every device's channel memory to match the established edges."""
        for w in self.devices.values():
            w.ledger.release(Tag.GROUP_CHANNEL, why=why)
        for gid in sorted(self.connections.edges):
            self._charge(self.connections.established(gid), None, +1, f"{gid} {why}")

    def drop_all_groups(self, why: str) -> None:
        for gid in sorted(self.connections.edges):
            self.teardown(gid, self.connections.established(gid), why=why)

    # --- timing -----------------------------------------------------------

    def iteration_ns(self) -> int:
        hosts = set(self.placement.used_hosts())
        factor = max([f for h, f in self.slowdown.items() if h in hosts], default=1.0)
        return self.costs.iteration_ns if factor == 1.0 else self.costs.slowed_iteration_ns(factor)

    def boot(self, hosts: Iterable[str]) -> None:
        """Fresh processes on ``hosts`` for the ranks the placement gives them."""
        for h in hosts:
            for w in self.workers_on(h):
                if w.rank is not None or w.ledger.used:
                    w.ledger.release_all("restart")
                    w.rank = None
                    w.state = None
            workers = self.provision(h, self.ranks_for(h))
            for r, w in workers.items():
                w.state = ModelState.initial(self.job, self.job.coords(r))
                self.rank_device[r] = w.device
                self.device_ranks[w.device] = r

    def full_setup(self, hosts: list[str], group_ids: Iterable[str] | None = None) -> Proc:
        """From-scratch build of the groups; charges the full setup table."""
        self.trace.emit(TRAINER, "PHASE", name="ccg_setup_begin", hosts=len(hosts))
        dur = self.costs.full_setup_ns(len(hosts))
        yield ("sleep", dur)
        for gid in sorted(group_ids if group_ids is not None else self.graphs):
            self.establish(gid, self.graphs[gid].edges, why="full setup")
        self.trace.emit(TRAINER, "PHASE", name="ccg_setup_done", duration_ns=dur)

    def checkpoint(self, free: bool = True) -> None:
        self.store.put(self.iteration, {r: w.state for r, w in self.active().items()})
        self.trace.emit(TRAINER, "CHECKPOINT", iteration=self.iteration, free=free)

    # --- agent work -------------------------------------------------------

    def work_ns(self, op: str, host: str, body: dict) -> int:
        c = self.costs
        return {
            "stage1": c.stage1_ns,
            "sandbox": c.sandbox_ns if self.warmup else 0,
            "prepare": c.stage1_ns + (c.sandbox_ns if self.warmup else 0),
            "teardown": c.ns("teardown_s"),
            "destroy_groups": c.ns("teardown_s"),
            "switch_groups": c.ns("teardown_s"),
            "establish": c.stage2_ns,
            "rebuild": c.full_setup_ns(body.get("host_count", 0)),
            "overlap_groups": c.full_setup_ns(body.get("host_count", 0)),
            "load": c.load_ns(),
            "transfer_send": 0,
            "noop": 0,
        }[op]

    def apply(self, op: str, host: str, body: dict) -> dict | None:
        handler = self.ops.get(op)
        if handler is None:
            raise ValueError(f"no handler for agent op {op}")
        return handler(host, body)

    def finish_pair_transfer(self, body: dict) -> None:
        self.ops["transfer_recv_pair"](body["dst_host"], body)

    # --- run --------------------------------------------------------------

    def notify(self, event: str, *args: Any) -> None:
        for fn in list(self.listeners):
            fn(event, *args)

    def finish(self) -> None:
        if not self.done:
            self.done = True
            self.trace.emit(TRAINER, "PHASE", name="job_done", iteration=self.iteration)
            self.notify("job_done")

    def abort(self, reason: str) -> None:
        if self.done:
            return
        self.aborted = reason
        self.trace.emit(TRAINER, "PHASE", name=reason)
        self.trainer.cancel_all()
        self.done = True
        self.notify("aborted", reason)

    def run(self) -> int:
        try:
            self.trainer.spawn(self.trainer.launch())
            return self.sim.run_until_quiescent()
        except MemoryOverflow as exc:
            # Out of device memory ends the job; nothing else is delivered.
            self.oom_detail = str(exc)
            self.abort("oom")
            return self.sim.now

    def recording(self, rank: int) -> RecordedComms | None:
        rec = self.store.recording(rank)
        if rec is not None and self.faults.corrupt_recordings and rec.entries:
            first = min(rec.entries)
            del rec.entries[first]
        return rec
