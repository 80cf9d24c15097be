"""Migration controller: overlap/freeze lifecycle, recovery and standby preheating.

The controller is one actor on the event loop. It drives host agents through
blocking protocol steps over the control plane: a step's command goes to every
participating agent, and the next step starts only once all of them have
acknowledged. A step that misses its deadline is retried while every
participant's group heartbeat is alive; otherwise the migration falls back to
destroying and rebuilding the affected groups from scratch.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .costmodel import efficiency
from .job import Placement
from .runtime import CONTROLLER, TIMEOUT, TRAINER, Actor, Proc, Runtime, agent_id
from .simcore import Plane
from .topology import CommGraph, Edge, ReplacementMapping, ReplacementPlan, build_comm_graph, graphs_equal
from .worker.fabric import Deadlock, FabricError, GroupIndex, MissingConnection, ReplayMismatch
from .worker.node import Mode, RedundancyUnavailable, Worker, begin_transfer, finish_transfer, redundancy_source, run_iteration
from .worker.records import MissingSnapshot


class Role(str, enum.Enum):
    COORDINATOR = "COORDINATOR"
    LEAVER = "LEAVER"
    JOINER = "JOINER"
    STANDBY = "STANDBY"


class Trigger(str, enum.Enum):
    STRAGGLER = "STRAGGLER"
    MAINTENANCE = "MAINTENANCE"
    REBALANCE = "REBALANCE"
    FAILURE = "FAILURE"


class CCGMode(str, enum.Enum):
    """How group membership changes are carried out during a live migration."""

    TWO_STAGE = "TWO_STAGE"  # stage 1 in the overlap, stage 2 in the freeze
    SEPARATE = "SEPARATE"  # destroy and re-create the affected groups in the freeze
    OVERLAP = "OVERLAP"  # a second group set coexists until the switch
    NAIVE = "NAIVE"  # destroy every group, rebuild, cold joiner


class PreheatStatus(str, enum.Enum):
    COLD = "COLD"
    STAGE1_DONE = "STAGE1_DONE"
    WARMED = "WARMED"


class ControllerError(Exception):
    pass


class StepTimeout(ControllerError):
    pass


class WarmupFailed(ControllerError):
    pass


class NoCheckpoint(ControllerError):
    pass


@dataclass(frozen=True)
class MigrationPlan:
    mapping: ReplacementMapping
    affected_groups: tuple[str, ...]
    trigger: Trigger = Trigger.MAINTENANCE
    switch_iteration: int | None = None

    @classmethod
    def for_hosts(cls, rt: Runtime, pairs: Mapping[str, str], trigger: Trigger) -> "MigrationPlan":
        mapping = ReplacementMapping(dict(pairs))
        affected = tuple(sorted(g for g, s in rt.specs.items() if s.hosts() & set(mapping.pairs)))
        return cls(mapping, affected, trigger)

    def roles(self, rt: Runtime) -> dict[str, Role]:
        roles = {h: Role.COORDINATOR for h in rt.placement.used_hosts()}
        for leaver, joiner in self.mapping.pairs.items():
            roles[leaver] = Role.LEAVER
            roles[joiner] = Role.JOINER
        return roles


@dataclass
class ProtocolStep:
    step_id: int
    name: str
    key: str
    awaited_acks: set[str]
    deadline: int
    retries_remaining: int
    acked: set[str] = field(default_factory=set)
    replies: dict[str, dict] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return self.awaited_acks <= self.acked


@dataclass
class StandbyMember:
    host_id: str
    status: PreheatStatus = PreheatStatus.COLD
    position: str | None = None  # the job host whose ranks it is prepared for
    busy: bool = False


@dataclass
class StandbyPool:
    members: dict[str, StandbyMember] = field(default_factory=dict)

    def add(self, host_id: str, position: str | None = None) -> StandbyMember:
        m = self.members.setdefault(host_id, StandbyMember(host_id))
        if position is not None:
            m.position = position
        return m

    def take(self, position: str) -> StandbyMember | None:
        """Prefer a member warmed for ``position``; else any idle one."""
        ranked = sorted(
            (m for m in self.members.values() if not m.busy),
            key=lambda m: (m.position != position or m.status is not PreheatStatus.WARMED, m.host_id),
        )
        if not ranked:
            return None
        m = ranked[0]
        del self.members[m.host_id]
        return m


@dataclass
class MigrationReport:
    plan: MigrationPlan
    mode: CCGMode
    begin_ns: int = 0
    freeze_begin_ns: int = 0
    freeze_end_ns: int = 0
    phases: dict[str, int] = field(default_factory=dict)
    warm: bool = True
    fallback: bool = False
    retries: int = 0
    completed: bool = False
    errors: list[str] = field(default_factory=list)

    @property
    def downtime_ns(self) -> int:
        return self.freeze_end_ns - self.freeze_begin_ns

    @property
    def overlap_ns(self) -> int:
        return self.freeze_begin_ns - self.begin_ns


@dataclass
class RecoveryReport:
    failed_host: str
    replacement: str
    path: str  # "redundancy" | "checkpoint" | "restart"
    failed_at_ns: int
    resumed_at_ns: int = 0
    lost_iterations: int = 0
    preheated: bool = False
    recovered: bool = False

    @property
    def downtime_ns(self) -> int:
        return self.resumed_at_ns - self.failed_at_ns


@dataclass
class _Ctx:
    """Per-migration working set shared by the agent op handlers."""

    pairs: dict[str, str]
    plans: dict[str, ReplacementPlan]
    new_placement: Placement
    new_index: GroupIndex
    new_graphs: dict[str, CommGraph]
    joiner_workers: dict[str, dict[int, Worker]] = field(default_factory=dict)
    transfer_pairs: dict[str, list[tuple[str, str, int]]] = field(default_factory=dict)
    src_leaves: bool = True
    group_ids: tuple[str, ...] = ()


def measure_downtime(records: Iterable[dict]) -> int:
    """Halted training time in ns: freeze intervals plus post-switch cold lazy charges."""
    return efficiency(records).downtime_ns


class Controller(Actor):
    def __init__(self, rt: Runtime):
        super().__init__(rt, CONTROLLER)
        self.steps: dict[str, ProtocolStep] = {}
        self.ctx: dict[str, _Ctx] = {}
        self.pool = StandbyPool()
        self.reports: list[MigrationReport] = []
        self.errors: list[ControllerError] = []
        self.retries = 0
        self.recoveries: list[RecoveryReport] = []
        self.queue: list[tuple] = []
        self.active_migration: int | None = None
        self.failure_handler: Callable[[str], None] = self.handle_unexpected_failure
        # "auto" tries DP-replica redundancy first; "checkpoint" always reloads.
        self.recovery_path = "auto"
        self._ids = itertools.count(1)
        self._step_ids = itertools.count(1)
        rt.ops.update(
            {
                "stage1": self._op_stage1,
                "sandbox": self._op_sandbox,
                "prepare": self._op_prepare,
                "teardown": self._op_teardown,
                "establish": self._op_establish,
                "transfer_send": self._op_transfer_send,
                "transfer_recv_pair": self._op_transfer_recv_pair,
                "destroy_groups": self._op_destroy_groups,
                "rebuild": self._op_rebuild,
                "overlap_groups": self._op_overlap_groups,
                "switch_groups": self._op_switch_groups,
                "load": self._op_load,
                "noop": lambda host, body: None,
            }
        )

    # --- messages ---------------------------------------------------------

    def receive(self, body: dict) -> None:
        kind = body["kind"]
        if kind == "ack":
            step = self.steps.get(body["step_key"])
            if step is None or body["host"] in step.acked:
                return
            step.acked.add(body["host"])
            step.replies[body["host"]] = body
            if step.complete:
                self.signal(step.key, step)
        elif kind == "frozen":
            self.signal("frozen", body["iteration"])
        elif kind == "fail":
            self.failure_handler(body["host"])
        else:
            raise ValueError(f"controller: unexpected {kind}")

    @property
    def hop_ns(self) -> int:
        return self.rt.costs.control_plane_latency_ns

    def alive(self, hosts: Iterable[str]) -> bool:
        return not (set(hosts) & self.rt.faults.dead_heartbeat)

    def run_step(self, mig: str, name: str, cmds: Mapping[str, dict], work_ns: int) -> Proc:
        """Send one blocking step and wait for every ack; returns the step or None."""
        rt = self.rt
        sid = next(self._step_ids)
        key = f"{mig}.{sid}.{name}"
        step = ProtocolStep(
            sid, name, key, set(cmds), 0, rt.costs.step_retries
        )
        self.steps[key] = step
        rt.trace.emit(self.id, "PHASE", name="step_begin", step=name, key=key, step_id=sid, hosts=sorted(cmds))
        pending = dict(cmds)
        while True:
            step.deadline = rt.sim.now + 2 * self.hop_ns + work_ns + rt.costs.ns("step_timeout_s")
            for host in sorted(pending):
                body = {"kind": "cmd", "step": name, "step_key": key, "mig": mig, **pending[host]}
                self.send(agent_id(host), body)
            if not cmds:
                return step
            result = yield ("wait", key, step.deadline)
            if result is not TIMEOUT:
                rt.trace.emit(self.id, "PHASE", name="step_done", step=name, key=key, step_id=sid)
                return step
            missing = sorted(step.awaited_acks - step.acked)
            rt.trace.emit(self.id, "PHASE", name="step_timeout", step=name, key=key, missing=missing)
            if step.retries_remaining <= 0 or not self.alive(step.awaited_acks):
                err = StepTimeout(f"{name}: no ack from {', '.join(missing)}")
                self.errors.append(err)
                return None
            step.retries_remaining -= 1
            self.retries += 1
            pending = {h: cmds[h] for h in missing}

    def parallel(self, *procs: Proc) -> Proc:
        """Run procedures side by side and return their results in order."""
        names = []
        for p in procs:
            name = f"par{next(self._ids)}"
            names.append(name)

            def wrap(p=p, name=name):
                result = yield from p
                self.signal(name, ("done", result))

            self.spawn(wrap())
        out = []
        for name in names:
            _, result = yield ("wait", name)
            out.append(result)
        return out

    # --- context ----------------------------------------------------------

    def _context(self, pairs: Mapping[str, str], mode: CCGMode) -> _Ctx:
        rt = self.rt
        plans = rt.plan_replacement(pairs)
        new_placement = rt.substituted(pairs)
        hosts = rt.host_list()
        new_specs = new_placement.group_specs()
        if mode is CCGMode.NAIVE:
            gids = tuple(sorted(new_specs))
        else:
            gids = tuple(sorted(plans))
        new_graphs = dict(rt.graphs)
        for gid, plan in plans.items():
            new_graphs[gid] = plan.resulting_graph
        for gid in gids:
            rebuilt = build_comm_graph(new_specs[gid], hosts)
            if not graphs_equal(new_graphs[gid], rebuilt):
                raise ControllerError(f"{gid}: replaced graph differs from a rebuild")
        return _Ctx(dict(pairs), plans, new_placement, GroupIndex.from_placement(new_placement), new_graphs,
                    group_ids=gids)

    def _joiner_workers(self, ctx: _Ctx, joiner: str, leaver: str) -> dict[int, Worker]:
        rt = self.rt
        ranks = rt.ranks_for(leaver)
        existing = {w.local_device_index: w for w in rt.workers_on(joiner) if w.ledger.used}
        if existing and {w.rank for w in existing.values()} == set(ranks.values()):
            workers = {w.rank: w for w in existing.values()}
        else:
            for w in existing.values():
                w.ledger.release_all("reprovision")
            workers = rt.provision(joiner, ranks)
        ctx.joiner_workers[joiner] = workers
        return workers

    # --- agent op handlers ------------------------------------------------

    def _op_stage1(self, host: str, body: dict) -> None:
        ctx = self.ctx[body["mig"]]
        for gid, plan in sorted(ctx.plans.items()):
            edges = plan.stage1_actions.get(host, ())
            if edges:
                self.rt.establish(gid, edges, host=host, why="stage1")

    def _op_sandbox(self, host: str, body: dict) -> dict:
        rt = self.rt
        if not rt.warmup:
            return {"warm": False}
        ctx = self.ctx[body["mig"]]
        workers = ctx.joiner_workers[host]
        recs = {r: rt.recording(r) for r in workers}
        try:
            run_iteration(workers, Mode.SANDBOX, rt.job, ctx.new_index, ctx.new_graphs, rt.connections, rt.costs,
                          recordings=recs, simulate_data=rt.simulate_data)
        except (ReplayMismatch, MissingConnection, Deadlock, FabricError) as exc:
            # The joiner stays cold and pays lazy init in its first real iteration.
            for w in workers.values():
                w.lazy.reset()
            self.errors.append(WarmupFailed(f"{host}: {exc}"))
            rt.trace.emit(agent_id(host), "PHASE", name="warmup_failed", host=host, cause=type(exc).__name__)
            return {"warm": False}
        return {"warm": True}

    def _op_prepare(self, host: str, body: dict) -> dict:
        self._op_stage1(host, body)
        return self._op_sandbox(host, body)

    def _op_teardown(self, host: str, body: dict) -> None:
        ctx = self.ctx[body["mig"]]
        for gid, plan in sorted(ctx.plans.items()):
            mine = [e for e in plan.stage2_teardowns if host in (e.src.host_id, e.dst.host_id)]
            if mine:
                self.rt.teardown(gid, sorted(mine, key=Edge.as_tuple), host=host, why="stage2 teardown")

    def _op_establish(self, host: str, body: dict) -> None:
        ctx = self.ctx[body["mig"]]
        for gid, plan in sorted(ctx.plans.items()):
            mine = [e for e in plan.stage2_establishes if host in (e.src.host_id, e.dst.host_id)]
            if mine:
                self.rt.establish(gid, sorted(mine, key=Edge.as_tuple), host=host, why="stage2 establish")

    def _op_transfer_send(self, host: str, body: dict) -> None:
        rt = self.rt
        ctx = self.ctx[body["mig"]]
        for src_dev, dst_dev, rank in ctx.transfer_pairs.get(host, []):
            src, dst = rt.devices[src_dev], rt.devices[dst_dev]
            begin_transfer(src, dst, rt.costs)
            rt.trace.emit(src_dev, "TRANSFER", src=src_dev, dst=dst_dev, rank=rank,
                          bytes=rt.costs.state_bytes_per_device, stage="begin")
            msg = {
                "kind": "state", "step": body["step"], "step_key": body["step_key"], "mig": body["mig"],
                "src": src_dev, "dst": dst_dev, "rank": rank, "dst_host": dst.host_id,
                "transfer_ns": rt.costs.transfer_ns(),
            }
            rt.agents[host].send(agent_id(dst.host_id), msg, Plane.DATA, rt.costs.state_bytes_per_device)

    def _op_transfer_recv_pair(self, host: str, body: dict) -> None:
        rt = self.rt
        ctx = self.ctx[body["mig"]]
        src, dst = rt.devices[body["src"]], rt.devices[body["dst"]]
        rank = body["rank"]
        as_rank = None
        if src.rank != rank:
            as_rank = (rank, rt.job.coords(rank))
        finish_transfer(src, dst, rt.costs, src_leaves=ctx.src_leaves, as_rank=as_rank)
        rt.trace.emit(body["dst"], "TRANSFER", src=body["src"], dst=body["dst"], rank=rank,
                      bytes=rt.costs.state_bytes_per_device, stage="done")

    def _op_destroy_groups(self, host: str, body: dict) -> None:
        rt = self.rt
        # Each host frees its own side of every old edge, whichever side went first.
        for gid in body["groups"]:
            mine = [e for e in rt.graphs[gid].edges if host in (e.src.host_id, e.dst.host_id)]
            if mine:
                rt.teardown(gid, sorted(mine, key=Edge.as_tuple), host=host, why="destroy")

    def _op_rebuild(self, host: str, body: dict) -> None:
        ctx = self.ctx[body["mig"]]
        for gid in body["groups"]:
            mine = [e for e in ctx.new_graphs[gid].edges if host in (e.src.host_id, e.dst.host_id)]
            if mine:
                self.rt.establish(gid, sorted(mine, key=Edge.as_tuple), host=host, why="rebuild")

    def _op_overlap_groups(self, host: str, body: dict) -> None:
        ctx = self.ctx[body["mig"]]
        for gid in ctx.group_ids:
            mine = [e for e in ctx.new_graphs[gid].edges if host in (e.src.host_id, e.dst.host_id)]
            if mine:
                self.rt.establish(f"{gid}#next", sorted(mine, key=Edge.as_tuple), host=host, why="second group set")

    def _op_switch_groups(self, host: str, body: dict) -> None:
        rt = self.rt
        ctx = self.ctx[body["mig"]]
        for gid in ctx.group_ids:
            old = [e for e in rt.graphs[gid].edges if host in (e.src.host_id, e.dst.host_id)]
            if old:
                rt.teardown(gid, sorted(old, key=Edge.as_tuple), host=host, why="retire old group set")
            nxt = rt.connections.established(f"{gid}#next")
            rt.connections.establish(gid, nxt)

    def _op_load(self, host: str, body: dict) -> None:
        rt = self.rt
        ctx = self.ctx[body["mig"]]
        states = rt.store.get(body["iteration"])
        placement = ctx.new_placement
        for r in placement.ranks_on(host):
            s = placement.slot(r)
            w = rt.devices[f"{host}/{s.local_device_index}"]
            w.state = states[r]
            w.rank = r

    # --- live migration ---------------------------------------------------

    def start_live_migration(self, plan: MigrationPlan, mode: CCGMode = CCGMode.TWO_STAGE) -> None:
        if not plan.mapping:
            self.rt.trace.emit(self.id, "PHASE", name="migration_skipped", reason="empty plan")
            self.reports.append(MigrationReport(plan, mode, completed=True))
            return
        self.queue.append((plan, mode))
        if self.active_migration is None:
            self._next_migration()

    def _next_migration(self) -> None:
        if not self.queue or self.rt.done:
            self.active_migration = None
            return
        plan, mode = self.queue.pop(0)
        self.active_migration = self.spawn(self._live(plan, mode))

    def _live(self, plan: MigrationPlan, mode: CCGMode) -> Proc:
        rt = self.rt
        mig = f"m{next(self._ids)}"
        pairs = dict(plan.mapping.pairs)
        report = MigrationReport(plan, mode, begin_ns=rt.sim.now)
        self.reports.append(report)
        errors0, retries0 = len(self.errors), self.retries
        ctx = self._context(pairs, mode)
        self.ctx[mig] = ctx
        hop = self.hop_ns
        rt.trace.emit(self.id, "PHASE", name="migration_begin", mig=mig, mode=mode.value,
                      trigger=plan.trigger.value, pairs=pairs, groups=list(ctx.group_ids))

        # Overlap phase: joiners prepare while training runs on.
        cold: list[str] = []
        for leaver, joiner in sorted(pairs.items()):
            member = self.pool.members.get(joiner)
            if member and member.status is PreheatStatus.WARMED and member.position == leaver:
                ctx.joiner_workers[joiner] = {w.rank: w for w in rt.workers_on(joiner) if w.rank is not None}
                continue
            self._joiner_workers(ctx, joiner, leaver)
            cold.append(joiner)
        self.pool.members = {h: m for h, m in self.pool.members.items() if h not in pairs.values()}

        if mode is not CCGMode.NAIVE and cold:
            t0 = rt.sim.now
            step = yield from self.run_step(mig, "stage1", {j: {"op": "stage1"} for j in cold}, rt.costs.stage1_ns)
            report.phases["stage1"] = rt.sim.now - t0
            if step is not None and rt.warmup:
                t0 = rt.sim.now
                step = yield from self.run_step(mig, "warmup", {j: {"op": "sandbox"} for j in cold}, rt.costs.sandbox_ns)
                report.phases["warmup"] = rt.sim.now - t0
                if step is None or not all(r.get("warm") for r in step.replies.values()):
                    report.warm = False
                    rt.trace.emit(self.id, "PHASE", name="warmup_degraded", mig=mig)
            elif step is None or not rt.warmup:
                report.warm = False
            if mode in (CCGMode.SEPARATE, CCGMode.OVERLAP):
                # Warmup ran on private local groups; they go away with it.
                for j in cold:
                    for gid, plan_g in ctx.plans.items():
                        es = plan_g.stage1_actions.get(j, ())
                        if es:
                            rt.teardown(gid, es, host=j, why="drop warmup groups")
        elif mode is CCGMode.NAIVE:
            report.warm = False
        if mode is CCGMode.OVERLAP:
            hosts = sorted({e.src.host_id for g in ctx.group_ids for e in ctx.new_graphs[g].edges}
                           | {e.dst.host_id for g in ctx.group_ids for e in ctx.new_graphs[g].edges}
                           | set(pairs.values()))
            t0 = rt.sim.now
            yield from self.run_step(mig, "overlap_groups",
                                     {h: {"op": "overlap_groups", "host_count": len(hosts)} for h in hosts},
                                     rt.costs.full_setup_ns(len(hosts)))
            report.phases["overlap_groups"] = rt.sim.now - t0

        if rt.done:
            return
        # Freeze at the next iteration boundary.
        self.send(TRAINER, {"kind": "freeze"})
        frozen_at = yield ("wait", "frozen")
        report.freeze_begin_ns = rt.sim.now - hop
        report.plan = MigrationPlan(plan.mapping, plan.affected_groups, plan.trigger, frozen_at)
        rt.trace.emit(self.id, "PHASE", name="freeze_begin", mig=mig, iteration=frozen_at)

        leavers = sorted(pairs)
        joiners = sorted(pairs.values())
        participants = sorted({h for g in ctx.group_ids for h in rt.specs[g].hosts()} | set(joiners))
        ok = self.alive(participants)
        if not ok:
            rt.trace.emit(self.id, "PHASE", name="groups_dead", mig=mig)

        ctx.transfer_pairs = {}
        for leaver, joiner in pairs.items():
            for local, rank in sorted(rt.ranks_for(leaver).items()):
                ctx.transfer_pairs.setdefault(leaver, []).append((f"{leaver}/{local}", f"{joiner}/{local}", rank))
        transfer_cmds = {l: {"op": "transfer_send"} for l in leavers}
        transfer_cmds.update({j: {"op": "transfer_recv", "pairs": len(ctx.transfer_pairs[l])} for l, j in pairs.items()})

        if ok and mode is CCGMode.TWO_STAGE:
            adj_down = _hosts_of(e for p in ctx.plans.values() for e in p.stage2_teardowns)
            adj_up = _hosts_of(e for p in ctx.plans.values() for e in p.stage2_establishes)
            t0 = rt.sim.now
            step = yield from self.run_step(mig, "teardown", {h: {"op": "teardown"} for h in sorted(adj_down | set(leavers))},
                                            rt.costs.ns("teardown_s"))
            report.phases["teardown"] = rt.sim.now - t0
            if step is not None:
                t0 = rt.sim.now
                step = yield from self.run_step(mig, "transfer", transfer_cmds, rt.costs.transfer_ns())
                report.phases["transfer"] = rt.sim.now - t0
            if step is not None:
                for l in leavers:
                    rt.retire_host(l)
                t0 = rt.sim.now
                step = yield from self.run_step(mig, "establish", {h: {"op": "establish"} for h in sorted((adj_up - set(leavers)) | set(joiners))},
                                                rt.costs.stage2_ns)
                report.phases["establish"] = rt.sim.now - t0
            ok = step is not None
        elif ok and mode in (CCGMode.SEPARATE, CCGMode.NAIVE):
            groups = list(ctx.group_ids)
            old_hosts = sorted({h for g in groups for h in rt.specs[g].hosts()})
            new_specs = ctx.new_placement.group_specs()
            new_hosts = sorted({h for g in groups for h in new_specs[g].hosts()})
            t0 = rt.sim.now
            step = yield from self.run_step(mig, "destroy", {h: {"op": "destroy_groups", "groups": groups} for h in old_hosts},
                                            rt.costs.ns("teardown_s"))
            report.phases["teardown"] = rt.sim.now - t0
            if step is not None:
                t0 = rt.sim.now
                step = yield from self.run_step(mig, "transfer", transfer_cmds, rt.costs.transfer_ns())
                report.phases["transfer"] = rt.sim.now - t0
            if step is not None:
                for l in leavers:
                    rt.retire_host(l)
                t0 = rt.sim.now
                n = len(rt.placement.used_hosts())
                step = yield from self.run_step(
                    mig, "rebuild",
                    {h: {"op": "rebuild", "groups": groups, "host_count": n} for h in new_hosts},
                    rt.costs.full_setup_ns(n),
                )
                report.phases["rebuild"] = rt.sim.now - t0
            ok = step is not None
        elif ok and mode is CCGMode.OVERLAP:
            t0 = rt.sim.now
            step = yield from self.run_step(mig, "transfer", transfer_cmds, rt.costs.transfer_ns())
            report.phases["transfer"] = rt.sim.now - t0
            if step is not None:
                for l in leavers:
                    rt.retire_host(l)
                hosts = sorted({h for g in ctx.group_ids for h in ctx.new_placement.group_specs()[g].hosts()})
                t0 = rt.sim.now
                step = yield from self.run_step(mig, "switch", {h: {"op": "switch_groups"} for h in hosts},
                                                rt.costs.ns("teardown_s"))
                report.phases["switch"] = rt.sim.now - t0
                for gid in ctx.group_ids:
                    rt.connections.drop_group(f"{gid}#next")
            ok = step is not None

        if not ok:
            yield from self._full_rebuild(mig, ctx, report)

        rt.switch(pairs, ctx.new_graphs)
        for j in joiners:
            for w in rt.workers_on(j):
                if w.rank is not None and w.state is None:
                    raise ControllerError(f"{w.device} joined without state")
        self.send(TRAINER, {"kind": "resume", "mig": mig})
        yield ("sleep", hop)
        report.freeze_end_ns = rt.sim.now
        report.completed = True
        report.errors = [f"{type(e).__name__}: {e}" for e in self.errors[errors0:]]
        report.retries = self.retries - retries0
        rt.trace.emit(self.id, "PHASE", name="migration_done", mig=mig, downtime_ns=report.downtime_ns,
                      overlap_ns=report.overlap_ns, warm=report.warm, fallback=report.fallback,
                      phases=report.phases)
        self._next_migration()

    def _full_rebuild(self, mig: str, ctx: _Ctx, report: MigrationReport) -> Proc:
        """Fallback: destroy the affected groups everywhere and build them from scratch."""
        rt = self.rt
        report.fallback = True
        rt.trace.emit(self.id, "PHASE", name="fallback_full_rebuild", mig=mig)
        groups = list(ctx.group_ids)
        for gid in groups:
            rt.connections.drop_group(gid)
            rt.connections.drop_group(f"{gid}#next")
        moved = False
        for leaver, joiner in ctx.pairs.items():
            for src_dev, dst_dev, rank in ctx.transfer_pairs.get(leaver, []):
                dst = rt.devices[dst_dev]
                src = rt.devices[src_dev]
                if dst.state is None and src.state is not None:
                    begin_transfer(src, dst, rt.costs)
                    finish_transfer(src, dst, rt.costs)
                    moved = True
            if leaver not in rt.retired:
                rt.retire_host(leaver)
        t0 = rt.sim.now
        n = len(rt.placement.used_hosts())
        yield ("sleep", (rt.costs.transfer_ns() if moved else 0) + rt.costs.full_setup_ns(n))
        for gid in groups:
            rt.connections.establish(gid, ctx.new_graphs[gid].edges)
        # Partial steps may have freed one side of an edge but not the other;
        # the rebuild re-derives every channel charge from the live edge set.
        rt.recharge_channels("fallback rebuild")
        report.phases["fallback"] = rt.sim.now - t0

    # --- preheating -------------------------------------------------------

    def preheat(self, standby: str, position: str) -> None:
        """Bring ``standby`` to WARMED for the ranks ``position`` holds; idempotent."""
        member = self.pool.add(standby, position)
        if member.busy or member.status is PreheatStatus.WARMED:
            return
        member.busy = True
        self.spawn(self._preheat(member))

    def _preheat(self, member: StandbyMember) -> Proc:
        rt = self.rt
        mig = f"p{next(self._ids)}"
        pairs = {member.position: member.host_id}
        ctx = self._context(pairs, CCGMode.TWO_STAGE)
        self.ctx[mig] = ctx
        self._joiner_workers(ctx, member.host_id, member.position)
        rt.trace.emit(self.id, "PHASE", name="preheat_begin", standby=member.host_id, position=member.position)
        step = yield from self.run_step(mig, "stage1", {member.host_id: {"op": "stage1"}}, rt.costs.stage1_ns)
        if step is not None:
            member.status = PreheatStatus.STAGE1_DONE
            step = yield from self.run_step(mig, "warmup", {member.host_id: {"op": "sandbox"}}, rt.costs.sandbox_ns)
            if step is not None and all(r.get("warm") for r in step.replies.values()):
                member.status = PreheatStatus.WARMED
        member.busy = False
        rt.trace.emit(self.id, "PHASE", name="preheat_done", standby=member.host_id, status=member.status.value)

    # --- unexpected failure -----------------------------------------------

    def _abort_migration(self) -> None:
        if self.active_migration is None:
            return
        self.cancel(self.active_migration)
        self.active_migration = None
        rt = self.rt
        rt.trace.emit(self.id, "PHASE", name="migration_aborted")
        if self.reports and not self.reports[-1].completed:
            report = self.reports[-1]
            for joiner in report.plan.mapping.pairs.values():
                if joiner not in rt.retired:
                    rt.retire_host(joiner, "abort")
        rt.trainer.freeze_requested = False
        self.queue.clear()

    def _fail_common(self, failed: str) -> tuple[int, list[int]]:
        """Stop the job clock, drop the failed host, free peers' channels to it."""
        rt = self.rt
        rt.trainer.cancel_all()
        rt.trainer.running = False
        self._abort_migration()
        lost_ranks = rt.placement.ranks_on(failed)
        for gid, es in rt.edges_touching(failed).items():
            for h in sorted(_hosts_of(es) - {failed}):
                rt.teardown(gid, [e for e in es if h in (e.src.host_id, e.dst.host_id)], host=h, why="peer failed")
        rt.retire_host(failed, "failure")
        return rt.iteration, lost_ranks

    def resume_point(self, at: int) -> int:
        try:
            return self.rt.store.latest(at)
        except MissingSnapshot as exc:
            raise NoCheckpoint(str(exc)) from None

    def _unrecoverable(self, failed: str, at: int) -> None:
        rt = self.rt
        rt.trace.emit(TRAINER, "FAILURE", host=failed, iteration=at, path="none", lost_iterations=0)
        self.recoveries.append(RecoveryReport(failed, "", "none", rt.sim.now))
        rt.abort("no_checkpoint")

    def handle_unexpected_failure(self, failed: str, replacement: str | None = None) -> None:
        rt = self.rt
        at, lost_ranks = self._fail_common(failed)
        try:
            if self.recovery_path == "checkpoint":
                raise RedundancyUnavailable("checkpoint recovery requested")
            sources = {r: redundancy_source(rt.job, r, lost_ranks) for r in lost_ranks}
            path, resume_at = "redundancy", at
        except RedundancyUnavailable:
            sources = {}
            path = "checkpoint"
            try:
                resume_at = self.resume_point(at)
            except NoCheckpoint:
                self._unrecoverable(failed, at)
                return
        lost = at - resume_at
        rt.trace.emit(TRAINER, "FAILURE", host=failed, iteration=at, path=path, lost_iterations=lost)
        rt.trace.emit(TRAINER, "DOWNTIME_BEGIN", iteration=at, reason="failure")
        report = RecoveryReport(failed, "", path, rt.sim.now, lost_iterations=lost)
        self.recoveries.append(report)
        self.spawn(self._recover(failed, replacement, sources, resume_at, report))

    def _recover(self, failed: str, replacement: str | None, sources: dict[int, int], resume_at: int,
                 report: RecoveryReport) -> Proc:
        rt = self.rt
        if rt.costs.failure_detection_s:
            yield ("sleep", rt.costs.ns("failure_detection_s"))
        warm = False
        if replacement is None:
            member = self.pool.take(failed)
            if member is not None:
                replacement = member.host_id
                warm = member.status is PreheatStatus.WARMED and member.position == failed
            else:
                replacement = rt.acquire_spare()
        report.replacement = replacement
        report.preheated = warm
        mig = f"r{next(self._ids)}"
        pairs = {failed: replacement}
        ctx = self._context(pairs, CCGMode.TWO_STAGE)
        ctx.src_leaves = False
        self.ctx[mig] = ctx
        if warm:
            ctx.joiner_workers[replacement] = {w.rank: w for w in rt.workers_on(replacement) if w.rank is not None}
        else:
            self._joiner_workers(ctx, replacement, failed)
        rt.trace.emit(self.id, "PHASE", name="recovery_begin", failed=failed, replacement=replacement,
                      path=report.path, preheated=warm)

        procs = []
        if not warm:
            procs.append(self.run_step(mig, "prepare", {replacement: {"op": "prepare"}},
                                       rt.costs.stage1_ns + rt.costs.sandbox_ns))
        if report.path == "redundancy":
            ctx.transfer_pairs = {}
            for r, peer in sorted(sources.items()):
                src_dev = rt.rank_device[peer]
                local = rt.placement.slot(r).local_device_index
                ctx.transfer_pairs.setdefault(rt.devices[src_dev].host_id, []).append(
                    (src_dev, f"{replacement}/{local}", r))
            cmds = {h: {"op": "transfer_send"} for h in ctx.transfer_pairs}
            cmds[replacement] = {"op": "transfer_recv", "pairs": len(sources)}
            procs.append(self.run_step(mig, "recover", cmds, rt.costs.transfer_ns()))
        else:
            hosts = ctx.new_placement.used_hosts()
            procs.append(self.run_step(mig, "recover", {h: {"op": "load", "iteration": resume_at} for h in hosts},
                                       rt.costs.load_ns()))
        results = yield from self.parallel(*procs)
        if any(r is None for r in results):
            rt.trace.emit(self.id, "PHASE", name="recovery_step_failed", mig=mig)

        adj_up = _hosts_of(e for p in ctx.plans.values() for e in p.stage2_establishes)
        yield from self.run_step(mig, "establish", {h: {"op": "establish"} for h in sorted((adj_up - {failed}) | {replacement})},
                                 rt.costs.stage2_ns)
        rt.switch(pairs, ctx.new_graphs)
        rt.iteration = resume_at
        report.recovered = True
        self.send(TRAINER, {"kind": "restart"})
        yield ("sleep", self.hop_ns)
        report.resumed_at_ns = rt.sim.now
        rt.trace.emit(self.id, "PHASE", name="recovery_done", failed=failed, replacement=replacement,
                      downtime_ns=report.downtime_ns, lost_iterations=report.lost_iterations)

    # --- whole-job restart (checkpoint-based baselines) -------------------

    def cold_restart(self, pairs: Mapping[str, str], *, save: bool, resume_from: str, failed: str | None = None) -> None:
        """Stop every process and restart the job from storage.

        ``resume_from`` is "current" (state saved at the freeze point) or
        "latest" (the most recent periodic checkpoint).
        """
        self.spawn(self._restart(dict(pairs), save, resume_from, failed))

    def fail_and_restart(self, failed: str, resume_from: str = "latest") -> None:
        rt = self.rt
        at, _ = self._fail_common(failed)
        try:
            target = self.resume_point(at)
        except NoCheckpoint:
            self._unrecoverable(failed, at)
            return
        rt.trace.emit(TRAINER, "FAILURE", host=failed, iteration=at, path="restart", lost_iterations=at - target)
        rt.trace.emit(TRAINER, "DOWNTIME_BEGIN", iteration=at, reason="failure")
        report = RecoveryReport(failed, "", "restart", rt.sim.now, lost_iterations=at - target)
        self.recoveries.append(report)
        spare = rt.acquire_spare()
        report.replacement = spare
        self.spawn(self._restart({failed: spare}, False, "latest", failed, report))

    def _restart(self, pairs: dict[str, str], save: bool, resume_from: str, failed: str | None,
                 report: RecoveryReport | None = None) -> Proc:
        rt = self.rt
        if failed is None:
            self.send(TRAINER, {"kind": "freeze"})
            yield ("wait", "frozen")
        elif rt.costs.failure_detection_s:
            yield ("sleep", rt.costs.ns("failure_detection_s"))
        rt.trace.emit(self.id, "PHASE", name="restart_begin", pairs=pairs, save=save, resume_from=resume_from)
        if save:
            yield ("sleep", rt.costs.save_ns())
            rt.checkpoint(free=False)
            rt.trace.emit(self.id, "PHASE", name="save_done", duration_ns=rt.costs.save_ns())
        if resume_from == "current":
            target = rt.iteration
            if target not in rt.store.snapshots:
                rt.checkpoint(free=True)
        else:
            target = rt.store.latest(rt.iteration)
        lost = rt.iteration - target
        rt.drop_all_groups("job stop")
        for leaver in pairs:
            if leaver not in rt.retired:
                rt.retire_host(leaver, "leave")
        for h in rt.placement.used_hosts():
            if h not in pairs:
                for w in rt.workers_on(h):
                    w.ledger.release_all("job stop")
        yield ("sleep", rt.costs.ns("job_restart_s"))
        rt.switch(pairs)
        hosts = rt.placement.used_hosts()
        rt.boot(hosts)
        yield from rt.full_setup(hosts)
        yield ("sleep", rt.costs.load_ns())
        rt.trace.emit(self.id, "PHASE", name="load_done", duration_ns=rt.costs.load_ns(), iteration=target)
        states = rt.store.get(target)
        for r, w in rt.active().items():
            w.state = states[r]
        rt.iteration = target
        rt.trace.emit(self.id, "PHASE", name="restart_done", resume_iteration=target, rolled_back=lost)
        if failed is None:
            self.send(TRAINER, {"kind": "resume"})
        else:
            self.send(TRAINER, {"kind": "restart"})
        yield ("sleep", self.hop_ns)
        if report is not None:
            report.resumed_at_ns = rt.sim.now
            report.recovered = True


def _hosts_of(edges: Iterable[Edge]) -> set[str]:
    out: set[str] = set()
    for e in edges:
        out.add(e.src.host_id)
        out.add(e.dst.host_id)
    return out
