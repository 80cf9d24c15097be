"""Drives per-device iteration programs against each other.

The fabric resolves collectives and point-to-point ops once every party has
posted the matching op. In sandbox mode only the joiner's own devices are
present; ops that reach outside are answered from the recording, barriers
return immediately, and intra-host ops still run for real over the stage-1
connections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from ..job import Placement
from ..topology import CommGraph, Edge
from .model import WORLD, CommOp, ModelState, OpKind, Program, wsum
from .records import RecordedComms, RecordedOp, decode_values, encode_values


class FabricError(Exception):
    pass


class MissingConnection(FabricError):
    pass


class ReplayMismatch(FabricError):
    pass


class Deadlock(FabricError):
    pass


class Connections:
    """Established edges per group, keyed by exact endpoint placement."""

    def __init__(self) -> None:
        self.edges: dict[str, set[Edge]] = {}

    def establish(self, group_id: str, edges) -> None:
        self.edges.setdefault(group_id, set()).update(edges)

    def teardown(self, group_id: str, edges) -> None:
        self.edges.get(group_id, set()).difference_update(edges)

    def drop_group(self, group_id: str) -> set[Edge]:
        return self.edges.pop(group_id, set())

    def established(self, group_id: str) -> frozenset[Edge]:
        return frozenset(self.edges.get(group_id, ()))

    def require(self, group_id: str, edges) -> None:
        have = self.edges.get(group_id, set())
        missing = [e for e in edges if e not in have]
        if missing:
            m = missing[0]
            raise MissingConnection(
                f"{group_id}: {len(missing)} edge(s) not established, e.g. "
                f"{m.src.rank}@{m.src.host_id}->{m.dst.rank}@{m.dst.host_id} ({m.kind.value})"
            )


@dataclass
class GroupIndex:
    """Job ranks of every group in group-rank order, plus each rank's host."""

    members: dict[str, list[int]]
    host_of: dict[int, str]

    @classmethod
    def from_placement(cls, placement: Placement) -> "GroupIndex":
        members: dict[str, list[int]] = {}
        job = placement.job
        for r in range(job.world_size):
            for gid in job.groups_of(r):
                members.setdefault(gid, []).append(r)
        for gid, ranks in members.items():
            ranks.sort(key=lambda r: placement.group_rank(gid, r))
        members[WORLD] = list(range(job.world_size))
        host_of = {r: placement.slot(r).host_id for r in range(job.world_size)}
        return cls(members, host_of)

    def peer(self, op: CommOp) -> int:
        return self.members[op.group_id][op.peer]

    def crosses_host(self, rank: int, op: CommOp) -> bool:
        home = self.host_of[rank]
        if op.kind in (OpKind.SEND, OpKind.RECV):
            return self.host_of[self.peer(op)] != home
        return any(self.host_of[r] != home for r in self.members[op.group_id])


@dataclass
class Recorder:
    boundary_only: bool = True
    zero_gradients: bool = True
    out: dict[int, RecordedComms] = field(default_factory=dict)

    def capture(self, index: GroupIndex, rank: int, op: CommOp, result: tuple[int, ...]) -> None:
        if op.kind is OpKind.BARRIER:
            return
        if self.boundary_only and not index.crosses_host(rank, op):
            return
        values = op.values if op.kind is OpKind.SEND else result
        if op.gradient and self.zero_gradients:
            values = (0,) * len(values)
        rec = self.out.setdefault(rank, RecordedComms(boundary_only=self.boundary_only))
        rec.add(op.group_id, op.seq, RecordedOp(op.kind, op.size_bytes, encode_values(values)))


def _replay(rec: RecordedComms | None, rank: int, op: CommOp) -> tuple[int, ...]:
    entry = None if rec is None else rec.entries.get((op.group_id, op.seq))
    if entry is None:
        raise ReplayMismatch(f"rank {rank}: no recording for {op.kind.value} {op.group_id}#{op.seq}")
    if entry.kind is not op.kind or entry.size_bytes != op.size_bytes:
        raise ReplayMismatch(
            f"rank {rank}: {op.group_id}#{op.seq} recorded as {entry.kind.value}/{entry.size_bytes}B, "
            f"program issued {op.kind.value}/{op.size_bytes}B"
        )
    if op.kind is OpKind.SEND:
        return ()
    return decode_values(entry.payload)


def drive(
    programs: Mapping[int, Program],
    index: GroupIndex,
    graphs: Mapping[str, CommGraph],
    connections: Connections,
    *,
    sandbox: bool = False,
    recordings: Mapping[int, RecordedComms] | None = None,
    recorder: Recorder | None = None,
) -> dict[int, ModelState]:
    """Run programs to completion and return each rank's resulting state."""
    present = set(programs)
    gens = dict(programs)
    pending: dict[int, CommOp] = {}
    results: dict[int, ModelState] = {}

    def advance(rank: int, value) -> None:
        try:
            pending[rank] = gens[rank].send(value)
        except StopIteration as stop:
            pending.pop(rank, None)
            results[rank] = stop.value

    def resolve(rank: int, op: CommOp, value: tuple[int, ...]) -> None:
        if recorder is not None:
            recorder.capture(index, rank, op, value)
        advance(rank, value)

    for rank in sorted(gens):
        advance(rank, None)

    while pending:
        progressed = False
        for rank in sorted(pending):
            op = pending.get(rank)
            if op is None:
                continue
            if op.kind is OpKind.BARRIER:
                if sandbox:
                    resolve(rank, op, ())
                    progressed = True
                elif len(pending) == len(present) and all(p.kind is OpKind.BARRIER for p in pending.values()):
                    for r in sorted(pending):
                        resolve(r, pending[r], ())
                    progressed = True
                continue

            if op.kind is OpKind.ALLREDUCE:
                group = index.members[op.group_id]
                if sandbox and not present.issuperset(group):
                    resolve(rank, op, _replay(recordings.get(rank) if recordings else None, rank, op))
                    progressed = True
                    continue
                posted = [pending.get(r) for r in group]
                if all(p is not None and p.kind is OpKind.ALLREDUCE and p.group_id == op.group_id for p in posted):
                    if len({p.size_bytes for p in posted}) != 1:
                        raise FabricError(f"{op.group_id}: mismatched all-reduce sizes")
                    _require(graphs, connections, op.group_id, set(group), sandbox, index)
                    total = tuple(wsum(col) for col in zip(*(p.values for p in posted)))
                    for r, p in zip(group, posted):
                        resolve(r, p, total)
                    progressed = True
                continue

            peer = index.peer(op)
            if sandbox and peer not in present:
                resolve(rank, op, _replay(recordings.get(rank) if recordings else None, rank, op))
                progressed = True
                continue
            other = pending.get(peer)
            want = OpKind.RECV if op.kind is OpKind.SEND else OpKind.SEND
            if (
                other is not None
                and other.kind is want
                and other.group_id == op.group_id
                and index.peer(other) == rank
            ):
                _require(graphs, connections, op.group_id, {rank, peer}, sandbox, index)
                send, recv = (op, other) if op.kind is OpKind.SEND else (other, op)
                s_rank, r_rank = (rank, peer) if op.kind is OpKind.SEND else (peer, rank)
                resolve(s_rank, send, ())
                resolve(r_rank, recv, send.values)
                progressed = True
        if not progressed:
            stuck = ", ".join(f"{r}:{pending[r].kind.value}@{pending[r].group_id}" for r in sorted(pending))
            raise Deadlock(f"no op can make progress ({stuck})")
    return results


def _require(
    graphs: Mapping[str, CommGraph],
    connections: Connections,
    group_id: str,
    ranks: set[int],
    sandbox: bool,
    index: GroupIndex,
) -> None:
    graph = graphs[group_id]
    if not sandbox:
        connections.require(group_id, graph.edges)
        return
    local = {index.members[group_id].index(r) for r in ranks}
    connections.require(
        group_id, [e for e in graph.edges if e.src.rank in local and e.dst.rank in local]
    )
