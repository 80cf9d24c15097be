"""Hosts, communication groups and their ring graphs.

A group's ring is built the way a collective library lays it out on
homogeneous machines: every host chains its own devices in ascending local
index, and the host chains are stitched together in order of the smallest
group rank each host carries. Member replacement exploits that regularity:
a joiner host rebuilds only its own chain, and only the inter-host edges
touching the leaver are swapped.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence


class TopologyError(Exception):
    pass


class UnknownHost(TopologyError):
    pass


class DuplicateRank(TopologyError):
    pass


class InvalidMapping(TopologyError):
    pass


class StaleGraph(TopologyError):
    pass


class Purpose(str, enum.Enum):
    DP = "DP"
    TP = "TP"
    PP = "PP"
    TRANSFER = "TRANSFER"


class EdgeKind(str, enum.Enum):
    INTRA = "INTRA"
    INTER = "INTER"


@dataclass(frozen=True)
class HostSpec:
    host_id: str
    device_count: int = 8

    def __post_init__(self) -> None:
        if self.device_count < 1:
            raise TopologyError(f"host {self.host_id}: device_count must be >= 1")

    @property
    def devices(self) -> tuple[int, ...]:
        return tuple(range(self.device_count))


@dataclass(frozen=True)
class Participant:
    host_id: str
    local_device_index: int
    global_rank: int


@dataclass(frozen=True)
class GroupSpec:
    group_id: str
    purpose: Purpose
    participants: tuple[Participant, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "participants", tuple(self.participants))
        if not self.participants:
            raise TopologyError(f"group {self.group_id} has no participants")
        ranks = [p.global_rank for p in self.participants]
        if len(set(ranks)) != len(ranks):
            raise DuplicateRank(f"group {self.group_id}: duplicate ranks {sorted(ranks)}")
        if sorted(ranks) != list(range(len(ranks))):
            raise DuplicateRank(f"group {self.group_id}: ranks must be 0..{len(ranks) - 1}")
        slots = [(p.host_id, p.local_device_index) for p in self.participants]
        if len(set(slots)) != len(slots):
            raise DuplicateRank(f"group {self.group_id}: a device carries two ranks")
        object.__setattr__(
            self, "participants", tuple(sorted(self.participants, key=lambda p: p.global_rank))
        )

    @property
    def size(self) -> int:
        return len(self.participants)

    def hosts(self) -> set[str]:
        return {p.host_id for p in self.participants}

    def substitute(self, mapping: Mapping[str, str]) -> "GroupSpec":
        """Same group with leaver hosts swapped for joiners, ranks untouched."""
        return GroupSpec(
            self.group_id,
            self.purpose,
            tuple(
                Participant(mapping.get(p.host_id, p.host_id), p.local_device_index, p.global_rank)
                for p in self.participants
            ),
        )


@dataclass(frozen=True, order=True)
class Endpoint:
    rank: int
    host_id: str
    local_device_index: int


@dataclass(frozen=True, order=True)
class Edge:
    src: Endpoint
    dst: Endpoint
    kind: EdgeKind

    def touches_rank(self, ranks: Iterable[int]) -> bool:
        rs = set(ranks)
        return self.src.rank in rs or self.dst.rank in rs

    def as_tuple(self) -> tuple:
        return (self.src.rank, self.dst.rank, self.kind.value, self.src.host_id, self.dst.host_id)


@dataclass(frozen=True)
class CommGraph:
    group_id: str
    size: int
    edges: frozenset[Edge]

    def successors(self, rank: int) -> list[int]:
        return sorted(e.dst.rank for e in self.edges if e.src.rank == rank)

    def predecessors(self, rank: int) -> list[int]:
        return sorted(e.src.rank for e in self.edges if e.dst.rank == rank)

    def intra_edges(self) -> frozenset[Edge]:
        return frozenset(e for e in self.edges if e.kind is EdgeKind.INTRA)

    def inter_edges(self) -> frozenset[Edge]:
        return frozenset(e for e in self.edges if e.kind is EdgeKind.INTER)

    def incident(self, rank: int) -> list[Edge]:
        return sorted(e for e in self.edges if e.src.rank == rank or e.dst.rank == rank)

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "size": self.size,
            "edges": [list(e.as_tuple()) for e in sorted(self.edges)],
        }


@dataclass(frozen=True)
class ReplacementMapping:
    pairs: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        pairs = dict(self.pairs)
        joiners = list(pairs.values())
        if len(set(joiners)) != len(joiners):
            raise InvalidMapping("leaver->joiner mapping must be 1-to-1")
        if set(joiners) & set(pairs):
            raise InvalidMapping("a host cannot be both leaver and joiner")
        object.__setattr__(self, "pairs", pairs)

    @property
    def leavers(self) -> list[str]:
        return sorted(self.pairs)

    @property
    def joiners(self) -> list[str]:
        return sorted(self.pairs.values())

    def restricted_to(self, hosts: Iterable[str]) -> "ReplacementMapping":
        hs = set(hosts)
        return ReplacementMapping({k: v for k, v in self.pairs.items() if k in hs})

    def __bool__(self) -> bool:
        return bool(self.pairs)


@dataclass(frozen=True)
class ReplacementPlan:
    group_id: str
    stage1_actions: Mapping[str, tuple[Edge, ...]]
    stage2_teardowns: frozenset[Edge]
    stage2_establishes: frozenset[Edge]
    resulting_graph: CommGraph

    @property
    def empty(self) -> bool:
        return not (
            any(self.stage1_actions.values()) or self.stage2_teardowns or self.stage2_establishes
        )


def _host_index(hosts: Sequence[HostSpec]) -> dict[str, HostSpec]:
    index: dict[str, HostSpec] = {}
    for h in hosts:
        if h.host_id in index:
            raise TopologyError(f"duplicate host {h.host_id}")
        index[h.host_id] = h
    return index


def _check_placement(spec: GroupSpec, hosts: Mapping[str, HostSpec]) -> None:
    for p in spec.participants:
        host = hosts.get(p.host_id)
        if host is None:
            raise UnknownHost(f"group {spec.group_id}: rank {p.global_rank} on unknown host {p.host_id}")
        if not 0 <= p.local_device_index < host.device_count:
            raise UnknownHost(
                f"group {spec.group_id}: host {p.host_id} has no device {p.local_device_index}"
            )


def _endpoint(p: Participant) -> Endpoint:
    return Endpoint(p.global_rank, p.host_id, p.local_device_index)


def _kind(a: Participant, b: Participant) -> EdgeKind:
    return EdgeKind.INTRA if a.host_id == b.host_id else EdgeKind.INTER


def host_chains(spec: GroupSpec) -> list[list[Participant]]:
    """Per-host device chains, hosts ordered by their smallest rank."""
    by_host: dict[str, list[Participant]] = {}
    for p in spec.participants:
        by_host.setdefault(p.host_id, []).append(p)
    chains = [sorted(ps, key=lambda p: p.local_device_index) for ps in by_host.values()]
    chains.sort(key=lambda c: min(p.global_rank for p in c))
    return chains


def local_chain_edges(members: Sequence[Participant], whole_group: bool) -> list[Edge]:
    """INTRA edges a host can derive alone from the ranks it was assigned.

    When the host holds the entire group the ring closes on itself, so the
    tail->head edge is also local.
    """
    chain = sorted(members, key=lambda p: p.local_device_index)
    edges = [
        Edge(_endpoint(a), _endpoint(b), EdgeKind.INTRA) for a, b in zip(chain, chain[1:])
    ]
    if whole_group and len(chain) > 1:
        edges.append(Edge(_endpoint(chain[-1]), _endpoint(chain[0]), EdgeKind.INTRA))
    return edges


def build_comm_graph(spec: GroupSpec, hosts: Sequence[HostSpec]) -> CommGraph:
    _check_placement(spec, _host_index(hosts))
    if spec.size == 1:
        return CommGraph(spec.group_id, 1, frozenset())
    order = [p for chain in host_chains(spec) for p in chain]
    edges = set()
    for i, a in enumerate(order):
        b = order[(i + 1) % len(order)]
        edges.add(Edge(_endpoint(a), _endpoint(b), _kind(a, b)))
    return CommGraph(spec.group_id, spec.size, frozenset(edges))


def graphs_equal(a: CommGraph, b: CommGraph) -> bool:
    return a.size == b.size and a.edges == b.edges


def replace_members(
    graph: CommGraph,
    spec: GroupSpec,
    mapping: ReplacementMapping,
    hosts: Sequence[HostSpec],
) -> ReplacementPlan:
    """Swap leaver hosts for joiners without rebuilding the untouched part.

    `hosts` must include the joiner hosts. The stage-2 sets are the INTER
    edges incident to leaver ranks, before and after re-targeting.
    """
    index = _host_index(hosts)
    _check_placement(spec, index)
    if not graphs_equal(graph, build_comm_graph(spec, hosts)):
        raise StaleGraph(f"graph for {spec.group_id} does not match its group spec")

    local = mapping.restricted_to(spec.hosts())
    for joiner in local.pairs.values():
        if joiner in spec.hosts():
            raise InvalidMapping(f"joiner {joiner} already participates in {spec.group_id}")
        if joiner not in index:
            raise UnknownHost(f"joiner host {joiner} not provided")
    if not local:
        return ReplacementPlan(spec.group_id, {}, frozenset(), frozenset(), graph)

    leaver_ranks = {p.global_rank for p in spec.participants if p.host_id in local.pairs}
    moved = spec.substitute(local.pairs)
    _check_placement(moved, index)
    new_ep = {p.global_rank: _endpoint(p) for p in moved.participants}

    stage1: dict[str, tuple[Edge, ...]] = {}
    for leaver, joiner in sorted(local.pairs.items()):
        members = [p for p in moved.participants if p.host_id == joiner]
        stage1[joiner] = tuple(local_chain_edges(members, whole_group=len(members) == spec.size))

    teardowns = frozenset(
        e for e in graph.edges if e.kind is EdgeKind.INTER and e.touches_rank(leaver_ranks)
    )
    establishes = frozenset(
        Edge(new_ep[e.src.rank], new_ep[e.dst.rank], e.kind) for e in teardowns
    )
    kept = {e for e in graph.edges if not e.touches_rank(leaver_ranks)}
    joined = kept | establishes | {e for es in stage1.values() for e in es}
    result = CommGraph(spec.group_id, graph.size, frozenset(joined))
    return ReplacementPlan(spec.group_id, stage1, teardowns, establishes, result)
