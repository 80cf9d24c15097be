"""Single-threaded discrete-event engine on an integer nanosecond clock."""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

NS_PER_S = 1_000_000_000


class SimError(Exception):
    pass


class TimeTravel(SimError):
    pass


class UnknownNode(SimError):
    pass


class HorizonExceeded(SimError):
    pass


def seconds(value: float) -> int:
    """Seconds to integer nanoseconds, rounded to nearest."""
    return int(round(value * NS_PER_S))


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


class Plane(str, enum.Enum):
    CONTROL = "CONTROL"
    DATA = "DATA"


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    plane: Plane
    size_bytes: int = 0
    body: Any = None


@dataclass(order=True)
class Event:
    fire_at: int
    seq: int
    target: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


class Links(Protocol):
    control_plane_latency_ns: int
    data_plane_latency_ns: int
    data_plane_bandwidth_Bps: int


def transmission_ns(size_bytes: int, bandwidth_Bps: int) -> int:
    if size_bytes == 0:
        return 0
    if bandwidth_Bps <= 0:
        raise SimError("bandwidth must be positive to move bytes")
    return ceil_div(size_bytes * NS_PER_S, bandwidth_Bps)


def delivery_time(msg: Message, now: int, links: Links) -> int:
    if msg.src == msg.dst:
        return now
    if msg.plane is Plane.CONTROL:
        return now + links.control_plane_latency_ns
    return now + links.data_plane_latency_ns + transmission_ns(msg.size_bytes, links.data_plane_bandwidth_Bps)


class Node(Protocol):
    def step(self, sim: "Simulator", event: Event) -> None: ...


class Simulator:
    def __init__(self, links: Links | None = None, horizon_ns: int | None = None):
        self.now = 0
        self.links = links
        self.horizon_ns = horizon_ns
        self._queue: list[Event] = []
        self._seq = 0
        self._nodes: dict[str, Node] = {}
        self._hooks: list[Callable[[Event], None]] = []
        self.delivered = 0

    def register(self, node_id: str, node: Node) -> None:
        if node_id in self._nodes:
            raise SimError(f"node {node_id} already registered")
        self._nodes[node_id] = node

    def has_node(self, node_id: str) -> bool:
        return node_id in self._nodes

    def add_hook(self, hook: Callable[[Event], None]) -> None:
        self._hooks.append(hook)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def make_event(self, fire_at: int, target: str, payload: Any = None) -> Event:
        ev = Event(fire_at, self._seq, target, payload)
        self._seq += 1
        return ev

    def schedule(self, event: Event) -> Event:
        if event.fire_at < self.now:
            raise TimeTravel(f"event for {event.target} at {event.fire_at} < now {self.now}")
        heapq.heappush(self._queue, event)
        return event

    def at(self, fire_at: int, target: str, payload: Any = None) -> Event:
        return self.schedule(self.make_event(fire_at, target, payload))

    def after(self, delay_ns: int, target: str, payload: Any = None) -> Event:
        return self.at(self.now + delay_ns, target, payload)

    def send(self, msg: Message) -> Event:
        if msg.dst not in self._nodes:
            raise UnknownNode(msg.dst)
        if self.links is None:
            raise SimError("simulator has no link model")
        return self.at(delivery_time(msg, self.now, self.links), msg.dst, msg)

    def run_until_quiescent(self) -> int:
        while self._queue:
            ev = self._queue[0]
            if self.horizon_ns is not None and ev.fire_at > self.horizon_ns:
                raise HorizonExceeded(
                    f"{len(self._queue)} events pending past horizon {self.horizon_ns} ns"
                )
            heapq.heappop(self._queue)
            node = self._nodes.get(ev.target)
            if node is None:
                raise UnknownNode(ev.target)
            self.now = ev.fire_at
            for hook in self._hooks:
                hook(ev)
            node.step(self, ev)
            self.delivered += 1
        return self.now
