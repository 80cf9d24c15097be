from dataclasses import dataclass

import pytest

from livemig.simcore import (
    HorizonExceeded,
    Message,
    Plane,
    SimError,
    Simulator,
    TimeTravel,
    UnknownNode,
    ceil_div,
    delivery_time,
    seconds,
    transmission_ns,
)


@dataclass
class Links:
    control_plane_latency_ns: int = 1_000_000
    data_plane_latency_ns: int = 0
    data_plane_bandwidth_Bps: int = 1_000_000_000


class Recorder:
    def __init__(self):
        self.seen = []

    def step(self, sim, event):
        self.seen.append((sim.now, event.payload))


class Ticker:
    """Re-schedules itself every second until it has fired ``n`` times."""

    def __init__(self, n):
        self.left = n

    def step(self, sim, event):
        self.left -= 1
        if self.left:
            sim.after(seconds(1), "tick")


def test_seconds_rounds_to_nearest_ns():
    assert seconds(4.07) == 4_070_000_000
    assert seconds(0.1 + 0.2) == 300_000_000
    assert ceil_div(7, 2) == 4 and ceil_div(-7, 2) == -3


def test_transmission_is_ceiling_division():
    assert transmission_ns(0, 0) == 0
    assert transmission_ns(1, 3) == 333_333_334
    assert transmission_ns(2_000_000_000, 1_000_000_000) == 2_000_000_000
    with pytest.raises(SimError):
        transmission_ns(1, 0)


def test_delivery_planes():
    links = Links(data_plane_latency_ns=5)
    ctl = Message("a", "b", Plane.CONTROL, 10**9)
    data = Message("a", "b", Plane.DATA, 10**9)
    assert delivery_time(ctl, 100, links) == 100 + 1_000_000
    assert delivery_time(data, 100, links) == 100 + 5 + 1_000_000_000
    assert delivery_time(Message("a", "a", Plane.DATA, 10**9), 100, links) == 100


def test_self_message_chain_ends_at_ten_seconds():
    sim = Simulator(Links())
    sim.register("tick", Ticker(10))
    sim.at(seconds(1), "tick")
    assert sim.run_until_quiescent() == seconds(10)
    assert sim.delivered == 10


def test_ties_break_by_scheduling_order():
    sim = Simulator()
    rec = Recorder()
    sim.register("r", rec)
    for i in range(5):
        sim.at(7, "r", i)
    sim.at(3, "r", "early")
    sim.run_until_quiescent()
    assert [p for _, p in rec.seen] == ["early", 0, 1, 2, 3, 4]


def test_send_uses_link_model():
    sim = Simulator(Links())
    rec = Recorder()
    sim.register("b", rec)
    sim.send(Message("a", "b", Plane.DATA, 500_000_000, "x"))
    sim.run_until_quiescent()
    assert rec.seen[0][0] == 500_000_000


def test_errors():
    sim = Simulator()
    sim.register("r", Recorder())
    with pytest.raises(SimError):
        sim.register("r", Recorder())
    with pytest.raises(UnknownNode):
        sim.send(Message("a", "nobody", Plane.CONTROL))
    with pytest.raises(SimError):
        sim.send(Message("a", "r", Plane.CONTROL))  # no link model
    sim.at(10, "r")
    sim.run_until_quiescent()
    with pytest.raises(TimeTravel):
        sim.at(5, "r")


def test_horizon_reports_pending_events():
    sim = Simulator(horizon_ns=seconds(3))
    sim.register("tick", Ticker(10))
    sim.at(seconds(1), "tick")
    with pytest.raises(HorizonExceeded):
        sim.run_until_quiescent()
    assert sim.now == seconds(3) and sim.pending == 1


def test_hooks_see_nondecreasing_time():
    sim = Simulator()
    sim.register("r", Recorder())
    times = []
    sim.add_hook(lambda ev: times.append(ev.fire_at))
    for t in (9, 1, 5, 5, 2):
        sim.at(t, "r")
    sim.run_until_quiescent()
    assert times == sorted(times) == [1, 2, 5, 5, 9]
