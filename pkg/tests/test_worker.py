import pytest

import oracles
from livemig.costmodel import GB, CostTable
from livemig.job import Coords, JobConfig, Placement
from livemig.topology import HostSpec, build_comm_graph
from livemig.worker import (
    AlreadyRecorded,
    CheckpointStore,
    Connections,
    GroupIndex,
    LazyInitRegistry,
    MemoryLedger,
    MemoryOverflow,
    MissingConnection,
    MissingSnapshot,
    Mode,
    ModelState,
    RedundancyUnavailable,
    ReplayMismatch,
    Tag,
    WireError,
    Worker,
    load_checkpoint,
    redundancy_source,
    run_iteration,
    save_checkpoint,
    transfer_state,
)
from livemig.worker.records import (
    decode_recording,
    decode_snapshot,
    decode_state,
    encode_recording,
    encode_snapshot,
    encode_state,
)

COSTS = CostTable()


class Cluster:
    """A job on host-major placement with every group connected."""

    def __init__(self, job, dph=2, connect=True):
        n = -(-job.world_size // dph)
        self.job = job
        self.hosts = [HostSpec(f"h{i}", dph) for i in range(n)]
        self.placement = Placement(job, self.hosts)
        self.index = GroupIndex.from_placement(self.placement)
        self.graphs = {g: build_comm_graph(s, self.hosts) for g, s in self.placement.group_specs().items()}
        self.conn = Connections()
        if connect:
            for g, graph in self.graphs.items():
                self.conn.establish(g, graph.edges)
        self.workers = {}
        for r in range(job.world_size):
            slot = self.placement.slot(r)
            w = Worker.create(slot.host_id, slot.local_device_index, COSTS)
            w.rank = r
            w.state = ModelState.initial(job, job.coords(r))
            self.workers[r] = w

    def step(self, mode=Mode.NORMAL, workers=None, **kw):
        return run_iteration(workers or self.workers, mode, self.job, self.index, self.graphs, self.conn, COSTS, **kw)


def as_tuples(workers):
    return {r: (w.state.params, w.state.optimizer, w.state.iteration) for r, w in workers.items()}


@pytest.mark.parametrize("shape", [(1, 1, 1), (2, 1, 1), (1, 3, 1), (1, 1, 3), (2, 2, 2), (2, 3, 2)])
@pytest.mark.parametrize("do", [False, True])
def test_iterations_match_reference(shape, do):
    tp, pp, dp = shape
    job = JobConfig(tp, pp, dp, distributed_optimizer=do, params_per_device=5, seed=11)
    c = Cluster(job)
    c.step(Mode.RECORD)
    for _ in range(3):
        c.step()
    assert as_tuples(c.workers) == oracles.reference_run(tp, pp, dp, 5, 4, 11, do)


def test_record_only_once_and_only_at_zero():
    c = Cluster(JobConfig(2, 2, 1))
    res = c.step(Mode.RECORD)
    assert set(res.recordings) == set(c.workers)
    with pytest.raises(AlreadyRecorded):
        c.step(Mode.RECORD)


def test_recording_holds_boundary_traffic_only():
    job = JobConfig(2, 2, 2, params_per_device=3)
    c = Cluster(job, dph=2)
    rec = c.step(Mode.RECORD).recordings
    # With dph=2 each host holds a TP pair, so TP all-reduces never cross hosts.
    for r in rec.values():
        assert all(not gid.startswith("tp.") for gid, _ in r.entries)
        assert r.sealed and r.recorded_at_iteration == 0


def test_sandbox_warms_without_touching_state():
    job = JobConfig(2, 2, 2, params_per_device=3)
    c = Cluster(job)
    recs = c.step(Mode.RECORD).recordings
    c.step()
    before = as_tuples(c.workers)
    fresh = {r: Worker.create(w.host_id, w.local_device_index, COSTS) for r, w in c.workers.items()
             if w.host_id == "h1"}
    res = c.step(Mode.SANDBOX, workers=fresh, recordings=recs)
    assert all(w.lazy.warm for w in fresh.values())
    assert all(w.state is None for w in fresh.values())
    assert res.max_lazy_ns == COSTS.lazy_ns
    assert as_tuples(c.workers) == before


def test_sandbox_with_damaged_recording_raises():
    job = JobConfig(2, 2, 2)
    c = Cluster(job)
    recs = c.step(Mode.RECORD).recordings
    part = {r: w for r, w in c.workers.items() if w.host_id == "h1"}
    broken = {r: type(recs[r])() for r in part}
    with pytest.raises(ReplayMismatch):
        c.step(Mode.SANDBOX, workers=part, recordings=broken)


def test_missing_connection_blocks_collective():
    job = JobConfig(1, 1, 2)
    c = Cluster(job, dph=1, connect=False)
    with pytest.raises(MissingConnection):
        c.step()


def test_lazy_charged_once():
    job = JobConfig(1, 1, 1)
    c = Cluster(job)
    first = c.step(Mode.RECORD)
    second = c.step()
    assert first.wall_ns == COSTS.iteration_ns + COSTS.lazy_ns
    assert second.wall_ns == COSTS.iteration_ns


def test_lazy_registry_split_keeps_total():
    reg = LazyInitRegistry.split_evenly(37.2)
    assert reg.pending_ns == 37_200_000_000
    assert reg.trigger_all() == 37_200_000_000 and reg.warm and reg.pending_ns == 0
    reg.reset()
    assert not reg.warm


def test_ledger_limits_and_peak():
    events = []
    led = MemoryLedger("d", limit=10, hook=lambda *a: events.append(a[0]))
    led.allocate(Tag.PARAMS, 6)
    led.allocate(Tag.GROUP_CHANNEL, 4)
    with pytest.raises(MemoryOverflow):
        led.allocate(Tag.ACTIVATIONS, 1)
    assert led.release(Tag.GROUP_CHANNEL) == 4
    with pytest.raises(ValueError):
        led.release(Tag.PARAMS, 7)
    assert led.peak_observed == 10 and led.used == 6
    assert events == ["ALLOC", "ALLOC", "FREE"]
    assert led.snapshot() == {"PARAMS": 6}


def test_training_buffers_respect_distributed_optimizer():
    job = JobConfig(1, 1, 4, distributed_optimizer=True)
    w = Worker.create("h", 0, COSTS)
    w.allocate_training_buffers(job, COSTS)
    m = COSTS.memory
    assert w.ledger.used == m.params_bytes + m.gradient_bytes + m.activation_bytes + m.optimizer_bytes // 4


def test_transfer_repurposes_gradient_buffer():
    job = JobConfig(1, 1, 1)
    src = Worker.create("a", 0, COSTS)
    dst = Worker.create("b", 0, COSTS)
    for w in (src, dst):
        w.allocate_training_buffers(job, COSTS)
    src.rank, src.state = 0, ModelState.initial(job, job.coords(0))
    peak_before = (src.ledger.peak_observed, dst.ledger.peak_observed)
    assert transfer_state(src, dst, COSTS) == COSTS.transfer_ns()
    assert dst.state == src.state and dst.rank == 0
    # The channel lives inside the released gradient buffer: no new peak on either side.
    assert (src.ledger.peak_observed, dst.ledger.peak_observed) == peak_before
    assert src.ledger.allocations[Tag.GRADIENT_BUFFER] == 0
    assert dst.ledger.allocations[Tag.GRADIENT_BUFFER] == COSTS.memory.gradient_bytes
    assert src.ledger.allocations[Tag.TRANSFER_CHANNEL] == dst.ledger.allocations[Tag.TRANSFER_CHANNEL] == 0


def test_transfer_needs_room_in_gradient_buffer():
    costs = COSTS.replace(memory=type(COSTS.memory)(gradient_bytes=GB // 2))
    job = JobConfig(1, 1, 1)
    src, dst = Worker.create("a", 0, costs), Worker.create("b", 0, costs)
    for w in (src, dst):
        w.allocate_training_buffers(job, costs)
    src.state = ModelState.initial(job, job.coords(0))
    with pytest.raises(ValueError):
        transfer_state(src, dst, costs)


def test_checkpoint_roundtrip_and_replay():
    job = JobConfig(2, 1, 2, params_per_device=4)
    c = Cluster(job)
    store = CheckpointStore()
    c.step(Mode.RECORD)
    c.step()
    save_checkpoint(c.workers, store, COSTS)
    c.step()
    c.step()
    final = as_tuples(c.workers)
    assert store.latest() == 2
    load_checkpoint(store, 2, c.workers, COSTS)
    c.step()
    c.step()
    assert as_tuples(c.workers) == final
    with pytest.raises(MissingSnapshot):
        store.get(3)
    with pytest.raises(MissingSnapshot):
        store.latest(1)


def test_wire_roundtrips():
    job = JobConfig(2, 2, 2, distributed_optimizer=True, params_per_device=3)
    s = ModelState.initial(job, Coords(1, 1, 1))
    assert decode_state(encode_state(s)) == s
    assert decode_snapshot(encode_snapshot(7, {3: s})) == (7, {3: s})
    c = Cluster(job)
    rec = c.step(Mode.RECORD).recordings[2]
    rank, back = decode_recording(encode_recording(2, rec))
    assert rank == 2 and back.entries == rec.entries and back.sealed


def test_wire_errors():
    blob = encode_snapshot(1, {})
    with pytest.raises(WireError):
        decode_snapshot(b"XXXX" + blob[4:])
    with pytest.raises(WireError):
        decode_snapshot(blob[:-1])
    with pytest.raises(WireError):
        decode_snapshot(blob + b"\0")
    with pytest.raises(WireError):
        decode_recording(blob)


def test_redundancy_source():
    job = JobConfig(1, 1, 3)
    assert redundancy_source(job, 0, [0]) == 1
    assert redundancy_source(job, 0, [0, 1]) == 2
    with pytest.raises(RedundancyUnavailable):
        redundancy_source(job, 0, [0, 1, 2])
    with pytest.raises(RedundancyUnavailable):
        redundancy_source(JobConfig(1, 1, 3, distributed_optimizer=True), 0, [0])
