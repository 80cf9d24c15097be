"""Property tests for the invariants the simulator promises."""

import dataclasses

from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from livemig.costmodel import CostTable, default_table, live_freeze_ns
from livemig.harness import check_trace, run_scenario, scenario_from_dict
from livemig.job import JobConfig
from livemig.topology import (
    EdgeKind,
    GroupSpec,
    HostSpec,
    Participant,
    Purpose,
    ReplacementMapping,
    build_comm_graph,
    graphs_equal,
    replace_members,
)
from livemig.worker import CheckpointStore, load_checkpoint, save_checkpoint

from test_worker import COSTS, Cluster, as_tuples

# --- topology -------------------------------------------------------------------


@st.composite
def topology_cases(draw):
    n_hosts = draw(st.integers(1, 6))
    dph = draw(st.integers(1, 6))
    hosts = [HostSpec(f"h{i}", dph) for i in range(n_hosts)]
    slots = [(h.host_id, d) for h in hosts for d in range(dph)]
    members = draw(st.lists(st.sampled_from(slots), min_size=1, max_size=len(slots), unique=True))
    ranks = draw(st.permutations(range(len(members))))
    spec = GroupSpec("g", draw(st.sampled_from(list(Purpose))),
                     tuple(Participant(h, d, r) for (h, d), r in zip(members, ranks)))
    leavers = draw(st.lists(st.sampled_from([h.host_id for h in hosts]), max_size=3, unique=True))
    mapping = ReplacementMapping({h: f"j{i}" for i, h in enumerate(leavers)})
    joiners = [HostSpec(j, dph) for j in mapping.joiners]
    return hosts, joiners, spec, mapping


@given(topology_cases())
def test_replacement_equals_rebuild(case):
    hosts, joiners, spec, mapping = case
    plan = replace_members(build_comm_graph(spec, hosts), spec, mapping, hosts + joiners)
    moved = spec.substitute(mapping.restricted_to(spec.hosts()).pairs)
    assert graphs_equal(plan.resulting_graph, build_comm_graph(moved, hosts + joiners))


@given(topology_cases())
def test_stages_are_confined(case):
    hosts, joiners, spec, mapping = case
    plan = replace_members(build_comm_graph(spec, hosts), spec, mapping, hosts + joiners)
    for joiner, edges in plan.stage1_actions.items():
        assert joiner in mapping.joiners
        # Stage 1 only touches the joiner's own devices.
        assert all(e.kind is EdgeKind.INTRA and e.src.host_id == e.dst.host_id == joiner for e in edges)
    assert all(e.kind is EdgeKind.INTER for e in plan.stage2_teardowns | plan.stage2_establishes)
    leavers = set(mapping.leavers)
    assert all(e.src.host_id in leavers or e.dst.host_id in leavers for e in plan.stage2_teardowns)
    assert len(plan.stage2_teardowns) == len(plan.stage2_establishes)


@given(topology_cases())
def test_untouched_edges_survive(case):
    hosts, joiners, spec, mapping = case
    graph = build_comm_graph(spec, hosts)
    plan = replace_members(graph, spec, mapping, hosts + joiners)
    leavers = set(mapping.leavers)
    kept = {e for e in graph.edges if e.src.host_id not in leavers and e.dst.host_id not in leavers}
    assert kept <= plan.resulting_graph.edges


@given(topology_cases())
def test_build_is_deterministic_and_a_ring(case):
    hosts, _, spec, _ = case
    g = build_comm_graph(spec, hosts)
    assert g == build_comm_graph(spec, list(reversed(hosts)))
    assert oracles.graph_tuples(g) == oracles.ring_edges(
        [(p.global_rank, p.host_id, p.local_device_index) for p in spec.participants])
    if spec.size > 1:
        assert len(g.edges) == spec.size
        assert all(len(g.successors(r)) == 1 for r in range(spec.size))


# --- cost model -------------------------------------------------------------------


@given(st.sampled_from(["teardown_s", "inter_establish_s", "control_plane_latency_s"]),
       st.floats(0.001, 100.0))
def test_freeze_grows_with_its_terms(name, extra):
    base = default_table()
    bigger = dataclasses.replace(base, **{name: getattr(base, name) + extra})
    assert live_freeze_ns(bigger) > live_freeze_ns(base)


@given(st.integers(10**8, 10**11), st.integers(10**8, 10**11))
def test_transfer_shrinks_with_bandwidth(lo, hi):
    lo, hi = sorted((lo, hi))
    t = CostTable()
    assert t.replace(data_plane_bandwidth_Bps=hi).transfer_ns() <= t.replace(data_plane_bandwidth_Bps=lo).transfer_ns()


@given(st.booleans(), st.floats(0.0, 5.0))
def test_freeze_matches_oracle(flag, teardown):
    t = default_table(flag).replace(teardown_s=teardown)
    want = oracles.live_freeze_expected_ns(t.state_bytes_per_device, t.data_plane_bandwidth_Bps, flag,
                                           teardown_ns=t.ns("teardown_s"))
    assert live_freeze_ns(t) == want


# --- worker -----------------------------------------------------------------------


@given(st.sampled_from([(1, 1, 2), (2, 1, 2), (1, 2, 2), (2, 2, 1)]), st.booleans(),
       st.integers(0, 3), st.integers(1, 3), st.integers(0, 2**32))
@settings(max_examples=30)
def test_checkpoint_replay(shape, do, before, after, seed):
    tp, pp, dp = shape
    c = Cluster(JobConfig(tp, pp, dp, distributed_optimizer=do, params_per_device=3, seed=seed))
    store = CheckpointStore()
    for _ in range(before):
        c.step()
    save_checkpoint(c.workers, store, COSTS)
    for _ in range(after):
        c.step()
    final = as_tuples(c.workers)
    load_checkpoint(store, before, c.workers, COSTS)
    for _ in range(after):
        c.step()
    assert as_tuples(c.workers) == final


# --- end-to-end runs ---------------------------------------------------------------


@st.composite
def small_migrations(draw, strategies=("TRAINMOVER", "CCG_SEPARATE", "CCG_OVERLAP", "NAIVE_LIVE")):
    tp, pp, dp = draw(st.sampled_from([1, 2])), draw(st.sampled_from([1, 2])), draw(st.sampled_from([1, 2, 3]))
    dph = draw(st.sampled_from([1, 2, 4]))
    hosts = -(-(tp * pp * dp) // dph)
    leavers = draw(st.lists(st.sampled_from([f"h{i}" for i in range(hosts)]), min_size=1, max_size=2, unique=True))
    at = draw(st.integers(1, 4))
    return {
        "name": "prop",
        "cluster": {"hosts": hosts, "devices_per_host": dph},
        "job": {"tp": tp, "pp": pp, "dp": dp, "distributed_optimizer": draw(st.booleans()),
                "total_iterations": at + 12, "params_per_device": draw(st.integers(1, 4)),
                "seed": draw(st.integers(0, 2**32))},
        "events": [{"migrate": {"hosts": leavers, "at_iter": at}}],
        "strategy": draw(st.sampled_from(strategies)),
    }


@given(small_migrations())
@settings(max_examples=25)
def test_migration_is_transparent(data):
    res = run_scenario(scenario_from_dict(data))
    j = data["job"]
    ref = oracles.reference_run(j["tp"], j["pp"], j["dp"], j["params_per_device"], j["total_iterations"],
                                j["seed"], j["distributed_optimizer"])
    assert res.summary["status"] == "ok"
    assert {r: (s.params, s.optimizer, s.iteration) for r, s in res.final_states.items()} == ref
    check_trace(res.trace.records, res.summary)


@given(small_migrations(strategies=("TRAINMOVER",)))
@settings(max_examples=15)
def test_trainmover_adds_no_memory(data):
    s = scenario_from_dict(data)
    assert run_scenario(s).summary["rank_peak_bytes"] == run_scenario(s.without_events()).summary["rank_peak_bytes"]


@given(small_migrations())
@settings(max_examples=10)
def test_runs_are_reproducible(data):
    s = scenario_from_dict(data)
    a, b = run_scenario(s), run_scenario(s)
    assert a.digest == b.digest
    assert a.summary == b.summary


def test_restart_grows_with_cluster_size():
    """Live downtime stays flat across 3..8 hosts while save-and-restart grows."""
    from test_acceptance import scale_scenario

    live = [run_scenario(scale_scenario(h, 1)).metrics.downtime_ns for h in range(3, 9)]
    cold = [run_scenario(scale_scenario(h, 1).with_strategy("SAVE_RESTART")).metrics.downtime_ns
            for h in range(3, 9)]
    assert (max(live) - min(live)) / min(live) < 0.05
    assert all(b > a for a, b in zip(cold, cold[1:])), cold
