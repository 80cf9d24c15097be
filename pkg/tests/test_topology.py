import pytest

import oracles
from livemig.topology import (
    DuplicateRank,
    Edge,
    EdgeKind,
    GroupSpec,
    HostSpec,
    InvalidMapping,
    Participant,
    Purpose,
    ReplacementMapping,
    StaleGraph,
    TopologyError,
    UnknownHost,
    build_comm_graph,
    graphs_equal,
    replace_members,
)


def hosts(n, d=4):
    return [HostSpec(f"h{i}", d) for i in range(n)]


def spec(members, gid="g", purpose=Purpose.DP):
    return GroupSpec(gid, purpose, tuple(Participant(h, d, r) for r, (h, d) in enumerate(members)))


def test_two_hosts_two_devices_ring():
    s = spec([("h0", 0), ("h0", 1), ("h1", 0), ("h1", 1)])
    g = build_comm_graph(s, hosts(2))
    assert {e.as_tuple()[:3] for e in g.edges} == {
        (0, 1, "INTRA"),
        (1, 2, "INTER"),
        (2, 3, "INTRA"),
        (3, 0, "INTER"),
    }
    assert len(g.intra_edges()) == 2 and len(g.inter_edges()) == 2


def test_single_member_group_has_no_edges():
    g = build_comm_graph(spec([("h0", 3)]), hosts(1))
    assert g.size == 1 and g.edges == frozenset()


def test_single_host_ring_closes_locally():
    g = build_comm_graph(spec([("h0", 2), ("h0", 0), ("h0", 1)]), hosts(1))
    # Devices are chained by local index regardless of rank order.
    assert oracles.graph_tuples(g) == oracles.ring_edges([(0, "h0", 2), (1, "h0", 0), (2, "h0", 1)])
    assert all(e.kind is EdgeKind.INTRA for e in g.edges)


def test_hosts_ordered_by_smallest_rank():
    # h1 carries rank 0, so its chain comes first.
    s = spec([("h1", 0), ("h0", 0), ("h0", 1), ("h1", 1)])
    g = build_comm_graph(s, hosts(2))
    assert g.successors(0) == [3]
    assert g.successors(3) == [1]


def test_graphs_equal_reflexive_and_kind_sensitive():
    g = build_comm_graph(spec([("h0", 0), ("h0", 1), ("h0", 2), ("h0", 3)]), hosts(1))
    assert graphs_equal(g, g)
    e = sorted(g.edges)[0]
    retagged = type(g)(g.group_id, g.size, (g.edges - {e}) | {Edge(e.src, e.dst, EdgeKind.INTER)})
    assert not graphs_equal(g, retagged)


def test_build_is_deterministic():
    s = spec([("h2", 1), ("h0", 0), ("h1", 3), ("h0", 2)])
    assert build_comm_graph(s, hosts(3)) == build_comm_graph(s, hosts(3))


def test_unknown_host_and_device():
    with pytest.raises(UnknownHost):
        build_comm_graph(spec([("h0", 0), ("hx", 0)]), hosts(1))
    with pytest.raises(UnknownHost):
        build_comm_graph(spec([("h0", 0), ("h0", 9)]), hosts(1))


def test_duplicate_ranks_and_slots_rejected():
    with pytest.raises(DuplicateRank):
        GroupSpec("g", Purpose.TP, (Participant("h0", 0, 0), Participant("h0", 1, 0)))
    with pytest.raises(DuplicateRank):
        GroupSpec("g", Purpose.TP, (Participant("h0", 0, 0), Participant("h0", 0, 1)))
    with pytest.raises(DuplicateRank):
        GroupSpec("g", Purpose.TP, (Participant("h0", 0, 0), Participant("h0", 1, 2)))
    with pytest.raises(TopologyError):
        HostSpec("h0", 0)


def test_mapping_validation():
    with pytest.raises(InvalidMapping):
        ReplacementMapping({"h0": "j", "h1": "j"})
    with pytest.raises(InvalidMapping):
        ReplacementMapping({"h0": "h1", "h1": "j"})
    m = ReplacementMapping({"h1": "j1", "h0": "j0"})
    assert m.leavers == ["h0", "h1"] and m.joiners == ["j0", "j1"]
    assert not ReplacementMapping()


def test_replace_one_host_in_three():
    s = spec([("h0", 0), ("h0", 1), ("h1", 0), ("h1", 1), ("h2", 0), ("h2", 1)])
    hs = hosts(3, 2) + [HostSpec("j", 2)]
    g = build_comm_graph(s, hs)
    plan = replace_members(g, s, ReplacementMapping({"h1": "j"}), hs)
    # Stage 1: the joiner builds its own chain. Stage 2: the two INTER edges into and out of h1.
    assert {e.as_tuple() for e in plan.stage1_actions["j"]} == {(2, 3, "INTRA", "j", "j")}
    assert {e.as_tuple() for e in plan.stage2_teardowns} == {(1, 2, "INTER", "h0", "h1"), (3, 4, "INTER", "h1", "h2")}
    assert {e.as_tuple() for e in plan.stage2_establishes} == {(1, 2, "INTER", "h0", "j"), (3, 4, "INTER", "j", "h2")}
    assert graphs_equal(plan.resulting_graph, build_comm_graph(s.substitute({"h1": "j"}), hs))


def test_replace_unrelated_host_is_empty_plan():
    s = spec([("h0", 0), ("h0", 1)])
    hs = hosts(2) + [HostSpec("j", 4)]
    g = build_comm_graph(s, hs)
    plan = replace_members(g, s, ReplacementMapping({"h1": "j"}), hs)
    assert plan.empty and plan.resulting_graph == g


def test_replace_whole_single_host_group():
    s = spec([("h0", 0), ("h0", 1), ("h0", 2)])
    hs = hosts(1) + [HostSpec("j", 4)]
    plan = replace_members(build_comm_graph(s, hs), s, ReplacementMapping({"h0": "j"}), hs)
    # The joiner closes the ring itself; nothing crosses hosts.
    assert len(plan.stage1_actions["j"]) == 3
    assert not plan.stage2_teardowns and not plan.stage2_establishes


def test_replace_rejects_stale_graph_and_bad_joiner():
    s = spec([("h0", 0), ("h1", 0)])
    hs = hosts(2) + [HostSpec("j", 4)]
    other = build_comm_graph(spec([("h1", 0), ("h0", 0)]), hs)
    with pytest.raises(StaleGraph):
        replace_members(other, s, ReplacementMapping({"h0": "j"}), hs)
    g = build_comm_graph(s, hs)
    with pytest.raises(InvalidMapping):
        # h1 is already a member of the group.
        replace_members(g, s, ReplacementMapping({"h0": "h1"}), hs)
    with pytest.raises(UnknownHost):
        replace_members(g, s, ReplacementMapping({"h0": "nowhere"}), hs)


def test_joiner_with_fewer_devices_rejected():
    s = spec([("h0", 0), ("h0", 3), ("h1", 0)])
    hs = hosts(2) + [HostSpec("small", 2)]
    with pytest.raises(UnknownHost):
        replace_members(build_comm_graph(s, hs), s, ReplacementMapping({"h0": "small"}), hs)


def test_to_dict_is_sorted():
    g = build_comm_graph(spec([("h0", 0), ("h1", 0)]), hosts(2))
    d = g.to_dict()
    assert d["size"] == 2 and d["edges"] == sorted(d["edges"])
