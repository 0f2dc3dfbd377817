"""Transmission-tree planning: partitioning, recursion, and degeneration."""

import random

import pytest

from multiwrite.errors import RoutingError
from multiwrite.planning import (
    DestMemoryPair,
    MultiWriteRequest,
    TransmissionTree,
    TreeEdge,
    make_pairs,
    partition_by_next_hop,
    plan_tree,
    tree_to_json,
    unicast_plan,
)
from multiwrite.topology import build_full_mesh, build_star, build_two_tier


def _request(source, dests, size=100.0):
    return MultiWriteRequest(source, frozenset(make_pairs(dests)), size)


def test_request_validation_rejects_empty_and_duplicate_destinations():
    with pytest.raises(ValueError):
        MultiWriteRequest(0, frozenset(), 10.0)
    with pytest.raises(ValueError):
        MultiWriteRequest(
            0, frozenset({DestMemoryPair(1, 0), DestMemoryPair(1, 64)}), 10.0
        )
    with pytest.raises(ValueError):
        _request(0, [1], size=0.0)


def test_partition_splits_local_delivery_from_per_hop_groups():
    topo = build_two_tier(2, 2, 4.0, 1.0)
    local, groups = partition_by_next_hop(1, make_pairs([1, 0, 2, 3]), topo)
    assert local == DestMemoryPair(1, 0)
    assert sorted(groups) == [0, 3]
    assert [p.dest for p in groups[0]] == [0]
    assert [p.dest for p in groups[3]] == [2, 3]


def test_plan_tree_on_a_full_mesh_fans_out_in_one_hop():
    topo = build_full_mesh(5, 1.0)
    tree = plan_tree(_request(0, [1, 2, 3, 4]), topo)
    assert tree.root == 0
    assert tree.edge_count == 4
    assert tree.depth() == 1
    assert {e.dst for e in tree.edges} == {1, 2, 3, 4}
    assert {p.dest for p in tree.deliveries} == {1, 2, 3, 4}


def test_plan_tree_crossing_servers_sends_one_copy_per_relay_link():
    topo = build_two_tier(2, 4, 4.0, 1.0)
    tree = plan_tree(_request(0, [4, 5, 6, 7]), topo)
    cross = [e for e in tree.edges if e.link == (0, 4)]
    assert len(cross) == 1
    assert set(cross[0].dests) == {4, 5, 6, 7}
    # The relay then fans out locally.
    local = [e for e in tree.edges if e.src == 4]
    assert {e.dst for e in local} == {5, 6, 7}
    assert tree.depth() == 2


def test_plan_tree_uses_each_link_at_most_once():
    rng = random.Random(23)
    topos = [
        build_full_mesh(6, 1.0),
        build_star(6, 1.0),
        build_two_tier(2, 4, 4.0, 1.0),
    ]
    for _ in range(100):
        topo = rng.choice(topos)
        ranks = sorted(topo.ranks())
        source = rng.choice(ranks)
        dests = rng.sample([r for r in ranks if r != source], rng.randint(1, len(ranks) - 1))
        tree = plan_tree(_request(source, dests), topo)
        links = [e.link for e in tree.edges]
        assert len(links) == len(set(links))
        assert {p.dest for p in tree.deliveries} == set(dests)


def test_star_trees_route_through_the_switch_without_duplication():
    topo = build_star(5, 1.0)
    tree = plan_tree(_request(0, [1, 2, 3, 4]), topo)
    uplink = [e for e in tree.edges if e.link == (0, 5)]
    assert len(uplink) == 1
    downlinks = [e for e in tree.edges if e.src == 5]
    assert {e.dst for e in downlinks} == {1, 2, 3, 4}


def test_single_destination_tree_matches_the_unicast_route():
    rng = random.Random(31)
    topos = [
        build_full_mesh(6, 1.0),
        build_star(6, 1.0),
        build_two_tier(2, 4, 4.0, 1.0),
    ]
    for _ in range(200):
        topo = rng.choice(topos)
        ranks = sorted(topo.ranks())
        source = rng.choice(ranks)
        dest = rng.choice([r for r in ranks if r != source])
        tree = plan_tree(_request(source, [dest], size=64.0), topo)
        direct = unicast_plan(source, dest, 64.0, topo)
        assert tree.root == direct.root
        assert [e.link for e in tree.edges] == [e.link for e in direct.edges]
        assert tree.deliveries == direct.deliveries
        assert tree.size == direct.size


def test_unicast_plan_follows_the_forwarding_path():
    topo = build_two_tier(2, 3, 4.0, 1.0)
    tree = unicast_plan(1, 4, 32.0, topo)
    assert [e.link for e in tree.edges] == [(1, 4)]
    tree2 = unicast_plan(1, 5, 32.0, topo)
    assert [e.link for e in tree2.edges] == [(1, 4), (4, 5)]


def test_depth_is_independent_of_edge_listing_order():
    topo = build_two_tier(2, 4, 4.0, 1.0)
    tree = plan_tree(_request(0, [1, 4, 5, 6]), topo)
    shuffled = TransmissionTree(
        tree.root, tuple(reversed(tree.edges)), tree.deliveries, tree.size
    )
    assert shuffled.depth() == tree.depth() == 2


def test_tree_edges_carry_the_request_size():
    topo = build_full_mesh(4, 1.0)
    tree = plan_tree(_request(0, [1, 2], size=77.0), topo)
    assert all(e.size == 77.0 for e in tree.edges)


def test_tree_to_json_lists_edges_with_sorted_destination_subsets():
    topo = build_two_tier(2, 2, 4.0, 1.0)
    tree = plan_tree(_request(0, [2, 3]), topo)
    doc = tree_to_json(tree)
    assert doc["root"] == 0
    assert doc["size"] == tree.size
    for edge in doc["edges"]:
        assert set(edge) >= {"src", "dst", "dests"}
        assert edge["dests"] == sorted(edge["dests"])
    keys = [(d["dest"], d["buffer"]) for d in doc["deliveries"]]
    assert keys == sorted(keys)


def test_tree_edge_exposes_its_link():
    edge = TreeEdge(3, 5, frozenset({DestMemoryPair(5, 0)}), 10.0)
    assert edge.link == (3, 5)


def test_planning_into_a_forwarding_loop_raises():
    import dataclasses

    topo = build_full_mesh(3, 1.0)
    looped = dataclasses.replace(
        topo,
        forwarding={**topo.forwarding, 0: {**topo.forwarding[0], 2: (1,)},
                    1: {**topo.forwarding[1], 2: (0,)}},
    )
    with pytest.raises(RoutingError):
        plan_tree(_request(0, [2]), looped)
