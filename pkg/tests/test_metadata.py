"""Destination bitmaps, rank maps, overhead arithmetic, and group counting."""

import math
import random

import pytest

from multiwrite.errors import CapacityError
from multiwrite.metadata import (
    DestinationBitmap,
    RankMap,
    binomial,
    binomial_pascal,
    decode,
    encode,
    multicast_group_count,
    payload_overhead,
    restrict,
)
from multiwrite.topology import build_full_mesh, build_star


def test_encode_sets_exactly_the_requested_bits():
    bm = encode([0, 3, 7], width=8)
    assert bm.popcount == 3
    assert bm.ranks() == (0, 3, 7)
    assert bm.contains(3)
    assert not bm.contains(1)


def test_bitmap_byte_layout_is_little_endian_bit_zero_first():
    assert encode([0], width=8).to_bytes() == b"\x01"
    assert encode([7], width=8).to_bytes() == b"\x80"
    assert encode([1, 3, 5], width=8).to_bytes() == b"\x2a"
    # Bit 9 lives in byte 1, bit position 1.
    assert encode([9], width=16).to_bytes() == b"\x00\x02"


def test_bitmap_width_rounds_up_to_whole_bytes():
    assert encode([0], width=1).nbytes == 1
    assert encode([0], width=8).nbytes == 1
    assert encode([0], width=9).nbytes == 2
    assert encode([0], width=64).nbytes == 8


def test_bitmap_round_trips_through_bytes():
    rng = random.Random(5)
    for _ in range(200):
        width = rng.randint(1, 128)
        ranks = sorted(rng.sample(range(width), rng.randint(1, width)))
        bm = encode(ranks, width=width)
        back = DestinationBitmap.from_bytes(bm.to_bytes(), width)
        assert back.ranks() == tuple(ranks)


def test_encode_rejects_empty_and_out_of_range_destinations():
    with pytest.raises(ValueError):
        encode([], width=8)
    with pytest.raises(CapacityError):
        encode([8], width=8)
    with pytest.raises(ValueError):
        DestinationBitmap(0, 1)
    with pytest.raises(ValueError):
        DestinationBitmap(1025, 1)


def test_restrict_keeps_a_subset_and_rejects_unset_ranks():
    bm = encode([1, 4, 6], width=8)
    sub = restrict(bm, [4, 6])
    assert sub.ranks() == (4, 6)
    with pytest.raises(ValueError):
        restrict(bm, [2])


def test_rank_map_assigns_disjoint_slot_bases():
    topo = build_full_mesh(4, 1.0)
    rm = RankMap.from_topology(topo, slot_bytes=4096)
    seen_nodes = set()
    for rank in topo.ranks():
        node, base = rm.entries[rank]
        assert base == rank * 4096
        seen_nodes.add(node)
    assert len(seen_nodes) == 4


def test_rank_map_skips_switches():
    topo = build_star(4, 1.0)
    rm = RankMap.from_topology(topo)
    assert sorted(rm.entries) == [0, 1, 2, 3]


def test_rank_map_rejects_duplicate_node_assignments():
    with pytest.raises(ValueError):
        RankMap({0: (7, 0), 1: (7, 100)})


def test_decode_returns_rank_node_address_triples_in_rank_order():
    topo = build_full_mesh(4, 1.0)
    rm = RankMap.from_topology(topo, slot_bytes=100)
    triples = decode(encode([2, 0], width=4), rm)
    assert triples == ((0, 0, 0), (2, 2, 200))


def test_payload_overhead_is_bitmap_bytes_over_payload_bytes():
    assert payload_overhead(1024, 4096) == 0.03125
    assert payload_overhead(64, 4096) == 8 / 4096
    assert payload_overhead(65, 1000) == 9 / 1000
    with pytest.raises(ValueError):
        payload_overhead(0, 4096)
    with pytest.raises(ValueError):
        payload_overhead(64, 0)


def test_binomial_agrees_with_pascal_and_stdlib_on_random_inputs():
    rng = random.Random(17)
    for _ in range(300):
        n = rng.randint(0, 40)
        k = rng.randint(0, n + 2)
        a = binomial(n, k)
        b = binomial_pascal(n, k)
        assert a == b
        assert a == (math.comb(n, k) if k <= n else 0)


def test_binomial_known_values():
    assert binomial(0, 0) == 1
    assert binomial(5, 2) == 10
    assert binomial(10, 10) == 1
    assert binomial(10, 11) == 0
    assert binomial_pascal(10, 11) == 0
    with pytest.raises(ValueError):
        binomial(-1, 0)
    with pytest.raises(ValueError):
        binomial(3, -1)


def test_multicast_group_count_counts_rank_subsets():
    assert multicast_group_count(64, 8) == binomial(64, 8)
    assert multicast_group_count(4, 2) == 6
