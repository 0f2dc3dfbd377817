"""Fluid bandwidth sharing and completion-time simulation."""

import math
import random
from fractions import Fraction

import pytest

from multiwrite.netsim import (
    PIPELINED,
    STORE_AND_FORWARD,
    CompletionReport,
    SimParams,
    TreeFlow,
    max_min_allocate,
    operator_latency,
    simulate,
    waterfill,
)
from multiwrite.planning import MultiWriteRequest, make_pairs, plan_tree, unicast_plan
from multiwrite.topology import build_full_mesh, build_two_tier


def oracle_rates(users, capacity):
    """Progressive filling in exact rational arithmetic.

    Raises the common rate of all unfrozen users until some link saturates,
    freezes the users crossing it, and repeats. Deliberately a direct
    restatement of the definition, kept independent of the production
    allocator.
    """
    rates = {}
    active = {}
    for key, links in users:
        if links:
            active[key] = tuple(links)
        else:
            rates[key] = math.inf
    frozen_load = {link: Fraction(0) for link in capacity}
    while active:
        saturation = {}
        for link, cap in capacity.items():
            crossing = sum(1 for links in active.values() if link in links)
            if crossing:
                saturation[link] = (Fraction(cap) - frozen_load[link]) / crossing
        level = min(saturation.values())
        saturated = {link for link, lvl in saturation.items() if lvl == level}
        for key in [k for k, links in active.items() if saturated.intersection(links)]:
            rates[key] = level
            for link in active[key]:
                frozen_load[link] += level
            del active[key]
    return rates


def test_waterfill_splits_a_single_link_evenly():
    users = [("a", [(0, 1)]), ("b", [(0, 1)]), ("c", [(0, 1)])]
    rates = waterfill(users, {(0, 1): 3.0})
    assert rates == {"a": 1.0, "b": 1.0, "c": 1.0}


def test_waterfill_redistributes_after_the_bottleneck_freezes():
    users = [("wide", [(0, 1)]), ("narrow", [(0, 1), (1, 2)])]
    rates = waterfill(users, {(0, 1): 3.0, (1, 2): 1.0})
    assert rates["narrow"] == pytest.approx(1.0, rel=1e-12)
    assert rates["wide"] == pytest.approx(2.0, rel=1e-12)


def test_waterfill_gives_linkless_users_infinite_rate():
    rates = waterfill([("free", []), ("held", [(0, 1)])], {(0, 1): 2.0})
    assert rates["free"] == math.inf
    assert rates["held"] == 2.0


def test_waterfill_rejects_duplicate_user_keys():
    with pytest.raises(ValueError):
        waterfill([("a", [(0, 1)]), ("a", [(0, 1)])], {(0, 1): 1.0})


def test_waterfill_matches_the_rational_oracle_on_random_instances():
    rng = random.Random(41)
    for _ in range(60):
        n_links = rng.randint(1, 10)
        links = [(i, i + 1) for i in range(n_links)]
        capacity = {link: rng.choice([0.5, 1.0, 2.0, 3.0, 7.5]) for link in links}
        users = []
        for u in range(rng.randint(1, 6)):
            users.append((f"u{u}", rng.sample(links, rng.randint(1, n_links))))
        got = waterfill(users, capacity)
        want = oracle_rates(users, capacity)
        for key, rate in want.items():
            assert got[key] == pytest.approx(float(rate), rel=1e-9)


def test_max_min_allocate_shares_a_contended_mesh_link():
    topo = build_full_mesh(3, 2.0)
    f1 = TreeFlow(unicast_plan(0, 1, 10.0, topo), 10.0, label="f1")
    f2 = TreeFlow(unicast_plan(0, 1, 10.0, topo), 10.0, label="f2")
    rates = max_min_allocate([f1, f2], topo)
    assert rates[f1] == pytest.approx(1.0)
    assert rates[f2] == pytest.approx(1.0)


def test_single_flow_finishes_at_size_over_bandwidth():
    topo = build_full_mesh(2, 4.0)
    flow = TreeFlow(unicast_plan(0, 1, 100.0, topo), 100.0)
    report = simulate([flow], topo)
    assert report.finish(flow) == pytest.approx(25.0, rel=1e-12)
    assert operator_latency(report) == report.latency


def test_hop_startup_charges_once_per_tree_edge():
    topo = build_two_tier(2, 2, 4.0, 1.0)
    flow = TreeFlow(unicast_plan(0, 3, 8.0, topo), 8.0)
    assert len(flow.tree.edges) == 2
    base = simulate([flow], topo).finish(flow)
    charged = simulate([flow], topo, SimParams(hop_startup=3.0)).finish(flow)
    assert charged == pytest.approx(base + 2 * 3.0, rel=1e-12)


def test_pipelined_relay_moves_at_the_minimum_link_share():
    topo = build_two_tier(2, 2, 4.0, 1.0)
    flow = TreeFlow(unicast_plan(0, 3, 10.0, topo), 10.0)
    report = simulate([flow], topo, SimParams(relay_mode=PIPELINED))
    assert report.finish(flow) == pytest.approx(10.0, rel=1e-12)


def test_store_and_forward_serializes_each_hop():
    topo = build_two_tier(2, 2, 4.0, 1.0)
    flow = TreeFlow(unicast_plan(0, 3, 10.0, topo), 10.0)
    report = simulate([flow], topo, SimParams(relay_mode=STORE_AND_FORWARD))
    # Cross link at 1.0 then intra link at 4.0, re-serialized.
    assert report.finish(flow) == pytest.approx(10.0 + 2.5, rel=1e-12)


def test_finished_flows_release_bandwidth_to_the_rest():
    topo = build_full_mesh(2, 2.0)
    short = TreeFlow(unicast_plan(0, 1, 10.0, topo), 10.0, label="short")
    long = TreeFlow(unicast_plan(0, 1, 30.0, topo), 30.0, label="long")
    report = simulate([short, long], topo)
    assert report.finish(short) == pytest.approx(10.0, rel=1e-12)
    assert report.finish(long) == pytest.approx(20.0, rel=1e-12)
    epochs = next(r.epochs for r in report.records if r.label == "long")
    assert epochs[0][2] == pytest.approx(1.0)
    assert epochs[-1][2] == pytest.approx(2.0)


def test_late_start_waits_before_transmitting():
    topo = build_full_mesh(2, 1.0)
    early = TreeFlow(unicast_plan(0, 1, 5.0, topo), 5.0, start=0.0, label="early")
    late = TreeFlow(unicast_plan(0, 1, 5.0, topo), 5.0, start=5.0, label="late")
    report = simulate([early, late], topo)
    assert report.finish(early) == pytest.approx(5.0, rel=1e-12)
    assert report.finish(late) == pytest.approx(10.0, rel=1e-12)


def test_simultaneous_finishes_do_not_stall_the_event_loop():
    topo = build_full_mesh(4, 1.0)
    flows = [
        TreeFlow(unicast_plan(a, b, 7.0, topo), 7.0, label=f"{a}->{b}")
        for a, b in [(0, 1), (1, 2), (2, 3), (3, 0)]
    ]
    report = simulate(flows, topo)
    assert all(report.finish(f) == pytest.approx(7.0) for f in flows)


def test_tree_flow_sharing_a_multiwrite_tree_counts_each_link_once():
    topo = build_two_tier(2, 2, 4.0, 1.0)
    request = MultiWriteRequest(0, frozenset(make_pairs([2, 3])), 12.0)
    flow = TreeFlow(plan_tree(request, topo), 12.0)
    report = simulate([flow], topo)
    # Bottleneck is the single cross link at 1.0; the tree is pipelined.
    assert report.finish(flow) == pytest.approx(12.0, rel=1e-12)


def test_zero_edge_flow_completes_immediately():
    topo = build_full_mesh(2, 1.0)
    request = MultiWriteRequest(0, frozenset(make_pairs([0])), 5.0)
    flow = TreeFlow(plan_tree(request, topo), 5.0, start=3.0)
    report = simulate([flow], topo)
    assert report.finish(flow) == 3.0


def test_flow_size_must_be_positive():
    topo = build_full_mesh(2, 1.0)
    with pytest.raises(ValueError):
        TreeFlow(unicast_plan(0, 1, 5.0, topo), 0.0)


def test_report_csv_lists_one_row_per_flow():
    topo = build_full_mesh(2, 1.0)
    flow = TreeFlow(unicast_plan(0, 1, 5.0, topo), 5.0, label="only")
    csv_text = simulate([flow], topo).to_csv()
    lines = csv_text.strip().splitlines()
    assert lines[0] == "flow_label,start,finish,rate_epochs"
    assert len(lines) == 2
    assert lines[1].startswith("only,")


def test_empty_report_has_no_latency():
    with pytest.raises(ValueError):
        CompletionReport(()).latency


def test_simulation_matches_oracle_rates_for_the_first_epoch():
    rng = random.Random(59)
    for _ in range(40):
        topo = build_full_mesh(rng.randint(3, 6), rng.choice([1.0, 2.0]))
        ranks = sorted(topo.ranks())
        flows = []
        for i in range(rng.randint(1, 5)):
            src = rng.choice(ranks)
            dst = rng.choice([r for r in ranks if r != src])
            flows.append(
                TreeFlow(unicast_plan(src, dst, 50.0, topo), 50.0, label=f"f{i}")
            )
        rates = max_min_allocate(flows, topo)
        users = [(f.label, [e.link for e in f.tree.edges]) for f in flows]
        capacity = {link: topo.bandwidth(*link) for link in topo.links}
        want = oracle_rates(users, capacity)
        for f in flows:
            assert rates[f] == pytest.approx(float(want[f.label]), rel=1e-9)
