"""Collective-operation planners built on transmission trees.

AllGather strategies over one or two communication domains:

* ``baseline`` / ``unicast``: every rank unicasts its fragment to each peer of
  its own group over the unicast path.
* ``multiwrite``: every rank issues one multi-destination write covering its
  whole group, planned on the topology's own forwarding (on a full mesh this
  degenerates to the baseline edge set; through a switch it collapses the
  uplink to a single copy).
* ``unicast_paired`` / ``multiwrite_paired``: two equal groups are paired rank
  by rank; each rank splits its fragment, sends one part over its direct
  links, and routes the other through its partner in the opposite group,
  which forwards to the sender's own-group peers. The split ratio equalizes
  the finish time of both paths. The unicast variant must push one relayed
  copy per peer through the partner link; the multiwrite variant sends one.
* ``unicast_full`` / ``multiwrite_full``: as paired, but the relayed part is
  split evenly across all opposite-group ranks so every idle cross link
  carries a share.

MoE token dispatch: each token travels from its source to the ranks hosting
its selected experts. ``dispatch_unicast`` sends one copy per destination;
``dispatch_multiwrite`` groups destinations by next hop, so a server with
several selected experts receives a single inter-server copy that is fanned
out locally.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Mapping

from .errors import RoutingError
from .netsim import TreeFlow
from .planning import (
    DestMemoryPair,
    MultiWriteRequest,
    TransmissionTree,
    make_pairs,
    partition_by_next_hop,
    plan_tree,
    unicast_plan,
)
from .topology import ENDPOINT, Topology

ALLGATHER_STRATEGIES = (
    "baseline",
    "unicast",
    "multiwrite",
    "unicast_paired",
    "multiwrite_paired",
    "unicast_full",
    "multiwrite_full",
)
PAIRED_STRATEGIES = ("unicast_paired", "multiwrite_paired", "unicast_full", "multiwrite_full")
DISPATCH_STRATEGIES = ("unicast", "multiwrite")


@dataclass(frozen=True)
class AllGatherSpec:
    """Groups of ranks, per-rank fragment size, and the strategy to plan."""

    groups: tuple[tuple[int, ...], ...]
    message_bytes: float
    strategy: str

    def __post_init__(self):
        if self.strategy not in ALLGATHER_STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.message_bytes <= 0:
            raise ValueError("message_bytes must be positive")
        if not self.groups or any(not g for g in self.groups):
            raise ValueError("groups must be non-empty")
        flat = [r for g in self.groups for r in g]
        if len(set(flat)) != len(flat):
            raise ValueError("groups must be disjoint")
        if self.strategy in PAIRED_STRATEGIES:
            if len(self.groups) != 2 or len(self.groups[0]) != len(self.groups[1]):
                raise ValueError(f"{self.strategy} requires exactly two equal-size groups")
            if len(self.groups[0]) < 2:
                raise ValueError(f"{self.strategy} requires groups of at least 2 ranks")


@dataclass(frozen=True)
class SplitRatio:
    direct_fraction: float
    relay_fraction: float


def compute_split_ratio(direct_bw: float, relay_effective_bw: float) -> SplitRatio:
    """Fragment split that finishes the direct and relayed paths simultaneously.

    Both paths start together and run at their effective bandwidths, so equal
    finish times require splitting in proportion to bandwidth.
    """
    if direct_bw <= 0 or relay_effective_bw <= 0:
        raise ValueError("bandwidths must be positive")
    direct = direct_bw / (direct_bw + relay_effective_bw)
    return SplitRatio(direct, 1.0 - direct)


@dataclass(frozen=True)
class Token:
    index: int
    source: int
    size: float
    experts: frozenset[int]

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("token size must be positive")
        if not self.experts:
            raise ValueError("token selects no experts")


@dataclass(frozen=True)
class AlltoAllDispatchSpec:
    """A batch of routed tokens plus the expert-to-rank placement."""

    tokens: tuple[Token, ...]
    expert_placement: dict[int, int]
    top_k: int

    def __post_init__(self):
        for tok in self.tokens:
            if len(tok.experts) != self.top_k:
                raise ValueError(f"token {tok.index} selects {len(tok.experts)} experts, expected {self.top_k}")
            for e in tok.experts:
                if e not in self.expert_placement:
                    raise ValueError(f"token {tok.index} selects unplaced expert {e}")

    def dest_ranks(self, token: Token) -> tuple[int, ...]:
        """Distinct destination ranks of a token (experts sharing a rank collapse)."""
        return tuple(sorted({self.expert_placement[e] for e in token.experts}))


@dataclass(frozen=True)
class RedundancyStats:
    """Per-link payload copy counts and byte totals for a planned flow set."""

    copies: dict[tuple[int, int], dict[tuple, int]]
    link_bytes: dict[tuple[int, int], float]

    def copy_count(self, link: tuple[int, int], payload: tuple) -> int:
        return self.copies.get(link, {}).get(payload, 0)

    def bytes_on(self, link: tuple[int, int]) -> float:
        return self.link_bytes.get(link, 0.0)

    @property
    def max_copies(self) -> int:
        return max(
            (count for per_link in self.copies.values() for count in per_link.values()),
            default=0,
        )


def redundancy_stats(flows: Iterable[TreeFlow]) -> RedundancyStats:
    """Count identical-payload copies and total bytes crossing each link."""
    copies: dict[tuple[int, int], dict[tuple, int]] = {}
    link_bytes: dict[tuple[int, int], float] = {}
    for i, flow in enumerate(flows):
        payload = flow.payload if flow.payload is not None else ("flow", i)
        for link in flow.tree.links():
            per_link = copies.setdefault(link, {})
            per_link[payload] = per_link.get(payload, 0) + 1
            link_bytes[link] = link_bytes.get(link, 0.0) + flow.size
    return RedundancyStats(copies, link_bytes)


def flow_deliveries(flows: Iterable[TreeFlow]) -> dict[tuple[int, tuple], int]:
    """Multiset of (destination rank, payload id) deliveries across flows."""
    out: dict[tuple[int, tuple], int] = {}
    for i, flow in enumerate(flows):
        payload = flow.payload if flow.payload is not None else ("flow", i)
        for pair in flow.tree.deliveries:
            key = (pair.dest, payload)
            out[key] = out.get(key, 0) + 1
    return out


# --- AllGather ---


def _check_unicast_path(tree: TransmissionTree, dest: int, topo: Topology) -> None:
    # Relaying through another endpoint is a strategy decision, never an
    # implicit effect of baseline unicast planning.
    dest_node = topo.node_of_rank(dest)
    for edge in tree.edges:
        node = topo.node(edge.dst)
        if node.kind == ENDPOINT and node.id != dest_node:
            raise RoutingError(
                f"unicast path to rank {dest} relays through endpoint {node.id}"
            )


def _frag_payload(src: int) -> tuple:
    return (src, "frag")


def allgather_baseline(spec: AllGatherSpec, topo: Topology) -> list[TreeFlow]:
    """One unicast flow per ordered same-group pair, full fragment each.

    The ``baseline`` strategy additionally refuses routes that relay through
    other endpoints: it is the no-relay-leveraging reference point. Plain
    ``unicast`` accepts whatever the forwarding tables dictate.
    """
    flows = []
    for group in spec.groups:
        for src in group:
            for dst in group:
                if dst == src:
                    continue
                tree = unicast_plan(src, dst, spec.message_bytes, topo)
                if spec.strategy == "baseline":
                    _check_unicast_path(tree, dst, topo)
                flows.append(
                    TreeFlow(
                        tree,
                        spec.message_bytes,
                        label=f"{spec.strategy}:{src}->{dst}",
                        payload=_frag_payload(src),
                    )
                )
    return flows


def _paired_layout(spec: AllGatherSpec, topo: Topology):
    """Per-source (peers, partner, relays, direct bw, cross bw) for paired strategies."""
    a, b = spec.groups
    partner = {}
    for x, y in zip(a, b):
        partner[x] = y
        partner[y] = x
    layout = {}
    for own, opp in ((a, b), (b, a)):
        for src in own:
            peers = tuple(r for r in own if r != src)
            src_node = topo.node_of_rank(src)
            direct_bw = min(topo.bandwidth(src_node, topo.node_of_rank(p)) for p in peers)
            cross_bw = min(topo.bandwidth(src_node, topo.node_of_rank(r)) for r in opp)
            layout[src] = (peers, partner[src], tuple(opp), direct_bw, cross_bw)
    return layout


def relay_effective_bw(strategy: str, group_size: int, cross_bw: float) -> float:
    """Aggregate relayed-path bandwidth a source sees under each strategy.

    Paired unicast pushes ``group_size - 1`` copies of the relayed part over
    the single partner link; paired multiwrite pushes one. Full relaying
    spreads shares over ``group_size`` relays whose links are shared
    symmetrically: each cross link carries one first-hop share plus
    ``group_size - 1`` forwarded shares under multiwrite (aggregate: the full
    link rate), and twice that under unicast because every share is copied
    per destination.
    """
    g = group_size
    if strategy == "unicast_paired":
        return cross_bw / (g - 1)
    if strategy == "multiwrite_paired":
        return cross_bw
    if strategy == "unicast_full":
        return g * cross_bw / (2 * (g - 1))
    if strategy == "multiwrite_full":
        return cross_bw
    raise ValueError(f"{strategy!r} has no relayed path")


def paired_split(spec: AllGatherSpec, topo: Topology, src: int) -> SplitRatio:
    """Direct/relayed split for one source under a paired strategy."""
    layout = _paired_layout(spec, topo)
    peers, _, _, direct_bw, cross_bw = layout[src]
    return compute_split_ratio(
        direct_bw, relay_effective_bw(spec.strategy, len(peers) + 1, cross_bw)
    )


def allgather_unicast_multipath(spec: AllGatherSpec, topo: Topology) -> list[TreeFlow]:
    """Paired/full relaying with plain unicast copies over the relay paths."""
    if spec.strategy not in ("unicast_paired", "unicast_full"):
        raise ValueError(f"strategy {spec.strategy!r} is not a unicast multipath form")
    s = spec.message_bytes
    layout = _paired_layout(spec, topo)
    flows = []
    for src in sorted(layout):
        peers, partner, opp, direct_bw, cross_bw = layout[src]
        g = len(peers) + 1
        ratio = compute_split_ratio(direct_bw, relay_effective_bw(spec.strategy, g, cross_bw))
        direct_size = ratio.direct_fraction * s
        relay_size = ratio.relay_fraction * s
        for dst in peers:
            flows.append(
                TreeFlow(
                    unicast_plan(src, dst, direct_size, topo),
                    direct_size,
                    label=f"{spec.strategy}:direct:{src}->{dst}",
                    payload=_frag_payload(src),
                )
            )
        relays = (partner,) if spec.strategy == "unicast_paired" else opp
        share = relay_size / len(relays)
        src_node = topo.node_of_rank(src)
        for relay in relays:
            via = topo.with_route_via(src_node, peers, topo.node_of_rank(relay))
            for dst in peers:
                flows.append(
                    TreeFlow(
                        unicast_plan(src, dst, share, via),
                        share,
                        label=f"{spec.strategy}:via{relay}:{src}->{dst}",
                        payload=_frag_payload(src),
                    )
                )
    return flows


def allgather_multiwrite(spec: AllGatherSpec, topo: Topology) -> list[TreeFlow]:
    """Multi-destination-write AllGather (whole-group, paired, or full)."""
    s = spec.message_bytes
    flows = []
    if spec.strategy in ("multiwrite",):
        for group in spec.groups:
            for src in group:
                peers = tuple(r for r in group if r != src)
                if not peers:
                    continue
                tree = plan_tree(MultiWriteRequest(src, make_pairs(peers), s), topo)
                flows.append(
                    TreeFlow(tree, s, label=f"multiwrite:{src}", payload=_frag_payload(src))
                )
        return flows
    if spec.strategy not in ("multiwrite_paired", "multiwrite_full"):
        raise ValueError(f"strategy {spec.strategy!r} is not a multiwrite form")
    layout = _paired_layout(spec, topo)
    for src in sorted(layout):
        peers, partner, opp, direct_bw, cross_bw = layout[src]
        g = len(peers) + 1
        ratio = compute_split_ratio(direct_bw, relay_effective_bw(spec.strategy, g, cross_bw))
        direct_size = ratio.direct_fraction * s
        relay_size = ratio.relay_fraction * s
        for dst in peers:
            flows.append(
                TreeFlow(
                    unicast_plan(src, dst, direct_size, topo),
                    direct_size,
                    label=f"{spec.strategy}:direct:{src}->{dst}",
                    payload=_frag_payload(src),
                )
            )
        relays = (partner,) if spec.strategy == "multiwrite_paired" else opp
        share = relay_size / len(relays)
        src_node = topo.node_of_rank(src)
        for relay in relays:
            via = topo.with_route_via(src_node, peers, topo.node_of_rank(relay))
            tree = plan_tree(MultiWriteRequest(src, make_pairs(peers), share), via)
            flows.append(
                TreeFlow(
                    tree,
                    share,
                    label=f"{spec.strategy}:via{relay}:{src}",
                    payload=_frag_payload(src),
                )
            )
    return flows


def plan_allgather(spec: AllGatherSpec, topo: Topology) -> list[TreeFlow]:
    if spec.strategy in ("baseline", "unicast"):
        return allgather_baseline(spec, topo)
    if spec.strategy in ("unicast_paired", "unicast_full"):
        return allgather_unicast_multipath(spec, topo)
    return allgather_multiwrite(spec, topo)


# --- MoE token dispatch ---


def _token_payload(token: Token) -> tuple:
    return (token.source, "tok", token.index)


def dispatch_unicast(spec: AlltoAllDispatchSpec, topo: Topology) -> list[TreeFlow]:
    """Token-by-token dispatch: one unicast flow per (token, destination rank)."""
    flows = []
    for token in spec.tokens:
        for dst in spec.dest_ranks(token):
            if dst == token.source:
                continue  # self-destined expert costs no network flow
            flows.append(
                TreeFlow(
                    unicast_plan(token.source, dst, token.size, topo),
                    token.size,
                    label=f"unicast:tok{token.index}:{token.source}->{dst}",
                    payload=_token_payload(token),
                )
            )
    return flows


def dispatch_multiwrite(spec: AlltoAllDispatchSpec, topo: Topology) -> list[TreeFlow]:
    """Token-by-token dispatch with one flow per next-hop destination group.

    Destinations reached through the same next hop (all ranks of one remote
    server) share a single copy to that hop; directly linked destinations stay
    plain unicasts, so an all-local token plans exactly like the unicast form.
    """
    flows = []
    for token in spec.tokens:
        dests = [d for d in spec.dest_ranks(token) if d != token.source]
        if not dests:
            continue
        src_node = topo.node_of_rank(token.source)
        _, groups = partition_by_next_hop(src_node, make_pairs(dests), topo)
        for hop, subset in groups.items():
            ranks = tuple(p.dest for p in subset)
            if len(ranks) == 1:
                tree = unicast_plan(token.source, ranks[0], token.size, topo)
                label = f"multiwrite:tok{token.index}:{token.source}->{ranks[0]}"
            else:
                tree = plan_tree(
                    MultiWriteRequest(token.source, make_pairs(ranks), token.size), topo
                )
                label = f"multiwrite:tok{token.index}:{token.source}~>{hop}"
            flows.append(
                TreeFlow(tree, token.size, label=label, payload=_token_payload(token))
            )
    return flows


def plan_dispatch(spec: AlltoAllDispatchSpec, topo: Topology, strategy: str) -> list[TreeFlow]:
    if strategy == "unicast":
        return dispatch_unicast(spec, topo)
    if strategy == "multiwrite":
        return dispatch_multiwrite(spec, topo)
    raise ValueError(f"unknown dispatch strategy {strategy!r}")


def make_gate(
    batch: int,
    n_experts: int,
    k: int,
    balance: str = "balanced",
    seed: int = 0,
    *,
    n_ranks: int,
    token_bytes: float = 1024.0,
    expert_placement: Mapping[int, int] | None = None,
) -> AlltoAllDispatchSpec:
    """Build a dispatch batch with a balanced or seeded-random gate.

    Balanced mode deals consecutive expert blocks cyclically, so every expert
    receives ``batch*k // n_experts`` selections give or take one. Random mode
    samples k distinct experts per token from a seeded generator. Token
    sources cycle over the ranks; the default placement puts expert ``e`` on
    rank ``e % n_ranks``.
    """
    if batch < 1:
        raise ValueError("batch must be at least 1")
    if k < 1 or k > n_experts:
        raise ValueError("need 1 <= k <= n_experts")
    if n_ranks < 1:
        raise ValueError("n_ranks must be at least 1")
    if balance not in ("balanced", "random"):
        raise ValueError(f"unknown gate mode {balance!r}")
    if expert_placement is None:
        placement = {e: e % n_ranks for e in range(n_experts)}
    else:
        placement = dict(expert_placement)
    rng = random.Random(seed)
    tokens = []
    for t in range(batch):
        if balance == "balanced":
            experts = frozenset((t * k + i) % n_experts for i in range(k))
        else:
            experts = frozenset(rng.sample(range(n_experts), k))
        tokens.append(Token(t, t % n_ranks, token_bytes, experts))
    return AlltoAllDispatchSpec(tuple(tokens), placement, k)
