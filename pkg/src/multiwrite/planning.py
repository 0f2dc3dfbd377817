"""Transmission-tree planning for multi-destination writes.

A request names one source buffer and a set of (destination rank, buffer)
pairs. Execution is recursive: a node delivers locally if it is itself a
destination, partitions the remaining destinations by their next hop, and
issues one child operation per next-hop subset. ``plan_tree`` materializes the
result as a tree of directed edges, each annotated with the destination subset
it carries, so a payload crosses any link at most once no matter how many
destinations lie behind it.

A single-destination request degenerates to the plain unicast forwarding path;
``unicast_plan`` builds that path directly (by walking next hops, without the
recursive machinery) so the two constructions can be checked against each
other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .errors import RoutingError
from .topology import Topology


@dataclass(frozen=True, order=True)
class DestMemoryPair:
    """One delivery target: a rank and an abstract buffer handle (slot offset)."""

    dest: int
    buffer: int = 0


@dataclass(frozen=True)
class MultiWriteRequest:
    source: int
    pairs: frozenset[DestMemoryPair]
    size: float
    src_buffer: int = 0

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("destination set must not be empty")
        dests = [p.dest for p in self.pairs]
        if len(set(dests)) != len(dests):
            raise ValueError("destination ranks must be pairwise distinct")
        if self.size <= 0:
            raise ValueError("size must be positive")


@dataclass(frozen=True)
class TreeEdge:
    src: int
    dst: int
    dests: frozenset[int]
    size: float

    @property
    def link(self) -> tuple[int, int]:
        return (self.src, self.dst)


@dataclass(frozen=True)
class TransmissionTree:
    """Planned replication tree: edges carry destination subsets, deliveries name buffers."""

    root: int
    edges: tuple[TreeEdge, ...]
    deliveries: frozenset[DestMemoryPair]
    size: float

    def links(self) -> tuple[tuple[int, int], ...]:
        return tuple(e.link for e in self.edges)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def depth(self) -> int:
        """Edge count of the longest root-to-leaf chain."""
        parent = {e.dst: e.src for e in self.edges}
        out = 0
        for e in self.edges:
            d = 0
            node = e.dst
            while node != self.root:
                node = parent[node]
                d += 1
                if d > len(self.edges):
                    raise RoutingError("edge set is not a tree rooted at root")
            out = max(out, d)
        return out


def make_pairs(dests: Iterable[int], buffer: int = 0) -> frozenset[DestMemoryPair]:
    return frozenset(DestMemoryPair(d, buffer) for d in dests)


def partition_by_next_hop(
    at: int, pairs: Iterable[DestMemoryPair], topo: Topology
) -> tuple[DestMemoryPair | None, dict[int, tuple[DestMemoryPair, ...]]]:
    """Split destinations at node ``at`` into a local delivery and next-hop groups.

    Returns ``(local, groups)`` where ``local`` is the pair whose rank lives on
    ``at`` (or None) and ``groups`` maps each next-hop node to the pairs routed
    through it, hops ascending and pairs sorted by rank.
    """
    pairs = sorted(pairs)
    if not pairs:
        raise ValueError("nothing to partition: empty destination set")
    local = None
    groups: dict[int, list[DestMemoryPair]] = {}
    for pair in pairs:
        if topo.node_of_rank(pair.dest) == at:
            if local is not None:
                raise ValueError(f"two destinations resolve to node {at}")
            local = pair
            continue
        hop = topo.next_hop(at, pair.dest)
        groups.setdefault(hop, []).append(pair)
    return local, {hop: tuple(groups[hop]) for hop in sorted(groups)}


def plan_tree(request: MultiWriteRequest, topo: Topology) -> TransmissionTree:
    """Expand a request into its transmission tree under ``topo``'s forwarding.

    The recursion mirrors execution: deliver locally, partition the rest by
    next hop, recurse per subset. Planning is stateless, so equal inputs
    always produce equal trees. A forwarding table that revisits a node or
    reuses a link makes the result not a tree and raises RoutingError.
    """
    src_node = topo.node_of_rank(request.source)
    edges: list[TreeEdge] = []
    deliveries: list[DestMemoryPair] = []
    visited = {src_node}

    def expand(at: int, pairs: tuple[DestMemoryPair, ...]) -> None:
        local, groups = partition_by_next_hop(at, pairs, topo)
        if local is not None:
            deliveries.append(local)
        for hop, subset in groups.items():
            if (at, hop) not in topo.links:
                raise RoutingError(f"forwarding at {at} uses missing link to {hop}")
            if hop in visited:
                raise RoutingError(f"forwarding revisits node {hop}; not a tree")
            visited.add(hop)
            edges.append(TreeEdge(at, hop, frozenset(p.dest for p in subset), request.size))
            expand(hop, subset)

    expand(src_node, tuple(sorted(request.pairs)))
    planned = frozenset(deliveries)
    if planned != request.pairs:
        raise RoutingError(f"planned deliveries {planned} do not match request {request.pairs}")
    return TransmissionTree(src_node, tuple(edges), planned, request.size)


def unicast_plan(source: int, dest: int, size: float, topo: Topology, buffer: int = 0) -> TransmissionTree:
    """Path-shaped tree for a plain single-destination write."""
    if size <= 0:
        raise ValueError("size must be positive")
    if source == dest:
        raise ValueError("source and destination rank coincide")
    src_node = topo.node_of_rank(source)
    nodes = topo.path(src_node, dest)
    dests = frozenset([dest])
    edges = tuple(TreeEdge(a, b, dests, size) for a, b in zip(nodes, nodes[1:]))
    return TransmissionTree(src_node, edges, frozenset([DestMemoryPair(dest, buffer)]), size)


def tree_to_json(tree: TransmissionTree) -> dict:
    """JSON-serializable form of a tree (edge list with destination subsets)."""
    return {
        "root": tree.root,
        "size": tree.size,
        "edges": [
            {"src": e.src, "dst": e.dst, "dests": sorted(e.dests), "size": e.size}
            for e in tree.edges
        ],
        "deliveries": [
            {"dest": p.dest, "buffer": p.buffer} for p in sorted(tree.deliveries)
        ],
    }
