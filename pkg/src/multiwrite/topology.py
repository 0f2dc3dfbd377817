"""Cluster topology model: nodes, directed links, and per-node forwarding tables.

A topology is a set of nodes (endpoints carrying dense ranks, plus optional
switches), directed capacity-weighted links, and a forwarding table mapping
(node, destination rank) to the next-hop node. Builders cover the three
standard shapes:

* ``build_full_mesh``: every endpoint pair joined by a dedicated link.
* ``build_star``: endpoints hang off one switch that forwards but never
  originates or consumes data.
* ``build_two_tier``: servers with an internal full mesh; exactly one
  inter-server link per same-index endpoint pair, so cross-server traffic
  for any rank routes via the same-index endpoint on the target server.

Topologies are treated as immutable after construction; derived variants are
produced by ``with_route_via``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import RoutingError, UnknownRankError

ENDPOINT = "endpoint"
SWITCH = "switch"

DEFAULT_BW_UNIT = "bytes_per_us"


@dataclass(frozen=True)
class Node:
    id: int
    kind: str = ENDPOINT
    rank: int | None = None


@dataclass(frozen=True)
class Link:
    src: int
    dst: int
    bandwidth: float

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError(f"link {self.src}->{self.dst}: bandwidth must be positive")
        if self.src == self.dst:
            raise ValueError(f"link {self.src}->{self.dst}: self loops are not allowed")


@dataclass
class Topology:
    nodes: tuple[Node, ...]
    links: dict[tuple[int, int], Link]
    forwarding: dict[int, dict[int, tuple[int, ...]]]
    bw_unit: str = DEFAULT_BW_UNIT
    _node_by_id: dict[int, Node] = field(init=False, repr=False)
    _node_of_rank: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._node_by_id = {n.id: n for n in self.nodes}
        if len(self._node_by_id) != len(self.nodes):
            raise ValueError("duplicate node ids")
        ranks: dict[int, int] = {}
        for n in self.nodes:
            if n.kind == ENDPOINT:
                if n.rank is None:
                    raise ValueError(f"endpoint node {n.id} has no rank")
                if n.rank in ranks:
                    raise ValueError(f"duplicate rank {n.rank}")
                ranks[n.rank] = n.id
            elif n.rank is not None:
                raise ValueError(f"switch node {n.id} must not carry a rank")
        self._node_of_rank = ranks
        for (src, dst), link in self.links.items():
            if (src, dst) != (link.src, link.dst):
                raise ValueError(f"link key {(src, dst)} does not match link {link}")
            if src not in self._node_by_id or dst not in self._node_by_id:
                raise ValueError(f"link {src}->{dst} references unknown node")

    # --- lookups ---

    def node(self, node_id: int) -> Node:
        try:
            return self._node_by_id[node_id]
        except KeyError:
            raise UnknownRankError(f"unknown node id {node_id}") from None

    def node_of_rank(self, rank: int) -> int:
        try:
            return self._node_of_rank[rank]
        except KeyError:
            raise UnknownRankError(f"unknown rank {rank}") from None

    def ranks(self) -> tuple[int, ...]:
        return tuple(sorted(self._node_of_rank))

    def endpoints(self) -> tuple[Node, ...]:
        return tuple(n for n in self.nodes if n.kind == ENDPOINT)

    def bandwidth(self, src: int, dst: int) -> float:
        try:
            return self.links[(src, dst)].bandwidth
        except KeyError:
            raise RoutingError(f"no link {src}->{dst}") from None

    # --- routing ---

    def next_hop(self, at: int, dest: int) -> int:
        """First next-hop node from node ``at`` toward destination rank ``dest``."""
        dest_node = self.node_of_rank(dest)
        if at == dest_node:
            raise ValueError(f"node {at} is already the destination of rank {dest}")
        hops = self.forwarding.get(at, {}).get(dest)
        if not hops:
            raise RoutingError(f"no forwarding entry at node {at} for rank {dest}")
        return hops[0]

    def path(self, at: int, dest: int) -> tuple[int, ...]:
        """Node sequence from ``at`` to rank ``dest`` following first next hops."""
        dest_node = self.node_of_rank(dest)
        seq = [at]
        cur = at
        for _ in range(len(self.nodes)):
            if cur == dest_node:
                return tuple(seq)
            cur = self.next_hop(cur, dest)
            if (seq[-1], cur) not in self.links:
                raise RoutingError(f"forwarding at {seq[-1]} for rank {dest} uses missing link to {cur}")
            seq.append(cur)
        raise RoutingError(f"forwarding loop walking from {at} to rank {dest}: {seq}")

    def validate(self) -> list[str]:
        """Check loop freedom and mutual endpoint reachability.

        Returns one message per violation; an empty list means the topology is
        usable. Every (node, destination rank) walk must terminate at the
        destination within a node-count number of steps over existing links.
        """
        violations = []
        for node_id, table in self.forwarding.items():
            if node_id not in self._node_by_id:
                violations.append(f"forwarding table for unknown node {node_id}")
                continue
            for dest, hops in table.items():
                if dest not in self._node_of_rank:
                    violations.append(f"node {node_id}: forwarding entry for unknown rank {dest}")
                    continue
                for hop in hops:
                    if (node_id, hop) not in self.links:
                        violations.append(f"node {node_id} rank {dest}: next hop {hop} has no link")
        for node in self.nodes:
            for rank, dest_node in sorted(self._node_of_rank.items()):
                if node.id == dest_node:
                    continue
                try:
                    self.path(node.id, rank)
                except (RoutingError, UnknownRankError) as exc:
                    violations.append(f"node {node.id} -> rank {rank}: {exc}")
        return violations

    # --- derivation ---

    def with_route_via(self, src_node: int, dest_ranks, relay_node: int) -> "Topology":
        """Copy of this topology where ``src_node`` routes ``dest_ranks`` via ``relay_node``.

        Only the source node's forwarding entries change; the relay and all
        other nodes keep their normal tables. The source must have a direct
        link to the relay.
        """
        if (src_node, relay_node) not in self.links:
            raise RoutingError(f"no link {src_node}->{relay_node} for relay route")
        forwarding = {n: dict(t) for n, t in self.forwarding.items()}
        table = forwarding.setdefault(src_node, {})
        for rank in dest_ranks:
            if self.node_of_rank(rank) == src_node:
                raise ValueError(f"rank {rank} lives on node {src_node} itself")
            table[rank] = (relay_node,)
        return Topology(self.nodes, self.links, forwarding, self.bw_unit)


def build_full_mesh(n: int, bandwidth: float) -> Topology:
    """Full mesh of ``n`` endpoints: a dedicated link for every ordered pair."""
    if n < 2:
        raise ValueError("full mesh needs at least 2 endpoints")
    nodes = tuple(Node(i, ENDPOINT, i) for i in range(n))
    links = {}
    forwarding: dict[int, dict[int, tuple[int, ...]]] = {}
    for i in range(n):
        table = {}
        for j in range(n):
            if i == j:
                continue
            links[(i, j)] = Link(i, j, bandwidth)
            table[j] = (j,)
        forwarding[i] = table
    return Topology(nodes, links, forwarding)


def build_star(n: int, bandwidth: float) -> Topology:
    """``n`` endpoints joined through a single switch that only forwards."""
    if n < 2:
        raise ValueError("star needs at least 2 endpoints")
    sw = n
    nodes = tuple(Node(i, ENDPOINT, i) for i in range(n)) + (Node(sw, SWITCH),)
    links = {}
    forwarding: dict[int, dict[int, tuple[int, ...]]] = {sw: {}}
    for i in range(n):
        links[(i, sw)] = Link(i, sw, bandwidth)
        links[(sw, i)] = Link(sw, i, bandwidth)
        forwarding[i] = {j: (sw,) for j in range(n) if j != i}
        forwarding[sw][i] = (i,)
    return Topology(nodes, links, forwarding)


def build_two_tier(servers: int, npus_per_server: int, intra_bw: float, inter_bw: float) -> Topology:
    """Servers with an internal full mesh plus same-index inter-server links.

    Rank layout is ``server * npus_per_server + local_index``. Cross-server
    traffic toward any rank is forwarded to the same-index endpoint on the
    destination server, which then delivers over its local mesh. With one
    server this reduces to ``build_full_mesh(npus_per_server, intra_bw)``.
    """
    if servers < 1 or npus_per_server < 1:
        raise ValueError("two_tier needs at least 1 server and 1 endpoint per server")
    if servers * npus_per_server < 2:
        raise ValueError("two_tier needs at least 2 endpoints")
    if inter_bw > intra_bw:
        raise ValueError("inter-server bandwidth must not exceed intra-server bandwidth")

    def rank(server: int, local: int) -> int:
        return server * npus_per_server + local

    n = servers * npus_per_server
    nodes = tuple(Node(i, ENDPOINT, i) for i in range(n))
    links = {}
    forwarding: dict[int, dict[int, tuple[int, ...]]] = {}
    for s in range(servers):
        for a in range(npus_per_server):
            for b in range(npus_per_server):
                if a != b:
                    links[(rank(s, a), rank(s, b))] = Link(rank(s, a), rank(s, b), intra_bw)
    for sa in range(servers):
        for sb in range(servers):
            if sa != sb:
                for l in range(npus_per_server):
                    links[(rank(sa, l), rank(sb, l))] = Link(rank(sa, l), rank(sb, l), inter_bw)
    for s in range(servers):
        for l in range(npus_per_server):
            me = rank(s, l)
            table = {}
            for dest in range(n):
                if dest == me:
                    continue
                dest_server = dest // npus_per_server
                if dest_server == s:
                    table[dest] = (dest,)
                else:
                    table[dest] = (rank(dest_server, l),)
            forwarding[me] = table
    return Topology(nodes, links, forwarding)


_BUILDERS = {
    "full_mesh": (build_full_mesh, ("n", "bandwidth")),
    "star": (build_star, ("n", "bandwidth")),
    "two_tier": (build_two_tier, ("servers", "npus_per_server", "intra_bw", "inter_bw")),
}


def topology_from_json(doc: dict) -> Topology:
    """Build a topology from its JSON form.

    Either ``{"kind": ..., "params": {...}}`` for the named builders, or an
    explicit ``{"nodes": [...], "links": [...], "forwarding": {...}}`` listing.
    An optional ``bw_unit`` tags the bandwidth unit (informational).
    """
    if not isinstance(doc, dict):
        raise ValueError("topology document must be an object")
    bw_unit = doc.get("bw_unit", DEFAULT_BW_UNIT)
    if "kind" in doc:
        kind = doc["kind"]
        if kind not in _BUILDERS:
            raise ValueError(f"unknown topology kind {kind!r}")
        builder, names = _BUILDERS[kind]
        params = doc.get("params", {})
        unknown = set(params) - set(names)
        if unknown:
            raise ValueError(f"unknown {kind} params: {sorted(unknown)}")
        missing = [p for p in names if p not in params]
        if missing:
            raise ValueError(f"missing {kind} params: {missing}")
        topo = builder(**params)
        topo.bw_unit = bw_unit
        return topo
    try:
        nodes = tuple(
            Node(int(n["id"]), n.get("kind", ENDPOINT), n.get("rank")) for n in doc["nodes"]
        )
        links = {}
        for entry in doc["links"]:
            link = Link(int(entry["src"]), int(entry["dst"]), float(entry["bw"]))
            links[(link.src, link.dst)] = link
        forwarding = {
            int(node_id): {int(dest): tuple(hops) for dest, hops in table.items()}
            for node_id, table in doc["forwarding"].items()
        }
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed explicit topology: {exc}") from exc
    return Topology(nodes, links, forwarding, bw_unit)


def topology_to_json(topo: Topology) -> dict:
    """Explicit JSON form of a topology (inverse of the explicit loader)."""
    return {
        "nodes": [
            {"id": n.id, "kind": n.kind, **({"rank": n.rank} if n.rank is not None else {})}
            for n in topo.nodes
        ],
        "links": [
            {"src": l.src, "dst": l.dst, "bw": l.bandwidth}
            for l in (topo.links[k] for k in sorted(topo.links))
        ],
        "forwarding": {
            str(node_id): {str(dest): list(hops) for dest, hops in sorted(table.items())}
            for node_id, table in sorted(topo.forwarding.items())
        },
        "bw_unit": topo.bw_unit,
    }


def load_topology(path: str) -> Topology:
    with open(path, "r", encoding="utf-8") as fh:
        return topology_from_json(json.load(fh))
