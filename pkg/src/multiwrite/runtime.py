"""Deterministic message-passing harness executing one-sided writes.

Every topology node gets an actor with a FIFO inbox; a seeded scheduler picks
which actor processes its next packet, so one cluster run is reproducible and
different seeds exercise different interleavings. Payloads land in per-source
receive slots at the offset carried in the packet; relays buffer a packet,
parse its destination bitmap, deliver locally when targeted, and re-issue one
child packet per next-hop group.

Two relay modes cover the metadata handling choices:

* ``metadata_update=True``: each forwarded copy carries only the destinations
  behind its egress port; single-destination groups degenerate to plain
  writes. No duplicates can arrive.
* ``receiver_dedup=True``: copies are forwarded with the bitmap unmodified and
  every node absorbs repeats of a (source, op id) key through a bounded LRU
  store, which also stops re-forwarding, so flooding terminates.

Both flags may be combined freely; with both off, a duplicate arrival raises
``DuplicateDeliveryError`` instead of silently overwriting. Final buffer
contents are identical across modes; only the packet traffic differs.
"""

from __future__ import annotations

import random
import struct
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from . import collectives
from .errors import (
    BufferOverflowError,
    DuplicateDeliveryError,
    RoutingError,
    UnknownRankError,
)
from .metadata import DestinationBitmap, RankMap, encode
from .planning import make_pairs, partition_by_next_hop
from .topology import Topology

OPCODE_WRITE = 0x03
OPCODE_MULTIWRITE = 0x04

_HEADER = struct.Struct(">BHIQH")  # opcode, source, op_id, offset, bitmap_len
_PAYLOAD_LEN = struct.Struct(">I")

DEFAULT_SLOT_BYTES = 65536
DEFAULT_DEDUP_CAPACITY = 4096
PUMP_STEP_LIMIT = 1_000_000


@dataclass(frozen=True)
class Packet:
    """Wire unit. Write packets carry no bitmap; multiwrite packets must target
    at least one rank. Header integers are big-endian."""

    opcode: int
    source: int
    op_id: int
    offset: int
    bitmap: bytes
    payload: bytes

    def __post_init__(self):
        if self.opcode not in (OPCODE_WRITE, OPCODE_MULTIWRITE):
            raise ValueError(f"unknown opcode {self.opcode:#x}")
        if self.opcode == OPCODE_WRITE and self.bitmap:
            raise ValueError("write packets carry no bitmap")
        if self.opcode == OPCODE_MULTIWRITE and not any(self.bitmap):
            raise ValueError("multiwrite packets must target at least one rank")
        if not self.payload:
            raise ValueError("payload must not be empty")

    def encode(self) -> bytes:
        return b"".join(
            (
                _HEADER.pack(self.opcode, self.source, self.op_id, self.offset, len(self.bitmap)),
                self.bitmap,
                _PAYLOAD_LEN.pack(len(self.payload)),
                self.payload,
            )
        )

    @classmethod
    def decode(cls, data: bytes) -> "Packet":
        if len(data) < _HEADER.size + _PAYLOAD_LEN.size:
            raise ValueError("truncated packet header")
        opcode, source, op_id, offset, bitmap_len = _HEADER.unpack_from(data)
        pos = _HEADER.size
        if len(data) < pos + bitmap_len + _PAYLOAD_LEN.size:
            raise ValueError("truncated bitmap")
        bitmap = data[pos : pos + bitmap_len]
        pos += bitmap_len
        (payload_len,) = _PAYLOAD_LEN.unpack_from(data, pos)
        pos += _PAYLOAD_LEN.size
        payload = data[pos : pos + payload_len]
        if len(payload) != payload_len or pos + payload_len != len(data):
            raise ValueError("payload length mismatch")
        return cls(opcode, source, op_id, offset, bitmap, payload)


@dataclass
class NodeActor:
    node: int
    rank: int | None
    inbox: deque = field(default_factory=deque)
    slots: dict[int, bytearray] = field(default_factory=dict)
    completed: dict[tuple[int, int], int] = field(default_factory=dict)
    seen: OrderedDict = field(default_factory=OrderedDict)


@dataclass(frozen=True)
class OpHandle:
    """Completion handle: one part per (op id, offset group) of the request."""

    cluster_id: int
    source: int
    parts: tuple[tuple[int, int, frozenset[int], int], ...]  # (op_id, offset, ranks, length)


class Barrier:
    """Arrival-counting barrier over a rank group."""

    def __init__(self, group: Iterable[int]):
        self.group = frozenset(group)
        if not self.group:
            raise ValueError("barrier group must not be empty")
        self.arrived: set[int] = set()

    def arrive(self, rank: int) -> None:
        if rank not in self.group:
            raise ValueError(f"rank {rank} is not a member of this barrier group")
        self.arrived.add(rank)

    @property
    def released(self) -> bool:
        return self.group <= self.arrived


class ClusterHandle:
    """A running cluster: actors, channels, trace, and the op surface."""

    def __init__(
        self,
        topo: Topology,
        seed: int = 0,
        *,
        metadata_update: bool = True,
        receiver_dedup: bool = False,
        slot_bytes: int = DEFAULT_SLOT_BYTES,
        dedup_capacity: int = DEFAULT_DEDUP_CAPACITY,
        bitmap_width: int | None = None,
    ):
        violations = topo.validate()
        if violations:
            raise ValueError("topology failed validation: " + "; ".join(violations))
        if slot_bytes <= 0 or dedup_capacity <= 0:
            raise ValueError("slot_bytes and dedup_capacity must be positive")
        self.topo = topo
        self.metadata_update = metadata_update
        self.receiver_dedup = receiver_dedup
        self.slot_bytes = slot_bytes
        self.dedup_capacity = dedup_capacity
        self.rank_map = RankMap.from_topology(topo, slot_bytes)
        nranks = len(self.rank_map.ranks())
        if bitmap_width is None:
            bitmap_width = max(64, ((nranks + 63) // 64) * 64)
        if nranks and max(self.rank_map.ranks()) >= bitmap_width:
            raise ValueError("bitmap width too small for the rank space")
        self.bitmap_width = bitmap_width
        self.actors = {n.id: NodeActor(n.id, n.rank) for n in topo.nodes}
        self.rng = random.Random(seed)
        self.trace: list[dict] = []
        self._next_op: dict[int, int] = {}

    # --- op id allocation: per-source monotone ---

    def _alloc_op(self, source: int) -> int:
        op = self._next_op.get(source, 0)
        self._next_op[source] = op + 1
        return op

    # --- transport ---

    def _route_step(self, at: int, target_node: int) -> int:
        if (at, target_node) in self.topo.links:
            return target_node
        rank = self.topo.node(target_node).rank
        if rank is None:
            raise RoutingError(f"switch {target_node} is not adjacent to {at}")
        return self.topo.next_hop(at, rank)

    def _transmit(self, at: int, target_node: int, packet: Packet) -> None:
        hop = self._route_step(at, target_node)
        self.trace.append(
            {
                "channel": f"{at}->{hop}",
                "op": packet.op_id,
                "opcode": packet.opcode,
                "bitmap": packet.bitmap.hex(),
                "len": len(packet.payload),
            }
        )
        self.actors[hop].inbox.append((at, target_node, packet.encode()))

    # --- delivery ---

    def _deliver(self, actor: NodeActor, packet: Packet) -> None:
        key = (packet.source, packet.op_id)
        if key in actor.completed:
            if self.receiver_dedup:
                return
            raise DuplicateDeliveryError(
                f"rank {actor.rank}: duplicate delivery of op {key} with deduplication off"
            )
        if packet.source not in self.rank_map:
            raise UnknownRankError(f"payload from unknown rank {packet.source}")
        end = packet.offset + len(packet.payload)
        if end > self.slot_bytes:
            raise BufferOverflowError(
                f"rank {actor.rank}: write [{packet.offset}, {end}) exceeds slot of {self.slot_bytes}"
            )
        slot = actor.slots.setdefault(packet.source, bytearray(self.slot_bytes))
        slot[packet.offset : end] = packet.payload
        actor.completed[key] = len(packet.payload)

    def _local_copy(self, rank: int, source: int, op_id: int, offset: int, payload: bytes) -> None:
        actor = self.actors[self.topo.node_of_rank(rank)]
        self._deliver(actor, Packet(OPCODE_WRITE, source, op_id, offset, b"", payload))

    # --- semantic processing ---

    def _remember(self, actor: NodeActor, key: tuple[int, int]) -> bool:
        """Record a (source, op) sighting; True if it was already known."""
        if key in actor.seen:
            actor.seen.move_to_end(key)
            return True
        actor.seen[key] = True
        if len(actor.seen) > self.dedup_capacity:
            actor.seen.popitem(last=False)
        return False

    def _process(self, actor: NodeActor) -> None:
        at, target, wire = actor.inbox.popleft()
        packet = Packet.decode(wire)
        if actor.node != target:
            # Transport forwarding: the packet is addressed elsewhere.
            self._transmit(actor.node, target, packet)
            return
        if packet.opcode == OPCODE_WRITE:
            self._deliver(actor, packet)
            return
        key = (packet.source, packet.op_id)
        if self.receiver_dedup and self._remember(actor, key):
            return
        bitmap = DestinationBitmap.from_bytes(packet.bitmap, self.bitmap_width)
        if actor.rank is not None and bitmap.contains(actor.rank):
            self._deliver(actor, packet)
        remaining = [r for r in bitmap.ranks() if r != actor.rank]
        if not remaining:
            return
        self._fan_out(actor.node, packet, remaining)

    def _fan_out(self, at: int, packet: Packet, dest_ranks: list[int]) -> None:
        """Issue one child packet per next-hop group of the remaining destinations."""
        _, groups = partition_by_next_hop(at, make_pairs(dest_ranks), self.topo)
        for hop, subset in groups.items():
            ranks = [p.dest for p in subset]
            if not self.metadata_update:
                # Forward with the bitmap unmodified; receivers deduplicate.
                self._transmit(at, hop, packet)
            elif len(ranks) == 1:
                out = Packet(
                    OPCODE_WRITE, packet.source, packet.op_id, packet.offset, b"", packet.payload
                )
                self._transmit(at, self.topo.node_of_rank(ranks[0]), out)
            else:
                out = Packet(
                    OPCODE_MULTIWRITE,
                    packet.source,
                    packet.op_id,
                    packet.offset,
                    encode(ranks, self.bitmap_width).to_bytes(),
                    packet.payload,
                )
                self._transmit(at, hop, out)

    # --- public operations ---

    def write(self, source: int, dest: int, offset: int, payload: bytes) -> OpHandle:
        """One-sided write of ``payload`` into ``dest``'s slot for ``source``."""
        payload = bytes(payload)
        self._check_args(source, [(dest, offset)], payload)
        op_id = self._alloc_op(source)
        if dest == source:
            self._local_copy(source, source, op_id, offset, payload)
        else:
            packet = Packet(OPCODE_WRITE, source, op_id, offset, b"", payload)
            self._transmit(self.topo.node_of_rank(source), self.topo.node_of_rank(dest), packet)
        return OpHandle(id(self), source, ((op_id, offset, frozenset([dest]), len(payload)),))

    def multiwrite(
        self,
        source: int,
        dests: Iterable[tuple[int, int]],
        payload: bytes,
        via: int | None = None,
    ) -> OpHandle:
        """Deliver ``payload`` once to every (rank, offset) destination.

        Destinations sharing an offset travel as one operation. With one
        destination and no forced relay the operation degenerates to a plain
        write. ``via`` addresses the first copy at an explicit relay rank
        instead of the source's own next hops.
        """
        payload = bytes(payload)
        dests = sorted(set(dests))
        self._check_args(source, dests, payload)
        if via is not None:
            if via not in self.rank_map:
                raise UnknownRankError(f"relay rank {via} unknown")
            if via == source:
                raise ValueError("relay rank coincides with the source")
        by_offset: dict[int, list[int]] = {}
        for rank, offset in dests:
            by_offset.setdefault(offset, []).append(rank)
        src_node = self.topo.node_of_rank(source)
        parts = []
        for offset, ranks in by_offset.items():
            if len(ranks) != len(set(ranks)):
                raise ValueError("duplicate (rank, offset) destination")
            op_id = self._alloc_op(source)
            parts.append((op_id, offset, frozenset(ranks), len(payload)))
            if source in ranks:
                self._local_copy(source, source, op_id, offset, payload)
            remaining = [r for r in ranks if r != source]
            if not remaining:
                continue
            if via is None and len(ranks) == 1:
                # Degenerate single-destination operation: a standard write.
                packet = Packet(OPCODE_WRITE, source, op_id, offset, b"", payload)
                self._transmit(src_node, self.topo.node_of_rank(remaining[0]), packet)
                continue
            bitmap_ranks = remaining if self.metadata_update else ranks
            packet = Packet(
                OPCODE_MULTIWRITE,
                source,
                op_id,
                offset,
                encode(bitmap_ranks, self.bitmap_width).to_bytes(),
                payload,
            )
            if via is not None:
                self._transmit(src_node, self.topo.node_of_rank(via), packet)
            else:
                self._fan_out(src_node, packet, remaining)
        return OpHandle(id(self), source, tuple(parts))

    def _check_args(self, source: int, dests, payload: bytes) -> None:
        if not payload:
            raise ValueError("payload must not be empty")
        if source not in self.rank_map:
            raise UnknownRankError(f"source rank {source} unknown")
        if not dests:
            raise ValueError("destination set must not be empty")
        for rank, offset in dests:
            if rank not in self.rank_map:
                raise UnknownRankError(f"destination rank {rank} unknown")
            if offset < 0:
                raise ValueError("offset must not be negative")
            if offset + len(payload) > self.slot_bytes:
                raise BufferOverflowError(
                    f"write [{offset}, {offset + len(payload)}) exceeds slot of {self.slot_bytes}"
                )

    def poll_complete(self, rank: int, handle: OpHandle) -> bool:
        """True once every part of ``handle`` that targets ``rank`` has landed."""
        if handle.cluster_id != id(self):
            raise ValueError("handle belongs to a different cluster")
        parts = [p for p in handle.parts if rank in p[2]]
        if not parts:
            raise ValueError(f"rank {rank} is not a destination of this operation")
        actor = self.actors[self.topo.node_of_rank(rank)]
        return all(
            actor.completed.get((handle.source, op_id)) == length
            for op_id, _offset, _ranks, length in parts
        )

    def step(self) -> bool:
        """Process one packet at one scheduler-chosen actor. False when idle."""
        ready = [a for a in sorted(self.actors) if self.actors[a].inbox]
        if not ready:
            return False
        self._process(self.actors[ready[self.rng.randrange(len(ready))]])
        return True

    def pump(self, max_steps: int | None = None) -> int:
        """Run the scheduler until quiescence; returns steps taken.

        With an explicit ``max_steps`` the pump simply stops there. Without
        one it guards against livelock: a deduplication window smaller than
        the number of in-flight operations can keep evicted packets
        circulating forever, which is a configuration fault, not progress.
        """
        steps = 0
        limit = PUMP_STEP_LIMIT if max_steps is None else max_steps
        while steps < limit and self.step():
            steps += 1
        if max_steps is None and steps >= limit:
            raise RuntimeError(
                f"no quiescence after {limit} steps; if receiver_dedup is on, "
                "check that dedup_capacity covers all in-flight operations"
            )
        return steps

    def barrier(self, group: Iterable[int]) -> Barrier:
        """Drain in-flight traffic, then release once every member has arrived."""
        bar = Barrier(group)
        self.pump()
        for rank in sorted(bar.group):
            if rank not in self.rank_map:
                raise UnknownRankError(f"barrier member {rank} unknown")
            bar.arrive(rank)
        assert bar.released
        return bar

    def slot_bytes_of(self, rank: int, source: int, start: int, length: int) -> bytes:
        """Read ``rank``'s receive slot for ``source`` (zeros if never written)."""
        actor = self.actors[self.topo.node_of_rank(rank)]
        slot = actor.slots.get(source)
        if slot is None:
            return bytes(length)
        return bytes(slot[start : start + length])


def init_cluster(topo: Topology, seed: int = 0, **flags) -> ClusterHandle:
    """Validate the topology and bring up one actor per node."""
    return ClusterHandle(topo, seed, **flags)


# --- scripted collectives on the harness ---


def _pattern(tag: int, length: int) -> bytes:
    return bytes((tag * 131 + i * 31) % 251 for i in range(length))


def run_allgather_script(
    cluster: ClusterHandle,
    spec: collectives.AllGatherSpec,
    fragments: Mapping[int, bytes] | None = None,
) -> dict[int, bytes]:
    """Execute an AllGather strategy end to end; returns each rank's output.

    Every rank contributes one fragment; afterwards each rank's output is the
    concatenation of its group's fragments in group order. Hybrid strategies
    split each fragment per the planner's ratio: the head moves over direct
    writes, the tail over relayed multiwrites at the matching slot offset.
    """
    size = int(spec.message_bytes)
    if size != spec.message_bytes or size < 1:
        raise ValueError("harness fragments need an integral byte size >= 1")
    if size > cluster.slot_bytes:
        raise BufferOverflowError(f"fragment of {size} exceeds slot of {cluster.slot_bytes}")
    if fragments is None:
        fragments = {r: _pattern(r, size) for g in spec.groups for r in g}
    else:
        for g in spec.groups:
            for r in g:
                if len(fragments[r]) != size:
                    raise ValueError(f"fragment of rank {r} is not {size} bytes")

    handles: list[tuple[int, OpHandle]] = []

    def issue(src: int, peers, partner_of=None, relays_of=None):
        frag = fragments[src]
        cluster._local_copy(src, src, cluster._alloc_op(src), 0, frag)
        if spec.strategy in ("baseline", "unicast"):
            for dst in peers:
                handles.append((dst, cluster.write(src, dst, 0, frag)))
            return
        if spec.strategy == "multiwrite":
            h = cluster.multiwrite(src, [(d, 0) for d in peers], frag)
            handles.extend((d, h) for d in peers)
            return
        ratio = collectives.paired_split(spec, cluster.topo, src)
        head = round(ratio.direct_fraction * size)
        head = min(max(head, 0), size)
        if head:
            for dst in peers:
                handles.append((dst, cluster.write(src, dst, 0, frag[:head])))
        tail = frag[head:]
        if not tail:
            return
        relays = [partner_of] if spec.strategy.endswith("_paired") else list(relays_of)
        bounds = [len(tail) * i // len(relays) for i in range(len(relays) + 1)]
        for relay, lo, hi in zip(relays, bounds, bounds[1:]):
            if lo == hi:
                continue
            share = tail[lo:hi]
            if spec.strategy.startswith("unicast"):
                for dst in peers:
                    h = cluster.multiwrite(src, [(dst, head + lo)], share, via=relay)
                    handles.append((dst, h))
            else:
                h = cluster.multiwrite(src, [(d, head + lo) for d in peers], share, via=relay)
                handles.extend((d, h) for d in peers)

    if spec.strategy in collectives.PAIRED_STRATEGIES:
        a, b = spec.groups
        for own, opp in ((a, b), (b, a)):
            for i, src in enumerate(own):
                peers = tuple(r for r in own if r != src)
                issue(src, peers, partner_of=opp[i], relays_of=opp)
    else:
        for group in spec.groups:
            for src in group:
                peers = tuple(r for r in group if r != src)
                if peers:
                    issue(src, peers)

    cluster.pump()
    for rank, handle in handles:
        if not cluster.poll_complete(rank, handle):
            raise RuntimeError(f"rank {rank} incomplete after quiescence")
    for group in spec.groups:
        cluster.barrier(group)
    outputs = {}
    for group in spec.groups:
        for rank in group:
            outputs[rank] = b"".join(
                cluster.slot_bytes_of(rank, member, 0, size) for member in group
            )
    return outputs


def run_dispatch_script(
    cluster: ClusterHandle, spec: collectives.AlltoAllDispatchSpec, strategy: str
) -> dict[tuple[int, int, int], bytes]:
    """Execute token dispatch; returns payloads keyed (dest, source, token index)."""
    if strategy not in collectives.DISPATCH_STRATEGIES:
        raise ValueError(f"unknown dispatch strategy {strategy!r}")
    seq: dict[int, int] = {}
    placed: list[tuple[collectives.Token, int, bytes, tuple[int, ...]]] = []
    for token in spec.tokens:
        size = int(token.size)
        if size != token.size or size < 1:
            raise ValueError("harness tokens need an integral byte size >= 1")
        slot_index = seq.get(token.source, 0)
        seq[token.source] = slot_index + 1
        offset = slot_index * size
        if offset + size > cluster.slot_bytes:
            raise BufferOverflowError("token stream exceeds slot capacity")
        payload = _pattern(token.index + 7, size)
        dests = spec.dest_ranks(token)
        placed.append((token, offset, payload, dests))
        for dst in dests:
            if dst == token.source:
                cluster._local_copy(dst, token.source, cluster._alloc_op(token.source), offset, payload)
        remote = [d for d in dests if d != token.source]
        if not remote:
            continue
        if strategy == "unicast":
            for dst in remote:
                cluster.write(token.source, dst, offset, payload)
        else:
            cluster.multiwrite(token.source, [(d, offset) for d in remote], payload)
    cluster.pump()
    out = {}
    for token, offset, payload, dests in placed:
        for dst in dests:
            got = cluster.slot_bytes_of(dst, token.source, offset, len(payload))
            out[(dst, token.source, token.index)] = got
    return out
