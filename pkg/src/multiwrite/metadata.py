"""Destination metadata: bitmaps, rank maps, and group-count arithmetic.

Destinations of a multi-destination write travel inside the packet as a packed
bitmap where bit ``i`` stands for rank ``i``. The bitmap replaces switch-side
group state entirely: the number of possible destination sets grows as
binomial(n, k), so no table of pre-built groups can cover them.

Bit layout is little-endian within bytes with byte 0 first, i.e. rank 0 is the
least significant bit of the first byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import CapacityError, UnknownRankError

DEFAULT_WIDTH = 64
MAX_WIDTH = 1024


@dataclass(frozen=True)
class DestinationBitmap:
    """Packed destination set of a fixed bit width."""

    width: int
    bits: int

    def __post_init__(self):
        if not 1 <= self.width <= MAX_WIDTH:
            raise ValueError(f"width must be in 1..{MAX_WIDTH}, got {self.width}")
        if self.bits < 0 or self.bits >> self.width:
            raise ValueError("bit pattern does not fit the declared width")

    @property
    def popcount(self) -> int:
        return self.bits.bit_count()

    @property
    def nbytes(self) -> int:
        return (self.width + 7) // 8

    def contains(self, rank: int) -> bool:
        return 0 <= rank < self.width and bool(self.bits >> rank & 1)

    def ranks(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.width) if self.bits >> i & 1)

    def __iter__(self) -> Iterator[int]:
        return iter(self.ranks())

    def to_bytes(self) -> bytes:
        return self.bits.to_bytes(self.nbytes, "little")

    @classmethod
    def from_bytes(cls, data: bytes, width: int) -> "DestinationBitmap":
        if len(data) != (width + 7) // 8:
            raise ValueError(f"expected {(width + 7) // 8} bitmap bytes for width {width}, got {len(data)}")
        return cls(width, int.from_bytes(data, "little"))


def encode(dests: Iterable[int], width: int = DEFAULT_WIDTH) -> DestinationBitmap:
    """Pack destination ranks into a bitmap of the given width."""
    ranks = sorted(set(dests))
    if not ranks:
        raise ValueError("destination set must not be empty")
    if ranks[0] < 0:
        raise ValueError(f"negative rank {ranks[0]}")
    if ranks[-1] >= width:
        raise CapacityError(f"rank {ranks[-1]} does not fit bitmap width {width}")
    bits = 0
    for r in ranks:
        bits |= 1 << r
    return DestinationBitmap(width, bits)


def restrict(bitmap: DestinationBitmap, keep: Iterable[int]) -> DestinationBitmap:
    """Bitmap holding only ``keep``, which must be a subset of the set bits.

    This is the egress-port rewrite a relay applies before forwarding: each
    copy carries only the destinations reachable through that port (the relay
    clears its own bit after delivering locally).
    """
    keep_bits = 0
    for r in set(keep):
        if not bitmap.contains(r):
            raise ValueError(f"rank {r} is not set in the bitmap")
        keep_bits |= 1 << r
    return DestinationBitmap(bitmap.width, keep_bits)


@dataclass(frozen=True)
class RankMap:
    """Bijection between ranks and (node id, receive buffer base address)."""

    entries: dict[int, tuple[int, int]]

    def __post_init__(self):
        targets = list(self.entries.values())
        if len(set(targets)) != len(targets):
            raise ValueError("rank map is not a bijection: duplicate (node, address) target")
        nodes = [node for node, _ in targets]
        if len(set(nodes)) != len(nodes):
            raise ValueError("rank map is not a bijection: node appears twice")

    def lookup(self, rank: int) -> tuple[int, int]:
        try:
            return self.entries[rank]
        except KeyError:
            raise UnknownRankError(f"rank {rank} not in rank map") from None

    def ranks(self) -> tuple[int, ...]:
        return tuple(sorted(self.entries))

    def __contains__(self, rank: int) -> bool:
        return rank in self.entries

    @classmethod
    def from_topology(cls, topo, slot_bytes: int = 65536) -> "RankMap":
        """One entry per endpoint; base addresses are rank-indexed slots."""
        if slot_bytes <= 0:
            raise ValueError("slot_bytes must be positive")
        return cls({n.rank: (n.id, n.rank * slot_bytes) for n in topo.endpoints()})


def decode(bitmap: DestinationBitmap, rank_map: RankMap) -> tuple[tuple[int, int, int], ...]:
    """Resolve set bits to (rank, node, base address) triples, ascending by rank."""
    return tuple((r, *rank_map.lookup(r)) for r in bitmap.ranks())


def payload_overhead(ranks: int, payload_bytes: int) -> float:
    """Bitmap bytes per payload byte: ceil(ranks / 8) / payload_bytes."""
    if ranks < 1:
        raise ValueError("ranks must be at least 1")
    if payload_bytes < 1:
        raise ValueError("payload_bytes must be at least 1")
    return ((ranks + 7) // 8) / payload_bytes


def binomial(n: int, k: int) -> int:
    """Exact binomial(n, k) by the multiplicative formula; 0 when k > n."""
    if n < 0 or k < 0:
        raise ValueError("n and k must be non-negative")
    if k > n:
        return 0
    k = min(k, n - k)
    out = 1
    for i in range(1, k + 1):
        out = out * (n - k + i) // i
    return out


def binomial_pascal(n: int, k: int) -> int:
    """Exact binomial(n, k) by Pascal's recurrence (independent of ``binomial``)."""
    if n < 0 or k < 0:
        raise ValueError("n and k must be non-negative")
    if k > n:
        return 0
    row = [1] + [0] * k
    for _ in range(n):
        for j in range(min(k, len(row) - 1), 0, -1):
            row[j] += row[j - 1]
    return row[k]


def multicast_group_count(n: int, k: int) -> int:
    """Number of distinct k-subsets of n ranks: the group table a switch would need."""
    return binomial(n, k)
