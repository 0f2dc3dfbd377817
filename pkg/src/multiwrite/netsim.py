"""Fluid-flow network simulator with max-min fair bandwidth sharing.

Flows are transmission trees: in the default pipelined mode a flow moves at a
single rate across every edge of its tree simultaneously (relays forward as
data streams through), so the flow's rate is constrained by all of its links
at once. Rates are the max-min fair allocation computed by progressive
filling: all unfinished flows rise together until a link saturates, flows on
saturated links freeze, and the rest keep rising.

``simulate`` is event driven. Epochs are delimited by flow starts and flow
completions; simultaneous completions are processed in one event. Per-flow
finish times additionally pay ``hop_startup`` once per tree edge, modeling the
fixed per-copy forwarding/replication cost at each hop; that term is what
makes replication trees with large fan-out lose on small transfers despite
moving fewer bytes.

``store_and_forward`` mode instead releases each tree edge only after its
parent edge finished, modeling relays that buffer the entire payload before
forwarding (each edge then gets its own max-min share).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

from .planning import TransmissionTree
from .topology import Topology

PIPELINED = "pipelined"
STORE_AND_FORWARD = "store_and_forward"

_REL_TOL = 1e-12


@dataclass(frozen=True)
class TreeFlow:
    """One payload moving along one transmission tree."""

    tree: TransmissionTree
    size: float
    start: float = 0.0
    label: str | None = None
    payload: tuple | None = None

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("flow size must be positive")
        if self.start < 0:
            raise ValueError("flow start must not be negative")


@dataclass(frozen=True)
class SimParams:
    hop_startup: float = 0.0
    relay_mode: str = PIPELINED

    def __post_init__(self):
        if self.hop_startup < 0:
            raise ValueError("hop_startup must not be negative")
        if self.relay_mode not in (PIPELINED, STORE_AND_FORWARD):
            raise ValueError(f"unknown relay mode {self.relay_mode!r}")


@dataclass
class FlowRecord:
    flow: TreeFlow
    label: str
    start: float
    finish: float
    epochs: list[tuple[float, float, float]]


@dataclass
class CompletionReport:
    records: list[FlowRecord]
    _by_flow: dict[TreeFlow, FlowRecord] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_flow = {r.flow: r for r in self.records}

    def finish(self, flow: TreeFlow) -> float:
        return self._by_flow[flow].finish

    @property
    def latency(self) -> float:
        if not self.records:
            raise ValueError("empty report has no latency")
        return max(r.finish for r in self.records)

    def to_csv(self) -> str:
        lines = ["flow_label,start,finish,rate_epochs"]
        for r in self.records:
            epochs = ";".join(f"{t0!r}:{t1!r}@{rate!r}" for t0, t1, rate in r.epochs)
            lines.append(f"{r.label},{r.start!r},{r.finish!r},{epochs}")
        return "\n".join(lines) + "\n"


def operator_latency(report: CompletionReport) -> float:
    """Completion time of the whole operator: the slowest flow's finish."""
    return report.latency


def waterfill(
    users: Sequence[tuple[Hashable, Sequence[tuple[int, int]]]],
    capacity: Mapping[tuple[int, int], float],
) -> dict[Hashable, float]:
    """Max-min fair rates for users, each consuming its rate on every listed link.

    Progressive filling: all users' rates rise at the same pace; when a link
    runs out of headroom its users freeze at the current level. Users with no
    links are unconstrained and get ``math.inf``.
    """
    rates: dict[Hashable, float] = {}
    link_users: dict[tuple[int, int], set[Hashable]] = {}
    active: set[Hashable] = set()
    for key, links in users:
        if key in rates:
            raise ValueError(f"duplicate user key {key!r}")
        rates[key] = math.inf if not links else 0.0
        if not links:
            continue
        active.add(key)
        for link in set(links):
            if link not in capacity:
                raise ValueError(f"user {key!r} references unknown link {link}")
            link_users.setdefault(link, set()).add(key)
    residual = {link: capacity[link] for link in link_users}
    floor = {link: capacity[link] * _REL_TOL for link in link_users}
    while active:
        inc = min(
            residual[link] / len(users_on)
            for link, users_on in link_users.items()
            if users_on
        )
        for key in active:
            rates[key] += inc
        saturated = []
        for link, users_on in link_users.items():
            if not users_on:
                continue
            residual[link] -= inc * len(users_on)
            if residual[link] <= floor[link]:
                saturated.append(link)
        frozen = set()
        for link in saturated:
            frozen |= link_users[link]
        if not frozen:
            raise RuntimeError("progressive filling made no progress")
        active -= frozen
        for users_on in link_users.values():
            users_on -= frozen
    return rates


def max_min_allocate(flows: Iterable[TreeFlow], topo: Topology) -> dict[TreeFlow, float]:
    """Max-min fair rate per flow, each flow constrained by every edge of its tree."""
    flows = list(flows)
    capacity = {key: link.bandwidth for key, link in topo.links.items()}
    users = [(flow, flow.tree.links()) for flow in flows]
    return waterfill(users, capacity)


@dataclass
class _Segment:
    flow_idx: int
    links: tuple[tuple[int, int], ...]
    remaining: float
    ready_at: float | None  # None until the parent edge completes
    children: list[int] = field(default_factory=list)
    done_at: float | None = None
    epochs: list[tuple[float, float, float]] = field(default_factory=list)


def simulate(
    flows: Iterable[TreeFlow], topo: Topology, params: SimParams | None = None
) -> CompletionReport:
    """Run flows to completion and report per-flow finish times and rate epochs."""
    params = params or SimParams()
    flows = list(flows)
    for key in {l for f in flows for l in f.tree.links()}:
        if key not in topo.links:
            raise ValueError(f"flow uses link {key} that is not in the topology")

    segments: list[_Segment] = []
    flow_segments: dict[int, list[int]] = {}
    for idx, flow in enumerate(flows):
        edges = flow.tree.edges
        if not edges:
            flow_segments[idx] = []
            continue
        if params.relay_mode == PIPELINED:
            seg = _Segment(idx, flow.tree.links(), flow.size, flow.start)
            segments.append(seg)
            flow_segments[idx] = [len(segments) - 1]
        else:
            base = len(segments)
            in_edge: dict[int, int] = {}
            ids = []
            for e in edges:
                seg = _Segment(idx, (e.link,), flow.size, None)
                segments.append(seg)
                sid = len(segments) - 1
                in_edge[e.dst] = sid
                ids.append(sid)
            for e, sid in zip(edges, ids):
                if e.src == flow.tree.root:
                    segments[sid].ready_at = flow.start
                else:
                    segments[in_edge[e.src]].children.append(sid)
            flow_segments[idx] = ids

    pending = set(range(len(segments)))
    now = 0.0
    while pending:
        ready = [s for s in pending if segments[s].ready_at is not None]
        active = [s for s in ready if segments[s].ready_at <= now]
        if not active:
            if not ready:
                raise RuntimeError("deadlock: pending segments have no activation time")
            now = min(segments[s].ready_at for s in ready)
            continue
        capacity = {key: link.bandwidth for key, link in topo.links.items()}
        rates = waterfill([(s, segments[s].links) for s in active], capacity)
        dt_done = min(segments[s].remaining / rates[s] for s in active)
        upcoming = [segments[s].ready_at for s in ready if segments[s].ready_at > now]
        dt = dt_done if not upcoming else min(dt_done, min(upcoming) - now)
        horizon = now + dt
        finished = []
        for s in active:
            seg = segments[s]
            seg.epochs.append((now, horizon, rates[s]))
            if seg.remaining <= rates[s] * dt * (1 + _REL_TOL):
                seg.remaining = 0.0
                seg.done_at = horizon
                finished.append(s)
            else:
                seg.remaining -= rates[s] * dt
        for s in finished:
            pending.discard(s)
            for child in segments[s].children:
                segments[child].ready_at = horizon
        now = horizon

    records = []
    for idx, flow in enumerate(flows):
        label = flow.label if flow.label is not None else f"flow{idx}"
        ids = flow_segments[idx]
        if not ids:
            finish = flow.start
            epochs: list[tuple[float, float, float]] = []
        else:
            finish = max(segments[s].done_at for s in ids)
            finish += params.hop_startup * flow.tree.edge_count
            epochs = sorted(
                (ep for s in ids for ep in segments[s].epochs), key=lambda e: (e[0], e[1])
            )
        records.append(FlowRecord(flow, label, flow.start, finish, epochs))
    return CompletionReport(records)
