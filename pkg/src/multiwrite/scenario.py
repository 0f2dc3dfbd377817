"""Scenario documents: strict schema-1 JSON describing one comparison run.

A scenario names a topology, one workload (AllGather or MoE token dispatch),
the strategies to compare, simulator parameters, and an optional sweep axis.
Unknown keys are rejected with the JSON-pointer path of the offender so typos
fail loudly instead of silently changing the experiment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from . import collectives
from .errors import ConfigError
from .netsim import PIPELINED, STORE_AND_FORWARD, SimParams, TreeFlow
from .topology import Topology, topology_from_json

SCHEMA_VERSION = 1

SWEEP_PARAMS = ("msg_size", "batch")

_TOP_KEYS = {"schema", "seed", "topology", "workload", "strategies", "sim", "sweep"}
_TOPO_KEYS = {"kind", "params", "nodes", "links", "forwarding", "bw_unit"}
_AG_KEYS = {"kind", "groups", "message_bytes"}
_DISPATCH_KEYS = {"kind", "batch", "n_experts", "top_k", "token_bytes", "gate", "expert_placement"}
_SIM_KEYS = {"hop_startup", "relay_mode"}
_SWEEP_KEYS = {"param", "values"}


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise ConfigError(path, f"missing required key '{key}'")
    return doc[key]


def _reject_unknown(doc: dict, allowed: set[str], path: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{path}/{unknown[0]}", "unknown key")


def _number(value, path: str, *, minimum=None, integral=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, "expected a number")
    if integral and int(value) != value:
        raise ConfigError(path, "expected an integer")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return int(value) if integral else float(value)


@dataclass
class Scenario:
    seed: int
    topology: Topology
    workload_kind: str
    strategies: tuple[str, ...]
    sim: SimParams
    sweep: tuple[str, tuple[float, ...]] | None
    # allgather
    groups: tuple[tuple[int, ...], ...] | None = None
    message_bytes: float | None = None
    # dispatch
    batch: int | None = None
    n_experts: int | None = None
    top_k: int | None = None
    token_bytes: float | None = None
    gate: str | None = None

    def baseline_strategy(self) -> str:
        for name in ("baseline", "unicast"):
            if name in self.strategies:
                return name
        return self.strategies[0]

    def dispatch_spec(self, batch: int | None = None) -> collectives.AlltoAllDispatchSpec:
        assert self.workload_kind == "alltoall_dispatch"
        return collectives.make_gate(
            batch if batch is not None else self.batch,
            self.n_experts,
            self.top_k,
            self.gate,
            self.seed,
            n_ranks=len(self.topology.ranks()),
            token_bytes=self.token_bytes,
        )

    def plan(
        self, strategy: str, *, message_bytes: float | None = None, batch: int | None = None
    ) -> list[TreeFlow]:
        """Plan one strategy's flow set, optionally overriding the swept value."""
        if self.workload_kind == "allgather":
            spec = collectives.AllGatherSpec(
                self.groups,
                message_bytes if message_bytes is not None else self.message_bytes,
                strategy,
            )
            return collectives.plan_allgather(spec, self.topology)
        return collectives.plan_dispatch(self.dispatch_spec(batch), self.topology, strategy)


def parse_scenario(doc: dict) -> Scenario:
    _reject_unknown(doc, _TOP_KEYS, "")
    schema = _require(doc, "schema", "")
    if schema != SCHEMA_VERSION:
        raise ConfigError("/schema", f"unsupported schema version {schema!r}")
    seed = _number(doc.get("seed", 0), "/seed", minimum=0, integral=True)

    topo_doc = _require(doc, "topology", "")
    _reject_unknown(topo_doc, _TOPO_KEYS, "/topology")
    try:
        topology = topology_from_json(topo_doc)
    except (ValueError, TypeError) as exc:
        raise ConfigError("/topology", str(exc)) from exc

    workload = _require(doc, "workload", "")
    if not isinstance(workload, dict):
        raise ConfigError("/workload", "expected an object")
    kind = _require(workload, "kind", "/workload")
    scn = dict(
        seed=seed,
        topology=topology,
        workload_kind=kind,
        sweep=None,
    )
    if kind == "allgather":
        _reject_unknown(workload, _AG_KEYS, "/workload")
        raw_groups = _require(workload, "groups", "/workload")
        if not isinstance(raw_groups, list) or not all(isinstance(g, list) for g in raw_groups):
            raise ConfigError("/workload/groups", "expected a list of rank lists")
        groups = tuple(
            tuple(_number(r, f"/workload/groups/{i}", minimum=0, integral=True) for r in g)
            for i, g in enumerate(raw_groups)
        )
        known = set(topology.ranks())
        for i, g in enumerate(groups):
            for r in g:
                if r not in known:
                    raise ConfigError(f"/workload/groups/{i}", f"rank {r} not in topology")
        scn["groups"] = groups
        scn["message_bytes"] = _number(
            _require(workload, "message_bytes", "/workload"), "/workload/message_bytes", minimum=1
        )
        valid = collectives.ALLGATHER_STRATEGIES
    elif kind == "alltoall_dispatch":
        _reject_unknown(workload, _DISPATCH_KEYS, "/workload")
        scn["batch"] = _number(_require(workload, "batch", "/workload"), "/workload/batch", minimum=1, integral=True)
        scn["n_experts"] = _number(
            _require(workload, "n_experts", "/workload"), "/workload/n_experts", minimum=1, integral=True
        )
        scn["top_k"] = _number(_require(workload, "top_k", "/workload"), "/workload/top_k", minimum=1, integral=True)
        scn["token_bytes"] = _number(
            _require(workload, "token_bytes", "/workload"), "/workload/token_bytes", minimum=1
        )
        gate = workload.get("gate", "balanced")
        if gate not in ("balanced", "random"):
            raise ConfigError("/workload/gate", f"unknown gate {gate!r}")
        scn["gate"] = gate
        placement = workload.get("expert_placement", "round_robin")
        if placement != "round_robin":
            raise ConfigError("/workload/expert_placement", "only 'round_robin' is supported")
        valid = collectives.DISPATCH_STRATEGIES
    else:
        raise ConfigError("/workload/kind", f"unknown workload kind {kind!r}")

    strategies = _require(doc, "strategies", "")
    if not isinstance(strategies, list) or not strategies:
        raise ConfigError("/strategies", "expected a non-empty list")
    for i, name in enumerate(strategies):
        if name not in valid:
            raise ConfigError(f"/strategies/{i}", f"unknown strategy {name!r} for {kind}")
    if len(set(strategies)) != len(strategies):
        raise ConfigError("/strategies", "strategies must be distinct")
    scn["strategies"] = tuple(strategies)

    sim_doc = doc.get("sim", {})
    _reject_unknown(sim_doc, _SIM_KEYS, "/sim")
    relay_mode = sim_doc.get("relay_mode", PIPELINED)
    if relay_mode not in (PIPELINED, STORE_AND_FORWARD):
        raise ConfigError("/sim/relay_mode", f"unknown relay mode {relay_mode!r}")
    scn["sim"] = SimParams(
        hop_startup=_number(sim_doc.get("hop_startup", 0.0), "/sim/hop_startup", minimum=0),
        relay_mode=relay_mode,
    )

    if "sweep" in doc:
        sweep_doc = doc["sweep"]
        _reject_unknown(sweep_doc, _SWEEP_KEYS, "/sweep")
        param = _require(sweep_doc, "param", "/sweep")
        if param not in SWEEP_PARAMS:
            raise ConfigError("/sweep/param", f"unknown sweep param {param!r}")
        raw_values = _require(sweep_doc, "values", "/sweep")
        if not isinstance(raw_values, list) or not raw_values:
            raise ConfigError("/sweep/values", "expected a non-empty list")
        values = tuple(
            _number(v, f"/sweep/values/{i}", minimum=1, integral=(param == "batch"))
            for i, v in enumerate(raw_values)
        )
        if (param == "batch") != (kind == "alltoall_dispatch"):
            raise ConfigError("/sweep/param", f"param {param!r} does not match workload {kind!r}")
        scn["sweep"] = (param, values)

    return Scenario(**scn)


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("", f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from exc
    return parse_scenario(doc)
