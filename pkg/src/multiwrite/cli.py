"""Command-line interface.

Subcommands:

* ``simulate <scenario> [--out report.csv] [--dump-tree trees.json]``:
  plan every strategy, run the fluid simulator, print a latency table with
  pairwise reductions, optionally write the CSV report and the planned trees.
* ``verify <scenario> [--trace trace.jsonl] [--seed N]``: execute the workload
  on the deterministic harness and check delivery equivalence across
  strategies plus plan/trace agreement; non-zero exit on violations.
* ``analyze-groups <n> <k>``: exact count of k-subsets of n ranks, i.e. the
  multicast group table a switch would need.
* ``sweep <scenario> --param msg_size|batch --values a,b,c [--out csv]``:
  re-run the comparison along one axis.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass

from . import collectives, runtime
from .errors import ConfigError
from .metadata import binomial, binomial_pascal
from .netsim import simulate
from .planning import tree_to_json
from .scenario import SWEEP_PARAMS, Scenario, load_scenario

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2


@dataclass
class ComparisonReport:
    """Latency per strategy plus pairwise reduction percentages."""

    baseline: str
    latencies: dict[str, float]
    reductions: dict[tuple[str, str], float]  # (reference, strategy) -> percent
    max_copies: dict[str, int]

    def reduction_vs_baseline(self, strategy: str) -> float:
        if strategy == self.baseline:
            return 0.0
        return self.reductions[(self.baseline, strategy)]

    def to_csv(self) -> str:
        lines = ["strategy,latency,reduction_vs_baseline_pct"]
        for name, lat in self.latencies.items():
            lines.append(f"{name},{lat!r},{self.reduction_vs_baseline(name)!r}")
        return "\n".join(lines) + "\n"


def compare_strategies(
    scn: Scenario, *, message_bytes: float | None = None, batch: int | None = None
) -> ComparisonReport:
    latencies: dict[str, float] = {}
    max_copies: dict[str, int] = {}
    for strategy in scn.strategies:
        flows = scn.plan(strategy, message_bytes=message_bytes, batch=batch)
        latencies[strategy] = simulate(flows, scn.topology, scn.sim).latency
        max_copies[strategy] = collectives.redundancy_stats(flows).max_copies
    reductions = {}
    for ref, ref_lat in latencies.items():
        for name, lat in latencies.items():
            if name != ref:
                reductions[(ref, name)] = (ref_lat - lat) / ref_lat * 100.0
    return ComparisonReport(scn.baseline_strategy(), latencies, reductions, max_copies)


def _print_table(report: ComparisonReport, heading: str) -> None:
    print(heading)
    width = max(len(s) for s in report.latencies)
    print(f"  {'strategy'.ljust(width)}  {'latency':>16}  {'vs ' + report.baseline:>12}  max_copies")
    for name, lat in report.latencies.items():
        red = report.reduction_vs_baseline(name)
        print(f"  {name.ljust(width)}  {lat:>16.6g}  {red:>11.2f}%  {report.max_copies[name]:>10}")
    for (ref, name), pct in sorted(report.reductions.items()):
        if ref == report.baseline or ref.startswith("multiwrite"):
            continue
        if name.startswith("multiwrite"):
            print(f"  note: {name} vs {ref}: {pct:.2f}% reduction")


def cmd_simulate(args) -> int:
    scn = load_scenario(args.scenario)
    report = compare_strategies(scn)
    _print_table(report, f"simulate {args.scenario}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        print(f"wrote {args.out}")
    if args.dump_tree:
        trees = {
            strategy: [
                {"label": flow.label, "size": flow.size, "tree": tree_to_json(flow.tree)}
                for flow in scn.plan(strategy)
            ]
            for strategy in scn.strategies
        }
        with open(args.dump_tree, "w", encoding="utf-8") as fh:
            json.dump(trees, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {args.dump_tree}")
    return EXIT_OK


def _verify_allgather(scn: Scenario, seed: int, harness_bytes: int, failures: list[str]) -> list[dict]:
    size = int(min(scn.message_bytes, harness_bytes))
    if size != scn.message_bytes:
        print(f"verify: using {size}-byte fragments on the harness (scenario asks {scn.message_bytes:g})")
    trace: list[dict] = []
    outputs_by_strategy = {}
    for strategy in scn.strategies:
        cluster = runtime.init_cluster(scn.topology, seed)
        spec = collectives.AllGatherSpec(scn.groups, size, strategy)
        outputs_by_strategy[strategy] = runtime.run_allgather_script(cluster, spec)
        trace = cluster.trace
        expected = {}
        for link, per_payload in collectives.redundancy_stats(
            collectives.plan_allgather(spec, scn.topology)
        ).copies.items():
            expected[link] = sum(per_payload.values())
        observed: dict[tuple[int, int], int] = {}
        for entry in cluster.trace:
            a, b = entry["channel"].split("->")
            link = (int(a), int(b))
            observed[link] = observed.get(link, 0) + 1
        if observed != expected:
            diffs = {
                link: (expected.get(link, 0), observed.get(link, 0))
                for link in sorted(set(expected) | set(observed))
                if expected.get(link, 0) != observed.get(link, 0)
            }
            failures.append(f"{strategy}: per-channel packet counts diverge from plan: {diffs}")
    reference = scn.strategies[0]
    for strategy, outputs in outputs_by_strategy.items():
        if outputs != outputs_by_strategy[reference]:
            failures.append(f"{strategy}: outputs differ from {reference}")
    return trace


def _verify_dispatch(scn: Scenario, seed: int, failures: list[str]) -> list[dict]:
    spec = scn.dispatch_spec()
    results = {}
    trace: list[dict] = []
    inter_counts = {}
    for strategy in scn.strategies:
        cluster = runtime.init_cluster(scn.topology, seed)
        results[strategy] = runtime.run_dispatch_script(cluster, spec, strategy)
        trace = cluster.trace
        inter = 0
        for entry in cluster.trace:
            a, b = (int(x) for x in entry["channel"].split("->"))
            if (a, b) in scn.topology.links and _is_cross_server(scn.topology, a, b):
                inter += 1
        inter_counts[strategy] = inter
    reference = scn.strategies[0]
    for strategy, got in results.items():
        if got != results[reference]:
            failures.append(f"{strategy}: delivered payloads differ from {reference}")
    if "multiwrite" in scn.strategies:
        expected_pairs = 0
        for token in spec.tokens:
            src_node = scn.topology.node_of_rank(token.source)
            hops = set()
            for d in spec.dest_ranks(token):
                if d != token.source and scn.topology.node_of_rank(d) != src_node:
                    nh = scn.topology.next_hop(src_node, d)
                    if _is_cross_server(scn.topology, src_node, nh):
                        hops.add(nh)
            expected_pairs += len(hops)
        if inter_counts.get("multiwrite", 0) != expected_pairs:
            failures.append(
                "multiwrite: inter-server packets "
                f"{inter_counts['multiwrite']} != distinct (token, remote server) pairs {expected_pairs}"
            )
        else:
            print(
                f"verify: inter-server packets: multiwrite={inter_counts.get('multiwrite')}"
                f" unicast={inter_counts.get('unicast', 'n/a')}"
                f" (distinct token/server pairs: {expected_pairs})"
            )
    return trace


def _is_cross_server(topo, a: int, b: int) -> bool:
    """True when ``a`` forwards some third rank's traffic over the link to ``b``.

    On the two-tier shape these relay links are exactly the inter-server links;
    on a full mesh no link qualifies.
    """
    if (a, b) not in topo.links:
        return False
    table = topo.forwarding.get(a, {})
    return any(
        hops and hops[0] == b and topo.node_of_rank(dest) != b for dest, hops in table.items()
    )


def cmd_verify(args) -> int:
    scn = load_scenario(args.scenario)
    violations = scn.topology.validate()
    failures: list[str] = []
    trace: list[dict] = []
    if violations:
        failures.extend(f"topology: {v}" for v in violations)
    elif scn.workload_kind == "allgather":
        trace = _verify_allgather(scn, args.seed, args.harness_bytes, failures)
    else:
        trace = _verify_dispatch(scn, args.seed, failures)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for entry in trace:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        print(f"wrote {args.trace}")
    if failures:
        for f in failures:
            print(f"FAIL: {f}", file=sys.stderr)
        return EXIT_VERIFY_FAILED
    print(f"verify {args.scenario}: pass")
    return EXIT_OK


def cmd_analyze_groups(args) -> int:
    n, k = args.n, args.k
    count = binomial(n, k)
    check = binomial_pascal(n, k)
    if count != check:
        raise AssertionError(f"binomial implementations disagree: {count} vs {check}")
    threshold = 4.4e9
    print(f"C({n}, {k}) = {count}")
    print(f"exceeds {threshold:g}: {'yes' if count > threshold else 'no'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    scn = load_scenario(args.scenario)
    if args.param:
        param = args.param
        values = [float(v) for v in args.values.split(",")] if args.values else None
    elif scn.sweep:
        param, values = scn.sweep[0], list(scn.sweep[1])
    else:
        raise ConfigError("/sweep", "scenario has no sweep and no --param given")
    if values is None:
        if scn.sweep and scn.sweep[0] == param:
            values = list(scn.sweep[1])
        else:
            raise ConfigError("/sweep/values", "no sweep values given")
    if param not in SWEEP_PARAMS:
        raise ConfigError("/sweep/param", f"unknown sweep param {param!r}")
    if (param == "batch") != (scn.workload_kind == "alltoall_dispatch"):
        raise ConfigError("/sweep/param", f"param {param!r} does not match workload {scn.workload_kind!r}")
    lines = [f"param,value,strategy,latency,reduction_vs_baseline_pct"]
    for value in values:
        if param == "batch":
            report = compare_strategies(scn, batch=int(value))
        else:
            report = compare_strategies(scn, message_bytes=value)
        _print_table(report, f"sweep {param}={value:g}")
        for name, lat in report.latencies.items():
            lines.append(
                f"{param},{value:g},{name},{lat!r},{report.reduction_vs_baseline(name)!r}"
            )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multiwrite",
        description="Plan, simulate, and verify multi-destination-write collectives.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="plan strategies and report fluid-model latencies")
    p.add_argument("scenario")
    p.add_argument("--out", metavar="report.csv", help="write the comparison CSV here")
    p.add_argument("--dump-tree", metavar="trees.json", help="dump planned trees as JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="execute on the deterministic harness and check invariants")
    p.add_argument("scenario")
    p.add_argument("--trace", metavar="trace.jsonl", help="write the channel trace here")
    p.add_argument("--seed", type=int, default=0, help="scheduler seed (default 0)")
    p.add_argument(
        "--harness-bytes",
        type=int,
        default=4096,
        help="cap per-rank fragment bytes moved by the harness (default 4096)",
    )
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze-groups", help="exact multicast group count C(n, k)")
    p.add_argument("n", type=int)
    p.add_argument("k", type=int)
    p.set_defaults(func=cmd_analyze_groups)

    p = sub.add_parser("sweep", help="re-run the comparison along one parameter axis")
    p.add_argument("scenario")
    p.add_argument("--param", choices=SWEEP_PARAMS)
    p.add_argument("--values", help="comma-separated values, e.g. 64,128,1024")
    p.add_argument("--out", metavar="sweep.csv", help="write the sweep CSV here")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f" at {exc.path}" if exc.path else ""
        print(f"config error{where}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
