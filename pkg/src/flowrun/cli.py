"""Command-line driver: validate, run, compare, sweep, report.

Exit status is 0 on success, 1 when a workload fails (or a comparison misses
a threshold), and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import harness
from .harness import ClusterConfig, ConfigError, parse_duration, parse_pattern, parse_size
from .workflow import WorkflowError, parse_workflow, plan_placement, validate

DEFAULT_PATTERN = "open:10rpm:120s"


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workflow", required=True,
                   help="workflow file, or a builtin name: wc, chain, switch3, diamond")
    p.add_argument("--cluster", help="cluster config (JSON); default is three 16-core nodes")
    p.add_argument("--placement", default="roundrobin",
                   help="roundrobin | single | file:<path> with a JSON function->node map (default: roundrobin)")
    p.add_argument("--pattern", default=DEFAULT_PATTERN,
                   help="open:<rpm>:<dur> | closed:<clients>:<dur> | burst:<lo>:<hi>:<t> "
                        f"(default: {DEFAULT_PATTERN})")
    p.add_argument("--input", default=None, help="request input size, e.g. 4MiB (default: builtin's own, else 1MiB)")
    p.add_argument("--fan", type=int, default=4, help="fan-out of the builtin wc workflow (default: 4)")
    p.add_argument("--length", type=int, default=3, help="length of the builtin chain workflow (default: 3)")
    p.add_argument("--memory", type=int, default=128, help="container memory in MB for builtins (default: 128)")
    p.add_argument("--seed", type=int, default=0, help="workload seed (default: 0)")
    p.add_argument("--alpha", type=float, default=None, help="pressure scaling factor (default: calibrated)")
    p.add_argument("--ttl", default=None, help="sink TTL before spill, e.g. 30s (default: 30s)")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowrun", description="Serverless workflow runtime simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a workflow definition")
    v.add_argument("path")

    r = sub.add_parser("run", help="run one experiment and write metrics")
    _add_common(r)
    r.add_argument("--mode", choices=("dataflow", "controlflow", "both"), default="dataflow")

    c = sub.add_parser("compare", help="run both modes on one workload and compare")
    _add_common(c)
    c.add_argument("--mode", choices=("both",), default="both", help=argparse.SUPPRESS)

    s = sub.add_parser("sweep", help="iterate a parameter grid and write one CSV row per point")
    _add_common(s)
    s.add_argument("--fans", default=None, help="comma list of fan-outs (default: --fan)")
    s.add_argument("--inputs", default=None, help="comma list of input sizes (default: --input)")
    s.add_argument("--memories", default=None, help="comma list of memory sizes in MB (default: --memory)")
    s.add_argument("--mode", choices=("both",), default="both", help=argparse.SUPPRESS)

    rep = sub.add_parser("report", help="summarise the outputs in a directory")
    rep.add_argument("dir")
    return parser


# ---------------------------------------------------------------- helpers


def _workload(args, fan: Optional[int] = None, input_size: Optional[int] = None,
              memory: Optional[int] = None) -> harness.WorkloadSpec:
    fan = args.fan if fan is None else fan
    memory = args.memory if memory is None else memory
    if input_size is None and args.input is not None:
        input_size = parse_size(args.input)
    pattern = parse_pattern(args.pattern)
    catalog = harness.builtin_workloads()
    name = args.workflow
    if name in catalog:
        kw = {"memory_mb": memory}
        if input_size is not None:
            kw["input_size"] = input_size
        if name == "wc":
            bench = catalog[name](fan, **kw)
        elif name == "chain":
            bench = catalog[name](args.length, **kw)
        else:
            bench = catalog[name](**kw)
        return bench.workload(pattern, seed=args.seed)
    path = Path(name)
    if not path.is_file():
        raise UsageError(f"workflow {name!r} is neither a file nor a builtin ({', '.join(catalog)})")
    defn = parse_workflow(path.read_text())
    return harness.WorkloadSpec(defn, pattern, input_size if input_size is not None else harness.MIB, args.seed)


def _cluster(args) -> harness.Cluster:
    cfg = ClusterConfig.from_file(args.cluster) if args.cluster else ClusterConfig()
    changes = {}
    if args.alpha is not None:
        changes["alpha"] = args.alpha
    if args.ttl is not None:
        changes["ttl"] = parse_duration(args.ttl)
    return harness.build_cluster(cfg.with_(**changes))


def _placement(args, defn, cluster):
    spec = args.placement
    if spec.startswith("file:"):
        mapping = json.loads(Path(spec[5:]).read_text())
        return plan_placement(defn, cluster.node_ids, "explicit", mapping)
    if spec not in ("roundrobin", "single"):
        raise UsageError(f"unknown placement {spec!r}")
    return plan_placement(defn, cluster.node_ids, spec)


def _run_modes(args, workload, modes):
    cluster = _cluster(args)
    placement = _placement(args, workload.workflow, cluster)
    return {m: harness.run(cluster, workload, m, placement) for m in modes}


def _healthy(metrics: harness.RunMetrics) -> bool:
    return metrics.output_mismatches == 0 and metrics.counters.get("client_result_mismatches", 0) == 0


# ---------------------------------------------------------------- commands


def cmd_validate(args) -> int:
    try:
        defn = parse_workflow(Path(args.path).read_text(), strict=False)
    except OSError as exc:
        raise UsageError(str(exc))
    except WorkflowError as exc:
        print(f"{args.path}: {exc}")
        return 1
    report = validate(defn)
    for f in report.findings:
        print(f)
    print(f"{len(report.findings)} findings")
    return 0 if report.ok else 1


def cmd_run(args) -> int:
    workload = _workload(args)
    modes = ("dataflow", "controlflow") if args.mode == "both" else (args.mode,)
    status = 0
    for mode, m in _run_modes(args, workload, modes).items():
        paths = m.write(args.out)
        s = m.summary()
        print(f"{mode}: {s['completed']}/{s['submitted']} completed, {s['throughput_rpm']:.1f} rpm, "
              f"p50 {s['latency_p50_ms']:.1f} ms, p99 {s['latency_p99_ms']:.1f} ms -> {paths['csv']}")
        if not _healthy(m):
            print(f"{mode}: {m.output_mismatches} requests produced wrong output", file=sys.stderr)
            status = 1
    return status


def cmd_compare(args) -> int:
    workload = _workload(args)
    runs = _run_modes(args, workload, ("dataflow", "controlflow"))
    for m in runs.values():
        m.write(args.out)
    report = harness.compare(runs["dataflow"], runs["controlflow"])
    out = Path(args.out)
    (out / "comparison.json").write_text(report.to_json())
    (out / "comparison.txt").write_text(report.table())
    print(report.table(), end="")
    if not all(_healthy(m) for m in runs.values()):
        print("wrong output detected", file=sys.stderr)
        return 1
    return 0 if report.passed else 1


def _csv_list(text: Optional[str], default, conv):
    if text is None:
        return [default]
    return [conv(x) for x in text.split(",") if x.strip()]


def cmd_sweep(args) -> int:
    fans = _csv_list(args.fans, args.fan, int)
    inputs = _csv_list(args.inputs, parse_size(args.input) if args.input else None,
                       lambda x: parse_size(x))
    memories = _csv_list(args.memories, args.memory, int)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    status = 0
    for fan, size, mem in itertools.product(fans, inputs, memories):
        workload = _workload(args, fan, size, mem)
        runs = _run_modes(args, workload, ("dataflow", "controlflow"))
        rep = harness.compare(runs["dataflow"], runs["controlflow"])
        df, cf = runs["dataflow"], runs["controlflow"]
        rows.append({
            "fan": fan, "input_bytes": workload.input_size, "memory_mb": mem,
            "dataflow_rpm": f"{df.throughput_rpm:.3f}", "controlflow_rpm": f"{cf.throughput_rpm:.3f}",
            "throughput_ratio": f"{rep.ratios['throughput']:.4f}",
            "dataflow_p50_ms": f"{1000 * df.p(50):.3f}", "controlflow_p50_ms": f"{1000 * cf.p(50):.3f}",
            "dataflow_gb_s": f"{df.gb_seconds:.3f}", "controlflow_gb_s": f"{cf.gb_seconds:.3f}",
        })
        print(f"fan={fan} input={workload.input_size} memory={mem}: ratio {rep.ratios['throughput']:.3f}")
        if not (_healthy(df) and _healthy(cf)):
            status = 1
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return status


def cmd_report(args) -> int:
    d = Path(args.dir)
    if not d.is_dir():
        raise UsageError(f"{d} is not a directory")
    summaries = sorted(d.glob("*.summary.json"))
    if not summaries and not (d / "comparison.txt").exists():
        print(f"{d}: no results", file=sys.stderr)
        return 1
    cols = ("workflow", "mode", "completed", "throughput_rpm", "latency_p50_ms", "latency_p99_ms", "gb_seconds")
    print("  ".join(f"{c:>15}" for c in cols))
    for path in summaries:
        s = json.loads(path.read_text())
        print("  ".join(f"{s[c]:>15.2f}" if isinstance(s[c], float) else f"{s[c]:>15}" for c in cols))
    if (d / "comparison.txt").exists():
        print()
        print((d / "comparison.txt").read_text(), end="")
    return 0


COMMANDS = {"validate": cmd_validate, "run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep,
            "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"flowrun: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # bad pattern / size strings and config problems are caller errors
        if isinstance(exc, (ConfigError, WorkflowError)):
            print(f"flowrun: {exc}", file=sys.stderr)
            return 1
        parser.print_usage(sys.stderr)
        print(f"flowrun: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
