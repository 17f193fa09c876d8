"""Simulated cluster, load generation, and run metrics.

``build_cluster`` wires one data sink and one node engine per worker node
onto a shared virtual network and scheduler. ``run_dataflow`` and
``run_controlflow`` drive the same :class:`WorkloadSpec` through the two
execution modes and return :class:`RunMetrics`; ``compare`` turns a pair of
runs into ratio tables and pass/fail verdicts.

Every request's terminal output is checked against :func:`evaluate`, so a
run that finishes quickly with wrong bytes shows up as a mismatch.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .baseline import BaselineConfig, ControlFlowOrchestrator
from .container import Container, dlu_pump
from .dataplane import ClientSink, ConnectorKind, Network
from .engine import EngineConfig, MetricsChannel, NodeEngine
from .sim import Scheduler
from .sink import DataSink, SpillStore
from .transforms import evaluate
from .wire import flow_id_for, split_payload
from .workflow import (
    CLIENT,
    CLIENT_NODE,
    MIB,
    ComputeModel,
    FlowEdge,
    FunctionSpec,
    Placement,
    WorkflowDefinition,
    plan_placement,
    validate,
)


class ConfigError(ValueError):
    pass


class MismatchedWorkloads(ValueError):
    pass


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    cores: float = 16.0
    memory_mb: int = 65536


@dataclass(frozen=True)
class TransferFault:
    """Cut one flow of request ``request_index`` when chunk ``chunk`` is sent.

    ``lose_retention`` also drops the sender's copy, which forces the
    source function to be re-executed.
    """

    request_index: int
    source: str
    data_name: Optional[str] = None
    destination: Optional[str] = None
    chunk: int = 0
    lose_retention: bool = False


@dataclass(frozen=True)
class FluFault:
    request_index: int
    function: str


def _default_nodes() -> tuple[NodeSpec, ...]:
    return tuple(NodeSpec(f"n{i}") for i in range(3))


@dataclass(frozen=True)
class ClusterConfig:
    nodes: tuple[NodeSpec, ...] = field(default_factory=_default_nodes)
    clock: str = "virtual"
    faults: tuple = ()
    cold_start: float = 0.5
    keepalive: float = 900.0
    alpha: Optional[float] = None  # None: calibrate from a reference transfer
    pressure_aware: bool = True
    release: str = "proactive"
    ttl: float = 30.0
    sweep_interval: float = 1.0
    flu_slots: int = 1
    max_containers: Optional[int] = None
    prewarm: tuple = ()  # ((function, count), ...)
    trigger_overhead: float = 0.063
    store_contention: float = 1.0
    request_timeout: float = 300.0
    latency: float = 0.0
    warm_choice: str = "lru"
    spill_root: Optional[str] = None
    realtime_speed: float = 1.0

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(n.node_id for n in self.nodes)

    def with_(self, **changes) -> "ClusterConfig":
        return replace(self, **changes)

    @classmethod
    def with_nodes(cls, count: int, **kw) -> "ClusterConfig":
        return cls(nodes=tuple(NodeSpec(f"n{i}") for i in range(count)), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterConfig":
        data = dict(data)
        if "nodes" in data:
            nodes = []
            for n in data["nodes"]:
                if isinstance(n, str):
                    nodes.append(NodeSpec(n))
                else:
                    nodes.append(NodeSpec(n["id"] if "id" in n else n["node_id"],
                                          float(n.get("cores", 16.0)), int(n.get("memory_mb", 65536))))
            data["nodes"] = tuple(nodes)
        if "prewarm" in data and isinstance(data["prewarm"], dict):
            data["prewarm"] = tuple(sorted(data["prewarm"].items()))
        faults = []
        for f in data.pop("faults", ()):
            f = dict(f)
            kind = f.pop("kind", "transfer")
            faults.append(TransferFault(**f) if kind == "transfer" else FluFault(**f))
        data["faults"] = tuple(faults)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown cluster settings: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ClusterConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot load cluster config {path}: {exc}") from None


# ---------------------------------------------------------------- workloads


@dataclass(frozen=True)
class OpenLoop:
    rpm: float
    duration: float
    jitter: float = 0.0  # fraction of the inter-arrival gap

    def describe(self) -> str:
        return f"open:{self.rpm:g}rpm:{self.duration:g}s"


@dataclass(frozen=True)
class ClosedLoop:
    clients: int
    duration: float
    ramp: float = 0.0  # client i starts at i * ramp / clients

    def describe(self) -> str:
        return f"closed:{self.clients}:{self.duration:g}s"


@dataclass(frozen=True)
class Burst:
    low_rpm: float
    high_rpm: float
    switch_time: float
    duration: float

    def describe(self) -> str:
        return f"burst:{self.low_rpm:g}:{self.high_rpm:g}:{self.switch_time:g}s"


Pattern = Union[OpenLoop, ClosedLoop, Burst]


@dataclass(frozen=True)
class WorkloadSpec:
    workflow: WorkflowDefinition
    pattern: Pattern
    input_size: int = 4 * MIB
    seed: int = 0
    drain: Optional[float] = None  # extra time to finish open-loop requests

    def request_id(self, index: int) -> bytes:
        return hashlib.blake2b(f"{self.workflow.name}:{self.seed}:{index}".encode(), digest_size=16).digest()

    def input_for(self, index: int) -> bytes:
        rng = np.random.Generator(np.random.PCG64([self.seed, index]))
        return rng.bytes(self.input_size)


def arrival_times(pattern: Pattern, seed: int = 0) -> list[float]:
    """Deterministic open-loop submission times (optionally jittered)."""
    if isinstance(pattern, ClosedLoop):
        raise ValueError("closed-loop load has no fixed arrival schedule")
    if isinstance(pattern, OpenLoop):
        segments = [(0.0, pattern.duration, pattern.rpm)]
        jitter = pattern.jitter
    else:
        segments = [(0.0, min(pattern.switch_time, pattern.duration), pattern.low_rpm),
                    (pattern.switch_time, pattern.duration, pattern.high_rpm)]
        jitter = 0.0
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for start, stop, rpm in segments:
        if rpm <= 0 or stop <= start:
            continue
        gap = 60.0 / rpm
        k = 0
        while start + k * gap < stop - 1e-12:
            t = start + k * gap
            if jitter:
                t = max(start, t + (rng.random() - 0.5) * jitter * gap)
            out.append(t)
            k += 1
    return sorted(out)


_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(b|kib|kb|k|mib|mb|m|gib|gb|g)?\s*$", re.I)
_SIZE_MULT = {None: 1, "b": 1, "k": 1024, "kb": 1024, "kib": 1024, "m": MIB, "mb": MIB, "mib": MIB,
              "g": 1024 * MIB, "gb": 1024 * MIB, "gib": 1024 * MIB}


def parse_size(text: str) -> int:
    """``8KiB`` -> 8192, ``4MiB`` -> 4194304; plain numbers are bytes."""
    m = _SIZE_RE.match(str(text))
    if not m:
        raise ValueError(f"bad size {text!r}")
    unit = m.group(2).lower() if m.group(2) else None
    return int(float(m.group(1)) * _SIZE_MULT[unit])


def parse_duration(text: str) -> float:
    """``120s``, ``2m``, ``1.5`` (seconds)."""
    m = re.match(r"^\s*(\d+(?:\.\d+)?)\s*(ms|s|m|min)?\s*$", str(text))
    if not m:
        raise ValueError(f"bad duration {text!r}")
    scale = {"ms": 1e-3, "s": 1.0, None: 1.0, "m": 60.0, "min": 60.0}[m.group(2)]
    return float(m.group(1)) * scale


def parse_pattern(text: str) -> Pattern:
    """``open:<rpm>:<dur>``, ``closed:<clients>:<dur>`` or ``burst:<lo>:<hi>:<t>[:<dur>]``."""
    parts = text.split(":")
    kind = parts[0].lower()
    try:
        if kind == "open" and len(parts) == 3:
            return OpenLoop(float(parts[1].lower().removesuffix("rpm")), parse_duration(parts[2]))
        if kind == "closed" and len(parts) == 3:
            return ClosedLoop(int(parts[1]), parse_duration(parts[2]))
        if kind == "burst" and len(parts) in (4, 5):
            t = parse_duration(parts[3])
            dur = parse_duration(parts[4]) if len(parts) == 5 else 2 * t
            return Burst(float(parts[1].lower().removesuffix("rpm")), float(parts[2].lower().removesuffix("rpm")),
                         t, dur)
    except ValueError:
        pass
    raise ValueError(f"bad load pattern {text!r}")


# ---------------------------------------------------------------- builtin DAGs


@dataclass(frozen=True)
class Benchmark:
    definition: WorkflowDefinition
    input_size: int

    def workload(self, pattern: Pattern, seed: int = 0, **kw) -> WorkloadSpec:
        return WorkloadSpec(self.definition, pattern, self.input_size, seed, **kw)


def _fn(name: str, transform: str, inputs, memory_mb: int, cost: float = 0.0, base: float = 0.0,
        arg: Optional[int] = None, emit_at: float = 1.0, selector: Optional[str] = None) -> FunctionSpec:
    return FunctionSpec(name, ComputeModel(transform, arg, cost, base, emit_at), tuple(inputs), memory_mb, selector)


def wc(fan: int = 4, input_size: int = 4 * MIB, memory_mb: int = 128) -> Benchmark:
    """split -> fan x count -> merge (byte histogram word-count stand-in)."""
    if fan < 1:
        raise ValueError("fan must be positive")
    counts = [f"count{i}" for i in range(fan)]
    fns = [_fn("split", "split", ["input"], memory_mb, cost=5.0, base=1.0)]
    fns += [_fn(c, "count", ["part"], memory_mb, cost=50.0, base=1.0) for c in counts]
    fns.append(_fn("merge", "merge", [f"c{i}" for i in range(fan)], memory_mb, base=1.0))
    flows = [FlowEdge("split", "part", tuple(counts))]
    flows += [FlowEdge(c, f"c{i}", ("merge",)) for i, c in enumerate(counts)]
    return Benchmark(WorkflowDefinition(f"wc{fan}", tuple(fns), tuple(flows), "split", ("merge",)), input_size)


def chain(n: int = 3, input_size: int = MIB, memory_mb: int = 128) -> Benchmark:
    """n functions in a line, each a size-preserving byte mix."""
    if n < 1:
        raise ValueError("a chain needs at least one function")
    names = [f"f{i}" for i in range(n)]
    fns = [_fn(names[0], "mix", ["input"], memory_mb, cost=20.0, base=1.0)]
    fns += [_fn(names[i], "mix", [f"d{i}"], memory_mb, cost=20.0, base=1.0) for i in range(1, n)]
    flows = [FlowEdge(names[i], f"d{i + 1}", (names[i + 1],)) for i in range(n - 1)]
    return Benchmark(WorkflowDefinition(f"chain{n}", tuple(fns), tuple(flows), names[0], (names[-1],)),
                     input_size)


def switch3(input_size: int = MIB, memory_mb: int = 128) -> Benchmark:
    """classify picks one of three arms from the data it emits."""
    arms = ("arm_a", "arm_b", "arm_c")
    fns = [_fn("classify", "mix", ["input"], memory_mb, cost=10.0, base=1.0, selector="mod")]
    fns += [_fn(a, "checksum" if a == "arm_c" else "mix", ["item"], memory_mb, cost=20.0, base=1.0) for a in arms]
    flows = [FlowEdge("classify", "item", arms, conditional=True, labels=("a", "b", "c"))]
    return Benchmark(WorkflowDefinition("switch3", tuple(fns), tuple(flows), "classify", arms), input_size)


def diamond(input_size: int = MIB, memory_mb: int = 128) -> Benchmark:
    """source broadcasts to two branches that meet again in join."""
    fns = [
        _fn("source", "mix", ["input"], memory_mb, cost=10.0, base=1.0),
        _fn("left", "mix", ["x"], memory_mb, cost=30.0, base=1.0),
        _fn("right", "checksum", ["x"], memory_mb, cost=30.0, base=1.0),
        _fn("join", "concat", ["l", "r"], memory_mb, cost=5.0, base=1.0),
    ]
    flows = [
        FlowEdge("source", "x", ("left", "right")),
        FlowEdge("left", "l", ("join",)),
        FlowEdge("right", "r", ("join",)),
    ]
    return Benchmark(WorkflowDefinition("diamond", tuple(fns), tuple(flows), "source", ("join",)), input_size)


def builtin_workloads() -> dict[str, Callable[..., Benchmark]]:
    return {"wc": wc, "chain": chain, "switch3": switch3, "diamond": diamond}


# ---------------------------------------------------------------- metrics


def percentile(values, p: float) -> float:
    """Nearest-rank percentile; NaN for an empty list."""
    if not len(values):
        return math.nan
    s = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(s)))
    return s[rank - 1]


@dataclass
class RequestRecord:
    request_id: str
    index: int
    client: Optional[int]
    submit: float
    start: Optional[float] = None
    end: Optional[float] = None
    output_ok: Optional[bool] = None
    failed: bool = False

    @property
    def latency(self) -> Optional[float]:
        return None if self.end is None else self.end - self.submit


@dataclass
class RunMetrics:
    mode: str
    workflow: str
    pattern: str
    seed: int
    input_size: int
    duration: float
    end_time: float
    requests: list = field(default_factory=list)
    gb_seconds: float = 0.0
    sink_byte_seconds: float = 0.0
    store_byte_seconds: float = 0.0
    cold_starts: int = 0
    scale_decisions: int = 0
    spills: int = 0
    redos: int = 0
    timeouts: int = 0
    containers: list = field(default_factory=list)  # (cid, memory_mb, created, recycled)
    counters: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    @property
    def completed(self) -> list[RequestRecord]:
        """Requests that ended inside the measurement window."""
        return [r for r in self.requests if r.end is not None and r.end <= self.duration + self._grace]

    @property
    def _grace(self) -> float:
        return math.inf if self.pattern.startswith(("open", "burst")) else 0.0

    @property
    def latencies(self) -> list[float]:
        return [r.latency for r in self.completed]

    @property
    def throughput_rpm(self) -> float:
        return len(self.completed) / (self.duration / 60.0) if self.duration > 0 else 0.0

    def p(self, q: float) -> float:
        return percentile(self.latencies, q)

    @property
    def mean_latency(self) -> float:
        lat = self.latencies
        return sum(lat) / len(lat) if lat else math.nan

    @property
    def output_mismatches(self) -> int:
        return sum(1 for r in self.requests if r.output_ok is False)

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "workflow": self.workflow,
            "pattern": self.pattern,
            "seed": self.seed,
            "input_size": self.input_size,
            "duration_s": self.duration,
            "submitted": len(self.requests),
            "completed": len(self.completed),
            "throughput_rpm": self.throughput_rpm,
            "latency_mean_ms": 1000 * self.mean_latency,
            "latency_p50_ms": 1000 * self.p(50),
            "latency_p95_ms": 1000 * self.p(95),
            "latency_p99_ms": 1000 * self.p(99),
            "gb_seconds": self.gb_seconds,
            "sink_byte_seconds": self.sink_byte_seconds,
            "store_byte_seconds": self.store_byte_seconds,
            "cold_starts": self.cold_starts,
            "scale_decisions": self.scale_decisions,
            "spills": self.spills,
            "redos": self.redos,
            "timeouts": self.timeouts,
            "output_mismatches": self.output_mismatches,
            **{f"counter_{k}": v for k, v in sorted(self.counters.items())},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["request_id", "submit", "start", "end", "latency_ms"])
        for r in self.requests:
            w.writerow([r.request_id, f"{r.submit:.6f}",
                        "" if r.start is None else f"{r.start:.6f}",
                        "" if r.end is None else f"{r.end:.6f}",
                        "" if r.latency is None else f"{1000 * r.latency:.3f}"])
        return buf.getvalue()

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, default=str) + "\n" for e in self.events)

    def gb_seconds_from_events(self) -> float:
        """Recompute container GB-s from CREATED/RECYCLE records alone."""
        created, mem, gone = {}, {}, {}
        for e in self.events:
            if e["event"] == "CREATED":
                created[e["container"]] = e["t"]
            elif e["event"] == "RECYCLE":
                gone[e["container"]] = e["t"]
        for cid, m, _, _ in self.containers:
            mem[cid] = m
        return sum(mem[c] / 1024 * (gone.get(c, self.end_time) - t) for c, t in created.items())

    def write(self, out_dir: Union[str, Path], stem: Optional[str] = None) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.workflow}-{self.mode}"
        paths = {
            "csv": out / f"{stem}.csv",
            "summary": out / f"{stem}.summary.json",
            "events": out / f"{stem}.events.jsonl",
        }
        paths["csv"].write_text(self.to_csv())
        paths["summary"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        paths["events"].write_text(self.events_jsonl())
        return paths


# ---------------------------------------------------------------- cluster


def calibrate_alpha(latency: float = 0.0, size: int = MIB) -> float:
    """Ratio of a measured reference transfer to its ideal Size/B_w time."""
    sched = Scheduler()
    net = Network(sched.clock, latency=latency)
    sink = ClientSink("ref")
    net.add_node("ref", sink)
    spec = FunctionSpec("ref_src")
    c = Container("ref", spec, "src", (), lambda f: "ref", now=0.0, alpha=1.0, terminal=True)
    c.emit_result(b"\x00" * 16, b"\x5a" * size, 0.0)
    report = dlu_pump(c, net, 0.0)
    ideal = 8 * size / spec.bandwidth_bps
    return report.finished_at / ideal


class Cluster:
    """Running cluster: scheduler, network, one sink and engine per node."""

    def __init__(self, cfg: ClusterConfig, alpha: float):
        self.cfg = cfg
        self.alpha = alpha
        self.sched = Scheduler(realtime=cfg.clock == "real", speed=cfg.realtime_speed)
        self.channel = MetricsChannel()
        self.network = Network(self.sched.clock, latency=cfg.latency)
        self.sinks: dict[str, DataSink] = {}
        self.engines: dict[str, NodeEngine] = {}
        self.client = ClientSink(CLIENT_NODE, keep=False)
        self.network.add_node(CLIENT_NODE, self.client)
        for n in cfg.nodes:
            spill = SpillStore(Path(cfg.spill_root) / n.node_id if cfg.spill_root else None)
            sink = DataSink(n.node_id, self.sched.clock, ttl=cfg.ttl, spill=spill)
            self.sinks[n.node_id] = sink
            self.network.add_node(n.node_id, sink)
            ecfg = EngineConfig(cold_start=cfg.cold_start, keepalive=cfg.keepalive,
                                pressure_aware=cfg.pressure_aware, alpha=alpha, flu_slots=cfg.flu_slots,
                                max_containers=cfg.max_containers, release=cfg.release,
                                sweep_interval=cfg.sweep_interval, node_cores=n.cores,
                                node_memory_mb=n.memory_mb, warm_choice=cfg.warm_choice)
            self.engines[n.node_id] = NodeEngine(n.node_id, self.sched, self.network, sink, ecfg, self.channel)
        self.used = False

    @property
    def node_ids(self) -> tuple[str, ...]:
        return self.cfg.node_ids

    @property
    def load_sources(self) -> int:
        return 1


def build_cluster(cfg: Optional[ClusterConfig] = None) -> Cluster:
    cfg = cfg or ClusterConfig()
    ids = cfg.node_ids
    if not ids:
        raise ConfigError("cluster needs at least one node")
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate node ids")
    if CLIENT_NODE in ids:
        raise ConfigError(f"node id {CLIENT_NODE!r} is reserved")
    if cfg.clock not in ("virtual", "real"):
        raise ConfigError(f"unknown clock {cfg.clock!r}")
    if cfg.release not in ("proactive", "completion"):
        raise ConfigError(f"unknown release policy {cfg.release!r}")
    if any(n.cores <= 0 or n.memory_mb <= 0 for n in cfg.nodes):
        raise ConfigError("node resources must be positive")
    alpha = cfg.alpha if cfg.alpha is not None else calibrate_alpha(cfg.latency)
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    return Cluster(cfg, alpha)


def _fresh(cluster: Cluster) -> Cluster:
    if cluster.used:
        cluster = Cluster(cluster.cfg, cluster.alpha)
    cluster.used = True
    return cluster


# ---------------------------------------------------------------- driving


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=16).digest()


class _Driver:
    """Load generation and request bookkeeping shared by both modes."""

    def __init__(self, cluster: Cluster, workload: WorkloadSpec, submit: Callable[[bytes, bytes], None],
                 finish: Callable[[bytes, float], None]):
        self.cluster = cluster
        self.sched = cluster.sched
        self.workload = workload
        self.defn = workload.workflow
        self._submit = submit
        self._finish = finish
        self.records: dict[bytes, RequestRecord] = {}
        self.expected: dict[bytes, set] = {}
        self.golden: dict[bytes, dict] = {}
        self.client_of: dict[bytes, Optional[int]] = {}
        self.next_index = 0
        self.done = 0
        self.on_start: Optional[Callable[[int, bytes], None]] = None
        self.client_results = 0
        self.client_mismatches = 0

    def on_client_result(self, rid: bytes, function: str, data: bytes) -> None:
        want = self.golden.get(rid, {}).get(function)
        self.client_results += 1
        if want is not None and _digest(data) != want:
            self.client_mismatches += 1

    def start(self, client: Optional[int] = None) -> None:
        index = self.next_index
        self.next_index += 1
        rid = self.workload.request_id(index)
        payload = self.workload.input_for(index)
        gold = evaluate(self.defn, payload)
        self.golden[rid] = {f: _digest(v) for f, v in gold.terminal_results(self.defn).items()}
        self.expected[rid] = set(self.golden[rid])
        self.records[rid] = RequestRecord(rid.hex(), index, client, self.sched.now)
        self.client_of[rid] = client
        if self.on_start is not None:
            self.on_start(index, rid)
        self._submit(rid, payload)

    def on_end(self, rid: bytes, function: str, result: bytes, t: float) -> None:
        remaining = self.expected.get(rid)
        if remaining is None or function not in remaining:
            return
        rec = self.records[rid]
        ok = _digest(result) == self.golden[rid][function]
        rec.output_ok = ok if rec.output_ok is None else (rec.output_ok and ok)
        remaining.discard(function)
        if remaining:
            return
        rec.end = t
        self.done += 1
        self._finish(rid, t)
        pattern = self.workload.pattern
        client = self.client_of[rid]
        if isinstance(pattern, ClosedLoop) and client is not None and t < pattern.duration:
            self.start(client)

    def on_failure(self, rid: bytes, function: str, t: float) -> None:
        rec = self.records.get(rid)
        if rec is not None and rec.end is None:
            rec.failed = True

    def run(self) -> float:
        pattern = self.workload.pattern
        if isinstance(pattern, ClosedLoop):
            for i in range(pattern.clients):
                self.sched.call_at(i * pattern.ramp / max(1, pattern.clients), self.start, i)
            self.sched.run(until=pattern.duration)
            return pattern.duration
        times = arrival_times(pattern, self.workload.seed)
        for t in times:
            self.sched.call_at(t, self.start, None)
        self.sched.run(until=pattern.duration)
        drain = self.workload.drain if self.workload.drain is not None else self.cluster.cfg.request_timeout
        total = len(times)
        self.sched.run(until=pattern.duration + drain, stop=lambda: self.done >= total)
        return pattern.duration

    def finalize(self, metrics: RunMetrics) -> None:
        timeout = self.cluster.cfg.request_timeout
        starts: dict[str, float] = {}
        for e in self.cluster.channel.records:
            if e["event"] == "DISPATCH" and "request" in e:
                starts.setdefault(e["request"], e["t"])
        now = self.sched.now
        timeouts = 0
        for rec in self.records.values():
            rec.start = starts.get(rec.request_id)
            if rec.end is not None and rec.end - rec.submit > timeout:
                rec.end = None
                timeouts += 1
            elif rec.end is None and now - rec.submit > timeout:
                timeouts += 1
            # a closed-loop request still running at the window edge is censored, not timed out
        metrics.requests = sorted(self.records.values(), key=lambda r: r.index)
        metrics.timeouts = timeouts


def _metrics_shell(mode: str, cluster: Cluster, workload: WorkloadSpec) -> RunMetrics:
    return RunMetrics(mode, workload.workflow.name, workload.pattern.describe(), workload.seed,
                      workload.input_size, workload.pattern.duration, 0.0)


def _check(workload: WorkloadSpec, placement: Placement) -> None:
    report = validate(workload.workflow)
    if not report.ok:
        raise ConfigError(f"workflow {workload.workflow.name} is invalid: {report.findings[0]}")
    missing = [f for f in workload.workflow.function_names if f not in placement.assignment]
    if missing:
        raise ConfigError(f"placement misses {', '.join(missing)}")


def _install_faults(cluster: Cluster, defn: WorkflowDefinition, placement: Placement, index: int,
                    rid: bytes) -> None:
    for fault in cluster.cfg.faults:
        if fault.request_index != index:
            continue
        if isinstance(fault, FluFault):
            cluster.engines[placement.node_of(fault.function)].compute_faults.add((rid, fault.function))
            continue
        ids = {flow_id_for(l.source, l.data_name, l.destination) for l in defn.links()
               if l.source == fault.source
               and fault.data_name in (None, l.data_name) and fault.destination in (None, l.destination)}
        if fault.source in defn.terminals and fault.destination in (None, CLIENT):
            ids.add(flow_id_for(fault.source, fault.source, CLIENT))
        cluster.network.inject_interrupt(lambda h, rid=rid, ids=frozenset(ids): h.request_id == rid and h.flow_id in ids,
                                         fault.chunk, fault.lose_retention)


def run_dataflow(cluster: Cluster, workload: WorkloadSpec, placement: Optional[Placement] = None) -> RunMetrics:
    cluster = _fresh(cluster)
    defn = workload.workflow
    placement = placement or plan_placement(defn, cluster.node_ids)
    _check(workload, placement)
    entry_node = placement.node_of(defn.entry)
    external = defn.external_inputs()

    def submit(rid: bytes, payload: bytes) -> None:
        sink = cluster.sinks[entry_node]
        for name in external:
            for chunk in split_payload(rid, flow_id_for(CLIENT, name, defn.entry), payload):
                sink.put(chunk, defn.entry, name)

    def finish(rid: bytes, t: float) -> None:
        for eng in cluster.engines.values():
            eng.finish_request(rid, t)
        cluster.network.close_request(rid)

    driver = _Driver(cluster, workload, submit, finish)
    driver.on_start = lambda index, rid: _install_faults(cluster, defn, placement, index, rid)
    cluster.client.on_result = driver.on_client_result
    for eng in cluster.engines.values():
        eng.deploy(defn, placement)
        eng.on_end = driver.on_end
        eng.on_failure = driver.on_failure
        eng.start_sweeper()
    for fn, count in cluster.cfg.prewarm:
        cluster.engines[placement.node_of(fn)].prewarm(fn, count)

    duration = driver.run()
    for eng in cluster.engines.values():
        eng.stop()
    end = cluster.sched.now
    m = _metrics_shell("dataflow", cluster, workload)
    m.duration = duration
    m.end_time = end
    driver.finalize(m)
    containers = [c for eng in cluster.engines.values() for c in eng.all_containers()]
    m.containers = [(c.cid, c.memory_mb, c.created_at, c.recycled_at) for c in containers]
    m.gb_seconds = sum(c.memory_mb / 1024 * c.lifetime(end) for c in containers)
    m.sink_byte_seconds = sum(s.settle(end).byte_seconds for s in cluster.sinks.values())
    m.cold_starts = sum(e.cold_starts for e in cluster.engines.values())
    m.scale_decisions = sum(len(e.scale_decisions) for e in cluster.engines.values())
    m.spills = sum(s.stats.spills for s in cluster.sinks.values())
    m.redos = sum(len(e.redo_plans) for e in cluster.engines.values())
    stats = [s.stats for s in cluster.sinks.values()]
    m.counters = {
        "sink_duplicates": sum(s.duplicates for s in stats),
        "sink_duplicate_handoffs": sum(s.duplicate_handoffs for s in stats),
        "sink_rejected_takes": sum(s.rejected_takes for s in stats),
        "sink_releases": sum(s.releases for s in stats),
        "sink_spill_reloads": sum(s.spill_reloads for s in stats),
        "sink_peak_resident": max((s.peak_resident for s in stats), default=0),
        "frames": cluster.network.frames,
    }
    for kind in ConnectorKind:
        m.counters[f"connectors_{kind.value}"] = cluster.network.kind_counts[kind]
    m.counters["client_results"] = driver.client_results
    m.counters["client_result_mismatches"] = driver.client_mismatches
    m.events = cluster.channel.records
    return m


def run_controlflow(cluster: Cluster, workload: WorkloadSpec, placement: Optional[Placement] = None) -> RunMetrics:
    cluster = _fresh(cluster)
    defn = workload.workflow
    placement = placement or plan_placement(defn, cluster.node_ids)
    _check(workload, placement)
    cfg = cluster.cfg
    bcfg = BaselineConfig(cold_start=cfg.cold_start, keepalive=cfg.keepalive, trigger_overhead=cfg.trigger_overhead,
                          store_contention=cfg.store_contention, max_containers=cfg.max_containers,
                          sweep_interval=cfg.sweep_interval, node_cores=cfg.nodes[0].cores,
                          node_memory_mb=cfg.nodes[0].memory_mb)
    orch = ControlFlowOrchestrator(cluster.sched, defn, placement, bcfg, cluster.channel)
    driver = _Driver(cluster, workload, orch.submit, orch.finish_request)
    orch.on_end = driver.on_end
    orch.start_sweeper()
    for fn, count in cfg.prewarm:
        orch.prewarm(fn, count)
    duration = driver.run()
    orch.stop()
    end = cluster.sched.now
    m = _metrics_shell("controlflow", cluster, workload)
    m.duration = duration
    m.end_time = end
    driver.finalize(m)
    containers = orch.all_containers()
    m.containers = [(c.cid, c.memory_mb, c.created_at, c.recycled_at) for c in containers]
    m.gb_seconds = sum(c.memory_mb / 1024 * c.lifetime(end) for c in containers)
    orch.store._account(end)
    m.store_byte_seconds = orch.store.byte_seconds
    m.cold_starts = orch.cold_starts
    m.scale_decisions = orch.scale_decisions
    m.counters = {"store_bytes_in": orch.store.bytes_in, "store_bytes_out": orch.store.bytes_out}
    m.events = cluster.channel.records
    return m


def run(cluster: Cluster, workload: WorkloadSpec, mode: str = "dataflow",
        placement: Optional[Placement] = None) -> RunMetrics:
    if mode == "dataflow":
        return run_dataflow(cluster, workload, placement)
    if mode == "controlflow":
        return run_controlflow(cluster, workload, placement)
    raise ConfigError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------- comparison


def _ratio(a: float, b: float) -> float:
    if a == b:
        return 1.0
    if b == 0 or math.isnan(a) or math.isnan(b):
        return math.inf if a > 0 else math.nan
    return a / b


DEFAULT_THRESHOLDS = (
    # (metric, op, bound): ratio of run A over run B
    ("throughput", ">=", 1.0),
    ("p50_latency", "<=", 1.0),
)


@dataclass
class ComparisonReport:
    a: str
    b: str
    workflow: str
    pattern: str
    ratios: dict
    values: dict
    verdicts: list

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "workflow": self.workflow, "pattern": self.pattern,
                "ratios": self.ratios, "values": self.values, "verdicts": self.verdicts, "passed": self.passed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n"

    def table(self) -> str:
        lines = [f"{self.workflow} {self.pattern}: {self.a} vs {self.b}",
                 f"{'metric':<14}{self.a:>14}{self.b:>14}{'ratio':>10}"]
        for k, r in self.ratios.items():
            va, vb = self.values[k]
            lines.append(f"{k:<14}{va:>14.3f}{vb:>14.3f}{r:>10.3f}")
        for v in self.verdicts:
            lines.append(f"{'PASS' if v['passed'] else 'FAIL'} {v['metric']} ratio {v['ratio']:.3f} {v['op']} {v['bound']}")
        return "\n".join(lines) + "\n"


def compare(a: RunMetrics, b: RunMetrics, thresholds=DEFAULT_THRESHOLDS) -> ComparisonReport:
    if (a.workflow, a.pattern, a.seed, a.input_size) != (b.workflow, b.pattern, b.seed, b.input_size):
        raise MismatchedWorkloads(f"{a.workflow}/{a.pattern} vs {b.workflow}/{b.pattern}")
    values = {
        "p50_latency": (a.p(50), b.p(50)),
        "p99_latency": (a.p(99), b.p(99)),
        "throughput": (a.throughput_rpm, b.throughput_rpm),
        "gb_seconds": (a.gb_seconds, b.gb_seconds),
    }
    ratios = {k: _ratio(*v) for k, v in values.items()}
    verdicts = []
    for metric, op, bound in thresholds:
        r = ratios[metric]
        ok = (r >= bound) if op == ">=" else (r <= bound)
        verdicts.append({"metric": metric, "ratio": r, "op": op, "bound": bound, "passed": bool(ok)})
    return ComparisonReport(a.mode, b.mode, a.workflow, a.pattern, ratios, values, verdicts)
