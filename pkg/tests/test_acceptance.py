"""The twelve acceptance criteria, each at its stated tolerance.

Every test records a one-line verdict through the ``criterion`` fixture; the
lines are repeated in the terminal summary.
"""

import random
from collections import Counter

import pytest

from flowrun.container import Container, ContainerStatus, FluStats, SlotState
from flowrun.dataplane import ClientSink, Network
from flowrun.engine import EngineConfig, NodeEngine
from flowrun.harness import (
    ClosedLoop,
    ClusterConfig,
    OpenLoop,
    TransferFault,
    WorkloadSpec,
    build_cluster,
    chain,
    run,
    run_controlflow,
    run_dataflow,
    wc,
)
from flowrun.sim import TICK, Scheduler
from flowrun.sink import DataSink
from flowrun.transforms import evaluate
from flowrun.wire import chunk_count, flow_id_for, split_payload
from flowrun.workflow import CLIENT, CLIENT_NODE, MIB, FlowEdge, FunctionSpec, parse_workflow, plan_placement

# ---------------------------------------------------------------- 1


def test_c1_pressure_formula_and_signal(criterion):
    rng = random.Random(1)
    worst, wrong_signal = 0.0, 0
    for _ in range(1000):
        size = rng.randrange(0, 8 * MIB)
        bw = rng.uniform(1e6, 1e9)
        t_flu = rng.uniform(0.0, 5.0)
        alpha = rng.uniform(0.5, 2.0)
        signals = []
        c = Container("c", FunctionSpec("f"), "n0", (FlowEdge("f", "d", ("g",)),), lambda f: "n1",
                      alpha=alpha, bandwidth_bps=bw)
        c.flu_stats = FluStats("f", ewma=t_flu, count=1)
        c.on_signal = signals.append
        est = c.dlu_send(b"\x01" * 16, "d", bytes(size))
        want = alpha * (8 * size / bw) - t_flu
        worst = max(worst, abs(est.pressure - want) / max(abs(want), 1e-300))
        if (len(signals) == 1) != (want > 0) or len(signals) > 1:
            wrong_signal += 1
    ok = worst <= 1e-12 and wrong_signal == 0
    criterion(1, ok, f"max relative error {worst:.2e}, signal mismatches {wrong_signal}/1000")
    assert ok


# ---------------------------------------------------------------- 2

OVERLAP = """workflow: overlap
function work:
  memory_mb: 128
  compute: fill(500000) base=10ms
  inputs: [input]
entry: work
terminals: [work]
"""


def test_c2_overlap_throughput(criterion):
    # 10 ms of CPU on 0.1 core = 100 ms compute; 500 kB at 40 Mbps = 100 ms transfer
    defn = parse_workflow(OVERLAP)
    counts = {}
    for mode in ("dataflow", "controlflow"):
        cfg = ClusterConfig(prewarm=(("work", 1),), max_containers=1)
        m = run(build_cluster(cfg), WorkloadSpec(defn, ClosedLoop(1, 60), input_size=1024), mode)
        assert m.output_mismatches == 0
        counts[mode] = len(m.completed)
    ok = counts["dataflow"] >= 540 and counts["controlflow"] <= 330
    criterion(2, ok, f"dataflow {counts['dataflow']} (>= 540), controlflow {counts['controlflow']} (<= 330)")
    assert ok


# ---------------------------------------------------------------- 3

EARLY = """workflow: early
function A:
  memory_mb: 128
  compute: mix base=20ms emit=0.25
  inputs: [input]
  outputs: [d -> B]
function B:
  memory_mb: 128
  compute: mix base=1ms
  inputs: [d]
entry: A
terminals: [B]
"""


def _first(events, kind, fn):
    return next(e["t"] for e in events if e["event"] == kind and e.get("function") == fn)


def test_c3_early_triggering(criterion):
    defn = parse_workflow(EARLY)
    early = late = 0
    for seed in range(100):
        size = random.Random(seed).randrange(16, 4096)
        w = WorkloadSpec(defn, OpenLoop(1, 1), input_size=size, seed=seed)
        cfg = ClusterConfig(prewarm=(("A", 1), ("B", 1)))
        df = run_dataflow(build_cluster(cfg), w)
        cf = run_controlflow(build_cluster(cfg), w)
        assert len(df.completed) == len(cf.completed) == 1
        assert df.output_mismatches == cf.output_mismatches == 0
        early += _first(df.events, "DISPATCH", "B") < _first(df.events, "FINISH", "A")
        late += _first(cf.events, "DISPATCH", "B") >= _first(cf.events, "FINISH", "A") + 0.063 - TICK
    ok = early == 100 and late == 100
    criterion(3, ok, f"dataflow B before A finishes {early}/100; baseline B after A + 63 ms {late}/100")
    assert ok


# ---------------------------------------------------------------- 4


def test_c4_throughput_ratio(criterion):
    bench = wc(4, 4 * MIB)
    peak = {"dataflow": 0.0, "controlflow": 0.0}
    per_count = []
    ok_each = True
    for clients in (1, 2, 4, 8, 16):
        row = {}
        for mode in peak:
            m = run(build_cluster(ClusterConfig()), bench.workload(ClosedLoop(clients, 60)), mode)
            assert m.output_mismatches == 0
            row[mode] = (m.throughput_rpm, m.timeouts)
            peak[mode] = max(peak[mode], m.throughput_rpm)
        r = row["dataflow"][0] / row["controlflow"][0]
        per_count.append(f"{clients}:{r:.2f}")
        if row["dataflow"][1] == 0 and row["controlflow"][1] == 0 and r <= 1.0:
            ok_each = False
    ratio = peak["dataflow"] / peak["controlflow"]
    ok = ratio >= 1.3 and ok_each
    criterion(4, ok, f"peak ratio {ratio:.3f} (>= 1.3); per client count {' '.join(per_count)}")
    assert ok


# ---------------------------------------------------------------- 5


def test_c5_sink_memory_reduction(criterion):
    w = wc(4, 4 * MIB).workload(OpenLoop(30, 120))
    bs = {}
    for release in ("proactive", "completion"):
        m = run_dataflow(build_cluster(ClusterConfig(release=release, ttl=30)), w)
        assert len(m.completed) == 60 and m.output_mismatches == 0
        bs[release] = m.sink_byte_seconds
    frac = bs["proactive"] / bs["completion"]
    ok = frac <= 0.5
    criterion(5, ok, f"proactive/completion byte-seconds {frac:.3f} (<= 0.5)")
    assert ok


# ---------------------------------------------------------------- 6


def test_c6_pressure_aware_scaling(criterion):
    # clients join one second apart; see the ledger for the ramp sensitivity
    w = wc(4, 8 * MIB).workload(ClosedLoop(8, 120, ramp=8.0))
    done = {}
    for aware in (True, False):
        m = run_dataflow(build_cluster(ClusterConfig(pressure_aware=aware)), w)
        assert m.output_mismatches == 0
        done[aware] = len(m.completed)
    ratio = done[True] / done[False]
    ok = ratio >= 1.5
    criterion(6, ok, f"completed aware {done[True]} / unaware {done[False]} = {ratio:.2f} (>= 1.5)")
    assert ok


# ---------------------------------------------------------------- 7


def test_c7_exactly_once_recovery(criterion):
    bench = wc(4, MIB)
    defn = bench.definition
    links = list(defn.links())
    recovered = partial_takes = dup = faulted = 0
    for seed in range(200):
        rng = random.Random(seed)
        link = rng.choice(links)
        w = bench.workload(OpenLoop(1, 1), seed=seed)
        golden = evaluate(defn, w.input_for(0))
        n = chunk_count(len(golden.inputs[link.destination][link.data_name]))
        fault = TransferFault(0, link.source, link.data_name, link.destination, chunk=rng.randrange(n),
                              lose_retention=rng.random() < 0.5)
        cluster = build_cluster(ClusterConfig(faults=(fault,)))
        bad = []
        for sink in cluster.sinks.values():
            def checked_take(rid, fn, flu, now=None, _take=sink.take):
                bundle = _take(rid, fn, flu, now)
                if bundle != golden.inputs[fn]:
                    bad.append(fn)
                return bundle
            sink.take = checked_take
        m = run_dataflow(cluster, w)
        faulted += any(e["event"] == "FAULT" for e in m.events)
        recovered += len(m.completed) == 1 and m.output_mismatches == 0
        dup += m.counters["sink_duplicate_handoffs"]
        partial_takes += len(bad)
    ok = recovered == 200 and dup == 0 and partial_takes == 0 and faulted == 200
    criterion(7, ok, f"recovered {recovered}/200 (faults fired {faulted}), duplicate hand-offs {dup}, "
                     f"partial inputs taken {partial_takes}")
    assert ok


# ---------------------------------------------------------------- 8


def _lifecycle_case(seed):
    """Random requests, interrupts, keep-alives and sweeps on two engines.

    Returns (violations, recycles). A violation is either a container that
    is recyclable while one of its flows is still open at the network or its
    DLU queue is non-empty, or a drained idle container that outlived its
    deadline by more than one sweep interval.
    """
    rng = random.Random(seed)
    defn = chain(2, 1).definition
    keepalive = rng.choice([0.0, rng.uniform(0.005, 0.3), rng.uniform(0.3, 3.0)])
    sweep = rng.uniform(0.02, 1.0)
    sched = Scheduler()
    net = Network(sched.clock, checkpoint_every=rng.randrange(1, 4))
    net.add_node(CLIENT_NODE, ClientSink(CLIENT_NODE, keep=False))
    placement = plan_placement(defn, ["n0", "n1"], "explicit", {"f0": "n0", "f1": rng.choice(["n0", "n1"])})
    engines = []
    for node in ("n0", "n1"):
        sink = DataSink(node, sched.clock)
        net.add_node(node, sink)
        cfg = EngineConfig(cold_start=rng.choice([0.0, 0.05, 0.5]), keepalive=keepalive, sweep_interval=sweep,
                           alpha=1.0, max_containers=rng.choice([1, 2, None]))
        engines.append(NodeEngine(node, sched, net, sink, cfg, defn=defn, placement=placement))
    for eng in engines:
        eng.start_sweeper()

    emitted: dict[str, list] = {}

    def track(c):
        if c.cid in emitted:
            return
        emitted[c.cid] = []
        enqueue = c._enqueue

        def spy(emission, _c=c, _enqueue=enqueue):
            emitted[_c.cid].append(emission)
            _enqueue(emission)
        c._enqueue = spy

    for k in range(rng.randrange(1, 5)):
        rid = (seed * 16 + k).to_bytes(16, "big")
        size = rng.choice([rng.randrange(1, 16384), rng.randrange(16384, 400_000)])
        payload = rng.randbytes(size)
        if rng.random() < 0.3:
            net.inject_interrupt(lambda h, rid=rid: h.request_id == rid, rng.randrange(chunk_count(size)))

        def submit(rid=rid, payload=payload):
            for ch in split_payload(rid, flow_id_for(CLIENT, "input", "f0"), payload):
                engines[0].sink.put(ch, "f0", "input")
        sched.call_at(rng.uniform(0, 3), submit)

    drained_since: dict[str, float] = {}
    violations = []

    def flows_open(c):
        for em in emitted.get(c.cid, ()):
            for dest, _ in em.targets:
                h = net.connectors.get((em.request_id, flow_id_for(c.name, em.data_name, dest)))
                if h is None or not h.closed:
                    return True
        return False

    def check():
        now = sched.now
        for eng in engines:
            for c in eng.live_containers():
                track(c)
                pending = bool(c.dlu_queue) or flows_open(c)
                if c.is_recyclable(now) and pending:
                    violations.append(("recyclable with pending data", c.cid, now))
                idle = c.status is ContainerStatus.READY and all(
                    s.refresh(now) is SlotState.IDLE for s in c.slots)
                if idle and not pending:
                    since = drained_since.setdefault(c.cid, now)
                    due = max(since, c.keepalive_deadline) + sweep + 1e-9
                    if now > due:
                        violations.append(("missed recycle", c.cid, now))
                else:
                    drained_since.pop(c.cid, None)
        return bool(violations)

    sched.run(until=3 + 6 + keepalive + 3 * sweep, stop=check)
    recycles = sum(len(e.retired) for e in engines)
    return violations, recycles


def test_c8_keepalive_consistency(criterion):
    bad = []
    recycled = 0
    for seed in range(10_000):
        violations, n = _lifecycle_case(seed)
        recycled += n
        if violations:
            bad.append((seed, violations[0]))
    ok = not bad
    criterion(8, ok, f"10000 fuzzed schedules, {len(bad)} violations, {recycled} recycles observed"
                     + (f"; first {bad[0]}" if bad else ""))
    assert ok


# ---------------------------------------------------------------- 9


def test_c9_wire_protocol(criterion):
    # The detailed vectors and fuzzers live in test_wire.py; this re-runs them.
    import test_wire as tw

    for chunk, hexframe in tw.GOLDEN:
        assert tw.encode_frame(chunk).hex() == hexframe
    tw.test_header_is_44_bytes()
    tw.test_round_trip_identity_on_random_chunks()
    tw.test_decode_never_crashes_on_fuzz()
    criterion(9, True, "3 golden vectors, 10000 round trips, 100000 fuzzed decodes")


# ---------------------------------------------------------------- 10


def test_c10_small_data_fast_path(criterion):
    m = run_dataflow(build_cluster(ClusterConfig()), chain(4, 8 * 1024).workload(OpenLoop(20, 30)))
    streaming = m.counters["connectors_local"] + m.counters["connectors_remote"]
    small = m.counters["connectors_small"]
    ok = streaming == 0 and small > 0 and len(m.completed) == 10 and m.output_mismatches == 0
    criterion(10, ok, f"streaming connectors {streaming}, small connectors {small}")
    assert ok


# ---------------------------------------------------------------- 11


def test_c11_token_bucket_fidelity(criterion):
    from flowrun.container import dlu_pump

    net = Network()
    sink = DataSink("n1")
    sink.register_function("g", ["d"])
    net.add_node("n1", sink)
    c = Container("c", FunctionSpec("f", memory_mb=128), "n0", (FlowEdge("f", "d", ("g",)),), lambda f: "n1")
    c.dlu_send(b"\x02" * 16, "d", bytes(5_000_000))
    t = dlu_pump(c, net).finished_at
    ok = abs(t - 1.0) <= TICK and sink.is_ready(b"\x02" * 16, "g")
    criterion(11, ok, f"5 MB at 40 Mbps finished at {t:.9f} s (1.0 +/- {TICK})")
    assert ok


# ---------------------------------------------------------------- 12


def test_c12_fanout_adaptiveness(criterion):
    ratios = []
    for fan in (2, 4, 8, 16):
        w = wc(fan, 4 * MIB).workload(ClosedLoop(4, 60))
        r = {mode: run(build_cluster(ClusterConfig()), w, mode) for mode in ("dataflow", "controlflow")}
        assert all(m.output_mismatches == 0 for m in r.values())
        ratios.append(r["dataflow"].throughput_rpm / r["controlflow"].throughput_rpm)
    ok = all(b >= a * 0.95 for a, b in zip(ratios, ratios[1:]))
    criterion(12, ok, "ratios by fan 2/4/8/16: " + " ".join(f"{r:.2f}" for r in ratios))
    assert ok
