import pytest

from flowrun.container import BlockSignal, ContainerStatus
from flowrun.dataplane import ClientSink, Network
from flowrun.engine import (
    EngineConfig,
    FaultReport,
    InvocationStatus,
    NodeEngine,
    ScaleReason,
    Unrecoverable,
)
from flowrun.harness import chain, wc
from flowrun.sim import Scheduler
from flowrun.sink import DataSink
from flowrun.wire import flow_id_for, split_payload
from flowrun.workflow import CLIENT, CLIENT_NODE, plan_placement


def rid(i):
    return i.to_bytes(16, "big")


def make_engine(defn, **cfg):
    sched = Scheduler()
    net = Network(sched.clock)
    sink = DataSink("n0", sched.clock)
    net.add_node("n0", sink)
    net.add_node(CLIENT_NODE, ClientSink(CLIENT_NODE, keep=False))
    peer = DataSink("n1", sched.clock)
    for f in defn.function_names:
        peer.register_function(f, defn.required_inputs(f))
    net.add_node("n1", peer)
    eng = NodeEngine("n0", sched, net, sink, EngineConfig(**cfg), defn=defn,
                     placement=plan_placement(defn, ["n0"]))
    return eng


def submit(eng, r, payload=b"payload"):
    defn = eng.defn
    for name in defn.external_inputs():
        for c in split_payload(r, flow_id_for(CLIENT, name, defn.entry), payload):
            eng.sink.put(c, defn.entry, name)


def dispatches(eng, function=None):
    return [e for e in eng.channel.select("DISPATCH") if function is None or e["function"] == function]


def test_ready_with_idle_container_dispatches_it():
    eng = make_engine(chain(1).definition)
    c, = eng.prewarm("f0")
    submit(eng, rid(1))
    d, = dispatches(eng)
    assert d["container"] == c.cid
    assert eng.request_table[(rid(1), "f0")] is InvocationStatus.DISPATCHED


def test_lru_choice_among_idle_containers():
    eng = make_engine(chain(1).definition)
    a, b = eng.prewarm("f0", 2)
    a.last_active, b.last_active = 5.0, 3.0
    submit(eng, rid(1))
    assert dispatches(eng)[0]["container"] == b.cid


def test_all_blocked_means_queued():
    eng = make_engine(chain(1).definition, max_containers=1)
    c, = eng.prewarm("f0")
    c.block_slot(0, 10.0)
    submit(eng, rid(1))
    assert not dispatches(eng)
    assert [p.request_id for p in eng.pending["f0"]] == [rid(1)]


def test_duplicate_ready_dispatches_once():
    eng = make_engine(chain(1).definition)
    eng.prewarm("f0")
    submit(eng, rid(1))
    assert eng.on_data_ready(rid(1), "f0") == "ignored"
    assert len(dispatches(eng)) == 1


def _signal(c, pressure=0.6):
    return BlockSignal(c.name, c.cid, 0, pressure, 0.0)


def test_block_signal_with_pending_work_scales_once():
    eng = make_engine(chain(1).definition, max_containers=4)
    c, = eng.prewarm("f0")
    c.slots[0].state = c.slots[0].state.RUNNING
    for i in range(2):
        submit(eng, rid(i))
    n_before = len(eng.containers["f0"])
    eng.scale_decisions.clear()
    eng.starting["f0"] = 0
    decision = eng.handle_block_signal(_signal(c))
    assert c.slots[0].blocked_until == pytest.approx(0.6)
    assert decision is not None and decision.reason is ScaleReason.PRESSURE
    assert decision.trigger.pressure > 0
    assert len(eng.containers["f0"]) == n_before + 1
    # a second signal while that cold start is in flight adds nothing
    assert eng.handle_block_signal(_signal(c, 0.3)) is None
    assert len(eng.containers["f0"]) == n_before + 1


def test_block_signal_without_pending_work_only_blocks():
    eng = make_engine(chain(1).definition)
    c, = eng.prewarm("f0")
    assert eng.handle_block_signal(_signal(c)) is None
    assert c.idle_slot(0.3) is None and c.idle_slot(0.6) is not None
    assert len(eng.containers["f0"]) == 1


def test_blocked_slot_takes_no_invocation_inside_window():
    eng = make_engine(chain(1).definition, max_containers=1)
    c, = eng.prewarm("f0")
    eng.handle_block_signal(_signal(c, 0.6))
    submit(eng, rid(7))
    eng.sched.run(until=0.59)
    assert not dispatches(eng)
    eng.sched.run(until=0.61)
    assert dispatches(eng)[0]["t"] == pytest.approx(0.6)


def test_keepalive_sweep():
    eng = make_engine(chain(1).definition, keepalive=5.0)
    drained, unacked, active = eng.prewarm("f0", 3)
    for c in (drained, unacked, active):
        c.last_active = 0.0

    class Open:
        closed = False
    unacked.open_flows[(rid(1), 1)] = Open()
    active.slots[0].state = active.slots[0].state.RUNNING
    assert eng.keepalive_sweep(6.0) == [drained.cid]
    assert drained.status is ContainerStatus.RECYCLED
    assert eng.keepalive_sweep(7.0) == []


def test_plan_redo_variants():
    eng = make_engine(wc(2, 1000).definition)
    net = eng.network
    r = rid(3)
    h = net.open_connector((r, flow_id_for("split", "part", "count0")), "n0", "n1", 300_000, "count0", "part")
    h.payload = bytes(300_000)
    net.send_chunk(h, h.chunk(0))
    net.checkpoint_flow(h)
    plan = eng.plan_redo(r, FaultReport("transfer", r, "split", h))
    assert plan.frontier and plan.frontier[0][1].acked_seq == 0 and not plan.reexecute

    for s in range(1, h.n_chunks):
        net.send_chunk(h, h.chunk(s))
    assert eng.plan_redo(r, FaultReport("transfer", r, "split", h)).empty

    h2 = net.open_connector((r, flow_id_for("split", "part", "count1")), "n0", "n1", 300_000, "count1", "part")
    h2.payload = None
    with pytest.raises(Unrecoverable):
        eng.plan_redo(r, FaultReport("transfer", r, "split", h2))
    eng.redo_log[(r, "split")] = {"input": b"x"}
    plan = eng.plan_redo(r, FaultReport("transfer", r, "split", h2))
    assert plan.reexecute == ("split",)


def test_dispatch_pending_fifo_and_affinity():
    eng = make_engine(wc(2, 1000).definition, max_containers=2)
    a, b = eng.prewarm("split", 2)
    for c in (a, b):
        c.slots[0].state = c.slots[0].state.RUNNING
    for i in range(3):
        submit(eng, rid(i))
    assert len(eng.pending["split"]) == 3
    eng.prewarm("count0")       # idle slot for another function only
    assert eng.dispatch_pending(0.0, "split") == 0
    for c in (a, b):
        c.slots[0].state = c.slots[0].state.IDLE
    assert eng.dispatch_pending(0.0) == 2
    assert [d["request"] for d in dispatches(eng, "split")] == [rid(0).hex(), rid(1).hex()]
    assert [p.request_id for p in eng.pending["split"]] == [rid(2)]
    assert eng.dispatch_pending(0.0, "merge") == 0


def test_no_dispatch_before_ready():
    eng = make_engine(wc(4, 100_000).definition)
    for i in range(5):
        submit(eng, rid(i), bytes(range(256)) * 400)
    eng.start_sweeper()
    eng.sched.run(until=30)
    ready = {}
    for e in eng.channel.records:
        key = (e.get("request"), e.get("function"))
        if e["event"] == "READY":
            ready.setdefault(key, e["t"])
        elif e["event"] == "DISPATCH":
            assert key in ready and ready[key] <= e["t"]
    assert len(eng.channel.select("END")) == 5
