import pytest

from flowrun.container import (
    AmbiguousSwitch,
    Container,
    ContainerStatus,
    FluStats,
    NoIdleSlot,
    UnknownData,
    dlu_pump,
    invoke_flu,
    is_recyclable,
    pressure_estimate,
    update_flu_stats,
)
from flowrun.dataplane import Network
from flowrun.sink import DataSink
from flowrun.workflow import MIB, ComputeModel, FlowEdge, FunctionSpec

RID = b"\x07" * 16


def spec(name="f", transform="mix", cost=0.0, base=0.0, emit_at=1.0, memory_mb=128, inputs=("input",),
         selector=None):
    return FunctionSpec(name, ComputeModel(transform, None, cost, base, emit_at), tuple(inputs), memory_mb,
                        selector)


def two_node_net():
    net = Network()
    sinks = {}
    for n in ("n0", "n1"):
        s = DataSink(n)
        s.register_function("g", ["d"])
        s.register_function("h", ["d"])
        net.add_node(n, s)
        sinks[n] = s
    return net, sinks


def test_resource_profile_scales_with_memory():
    s = spec(memory_mb=128)
    assert s.cpu_cores == pytest.approx(0.1)
    assert s.bandwidth_bps == pytest.approx(40e6)


def test_execution_time_is_cost_over_cores():
    c = Container("c", spec("count", "count", cost=100.0), "n0")
    done = invoke_flu(c, RID, {"input": bytes(MIB)}, 0.0)
    assert done.finished_at == pytest.approx(1.0)


def test_mid_function_emission_precedes_completion():
    edges = (FlowEdge("f", "d", ("g",)),)
    c = Container("c", spec(base=200.0, emit_at=0.25), "n0", edges, lambda f: "n0")
    done = invoke_flu(c, RID, {"input": b"abc"}, 0.0)
    assert done.emitted_at == pytest.approx(0.5)
    assert done.finished_at == pytest.approx(2.0)
    assert len(c.dlu_queue) == 1


def test_blocked_container_has_no_slot():
    c = Container("c", spec(), "n0")
    c.block_slot(0, 5.0)
    with pytest.raises(NoIdleSlot):
        c.start_flu(RID, {"input": b"x"}, 1.0)
    assert c.idle_slot(5.0) is not None


@pytest.mark.parametrize("size,t_flu,pressure,blocks", [
    (5_000_000, 0.4, 0.6, True),
    (100_000, 0.5, -0.48, False),
])
def test_pressure_examples(size, t_flu, pressure, blocks):
    est = pressure_estimate(size, 40e6, t_flu, 1.0)
    assert est.pressure == pytest.approx(pressure, abs=1e-12)
    assert est.blocks is blocks


def test_signal_posted_only_for_positive_pressure():
    signals = []
    edges = (FlowEdge("f", "d", ("g",)),)
    c = Container("c", spec(), "n0", edges, lambda f: "n1", alpha=1.0)
    c.on_signal = signals.append
    c.flu_stats = FluStats("f", ewma=0.4, count=1)
    c.dlu_send(RID, "d", bytes(5_000_000))
    c.flu_stats = FluStats("f", ewma=0.5, count=1)
    c.dlu_send(RID, "d", bytes(100_000))
    assert len(signals) == 1 and signals[0].pressure == pytest.approx(0.6)


def test_switch_resolution():
    edges = (FlowEdge("f", "d", ("g", "h"), conditional=True, labels=("resize", "crop")),)
    c = Container("c", spec(selector="mod"), "n0", edges, lambda f: "n0")
    c.dlu_send(RID, "d", b"img", dest_label="resize")
    assert c.dlu_queue[-1].destinations == ["g"]
    with pytest.raises(AmbiguousSwitch):
        c.dlu_send(RID, "d", b"img", dest_label="rotate")
    with pytest.raises(UnknownData):
        c.dlu_send(RID, "nope", b"img")


def test_ewma():
    s = update_flu_stats(FluStats("f"), 2.0)
    assert s.t_flu == 2.0
    assert update_flu_stats(FluStats("f", ewma=1.0, count=1, beta=0.5), 3.0).t_flu == 2.0
    s = FluStats("f", ewma=17.0, count=1)
    for _ in range(60):
        s = update_flu_stats(s, 0.25)
    # the gap shrinks by (1 - beta) per sample
    assert s.t_flu - 0.25 == pytest.approx(16.75 * 0.7 ** 60, rel=1e-9)
    assert abs(s.t_flu - 0.25) < 1e-8


def test_cold_t_flu_is_zero():
    assert FluStats("f").t_flu == 0.0


def test_fifo_emissions():
    net, _ = two_node_net()
    edges = (FlowEdge("f", "d", ("g",)),)
    c = Container("c", spec(), "n0", edges, lambda f: "n1")
    c.dlu_send(RID, "d", bytes(200_000))
    c.dlu_send(b"\x08" * 16, "d", bytes(200_000))
    report = dlu_pump(c, net)
    first_rids = [t for t, _, seq in report.send_times]
    assert report.emissions == 2 and report.chunks == 8
    assert first_rids == sorted(first_rids)


def test_empty_queue_sends_nothing():
    net, _ = two_node_net()
    c = Container("c", spec(), "n0")
    report = dlu_pump(c, net, now=3.0)
    assert report.chunks == 0 and report.finished_at == 3.0


def test_five_megabytes_take_one_second_at_forty_megabit():
    net, _ = two_node_net()
    edges = (FlowEdge("f", "d", ("g",)),)
    c = Container("c", spec(), "n0", edges, lambda f: "n1")
    c.dlu_send(RID, "d", bytes(5_000_000))
    assert dlu_pump(c, net).finished_at == pytest.approx(1.0, abs=1e-9)


def test_same_node_transfer_is_not_throttled():
    net, sinks = two_node_net()
    edges = (FlowEdge("f", "d", ("g",)),)
    c = Container("c", spec(), "n0", edges, lambda f: "n0")
    c.dlu_send(RID, "d", bytes(5_000_000))
    assert dlu_pump(c, net).finished_at == 0.0
    assert sinks["n0"].is_ready(RID, "g")


def test_recyclable_rules():
    net, _ = two_node_net()
    edges = (FlowEdge("f", "d", ("g",)),)
    c = Container("c", spec(), "n0", edges, lambda f: "n1", keepalive=10.0)
    assert not is_recyclable(c, 5.0)          # inside the window
    assert is_recyclable(c, 10.5)
    c.dlu_send(RID, "d", bytes(300_000))
    assert not is_recyclable(c, 100.0)        # queued emission
    net.inject_interrupt(lambda h: True, 2)
    with pytest.raises(Exception):
        dlu_pump(c, net)
    assert c.unacked_flows()
    c.dlu_queue.clear()
    assert not is_recyclable(c, 100.0)        # idle FLU, unacked flow
    c.status = ContainerStatus.STARTING
    assert not is_recyclable(c, 100.0)
