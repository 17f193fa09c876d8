import pytest

from flowrun.harness import ClusterConfig, OpenLoop, WorkloadSpec, build_cluster, run_controlflow, run_dataflow
from flowrun.workflow import parse_workflow

PAIR = """workflow: pair
function A:
  memory_mb: 128
  compute: fill({size}) base=10ms
  inputs: [input]
  outputs: [d -> B]
function B:
  memory_mb: 128
  compute: checksum base=1ms
  inputs: [d]
entry: A
terminals: [B]
"""


def one_request(size, mode, overhead=0.063):
    defn = parse_workflow(PAIR.format(size=size))
    cfg = ClusterConfig(prewarm=(("A", 1), ("B", 1)), trigger_overhead=overhead)
    run = run_controlflow if mode == "controlflow" else run_dataflow
    m = run(build_cluster(cfg), WorkloadSpec(defn, OpenLoop(1, 1), input_size=64, seed=1))
    rec, = m.completed
    assert m.output_mismatches == 0
    return rec.end - rec.submit, m


def test_serialized_phases_add_up():
    # 100 ms compute, 1 s Put, 1 s Get, 63 ms trigger, 10 ms for B. Put and
    # Get each start on a bucket that filled while idle, so each is one
    # chunk's worth of burst faster than the ideal.
    burst = 8 * 65536 / 40e6
    e2e, _ = one_request(5_000_000, "controlflow")
    assert e2e >= 0.1 + 1.0 + 1.0 + 0.063 - 2 * burst
    assert e2e == pytest.approx(0.1 + 2 * (1.0 - burst) + 0.063 + 0.01, abs=1e-5)


def test_zero_bytes_is_compute_plus_trigger():
    e2e, _ = one_request(0, "controlflow")
    assert e2e == pytest.approx(0.1 + 0.01 + 0.063, abs=1e-3)


def test_dataflow_is_faster_when_data_moves():
    base, _ = one_request(1_000_000, "controlflow")
    flow, _ = one_request(1_000_000, "dataflow")
    assert flow < base


def test_successor_waits_for_predecessor_plus_overhead():
    _, m = one_request(200_000, "controlflow")
    finish_a = next(e["t"] for e in m.events if e["event"] == "FINISH" and e["function"] == "A")
    start_b = next(e["t"] for e in m.events if e["event"] == "DISPATCH" and e["function"] == "B")
    assert start_b >= finish_a + 0.063 - 1e-9


def test_store_sees_every_intermediate_byte_twice():
    _, m = one_request(300_000, "controlflow")
    assert m.counters["store_bytes_out"] == 300_000
    assert m.counters["store_bytes_in"] >= 300_000
