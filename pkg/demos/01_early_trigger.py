"""Two functions in a line, A feeding B.

A emits its output a quarter of the way through a 200 ms execution. Under
data-flow triggering B starts as soon as that output has landed in its
sink; under the orchestrated baseline B waits for A to finish, for the
output to round-trip through the store, and for the trigger overhead.
"""

from flowrun import ClusterConfig, OpenLoop, WorkloadSpec, build_cluster, parse_workflow, run_controlflow, run_dataflow

FLOW = """workflow: early
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

defn = parse_workflow(FLOW)
workload = WorkloadSpec(defn, OpenLoop(1, 1), input_size=200_000)
cfg = ClusterConfig(prewarm=(("A", 1), ("B", 1)))

for runner in (run_dataflow, run_controlflow):
    m = runner(build_cluster(cfg), workload)
    print(f"\n{m.mode}")
    for e in m.events:
        if e["event"] in ("DISPATCH", "EMIT", "FINISH", "END"):
            print(f"  {1000 * e['t']:8.1f} ms  {e['event']:<8} {e['function']}")
    rec = m.completed[0]
    print(f"  end-to-end {1000 * (rec.end - rec.submit):.1f} ms")
