"""Cut a transfer mid-flow and watch the runtime recover.

The split -> count2 flow is interrupted at chunk 3. With retention kept the
sender replays from its last checkpoint; with retention lost it re-runs
split from the logged inputs. Either way the merged result matches the
fault-free reference and no function sees the same input twice.
"""

from flowrun import ClusterConfig, OpenLoop, TransferFault, build_cluster, run_dataflow
from flowrun.harness import wc
from flowrun.workflow import MIB

bench = wc(4, MIB)
workload = bench.workload(OpenLoop(1, 1), seed=7)

for lose in (False, True):
    fault = TransferFault(0, "split", "part", "count2", chunk=3, lose_retention=lose)
    m = run_dataflow(build_cluster(ClusterConfig(faults=(fault,))), workload)
    print(f"\nretention lost: {lose}")
    for e in m.events:
        if e["event"] in ("FAULT", "REDO"):
            extra = {k: v for k, v in e.items() if k not in ("t", "node", "event", "request")}
            print(f"  {1000 * e['t']:8.1f} ms  {e['event']:<6} {extra}")
    print(f"  completed {len(m.completed)}, wrong outputs {m.output_mismatches}, "
          f"duplicate hand-offs {m.counters['sink_duplicate_handoffs']}")
