"""How long intermediate data sits in the per-node sinks.

Proactive release frees each input the moment its consumer has taken it.
The alternative keeps everything until the whole request is done. Both runs
see the same 30 rpm trace.
"""

from flowrun import ClusterConfig, OpenLoop, build_cluster, run_dataflow
from flowrun.harness import wc
from flowrun.workflow import MIB

workload = wc(4, 4 * MIB).workload(OpenLoop(30, 120))
result = {}
for release in ("proactive", "completion"):
    m = run_dataflow(build_cluster(ClusterConfig(release=release, ttl=30)), workload)
    result[release] = m.sink_byte_seconds
    print(f"{release:>10}: {m.sink_byte_seconds / MIB:10.1f} MiB*s, peak resident "
          f"{m.counters['sink_peak_resident'] / MIB:6.1f} MiB")
print(f"reduction: {1 - result['proactive'] / result['completion']:.1%}")
