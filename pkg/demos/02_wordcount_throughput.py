"""Closed-loop word count at increasing client counts, both execution modes.

Containers get 128 MB, i.e. 0.1 core and 40 Mbps. The baseline moves every
intermediate byte twice (Put then Get) through that link and serializes
transfer with compute, so its throughput flattens early.
"""

from flowrun import ClosedLoop, ClusterConfig, build_cluster, compare, run_controlflow, run_dataflow
from flowrun.harness import wc
from flowrun.workflow import MIB

bench = wc(4, 4 * MIB)
print(f"{'clients':>8}{'dataflow rpm':>14}{'baseline rpm':>14}{'ratio':>8}{'p50 ratio':>11}")
for clients in (1, 2, 4, 8):
    workload = bench.workload(ClosedLoop(clients, 60))
    df = run_dataflow(build_cluster(ClusterConfig()), workload)
    cf = run_controlflow(build_cluster(ClusterConfig()), workload)
    rep = compare(df, cf)
    print(f"{clients:>8}{df.throughput_rpm:>14.1f}{cf.throughput_rpm:>14.1f}"
          f"{rep.ratios['throughput']:>8.2f}{rep.ratios['p50_latency']:>11.2f}")
