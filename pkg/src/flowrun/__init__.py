"""Miniature serverless workflow runtime with a data-flow execution mode."""

from .harness import (
    Benchmark,
    Burst,
    ClosedLoop,
    ClusterConfig,
    ConfigError,
    FluFault,
    MismatchedWorkloads,
    NodeSpec,
    OpenLoop,
    RunMetrics,
    TransferFault,
    WorkloadSpec,
    build_cluster,
    builtin_workloads,
    compare,
    run_controlflow,
    run_dataflow,
)
from .workflow import WorkflowDefinition, parse_workflow, validate

__all__ = [
    "Benchmark", "Burst", "ClosedLoop", "ClusterConfig", "ConfigError", "FluFault",
    "MismatchedWorkloads", "NodeSpec", "OpenLoop", "RunMetrics", "TransferFault",
    "WorkflowDefinition", "WorkloadSpec", "build_cluster", "builtin_workloads", "compare",
    "parse_workflow", "run_controlflow", "run_dataflow", "validate",
]
__version__ = "0.1.0"
