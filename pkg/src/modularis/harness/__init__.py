"""Workloads, plan files, the execution driver, benchmarks and the CLI."""
from .runner import MetricsReport, RunResult, load_plan, run
from .workload import KEY_PAYLOAD, WorkloadSpec, generate, read_relation, read_workload, write_relation, write_workload

__all__ = [
    "MetricsReport", "RunResult", "load_plan", "run",
    "KEY_PAYLOAD", "WorkloadSpec", "generate", "read_relation", "read_workload",
    "write_relation", "write_workload",
]
