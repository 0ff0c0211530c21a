"""A query engine composed from fine-grained sub-operators.

Plans are DAGs of small operators (scans, maps, histograms, partitioning,
build/probe, network exchange) that the engine cuts into pipelines and
runs, optionally on a simulated multi-rank cluster.
"""
from . import cluster  # registers the network operators
from .cluster import EngineConfig, ExecContext, RunStats
from .operators import execute, result_rows
from .partition import RadixSpec
from .plan import Plan, PlanBuilder, cut_pipelines, validate
from .typesys import Bool, Float64, Int64, RowVector, TupleType, parse_type

__all__ = [
    "cluster", "EngineConfig", "ExecContext", "RunStats", "execute", "result_rows",
    "RadixSpec", "Plan", "PlanBuilder", "cut_pipelines", "validate",
    "Bool", "Float64", "Int64", "RowVector", "TupleType", "parse_type",
]
