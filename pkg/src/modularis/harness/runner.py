"""Execution driver: bind relations, run a plan, collect metrics."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..builders import PHASES, bind_workers
from ..cluster import EngineConfig, ExecContext, RunStats
from ..operators import execute
from ..plan import Plan
from ..values import RowVector


@dataclass
class MetricsReport:
    config: dict
    phases: dict
    transport: dict
    result_rows: int
    wall_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "phases": self.phases,
            "transport": self.transport,
            "resultRows": self.result_rows,
            "wallSeconds": self.wall_seconds,
        }

    def flat(self) -> dict:
        """One CSV row: config, phases and counters side by side."""
        row = dict(self.config)
        row.update({f"phase_{k}": v for k, v in self.phases.items()})
        row.update(self.transport)
        row["resultRows"] = self.result_rows
        row["wallSeconds"] = self.wall_seconds
        row.update(self.extra)
        return row


@dataclass
class RunResult:
    output: np.ndarray       # root block of the driver plan
    report: MetricsReport
    stats: RunStats

    @property
    def rows(self) -> np.ndarray:
        """The flattened result relation (root is ⟨data: RowVector⟩)."""
        return flatten_result(self.output)


def flatten_result(block: np.ndarray) -> np.ndarray:
    if len(block) == 1 and len(block.dtype.names) == 1:
        v = block[block.dtype.names[0]][0]
        if isinstance(v, RowVector):
            return v.array
    return block


def run(plan: Plan, relations: dict, ranks: int, config: EngineConfig | None = None,
        echo: dict | None = None) -> RunResult:
    """Run a builder-style driver plan with relations split over ``ranks``."""
    config = config or EngineConfig()
    stats = RunStats()
    ctx = ExecContext(config, stats)
    bindings = bind_workers(plan, relations, ranks)
    t0 = time.perf_counter()
    out = execute(plan, bindings, ctx)
    wall = time.perf_counter() - t0
    times = stats.phase_times()
    phases = {p: times.get(p, 0.0) for p in PHASES}
    cfg = {"ranks": ranks, **config.to_json(), **(echo or {})}
    rows = flatten_result(out)
    report = MetricsReport(cfg, phases, stats.metrics.to_json(), len(rows), wall)
    return RunResult(out, report, stats)


def load_plan(path) -> Plan:
    plan = Plan.loads(Path(path).read_text())
    plan.types()  # validate eagerly
    return plan


def write_metrics(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2))
