"""``modularis`` command line: gen, plan, run, bench."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..builders import (
    GroupBySpec,
    JoinSpec,
    SequenceSpec,
    build_group_by,
    build_join,
    build_join_sequence,
)
from ..cluster import EngineConfig
from ..errors import ModularisError, PlanError, TypeMismatch
from ..partition import RadixSpec
from ..typesys import Int64, TupleType
from .bench import SUITES, BenchParams, run_suite
from .runner import load_plan, run, write_metrics
from .workload import WorkloadSpec, generate, parse_correspondence, read_workload, write_relation, write_workload

log = logging.getLogger("modularis")

EXIT_ENGINE = 1
EXIT_PLAN = 2


def _error(kind: str, exc: BaseException) -> str:
    body = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    for attr in ("node_id", "expected", "actual", "rank"):
        v = getattr(exc, attr, None)
        if v is not None:
            body[attr] = str(v)
    return json.dumps(body)


def bind_relations(plan, relations: dict) -> dict:
    """Match workload relations to the plan's worker arguments.

    Names win; otherwise relations are taken in manifest order and
    reinterpreted under the expected row layout (same width required).
    """
    (ranks_t,) = plan.inputs.values()
    arg_t = ranks_t["ranks"].element
    wanted = list(arg_t.names)
    if all(n in relations for n in wanted):
        chosen = [relations[n] for n in wanted]
    elif len(relations) >= len(wanted):
        chosen = list(relations.values())[:len(wanted)]
    else:
        raise PlanError(f"plan expects relations {wanted}, workload has {list(relations)}")
    out = {}
    for name, rows in zip(wanted, chosen):
        elem = arg_t[name].element
        if rows.dtype.names != elem.names:
            if rows.dtype.itemsize != elem.dtype.itemsize:
                raise TypeMismatch(f"relation for {name!r} has {rows.dtype.itemsize}-byte rows",
                                   expected=elem, actual=rows.dtype)
            rows = rows.view(elem.dtype)
        out[name] = rows
    return out


def cmd_gen(a) -> int:
    spec = WorkloadSpec(a.tuples, a.bits, parse_correspondence(a.correspondence), a.seed, a.relations)
    out = write_workload(a.out, generate(spec), spec)
    print(out)
    return 0


def cmd_plan(a) -> int:
    radix = RadixSpec.with_local_passes(a.bits, a.network_bits, *a.local_bits)
    if a.kind == "join":
        lt = TupleType.of(key=Int64, lval=Int64)
        rt = TupleType.of(key=Int64, rval=Int64)
        plan = build_join(JoinSpec(lt, rt, radix=radix, compression=a.compression,
                                   left_name="left", right_name="right"), local=a.local)
    elif a.kind == "groupby":
        t = TupleType.of(key=Int64, value=Int64)
        plan = build_group_by(GroupBySpec(t, "key", radix=radix, compression=a.compression), local=a.local)
    else:
        types = tuple(TupleType.of(key=Int64, **{f"v{i}": Int64}) for i in range(a.joins + 1))
        plan = build_join_sequence(SequenceSpec(types, a.kind, radix=radix, compression=a.compression),
                                   local=a.local)
    Path(a.out).write_text(plan.dumps(indent=1))
    print(a.out)
    return 0


def cmd_run(a) -> int:
    try:
        plan = load_plan(a.plan)
    except (TypeMismatch, PlanError, ValueError, KeyError) as e:
        print(_error("invalid-plan", e), file=sys.stderr)
        return EXIT_PLAN
    try:
        rels = bind_relations(plan, read_workload(a.workload))
        config = EngineConfig(put_batch=a.put_batch, strict_epochs=a.strict_epochs)
        res = run(plan, rels, a.ranks, config, {"seed": a.seed, "plan": str(a.plan)})
    except (TypeMismatch, PlanError) as e:
        print(_error("invalid-plan", e), file=sys.stderr)
        return EXIT_PLAN
    except (ModularisError, OSError) as e:
        print(_error("engine", e), file=sys.stderr)
        return EXIT_ENGINE
    if a.metrics_out:
        write_metrics(res.report, a.metrics_out)
    if a.result_out:
        write_relation(a.result_out, res.rows)
    print(json.dumps(res.report.to_json()))
    return 0


def cmd_bench(a) -> int:
    p = BenchParams(tuples=a.tuples, seed=a.seed, put_batch=a.put_batch, check=not a.no_check)
    if a.ranks:
        p.ranks = tuple(a.ranks)
    try:
        rows = run_suite(a.suite, p, a.out)
    except ModularisError as e:
        print(_error("engine", e), file=sys.stderr)
        return EXIT_ENGINE
    for r in rows:
        log.info("%s", r)
    print(f"{len(rows)} rows -> {a.out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="modularis", description="Sub-operator query engine harness.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic workload directory")
    g.add_argument("--tuples", type=int, required=True)
    g.add_argument("--bits", type=int, default=27)
    g.add_argument("--correspondence", default="one-to-one", help="one-to-one | fanout:k | random")
    g.add_argument("--relations", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    pl = sub.add_parser("plan", help="write a builder plan as JSON")
    pl.add_argument("kind", choices=["join", "groupby", "optimized", "naive"])
    pl.add_argument("--joins", type=int, default=2, help="N for sequence plans")
    pl.add_argument("--bits", type=int, default=27)
    pl.add_argument("--network-bits", type=int, default=10)
    pl.add_argument("--local-bits", type=int, nargs="*", default=[8])
    pl.add_argument("--compression", action=argparse.BooleanOptionalAction, default=False)
    pl.add_argument("--local", action="store_true", help="NestedMap instead of the executor")
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plan)

    r = sub.add_parser("run", help="execute a plan file over a workload")
    r.add_argument("--plan", required=True)
    r.add_argument("--ranks", type=int, default=1)
    r.add_argument("--workload", required=True)
    r.add_argument("--metrics-out")
    r.add_argument("--result-out", help="write result rows in the relation format")
    r.add_argument("--put-batch", type=int, default=2048)
    r.add_argument("--strict-epochs", action="store_true")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("bench", help="run a benchmark suite into a CSV")
    b.add_argument("--suite", required=True, choices=sorted(SUITES))
    b.add_argument("--out", required=True)
    b.add_argument("--tuples", type=int, default=1 << 16)
    b.add_argument("--ranks", type=int, nargs="*")
    b.add_argument("--put-batch", type=int, default=2048)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--no-check", action="store_true", help="skip the oracle comparison")
    b.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    a = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    return a.fn(a)


if __name__ == "__main__":
    sys.exit(main())
