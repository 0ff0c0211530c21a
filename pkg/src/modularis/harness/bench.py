"""Benchmark suites: one MetricsReport row per configuration point.

Every row also records whether the result matched the oracle, so a suite
doubles as an end-to-end correctness sweep.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import oracle
from ..builders import (
    GroupBySpec,
    JoinSpec,
    SequenceSpec,
    build_group_by,
    build_join,
    build_join_sequence,
    build_query,
    sequence_names,
)
from ..cluster import EngineConfig
from ..partition import RadixSpec
from ..typesys import Int64, TupleType
from . import queries as Q
from .runner import run
from .workload import WorkloadSpec, generate

LEFT = TupleType.of(key=Int64, lval=Int64)
RIGHT = TupleType.of(key=Int64, rval=Int64)


@dataclass
class BenchParams:
    tuples: int = 1 << 16
    ranks: tuple = (1, 2, 4, 8)
    seed: int = 0
    compression: bool = True
    put_batch: int = 2048
    groups: tuple = (2_000, 8_000, 32_000, 128_000)
    joins: tuple = (2, 3, 4, 5, 6, 7, 8)
    fanouts: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    check: bool = True


def relabel(rel: np.ndarray, t: TupleType) -> np.ndarray:
    """Reinterpret a ⟨key, payload⟩ relation under same-layout field names."""
    return rel.view(t.dtype)


def join_point(tuples, ranks, seed=0, compression=True, radix=None, config=None, check=True):
    spec = WorkloadSpec(tuples, 27, "one-to-one", seed)
    rels = generate(spec)
    left, right = relabel(rels["left"], LEFT), relabel(rels["right"], RIGHT)
    js = JoinSpec(LEFT, RIGHT, radix=radix or RadixSpec.with_local_passes(27, 10, 8), compression=compression)
    res = run(build_join(js), {"left": left, "right": right}, ranks, config,
              {"suite": "join", "tuples": tuples, "compression": compression})
    if check:
        expect = oracle.indexed_join(left, right, ["key"]).rows
        res.report.extra["oracleMatch"] = oracle.same_multiset(res.rows.tolist(), expect)
    return res


def sequence_relations(n_rel, tuples, correspondence="one-to-one", seed=0):
    spec = WorkloadSpec(tuples, 27, correspondence, seed, relations=n_rel)
    rels = generate(spec)
    names = list(rels)
    types = [TupleType.of(key=Int64, **{f"v{i}": Int64}) for i in range(n_rel)]
    out = {f"r{i}": relabel(rels[names[i]], types[i]) for i in range(n_rel)}
    return out, types


def sequence_point(N, mode, tuples, ranks, correspondence="one-to-one", seed=0, config=None,
                   radix=None, check=True, compression=False):
    rels, types = sequence_relations(N + 1, tuples, correspondence, seed)
    spec = SequenceSpec(tuple(types), mode, radix=radix or RadixSpec.with_local_passes(27, 6, 2),
                        compression=compression)
    plan = build_join_sequence(spec)
    res = run(plan, rels, ranks, config,
              {"suite": "sequence", "N": N, "mode": mode, "tuples": tuples, "correspondence": correspondence})
    if check:
        expect = oracle.ref_sequence_join([rels[n] for n in sequence_names(spec)], "key").rows
        res.report.extra["oracleMatch"] = oracle.same_multiset(res.rows.tolist(), expect)
    return res


def group_by_radix(groups) -> RadixSpec:
    """Dense keys ``[0, groups)``: P just covers them, 6 network bits, up to 6 local bits."""
    P = max(1, int(groups - 1).bit_length())
    F = min(6, P)
    return RadixSpec.with_local_passes(P, F, min(6, P - F)) if P > F else RadixSpec(P, F)


def group_by_relation(tuples, groups, seed=0, value_bits=20):
    """Keys uniform in ``[0, groups)``, values uniform in ``[0, 2**value_bits)``."""
    rng = np.random.default_rng(seed)
    t = TupleType.of(key=Int64, value=Int64)
    rel = np.empty(tuples, dtype=t.dtype)
    rel["key"] = rng.integers(0, groups, tuples)
    rel["value"] = rng.integers(0, 1 << value_bits, tuples)
    return rel, t


def group_by_point(tuples, groups, ranks, seed=0, config=None, compression=True, check=True):
    radix = group_by_radix(groups)
    # compressed words carry the value in P bits
    rel, t = group_by_relation(tuples, groups, seed, radix.P if compression else 20)
    spec = GroupBySpec(t, "key", radix=radix, compression=compression)
    res = run(build_group_by(spec), {"data": rel}, ranks, config,
              {"suite": "groupby", "tuples": tuples, "groups": groups})
    if check:
        expect = oracle.ref_group_by(rel, "key", "sum").rows
        res.report.extra["oracleMatch"] = oracle.same_multiset(res.rows.tolist(), expect)
    return res


def query_point(name, lineitems, ranks, seed=0, config=None, compression=False, check=True):
    q = Q.QUERIES[name](compression=compression)
    tables = Q.generate_tables(lineitems, seed)
    rels = Q.query_relations(q, tables)
    res = run(build_query(q.spec), rels, ranks, config, {"suite": "queries", "query": name, "tuples": lineitems})
    if check:
        expect = oracle.ref_filter_join_aggregate(
            rels[q.spec.left_name], rels[q.spec.right_name], q.spec.join_attr,
            q.left_pred, q.right_pred, q.spec.left_fields, q.spec.right_fields,
            q.post_pred, q.post_map, q.group_key, q.agg_ops,
        )
        names = res.rows.dtype.names
        got = [dict(zip(names, r)) for r in res.rows.tolist()]
        res.report.extra["oracleMatch"] = oracle.same_multiset(
            [tuple(sorted(d.items())) for d in got], [tuple(sorted(d.items())) for d in expect])
    return res


def suite_join(p: BenchParams):
    for r in p.ranks:
        yield join_point(p.tuples, r, p.seed, p.compression, config=_config(p), check=p.check).report


def suite_groupby(p: BenchParams):
    for g in p.groups:
        for r in p.ranks:
            yield group_by_point(p.tuples, g, r, p.seed, _config(p), check=p.check).report


def suite_sequence(p: BenchParams):
    for n in p.joins:
        for mode in ("naive", "optimized"):
            yield sequence_point(n, mode, p.tuples, p.ranks[-1], seed=p.seed, config=_config(p),
                                 check=p.check).report


def suite_sequence_bytes(p: BenchParams):
    """Optimized vs naive N=2 while the first join's output grows k-fold."""
    n = fanout_tuples(p.tuples, p.fanouts)
    for k in p.fanouts:
        for mode in ("naive", "optimized"):
            yield sequence_point(2, mode, n, p.ranks[-1], f"fanout:{k}", p.seed, _config(p),
                                 check=p.check).report


def fanout_tuples(tuples, fanouts) -> int:
    """Largest size <= tuples divisible by every fan-out (at least one multiple)."""
    m = int(np.lcm.reduce(np.asarray(fanouts, dtype=np.int64)))
    return max(m, tuples - tuples % m)


def suite_queries(p: BenchParams):
    for name in Q.QUERIES:
        for r in p.ranks:
            yield query_point(name, p.tuples, r, p.seed, _config(p), check=p.check).report


SUITES = {
    "join": suite_join,
    "groupby": suite_groupby,
    "sequence": suite_sequence,
    "sequence-bytes": suite_sequence_bytes,
    "queries": suite_queries,
}


def _config(p: BenchParams):
    return EngineConfig(put_batch=p.put_batch)


def run_suite(name: str, params: BenchParams, out_csv=None) -> list:
    rows = [rep.flat() for rep in SUITES[name](params)]
    if out_csv is not None:
        write_csv(rows, out_csv)
    return rows


def write_csv(rows: list, path) -> None:
    fields: list = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with Path(path).open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
