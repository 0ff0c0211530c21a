"""The ten acceptance criteria at their stated scales and tolerances.

Each test carries a ``criterion`` marker; conftest prints one status line
per criterion in the terminal summary.
"""
import os
import time
import warnings

import numpy as np
import pytest

from dag_gen import random_dag, random_input
from modularis import oracle
from modularis import operators as ops
from modularis.builders import (
    GroupBySpec,
    JoinSpec,
    SequenceSpec,
    build_group_by,
    build_join,
    build_join_sequence,
    build_query,
    split_round_robin,
)
from modularis.cluster import EngineConfig
from modularis.harness import queries as Q
from modularis.harness.bench import (
    LEFT,
    RIGHT,
    BenchParams,
    group_by_radix,
    group_by_relation,
    query_point,
    relabel,
    run_suite,
    sequence_relations,
)
from modularis.harness.runner import run
from modularis.harness.workload import WorkloadSpec, generate
from modularis.partition import RadixSpec, compress, decompress, radix_bucket
from net_util import exchange, random_rank_data


def note(request, detail, warn=False):
    request.node.user_properties.append(("detail", detail))
    if warn:
        request.node.user_properties.append(("warn", True))
    print(detail)


def sorted_rows(rows: np.ndarray) -> np.ndarray:
    return np.sort(rows, order=list(rows.dtype.names))


# -- 1 ------------------------------------------------------------------------------

JOIN_N = 1 << 20


@pytest.fixture(scope="module")
def join_workload():
    rels = generate(WorkloadSpec(JOIN_N, 27, "one-to-one", seed=1))
    left, right = relabel(rels["left"], LEFT), relabel(rels["right"], RIGHT)
    want = oracle.indexed_join(left, right, ["key"])
    expect = np.array(want.rows, dtype=[(n, "<i8") for n in want.names])
    return left, right, sorted_rows(expect)


@pytest.mark.criterion(1, "join correctness, 2^20 tuples, P=27, compression, R in {1,2,4,8}")
def test_c1_join_correctness(request, join_workload):
    left, right, expect = join_workload
    assert len(expect) == JOIN_N
    plan = build_join(JoinSpec(LEFT, RIGHT, radix=RadixSpec.with_local_passes(27, 10, 8), compression=True))
    times = {}
    for R in (1, 2, 4, 8):
        t0 = time.perf_counter()
        res = run(plan, {"left": left, "right": right}, R)
        times[R] = time.perf_counter() - t0
        got = res.rows
        assert got.dtype.names == expect.dtype.names
        assert len(got) == JOIN_N
        assert np.array_equal(sorted_rows(got.view(expect.dtype)), expect), f"R={R}"
        assert times[R] < 60.0
    note(request, "seconds " + ", ".join(f"R={r}:{t:.1f}" for r, t in times.items()))


# -- 2 ------------------------------------------------------------------------------


@pytest.mark.criterion(2, "compression round-trip: exhaustive P<=16, 10^6 samples P<=27")
def test_c2_compression_roundtrip(request):
    rng = np.random.default_rng(2)
    cases = 0
    for P in range(1, 17):
        keys = np.arange(1 << P, dtype=np.int64)
        values = rng.permutation(1 << P).astype(np.int64)
        for F in range(1, P + 1):
            spec = RadixSpec(P, F)
            packed = compress(keys, values, spec)
            k, v = decompress(packed, radix_bucket(keys, spec), spec)
            assert np.array_equal(k, keys) and np.array_equal(v, values), (P, F)
            cases += len(keys)
    samples = 1_000_000
    Ps = rng.integers(17, 28, samples)
    Fs = rng.integers(1, Ps + 1)
    for P in range(17, 28):
        for F in range(1, P + 1):
            sel = (Ps == P) & (Fs == F)
            m = int(sel.sum())
            if not m:
                continue
            spec = RadixSpec(P, F)
            keys = rng.integers(0, 1 << P, m)
            values = rng.integers(0, 1 << P, m)
            k, v = decompress(compress(keys, values, spec), radix_bucket(keys, spec), spec)
            assert np.array_equal(k, keys) and np.array_equal(v, values), (P, F)
            cases += m
    note(request, f"{cases} round-trips, 0 mismatches")


# -- 3 ------------------------------------------------------------------------------


@pytest.mark.criterion(3, "exchange conservation, placement, region disjointness (strict, 100 runs)")
def test_c3_exchange_invariants(request):
    rng = np.random.default_rng(3)
    runs = 0
    for i in range(100):
        R = (2, 4, 8)[i % 3]
        P = int(rng.integers(6, 20))
        F = int(rng.integers(1, min(P, 6) + 1))
        data = random_rank_data(rng, R, P, max_rows=300)
        cfg = EngineConfig(put_batch=int(rng.integers(1, 64)), strict_epochs=True, timeout=60.0)
        results, _ = exchange(data, P, F, cfg, block=int(rng.integers(1, 128)))
        sent = np.sort(np.concatenate(data), order=["key", "val"])
        got = [b for res in results for _, b in res]
        received = np.sort(np.concatenate(got), order=["key", "val"]) if got else sent[:0]
        assert np.array_equal(received, sent), "conservation"
        for rank, res in enumerate(results):
            for p, b in res:
                assert p % R == rank, "placement"
                assert ((b["key"] >> (P - F)) == p).all(), "partition content"
        runs += 1
    note(request, f"{runs} strict runs, 0 violations")


# -- 4 ------------------------------------------------------------------------------


@pytest.mark.criterion(4, "shuffle count N+1 (optimized) vs 2N (naive), N=2..8")
def test_c4_shuffle_counts(request):
    rows = run_suite("sequence", BenchParams(tuples=4096, ranks=(4,)))
    seen = {}
    for r in rows:
        N, mode = r["N"], r["mode"]
        assert r["oracleMatch"], (N, mode)
        expect = N + 1 if mode == "optimized" else 2 * N
        assert r["relationsShuffled"] == expect, (N, mode, r["relationsShuffled"])
        seen[(N, mode)] = r["relationsShuffled"]
    assert {n for n, _ in seen} == set(range(2, 9))
    note(request, "N=2: 3 vs 4 ... N=8: 9 vs 16")


# -- 5 ------------------------------------------------------------------------------


@pytest.mark.criterion(5, "optimized N=2 bytesPut constant under fan-out x1..x8, naive increasing")
def test_c5_constant_network_bytes(request):
    rows = run_suite("sequence-bytes", BenchParams(tuples=6720, ranks=(4,)))
    assert all(r["oracleMatch"] for r in rows)
    opt = [r["bytesPut"] for r in rows if r["mode"] == "optimized"]
    naive = [r["bytesPut"] for r in rows if r["mode"] == "naive"]
    assert len(opt) == len(naive) == 8
    spread = (max(opt) - min(opt)) / min(opt)
    assert spread < 0.01
    assert all(b > a for a, b in zip(naive, naive[1:]))
    note(request, f"optimized spread {spread:.2%}; naive {naive[0]}..{naive[-1]} bytes")


# -- 6 ------------------------------------------------------------------------------


@pytest.mark.criterion(6, "GROUP BY 2^20 rows, groups {2k,8k,32k,128k}, R in {2,4,8}")
def test_c6_group_by(request):
    checked = 0
    for g in (2_000, 8_000, 32_000, 128_000):
        radix = group_by_radix(g)
        rel, t = group_by_relation(1 << 20, g, seed=g, value_bits=radix.P)
        want = oracle.ref_group_by(rel, "key", "sum").rows
        expect = sorted_rows(np.array(want, dtype=t.dtype))
        plan = build_group_by(GroupBySpec(t, "key", radix=radix, compression=True))
        for R in (2, 4, 8):
            # the same key arrives from several ranks
            shares = [set(np.unique(p["key"]).tolist()) for p in split_round_robin(rel, R)]
            assert shares[0] & shares[1]
            res = run(plan, {"data": rel}, R)
            assert np.array_equal(sorted_rows(res.rows), expect), (g, R)
            checked += 1
    note(request, f"{checked} configurations equal to the oracle")


# -- 7 ------------------------------------------------------------------------------


@pytest.mark.criterion(7, "Q4/Q12/Q14/Q19-shaped queries equal the filter-join-aggregate oracle")
def test_c7_queries(request):
    sizes = []
    for name in Q.QUERIES:
        res = query_point(name, 1 << 18, 4)
        assert res.report.extra["oracleMatch"], name
        assert res.report.result_rows > 0, name
        sizes.append(f"{name}:{res.report.result_rows}")
    note(request, "262144 lineitems; result rows " + " ".join(sizes))


# -- 8 ------------------------------------------------------------------------------


@pytest.mark.criterion(8, "pipeline model on 50 random DAGs")
def test_c8_pipeline_model(request, monkeypatch):
    rng = np.random.default_rng(8)
    made: dict = {}
    for kind, factory in list(ops.FACTORIES.items()):
        def counted(node, ups, t, ctx, _f=factory):
            made[id(node)] = made.get(id(node), 0) + 1
            return _f(node, ups, t, ctx)
        monkeypatch.setitem(ops.FACTORIES, kind, counted)

    multi = 0
    for _ in range(50):
        plan = random_dag(rng, int(rng.integers(4, 16)))
        sched = plan.schedule()
        cons = plan.consumers()
        sinks = [p.sink for p in sched]
        assert sorted(sinks) == sorted(sched.materialized)
        for i, c in cons.items():
            if len(c) > 1:
                multi += 1
                assert sinks.count(i) == 1
        for p in sched:
            inside = set(p.nodes)
            for i in p.nodes:
                if i != p.sink:
                    assert sum(u in inside for u in cons[i]) == 1, "pipeline is not a tree"
        made.clear()
        arg = random_input(rng)
        got = ops.result_rows(ops.execute(plan, {"arg": arg}))
        for node in plan.nodes.values():
            if node.kind != "ParameterLookup":
                assert made.get(id(node)) == 1, f"node {node.id} instantiated {made.get(id(node))} times"
        (want,) = oracle.ref_evaluate(plan, {"arg": arg})
        assert oracle.same_multiset(got, want[0])
    note(request, f"50 DAGs, {multi} multi-consumer nodes")


# -- 9 ------------------------------------------------------------------------------


def _builder_cases():
    rng = np.random.default_rng(9)
    small = RadixSpec.with_local_passes(27, 6, 4)
    rels = generate(WorkloadSpec(4096, 27, "fanout:2", seed=9))
    join_rels = {"left": relabel(rels["left"], LEFT), "right": relabel(rels["right"], RIGHT)}
    for comp in (False, True):
        yield f"join(compression={comp})", lambda local, c=comp: build_join(
            JoinSpec(LEFT, RIGHT, radix=small, compression=c), local=local), join_rels
    seq, types = sequence_relations(4, 2048, "one-to-one", seed=9)
    for mode in ("optimized", "naive"):
        yield f"sequence({mode})", lambda local, m=mode: build_join_sequence(
            SequenceSpec(tuple(types), m, radix=small), local=local), seq
    radix = group_by_radix(500)
    gb, t = group_by_relation(8192, 500, seed=int(rng.integers(99)), value_bits=radix.P)
    for comp in (False, True):
        yield f"group_by(compression={comp})", lambda local, c=comp: build_group_by(
            GroupBySpec(t, "key", radix=radix, compression=c), local=local), {"data": gb}
    tables = Q.generate_tables(20_000, seed=9)
    for name, make in Q.QUERIES.items():
        q = make()
        yield f"query({name})", lambda local, q=q: build_query(q.spec, local=local), Q.query_relations(q, tables)


@pytest.mark.criterion(9, "executor with R=1 equals NestedMap-only local plan, every builder")
def test_c9_degenerate_cluster(request):
    names = []
    for name, make, rels in _builder_cases():
        distributed = run(make(False), rels, 1).rows
        local = run(make(True), rels, 1).rows
        assert "MpiExecutor" not in make(True).kinds()
        assert distributed.dtype == local.dtype, name
        assert distributed.tolist() == local.tolist(), name
        names.append(name)
    note(request, f"{len(names)} builder plans identical")


# -- 10 -----------------------------------------------------------------------------


@pytest.mark.criterion(10, "scaling trend (soft): 2^22 join, R=4 <= 0.7x R=1")
def test_c10_scaling_trend(request):
    n = 1 << 22
    rels = generate(WorkloadSpec(n, 27, "one-to-one", seed=10))
    data = {"left": relabel(rels["left"], LEFT), "right": relabel(rels["right"], RIGHT)}
    plan = build_join(JoinSpec(LEFT, RIGHT, compression=True))
    wall = {}
    for R in (1, 4):
        res = run(plan, data, R)
        assert len(res.rows) == n
        wall[R] = res.report.wall_seconds
    ratio = wall[4] / wall[1]
    threads = os.cpu_count() or 1
    detail = f"R=1 {wall[1]:.2f}s, R=4 {wall[4]:.2f}s, ratio {ratio:.2f}, {threads} hardware threads"
    if ratio <= 0.7:
        note(request, detail)
        return
    msg = f"scaling trend not met: {detail}"
    warnings.warn(msg, UserWarning, stacklevel=1)
    note(request, msg, warn=True)
