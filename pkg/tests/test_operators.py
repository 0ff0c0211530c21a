import numpy as np
import pytest

from modularis import oracle
from modularis.errors import (
    BucketOutOfRange,
    InnerCardinality,
    LengthMismatch,
    NotACollection,
    ParamCardinality,
    UnboundParameter,
)
from modularis.functions import Aggregate, Compute, PyParamMap, RadixBits, col
from modularis.operators import (
    BuildProbe,
    CartesianProduct,
    Filter,
    LocalHistogram,
    LocalPartitioning,
    Map,
    MaterializeRowVector,
    NestedMap,
    ParameterLookup,
    ParametrizedMap,
    PhaseTimer,
    Projection,
    Reduce,
    ReduceByKey,
    RowScan,
    Source,
    Zip,
    collect,
    execute,
    iter_tuples,
)
from modularis.plan import PlanBuilder
from modularis.typesys import Int64, RowVector, TupleType
from modularis.values import RowVector as RV

KV = TupleType.of(k=Int64, v=Int64)
KW = TupleType.of(k=Int64, w=Int64)


def src(t, rows, chunk=None):
    rows = list(rows)
    if chunk is None:
        return Source.rows(t, rows)
    return Source(t, [rows[i:i + chunk] for i in range(0, len(rows), chunk)] or [[]])


def test_source_skips_empty_blocks():
    s = Source(KV, [[], [(1, 2)], [], [(3, 4)]])
    s.open()
    assert [len(b) for b in s] == [1, 1]


def test_map_filter_projection():
    s = src(KV, [(i, i * i) for i in range(10)], chunk=3)
    m = Map(s, Compute({"k": "k", "v": col("v") + 1}))
    f = Filter(m, col("k") % 2 == 0)
    p = Projection(f, ["v"])
    assert list(iter_tuples(p)) == [(i * i + 1,) for i in range(0, 10, 2)]


def test_cartesian_order():
    a = src(TupleType.of(x=Int64), [(1,), (2,)])
    b = src(TupleType.of(y=Int64), [(10,), (20,), (30,)])
    assert list(iter_tuples(CartesianProduct(a, b))) == [
        (1, 10), (1, 20), (1, 30), (2, 10), (2, 20), (2, 30)]


def test_zip_realigns_blocks_and_checks_length():
    a = src(TupleType.of(x=Int64), [(i,) for i in range(7)], chunk=2)
    b = src(TupleType.of(y=Int64), [(i * 10,) for i in range(7)], chunk=3)
    assert list(iter_tuples(Zip(a, b))) == [(i, i * 10) for i in range(7)]
    short = src(TupleType.of(y=Int64), [(0,)])
    with pytest.raises(LengthMismatch):
        collect(Zip(src(TupleType.of(x=Int64), [(1,), (2,)]), short))


def test_reduce_and_reduce_by_key_across_blocks():
    rows = [(i % 3, i) for i in range(20)]
    total = collect(Reduce(src(KV, rows, chunk=4), Aggregate(k="max", v="sum")))
    assert total.tolist() == [(2, sum(range(20)))]
    grouped = collect(ReduceByKey(src(KV, rows, chunk=4), "k", Aggregate(v="sum")))
    assert sorted(grouped.tolist()) == sorted(oracle.ref_group_by(np.array(rows, dtype=KV.dtype), "k", "sum").rows)


def test_reduce_of_nothing_is_empty():
    assert len(collect(Reduce(src(KV, []), Aggregate(k="sum", v="sum")))) == 0


def test_histogram_counts_and_range_check():
    rows = [(i, 0) for i in range(16)]
    h = collect(LocalHistogram(src(KV, rows), RadixBits("k", 2, 2), 4))
    assert h["count"].tolist() == [4, 4, 4, 4]
    with pytest.raises(BucketOutOfRange):
        collect(LocalHistogram(src(KV, rows), RadixBits("k", 0, 3), 4))


def test_local_partitioning_matches_histogram():
    rows = [(int(k), i) for i, k in enumerate(np.random.default_rng(0).integers(0, 64, 300))]
    fn = RadixBits("k", 3, 3)
    hist = LocalHistogram(src(KV, rows), fn, 8)
    parts = collect(LocalPartitioning(src(KV, rows, chunk=50), hist, fn, 8))
    assert parts["pid"].tolist() == list(range(8))
    for pid, rv in parts.tolist():
        assert rv.rows() == [r for r in rows if (r[0] >> 3) & 7 == pid]


def test_build_probe_matches_nested_loop_oracle():
    rng = np.random.default_rng(5)
    left = [(int(k), i) for i, k in enumerate(rng.integers(0, 10, 40))]
    right = [(int(k), -i) for i, k in enumerate(rng.integers(0, 10, 50))]
    got = collect(BuildProbe(src(KV, left, chunk=7), src(KW, right, chunk=9), ["k"]))
    want = oracle.nl_join(np.array(left, dtype=KV.dtype), np.array(right, dtype=KW.dtype), ["k"])
    assert got.dtype.names == ("k", "v", "w")
    # probe-major, build order within a probe tuple
    assert got.tolist() == want.rows


def test_build_probe_empty_sides():
    assert len(collect(BuildProbe(src(KV, []), src(KW, [(1, 1)]), ["k"]))) == 0
    assert len(collect(BuildProbe(src(KV, [(1, 1)]), src(KW, []), ["k"]))) == 0


def test_rowscan_and_materialize_roundtrip():
    rows = [(i, -i) for i in range(100)]
    mat = collect(MaterializeRowVector(src(KV, rows, chunk=13)))
    assert len(mat) == 1 and isinstance(mat["data"][0], RV)
    holder = TupleType((("data", RowVector(KV)),))
    assert list(iter_tuples(RowScan(Source(holder, [mat])))) == rows


def test_rowscan_needs_collection():
    with pytest.raises(NotACollection):
        RowScan(src(KV, [(1, 1)]))


def test_parametrized_map_needs_one_parameter():
    fn = PyParamMap(lambda p, b: b, KV)
    two = src(TupleType.of(x=Int64), [(1,), (2,)])
    with pytest.raises(ParamCardinality):
        collect(ParametrizedMap(two, src(KV, [(1, 1)]), fn))


def test_parameter_lookup_needs_one_tuple():
    with pytest.raises(UnboundParameter):
        ParameterLookup(KV, np.zeros(2, dtype=KV.dtype))


def _inner_sum_plan(emit_extra=False):
    arg_t = TupleType((("pid", Int64), ("data", RowVector(KV))))
    b = PlanBuilder({"arg": arg_t})
    rows = b.scan(b.project(b.lookup("arg"), "data"))
    vals = b.map(rows, Compute({"s": "v"}))
    out = vals if emit_extra else b.reduce(vals, Aggregate(s="sum"))
    return b.build(out), arg_t


def test_nested_map_one_result_per_tuple():
    plan, arg_t = _inner_sum_plan()
    parts = np.empty(3, dtype=arg_t.dtype)
    parts["pid"] = [0, 1, 2]
    for i, n in enumerate([1, 2, 3]):
        parts["data"][i] = RV(KV, np.array([(0, j) for j in range(1, n + 1)], dtype=KV.dtype))
    out = collect(NestedMap(Source(arg_t, [parts]), plan))
    assert out["s"].tolist() == [1, 3, 6]


def test_nested_map_cardinality_violation():
    plan, arg_t = _inner_sum_plan(emit_extra=True)
    parts = np.empty(1, dtype=arg_t.dtype)
    parts["pid"] = 0
    parts["data"][0] = RV(KV, np.array([(0, 1), (0, 2)], dtype=KV.dtype))
    with pytest.raises(InnerCardinality):
        collect(NestedMap(Source(arg_t, [parts]), plan))


def test_phase_timer_is_exclusive():
    t = PhaseTimer()
    t.enter("outer")
    t.enter("inner")
    t.exit()
    t.exit()
    assert set(t.totals) == {"outer", "inner"}
    assert all(v >= 0 for v in t.totals.values())


def test_execute_binds_plain_tuple():
    b = PlanBuilder({"arg": KV})
    plan = b.build(b.materialize(b.lookup("arg")))
    out = execute(plan, {"arg": (4, 5)})
    assert out["data"][0].rows() == [(4, 5)]
