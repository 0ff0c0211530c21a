import numpy as np
import pytest

from modularis import oracle
from modularis.builders import (
    PHASES,
    GroupBySpec,
    JoinSpec,
    SequenceSpec,
    bind_workers,
    build_group_by,
    build_join,
    build_join_sequence,
    split_round_robin,
)
from modularis.cluster import EngineConfig
from modularis.errors import SharedAttrViolation, SpecInvalid
from modularis.functions import Aggregate
from modularis.harness.runner import run
from modularis.partition import RadixSpec
from modularis.plan import Plan
from modularis.typesys import Int64, TupleType

L = TupleType.of(key=Int64, lval=Int64)
R = TupleType.of(key=Int64, rval=Int64)
SMALL = RadixSpec.with_local_passes(12, 3, 4)


def rel(t, keys, seed):
    rng = np.random.default_rng(seed)
    out = np.empty(len(keys), dtype=t.dtype)
    out[t.names[0]] = keys
    for n in t.names[1:]:
        out[n] = rng.integers(0, 1 << 12, len(keys))
    return out


def test_split_round_robin_keeps_everything():
    rows = np.arange(1000)
    parts = split_round_robin(rows, 3, block=64)
    assert sorted(np.concatenate(parts).tolist()) == rows.tolist()
    assert len(split_round_robin(rows[:0], 2)) == 2


@pytest.mark.parametrize("compression", [False, True])
@pytest.mark.parametrize("ranks", [1, 3])
def test_join_matches_oracle(compression, ranks):
    rng = np.random.default_rng(7)
    left = rel(L, rng.integers(0, 1 << 12, 700), 1)
    right = rel(R, rng.integers(0, 1 << 12, 500), 2)
    plan = build_join(JoinSpec(L, R, radix=SMALL, compression=compression))
    res = run(plan, {"left": left, "right": right}, ranks, EngineConfig(put_batch=32, strict_epochs=True))
    want = oracle.nl_join(left, right, ["key"])
    assert res.rows.dtype.names == tuple(want.names)
    assert oracle.same_multiset(res.rows.tolist(), want.rows)
    assert res.report.transport["relationsShuffled"] == 2
    assert set(res.report.phases) == set(PHASES)


def test_join_plan_survives_json():
    plan = build_join(JoinSpec(L, R, radix=SMALL, compression=True))
    again = Plan.loads(plan.dumps())
    keys = np.arange(300)
    rels = {"left": rel(L, keys, 1), "right": rel(R, keys[::-1].copy(), 2)}
    a = run(plan, rels, 2).rows.tolist()
    b = run(again, rels, 2).rows.tolist()
    assert sorted(a) == sorted(b)
    assert len(a) == 300


def test_compression_needs_a_value_field():
    with pytest.raises(SpecInvalid):
        build_join(JoinSpec(TupleType.of(key=Int64), R, radix=SMALL, compression=True))
    with pytest.raises(SpecInvalid):
        build_join(JoinSpec(L, R, radix=RadixSpec(40, 10), compression=True))


@pytest.mark.parametrize("mode", ["optimized", "naive"])
def test_sequence_matches_oracle_and_counts_shuffles(mode):
    N = 3
    types = tuple(TupleType.of(key=Int64, **{f"v{i}": Int64}) for i in range(N + 1))
    rng = np.random.default_rng(11)
    rels = {f"r{i}": rel(t, rng.integers(0, 200, 150), i) for i, t in enumerate(types)}
    plan = build_join_sequence(SequenceSpec(types, mode, radix=SMALL))
    res = run(plan, rels, 2)
    want = oracle.ref_sequence_join(list(rels.values()), "key", join=oracle.nl_join)
    assert oracle.same_multiset(res.rows.tolist(), want.rows)
    expect = N + 1 if mode == "optimized" else 2 * N
    assert res.report.transport["relationsShuffled"] == expect


def test_optimized_sequence_requires_shared_attribute():
    types = (TupleType.of(key=Int64, a=Int64), TupleType.of(key=Int64, a2=Int64, b=Int64),
             TupleType.of(b=Int64, c=Int64))
    with pytest.raises(SharedAttrViolation):
        build_join_sequence(SequenceSpec(types, "optimized", join_attrs=("key", "b"), radix=SMALL))
    # the naive plan handles differing attributes
    build_join_sequence(SequenceSpec(types, "naive", join_attrs=("key", "b"), radix=SMALL)).types()


@pytest.mark.parametrize("compression", [False, True])
def test_group_by_with_cross_rank_duplicates(compression):
    t = TupleType.of(key=Int64, value=Int64)
    rng = np.random.default_rng(2)
    data = np.empty(3000, dtype=t.dtype)
    data["key"] = rng.integers(0, 100, 3000)
    data["value"] = rng.integers(0, 1 << 12, 3000)
    plan = build_group_by(GroupBySpec(t, "key", radix=SMALL, compression=compression))
    res = run(plan, {"data": data}, 4)
    want = oracle.ref_group_by(data, "key", "sum").rows
    assert oracle.same_multiset(res.rows.tolist(), want)
    assert len(res.rows) == len(np.unique(data["key"]))


def test_group_by_custom_aggregate():
    t = TupleType.of(key=Int64, lo=Int64, hi=Int64)
    data = rel(t, np.arange(600) % 17, 3)
    spec = GroupBySpec(t, "key", aggregate=Aggregate(lo="min", hi="max"), radix=SMALL, compression=False)
    res = run(build_group_by(spec), {"data": data}, 3)
    want = oracle.ref_group_by(data, "key", oracle.fold_fn({"lo": "min", "hi": "max"}, ["lo", "hi"])).rows
    assert oracle.same_multiset(res.rows.tolist(), want)


def test_bind_workers_shapes():
    plan = build_join(JoinSpec(L, R, radix=SMALL))
    b = bind_workers(plan, {"left": rel(L, np.arange(10), 0), "right": rel(R, np.arange(4), 0)}, 3, block=2)
    ranks = b["workers"]["ranks"][0]
    assert len(ranks) == 3
    assert sum(len(v) for v in ranks.array["left"]) == 10
