import numpy as np
import pytest

from dag_gen import ARG, ROW, random_dag, random_input
from modularis import oracle
from modularis.errors import ArityMismatch, CycleDetected, PlanError, TypeMismatch, UnreachableNode
from modularis.functions import Aggregate, Compute, RadixBits, col
from modularis.operators import execute, result_rows
from modularis.plan import Plan, PlanBuilder, PlanNode, cut_pipelines
from modularis.typesys import HISTOGRAM_TYPE, Int64, RowVector, TupleType


def _diamond():
    b = PlanBuilder({"arg": ARG})
    rows = b.scan(b.lookup("arg"))
    left = b.map(rows, Compute({"a": "a", "c": col("b") + 1}))
    right = b.filter(rows, col("a") > 2)
    return b.build(b.materialize(b.build_probe(right, left, ["a"]))), rows


def test_types_inferred_for_every_node():
    plan, rows = _diamond()
    types = plan.types()
    assert set(types) == set(plan.nodes)
    assert types[rows] == ROW
    assert plan.output_type["data"].element.names == ("a", "b", "c")


def test_multi_consumer_node_is_cut():
    plan, rows = _diamond()
    sched = cut_pipelines(plan)
    assert rows in sched.materialized
    assert sched.pipelines[-1].sink == plan.root
    assert sched.pipeline_of(rows).sink == rows
    # the second read moves into its own pipeline: no pipeline reads it twice
    assert sum(p.reads.count(rows) for p in sched) == 2
    assert all(p.reads.count(rows) <= 1 for p in sched)


def test_pipelines_partition_the_nodes():
    plan, _ = _diamond()
    sched = cut_pipelines(plan)
    seen = [i for p in sched for i in p.nodes]
    assert sorted(seen) == sorted(plan.nodes)


def test_json_roundtrip_executes_identically():
    plan, _ = _diamond()
    again = Plan.loads(plan.dumps())
    arg = random_input(np.random.default_rng(1), 20)
    assert result_rows(execute(again, {"arg": arg})) == result_rows(execute(plan, {"arg": arg}))


def test_type_mismatch_names_node():
    b = PlanBuilder({"arg": ARG})
    rows = b.scan(b.lookup("arg"))
    bad = b.filter(rows, col("a") + 1)  # Int64, not Bool
    plan = b.build(b.materialize(bad))
    with pytest.raises(TypeMismatch) as e:
        plan.types()
    assert e.value.node_id == bad


def test_structural_errors():
    lookup = PlanNode(0, "ParameterLookup", {"binding": "arg"})
    with pytest.raises(ArityMismatch):
        Plan([lookup, PlanNode(1, "Map", {}, (0, 0))], 1, {"arg": ARG}).types()
    with pytest.raises(CycleDetected):
        Plan([PlanNode(0, "RowScan", {}, (1,)), PlanNode(1, "RowScan", {}, (0,))], 0).types()
    with pytest.raises(UnreachableNode):
        Plan([lookup, PlanNode(1, "ParameterLookup", {"binding": "arg"})], 1, {"arg": ARG}).types()
    with pytest.raises(PlanError):
        Plan([PlanNode(0, "Bogus")], 0)


def test_histogram_inputs_checked():
    b = PlanBuilder({"arg": ARG})
    rows = b.scan(b.lookup("arg"))
    bad = b.local_partitioning(rows, rows, RadixBits("a", 0, 2), 4)
    with pytest.raises(TypeMismatch):
        b.build(bad).types()
    b = PlanBuilder({"arg": ARG})
    h = b.local_histogram(b.scan(b.lookup("arg")), RadixBits("a", 0, 2), 4)
    assert b.build(h).types()[h] == HISTOGRAM_TYPE


def test_nested_input_type_must_match():
    ib = PlanBuilder({"arg": TupleType.of(x=Int64)})
    inner = ib.build(ib.materialize(ib.lookup("arg")))
    b = PlanBuilder({"arg": ARG})
    nm = b.nested_map(b.scan(b.lookup("arg")), inner)
    with pytest.raises(TypeMismatch):
        b.build(nm).types()


@pytest.mark.parametrize("seed", range(10))
def test_random_dag_matches_recursive_evaluation(seed):
    rng = np.random.default_rng(seed)
    plan = random_dag(rng, int(rng.integers(3, 12)))
    arg = random_input(rng)
    got = result_rows(execute(plan, {"arg": arg}))
    (want,) = oracle.ref_evaluate(plan, {"arg": arg})
    assert oracle.same_multiset(got, want[0])


def test_random_dag_pipelines_are_trees():
    rng = np.random.default_rng(99)
    for _ in range(20):
        plan = random_dag(rng, 10)
        sched = plan.schedule()
        cons = plan.consumers()
        for p in sched:
            inside = set(p.nodes)
            for i in p.nodes:
                if i == p.sink:
                    continue
                assert i not in sched.materialized
                assert sum(c in inside for c in cons[i]) == 1
