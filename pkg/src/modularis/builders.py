"""Complete plans assembled from sub-operators.

Every builder returns a *driver* plan with one input, ``workers``, holding
one tuple per rank (see :func:`bind_workers`).  The driver hands those
tuples to an ``MpiExecutor`` running the per-rank *worker* plan and
flattens (or post-aggregates) what the ranks return.  ``local=True``
swaps the executor for a plain ``NestedMap``; with one rank both variants
must produce the same output.

Layout of the distributed join, per rank::

    side  = RowScan(Projection(arg, side))
    lh    = LocalHistogram(side)                 # network radix bits
    gh    = MpiHistogram(lh)
    ex    = MpiExchange(side, lh, gh)            # optionally compressed
    parts = Zip(ex_left, ex_right)               # one tuple per owned partition
    NestedMap(parts):
        per side: RowScan -> LocalHistogram -> LocalPartitioning
        CartesianProduct(⟨pid⟩, Zip(sub-partitions))
        NestedMap: RowScan x2 -> BuildProbe -> ParametrizedMap(recover key bits)
                   -> MaterializeRowVector
        RowScan -> MaterializeRowVector
    RowScan -> MaterializeRowVector
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import SharedAttrViolation, SpecInvalid
from .functions import (
    Aggregate,
    Compress,
    Decompress,
    Function,
    RadixBits,
    RecoverKey,
    TupleFn,
    Unpack,
    size,
)
from .partition import RadixSpec
from .plan import Plan, PlanBuilder, build_probe_type
from .typesys import Int64, RowVector, TupleType, project_type
from .values import RowVector as RowVectorValue
from .values import make_block

# phase tags (metrics keys)
LOCAL_HISTOGRAM = "localHistogram"
GLOBAL_HISTOGRAM = "globalHistogram"
NETWORK_PARTITIONING = "networkPartitioning"
LOCAL_PARTITIONING = "localPartitioning"
BUILD_PROBE = "buildProbe"
PHASES = (LOCAL_HISTOGRAM, GLOBAL_HISTOGRAM, NETWORK_PARTITIONING, LOCAL_PARTITIONING, BUILD_PROBE)

WORKERS = "workers"
ARG = "arg"


@dataclass(frozen=True)
class JoinSpec:
    left: TupleType
    right: TupleType
    key: str = "key"
    radix: RadixSpec = field(default_factory=lambda: RadixSpec.with_local_passes(27, 10, 8))
    compression: bool = True
    left_name: str = "left"
    right_name: str = "right"


@dataclass(frozen=True)
class SequenceSpec:
    relations: tuple          # N+1 tuple types, all containing the shared attribute
    mode: str = "optimized"   # or "naive"
    shared_attr: str = "key"
    radix: RadixSpec = field(default_factory=lambda: RadixSpec.with_local_passes(27, 10, 8))
    compression: bool = False
    join_attrs: tuple | None = None  # per join; None = shared_attr everywhere

    @property
    def N(self):
        return len(self.relations) - 1


@dataclass(frozen=True)
class GroupBySpec:
    input: TupleType
    key: str = "key"
    aggregate: Function | None = None   # default: sum of every non-key field
    radix: RadixSpec = field(default_factory=lambda: RadixSpec.with_local_passes(20, 6, 6))
    compression: bool = True


@dataclass(frozen=True)
class QuerySpec:
    """Filter and project two tables, join them, then aggregate.

    ``post_map`` computes the aggregated columns from the joined tuple;
    ``group_key`` selects ReduceByKey (on that output field) over Reduce.
    """

    left: TupleType
    right: TupleType
    join_attr: str
    post_map: TupleFn
    aggregate: Function
    left_filter: Function | None = None
    right_filter: Function | None = None
    left_fields: tuple | None = None
    right_fields: tuple | None = None
    post_filter: Function | None = None
    group_key: str | None = None
    radix: RadixSpec = field(default_factory=lambda: RadixSpec.with_local_passes(27, 10, 4))
    compression: bool = False
    left_name: str = "left"
    right_name: str = "right"


# -- helpers ---------------------------------------------------------------------


def relation_arg_type(names: Sequence[str], types: Sequence[TupleType]) -> TupleType:
    return TupleType(tuple((n, RowVector(t)) for n, t in zip(names, types)))


def _packed_name(t: TupleType, key: str) -> str:
    name = f"{key}_packed"
    while name in t:
        name += "_"
    return name


class _Side:
    """Wire layout of one relation on its way through the exchange."""

    def __init__(self, t: TupleType, key: str, radix: RadixSpec, compression: bool):
        self.type, self.key, self.radix = t, key, radix
        self.compress = None
        if compression:
            if not radix.compression_legal:
                raise SpecInvalid(f"compression illegal for P={radix.P}, F={radix.F}")
            ints = [n for n, it in t.fields if n != key and not it.is_collection and it.kind == "Int64"]
            if t[key].is_collection or t[key].kind != "Int64" or not ints:
                raise SpecInvalid(f"compression needs an Int64 key and an Int64 value field in {t}")
            packed = _packed_name(t, key)
            self.compress = Compress(radix, key, ints[0], packed)
            self.unpack = Unpack(radix, key, ints[0], packed)
            self.decompress = Decompress(radix, key, ints[0], packed)
            self.wire = self.compress.output_type(t)
            self.unpacked = self.unpack.output_type(self.wire)
        else:
            self.wire = t

    @property
    def bucket_field(self):
        return self.compress.packed if self.compress else self.key

    def local_fn(self, pass_):
        return RadixBits.for_pass(self.radix, pass_, self.bucket_field, packed=self.compress is not None)

    def network_fn(self):
        return RadixBits.for_pass(self.radix, 0, self.key)


def _check_radix(radix: RadixSpec):
    if radix.passes not in (1, 2):
        raise SpecInvalid("plans support one network pass and at most one local pass")


def _restore_order(b: PlanBuilder, node, have: TupleType, want: TupleType):
    if have.names == want.names:
        return node
    return b.project(node, *want.names)


def _exchange_side(b: PlanBuilder, data, side: _Side, pid: str, data_field: str):
    n = side.radix.fanout
    lh = b.local_histogram(data, side.network_fn(), n, phase=LOCAL_HISTOGRAM)
    gh = b.mpi_histogram(lh, n, phase=GLOBAL_HISTOGRAM)
    return b.exchange(data, lh, gh, side.network_fn(), n, pid=pid, data_field=data_field,
                      compress=side.compress, phase=NETWORK_PARTITIONING)


def _local_partition(b: PlanBuilder, part_tuple, side: _Side, data_field: str, sub_pid: str, sub_data: str):
    """RowScan -> LocalHistogram -> LocalPartitioning for one side; n=1 without a local pass."""
    rows = b.scan(b.project(part_tuple, data_field))
    if side.radix.passes > 1:
        fn = side.local_fn(1)
        n = fn.n
    else:
        fn, n = RadixBits(side.bucket_field, 0, 0), 1
    hist = b.local_histogram(rows, fn, n)
    return b.local_partitioning(rows, hist, fn, n, pid=sub_pid, data_field=sub_data)


def _leaf_rows(b: PlanBuilder, arg, field_name: str, side: _Side):
    rows = b.scan(b.project(arg, field_name))
    if side.compress is None:
        return rows
    return _restore_order(b, b.map(rows, side.unpack), side.unpacked, side.type)


def _nested(node_type: TupleType, body) -> Plan:
    """Build a nested plan with one input ``arg`` of ``node_type``."""
    b = PlanBuilder({ARG: node_type})
    root = body(b, b.lookup(ARG))
    return b.build(root)


def _flatten(b: PlanBuilder, node, agg=None):
    """RowScan -> [aggregate] -> MaterializeRowVector."""
    rows = b.scan(node)
    if agg is not None:
        rows = _aggregate(b, rows, agg)
    return b.materialize(rows)


def _aggregate(b: PlanBuilder, rows, agg):
    kind, fn, key = agg
    if kind == "reduce":
        return b.reduce(rows, fn)
    return b.reduce_by_key(rows, key, fn)


def _multi_join(b: PlanBuilder, inputs: list, sides: list, attrs: list, radix: RadixSpec, agg=None,
                post=None):
    """Fig. 3 style partitioned join of ``inputs`` (flat row streams of a worker plan).

    ``attrs[i]`` is the attribute of join i (relation i+1 against the running
    result).  Every relation is exchanged on its own key; the builds cascade
    inside the innermost NestedMap.  ``post(b, rows)`` may append per-tuple
    operators after the last join.  Returns the node holding ⟨data: RV⟩.
    """
    k = len(inputs)
    exchanges = []
    for i, (data, side) in enumerate(zip(inputs, sides)):
        exchanges.append(_exchange_side(b, data, side, f"pid{i}", f"net{i}"))
    nonempty = None
    for i in range(k):
        c = size(f"net{i}") > 0
        nonempty = c if nonempty is None else nonempty & c
    zipped = b.filter(b.zip(*exchanges), nonempty)
    zipped_type = TupleType(tuple(
        pair for i, side in enumerate(sides) for pair in ((f"pid{i}", Int64), (f"net{i}", RowVector(side.wire)))
    ))

    def leaf_type():
        return TupleType(((f"pid{0}", Int64),) + tuple(
            pair for i, side in enumerate(sides)
            for pair in ((f"sub{i}", Int64), (f"part{i}", RowVector(side.wire)))
        ))

    def inner(ib: PlanBuilder, arg):
        rows = _leaf_rows(ib, arg, "part0", sides[0])
        for i in range(1, k):
            right = _leaf_rows(ib, arg, f"part{i}", sides[i])
            rows = ib.build_probe(rows, right, [attrs[i - 1]])
        if sides[0].compress is not None:
            # every side was compressed on the same exchange key
            rows = ib.pmap(ib.project(arg, "pid0"), rows, RecoverKey(radix, sides[0].key, "pid0"))
        if post is not None:
            rows = post(ib, rows)
        if agg is not None:
            rows = _aggregate(ib, rows, agg)
        return ib.materialize(rows)

    def outer(ob: PlanBuilder, arg):
        subs = [_local_partition(ob, arg, s, f"net{i}", f"sub{i}", f"part{i}") for i, s in enumerate(sides)]
        # an inner join of an empty partition is empty: skip those invocations
        nonempty = None
        for i in range(k):
            c = size(f"part{i}") > 0
            nonempty = c if nonempty is None else nonempty & c
        tagged = ob.cartesian(ob.project(arg, "pid0"), ob.filter(ob.zip(*subs), nonempty))
        joined = ob.nested_map(tagged, _nested(leaf_type(), inner), phase=BUILD_PROBE)
        return _flatten(ob, joined, agg)

    return b.nested_map(zipped, _nested(zipped_type, outer), phase=LOCAL_PARTITIONING)


def _driver(arg_type: TupleType, worker: Plan, local: bool, agg=None) -> Plan:
    b = PlanBuilder({WORKERS: TupleType((("ranks", RowVector(arg_type)),))})
    args = b.scan(b.lookup(WORKERS))
    if local:
        results = b.nested_map(args, worker)
    else:
        results = b.executor(args, worker)
    return b.build(_flatten(b, results, agg))


def _validate_key(t: TupleType, key: str, what: str):
    if key not in t or t[key].is_collection:
        raise SpecInvalid(f"{what} has no atom field {key!r}")


# -- builders ---------------------------------------------------------------------


def build_join(spec: JoinSpec, local: bool = False) -> Plan:
    """Distributed radix hash join; the left relation is the build side."""
    _check_radix(spec.radix)
    _validate_key(spec.left, spec.key, "left relation")
    _validate_key(spec.right, spec.key, "right relation")
    sides = [_Side(spec.left, spec.key, spec.radix, spec.compression),
             _Side(spec.right, spec.key, spec.radix, spec.compression)]
    arg_t = relation_arg_type([spec.left_name, spec.right_name], [spec.left, spec.right])
    b = PlanBuilder({ARG: arg_t})
    arg = b.lookup(ARG)
    inputs = [b.scan(b.project(arg, spec.left_name)), b.scan(b.project(arg, spec.right_name))]
    joined = _multi_join(b, inputs, sides, [spec.key], spec.radix)
    worker = b.build(_flatten(b, joined))
    return _driver(arg_t, worker, local)


def sequence_names(spec: SequenceSpec) -> list:
    return [f"r{i}" for i in range(len(spec.relations))]


def build_join_sequence(spec: SequenceSpec, local: bool = False) -> Plan:
    """N joins over N+1 relations, naive (re-shuffle every result) or optimized."""
    if spec.N < 1:
        raise SpecInvalid("a join sequence needs at least two relations")
    _check_radix(spec.radix)
    attrs = list(spec.join_attrs or [spec.shared_attr] * spec.N)
    if len(attrs) != spec.N:
        raise SpecInvalid(f"{spec.N} joins need {spec.N} join attributes, got {len(attrs)}")
    if spec.mode not in ("naive", "optimized"):
        raise SpecInvalid(f"unknown sequence mode {spec.mode!r}")
    if spec.mode == "optimized" and any(a != spec.shared_attr for a in attrs):
        raise SharedAttrViolation(
            f"optimized sequences need every join on {spec.shared_attr!r}, got {attrs}"
        )
    for i, t in enumerate(spec.relations):
        if i > 0:
            _validate_key(t, attrs[i - 1], f"relation {i}")
    _validate_key(spec.relations[0], attrs[0], "relation 0")

    names = sequence_names(spec)
    arg_t = relation_arg_type(names, spec.relations)
    b = PlanBuilder({ARG: arg_t})
    arg = b.lookup(ARG)
    inputs = [b.scan(b.project(arg, n)) for n in names]
    if spec.mode == "optimized":
        sides = [_Side(t, spec.shared_attr, spec.radix, spec.compression) for t in spec.relations]
        joined = _multi_join(b, inputs, sides, attrs, spec.radix)
    else:
        left, left_t = inputs[0], spec.relations[0]
        for i in range(1, spec.N + 1):
            a = attrs[i - 1]
            right_t = spec.relations[i]
            sides = [_Side(left_t, a, spec.radix, spec.compression),
                     _Side(right_t, a, spec.radix, spec.compression)]
            joined = _multi_join(b, [left, inputs[i]], sides, [a], spec.radix)
            left_t = _join_output(left_t, right_t, a)
            if i < spec.N:
                left = b.scan(joined)
    worker = b.build(_flatten(b, joined))
    return _driver(arg_t, worker, local)


def _join_output(left: TupleType, right: TupleType, attr: str) -> TupleType:
    return build_probe_type(left, right, [attr])


def default_aggregate(t: TupleType, key: str) -> Aggregate:
    return Aggregate({n: "sum" for n in t.names if n != key})


def build_group_by(spec: GroupBySpec, local: bool = False) -> Plan:
    """Distributed GROUP BY; ReduceByKey at every nesting level plus on the driver."""
    _check_radix(spec.radix)
    _validate_key(spec.input, spec.key, "input")
    agg_fn = spec.aggregate or default_aggregate(spec.input, spec.key)
    agg_fn.check(spec.input.without(spec.key))
    agg = ("reduce_by_key", agg_fn, spec.key)
    side = _Side(spec.input, spec.key, spec.radix, spec.compression)
    arg_t = relation_arg_type(["data"], [spec.input])

    def inner(ib: PlanBuilder, arg):
        rows = ib.scan(ib.project(arg, "part"))
        if side.compress is not None:
            rows = ib.pmap(ib.project(arg, "pid"), rows, side.decompress)
            rows = _restore_order(ib, rows, side.unpacked, side.type)
        rows = ib.reduce_by_key(rows, spec.key, agg_fn)
        return ib.materialize(rows)

    def outer(ob: PlanBuilder, arg):
        parts = _local_partition(ob, arg, side, "data", "sub", "part")
        tagged = ob.cartesian(ob.project(arg, "pid"), ob.filter(parts, size("part") > 0))
        leaf_t = TupleType((("pid", Int64), ("sub", Int64), ("part", RowVector(side.wire))))
        grouped = ob.nested_map(tagged, _nested(leaf_t, inner), phase=BUILD_PROBE)
        return _flatten(ob, grouped, agg)

    b = PlanBuilder({ARG: arg_t})
    rows = b.scan(b.project(b.lookup(ARG), "data"))
    ex = _exchange_side(b, rows, side, "pid", "data")
    net_t = TupleType((("pid", Int64), ("data", RowVector(side.wire))))
    ex = b.filter(ex, size("data") > 0)
    grouped = b.nested_map(ex, _nested(net_t, outer), phase=LOCAL_PARTITIONING)
    worker = b.build(_flatten(b, grouped, agg))
    return _driver(arg_t, worker, local, agg)


def query_input_types(spec: QuerySpec) -> tuple:
    lt = project_type(spec.left, spec.left_fields) if spec.left_fields else spec.left
    rt = project_type(spec.right, spec.right_fields) if spec.right_fields else spec.right
    return lt, rt


def build_query(spec: QuerySpec, local: bool = False) -> Plan:
    """Filter/project both tables, join, then aggregate at every level."""
    _check_radix(spec.radix)
    lt, rt = query_input_types(spec)
    _validate_key(lt, spec.join_attr, "left projection")
    _validate_key(rt, spec.join_attr, "right projection")
    if spec.group_key is not None:
        agg = ("reduce_by_key", spec.aggregate, spec.group_key)
    else:
        agg = ("reduce", spec.aggregate, None)
    sides = [_Side(lt, spec.join_attr, spec.radix, spec.compression),
             _Side(rt, spec.join_attr, spec.radix, spec.compression)]
    arg_t = relation_arg_type([spec.left_name, spec.right_name], [spec.left, spec.right])
    b = PlanBuilder({ARG: arg_t})
    arg = b.lookup(ARG)
    inputs = []
    for name, pred, fields in ((spec.left_name, spec.left_filter, spec.left_fields),
                               (spec.right_name, spec.right_filter, spec.right_fields)):
        rows = b.scan(b.project(arg, name))
        if pred is not None:
            rows = b.filter(rows, pred)
        if fields:
            rows = b.project(rows, *fields)
        inputs.append(rows)

    def post(ib, rows):
        if spec.post_filter is not None:
            rows = ib.filter(rows, spec.post_filter)
        return ib.map(rows, spec.post_map)

    joined = _multi_join(b, inputs, sides, [spec.join_attr], spec.radix, agg, post)
    worker = b.build(_flatten(b, joined, agg))
    plan = _driver(arg_t, worker, local, agg)
    if spec.group_key is not None and spec.group_key not in plan.output_type["data"].element:
        raise SpecInvalid(f"group key {spec.group_key!r} not produced by post_map")
    return plan


# -- binding inputs ------------------------------------------------------------------

SPLIT_BLOCK = 4096


def split_round_robin(rows: np.ndarray, R: int, block: int = SPLIT_BLOCK) -> list:
    """Deal consecutive blocks of ``rows`` to ranks 0..R-1 in turn."""
    chunks = [rows[i:i + block] for i in range(0, len(rows), block)]
    out = []
    for r in range(R):
        mine = chunks[r::R]
        out.append(np.concatenate(mine) if mine else rows[:0])
    return out


def bind_workers(plan: Plan, relations: dict, R: int, block: int = SPLIT_BLOCK) -> dict:
    """Driver bindings: relation name -> structured array, split over R ranks."""
    (ranks_t,) = plan.inputs.values()
    arg_t = ranks_t["ranks"].element
    per_rank = {name: split_round_robin(np.asarray(relations[name]), R, block) for name in arg_t.names}
    arg_block = np.empty(R, dtype=arg_t.dtype)
    for name in arg_t.names:
        elem = arg_t[name].element
        col = arg_block[name]
        for r in range(R):
            data = per_rank[name][r]
            if data.dtype != elem.dtype:
                data = _conform(data, elem)
            col[r] = RowVectorValue(elem, data)
    wrapper = np.empty(1, dtype=ranks_t.dtype)
    wrapper["ranks"][0] = RowVectorValue(arg_t, arg_block)
    return {WORKERS: wrapper}


def _conform(data: np.ndarray, t: TupleType) -> np.ndarray:
    out = np.empty(len(data), dtype=t.dtype)
    for n in t.names:
        out[n] = data[n]
    return out
