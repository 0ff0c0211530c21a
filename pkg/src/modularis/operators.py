"""Pull-based sub-operators and the pipeline runner.

Each operator follows the open/next/close iterator contract.  ``next()``
returns a non-empty *block* of tuples (a numpy structured array of the
operator's output type) or ``None`` for End; after End it keeps returning
``None``.  Tuple-at-a-time semantics are preserved: every operator is
defined tuple by tuple and blocks are only a transport granularity, so
``for t in iter_tuples(op)`` sees exactly the Volcano stream.

Plans run pipeline by pipeline (see :func:`modularis.plan.cut_pipelines`):
each pipeline is instantiated as a tree of operators whose leaves read
plan inputs or earlier materializations, and its sink output is
materialized as one block.
"""
from __future__ import annotations

import time
from collections import defaultdict

import numpy as np

from .errors import (
    BucketOutOfRange,
    ExecutionError,
    HistogramMismatch,
    InnerCardinality,
    LengthMismatch,
    NotACollection,
    ParamCardinality,
    UnboundParameter,
    AllocationFailure,
)
from .partition import Partitioner
from .plan import Plan, build_probe_type
from .typesys import HISTOGRAM_TYPE, Int64, TupleType, concat_all, concat_types, project_type
from .typesys import RowVector as RV
from .values import RowVector, concat_blocks, empty_block, make_block

SCAN_BLOCK = 1 << 16
MAX_PRODUCT_BLOCK = 1 << 20


class Operator:
    """Base iterator.  Subclasses implement ``_next`` (may return empty blocks)
    or override ``next`` directly when they never produce empty blocks."""

    __slots__ = ("ups", "out_type", "_ended")

    def __init__(self, out_type: TupleType, *ups: "Operator"):
        self.out_type = out_type
        self.ups = ups
        self._ended = False

    def open(self):
        for u in self.ups:
            u.open()

    def next(self):
        if self._ended:
            return None
        while True:
            block = self._next()
            if block is None:
                self._ended = True
                return None
            if len(block):
                return block

    def _next(self):
        raise NotImplementedError

    def close(self):
        for u in self.ups:
            u.close()

    def __iter__(self):
        while True:
            b = self.next()
            if b is None:
                return
            yield b


def drain(op: Operator) -> list:
    """Pull every block out of an already opened operator."""
    out = []
    while True:
        b = op.next()
        if b is None:
            return out
        out.append(b)


def collect(op: Operator) -> np.ndarray:
    """open / drain / close; returns one block with all output tuples."""
    op.open()
    try:
        return concat_blocks(op.out_type, drain(op))
    finally:
        op.close()


def iter_tuples(op: Operator):
    """Tuple-at-a-time view of an operator's stream (python tuples)."""
    op.open()
    try:
        for block in op:
            yield from block.tolist()
    finally:
        op.close()


# -- sources ---------------------------------------------------------------------


class Source(Operator):
    """Yields pre-built blocks (plan inputs, materializations, test data)."""

    __slots__ = ("blocks", "_i")

    def __init__(self, out_type, blocks=()):
        super().__init__(out_type)
        if isinstance(blocks, np.ndarray):
            self.blocks = [blocks]
        else:
            self.blocks = [b if isinstance(b, np.ndarray) else make_block(out_type, b) for b in blocks]
        self._i = 0

    @classmethod
    def rows(cls, out_type, rows):
        return cls(out_type, [make_block(out_type, rows)])

    def next(self):
        while self._i < len(self.blocks):
            self._i += 1
            b = self.blocks[self._i - 1]
            if len(b):
                return b
        return None


class ParameterLookup(Operator):
    __slots__ = ("value",)

    def __init__(self, out_type, value):
        super().__init__(out_type)
        if not isinstance(value, np.ndarray):
            value = make_block(out_type, [value])
        if len(value) != 1:
            raise UnboundParameter(f"parameter must be exactly one tuple, got {len(value)}")
        self.value = value

    def next(self):
        v, self.value = self.value, None
        return v


# -- data processing ---------------------------------------------------------------


class Map(Operator):
    __slots__ = ("fn", "in_type")

    def __init__(self, up, fn, out_type=None):
        super().__init__(out_type if out_type is not None else fn.output_type(up.out_type), up)
        self.fn, self.in_type = fn, up.out_type

    def next(self):
        if self._ended:
            return None
        b = self.ups[0].next()
        if b is None:
            self._ended = True
            return None
        return self.fn.apply(b, self.in_type, self.out_type)


class ParametrizedMap(Operator):
    __slots__ = ("fn", "param")

    def __init__(self, param_up, up, fn, out_type=None):
        super().__init__(out_type if out_type is not None else fn.output_type(param_up.out_type, up.out_type), param_up, up)
        self.fn = fn
        self.param = None

    def open(self):
        super().open()
        blocks = drain(self.ups[0])
        n = sum(len(b) for b in blocks)
        if n != 1:
            raise ParamCardinality(f"parameter upstream produced {n} tuples, expected 1")
        self.param = blocks[0]

    def next(self):
        if self._ended:
            return None
        b = self.ups[1].next()
        if b is None:
            self._ended = True
            return None
        return self.fn.apply(self.param, b, self.ups[1].out_type, self.out_type)


class Projection(Operator):
    __slots__ = ("fields",)

    def __init__(self, up, fields, out_type=None):
        super().__init__(out_type if out_type is not None else project_type(up.out_type, fields), up)
        self.fields = list(fields)

    def next(self):
        if self._ended:
            return None
        b = self.ups[0].next()
        if b is None:
            self._ended = True
            return None
        out = np.empty(len(b), dtype=self.out_type.dtype)
        for f in self.fields:
            out[f] = b[f]
        return out


class Filter(Operator):
    __slots__ = ("predicate",)

    def __init__(self, up, predicate):
        super().__init__(up.out_type, up)
        self.predicate = predicate

    def _next(self):
        b = self.ups[0].next()
        return None if b is None else b[self.predicate.mask(b)]


def _merge(out_type, parts):
    n = len(parts[0])
    out = np.empty(n, dtype=out_type.dtype)
    for p in parts:
        for name in p.dtype.names:
            out[name] = p[name]
    return out


class CartesianProduct(Operator):
    """Left-major product; the right upstream is buffered in full."""

    __slots__ = ("right", "_pending")

    def __init__(self, left, right, out_type=None):
        super().__init__(out_type if out_type is not None else concat_types(left.out_type, right.out_type), left, right)
        self.right = None
        self._pending = None

    def open(self):
        super().open()
        self.right = concat_blocks(self.ups[1].out_type, drain(self.ups[1]))

    def _next(self):
        nr = len(self.right)
        if nr == 0:
            return None
        if self._pending is None or not len(self._pending):
            self._pending = self.ups[0].next()
            if self._pending is None:
                return None
        step = max(1, MAX_PRODUCT_BLOCK // nr)
        left, self._pending = self._pending[:step], self._pending[step:]
        return _merge(self.out_type, [np.repeat(left, nr), np.tile(self.right, len(left))])


class Zip(Operator):
    __slots__ = ("_buf",)

    def __init__(self, *ups, out_type=None):
        super().__init__(out_type if out_type is not None else concat_all(u.out_type for u in ups), *ups)
        self._buf = [None] * len(ups)

    def _next(self):
        for i, u in enumerate(self.ups):
            if self._buf[i] is None or not len(self._buf[i]):
                self._buf[i] = u.next()
        ended = [b is None for b in self._buf]
        if all(ended):
            return None
        if any(ended):
            short = [i for i, e in enumerate(ended) if e]
            raise LengthMismatch(f"Zip upstreams {short} ended before the others")
        m = min(len(b) for b in self._buf)
        parts = [b[:m] for b in self._buf]
        self._buf = [b[m:] for b in self._buf]
        return _merge(self.out_type, parts)


class Reduce(Operator):
    __slots__ = ("fn",)

    def __init__(self, up, fn):
        super().__init__(up.out_type, up)
        self.fn = fn

    def _next(self):
        acc = None
        t = self.out_type
        for b in self.ups[0]:
            part = self.fn.reduce(b, t)
            acc = part if acc is None else self.fn.reduce(np.concatenate([acc, part]), t)
        self._ended = True
        return acc


class ReduceByKey(Operator):
    __slots__ = ("key", "fn")

    def __init__(self, up, key, fn):
        super().__init__(up.out_type, up)
        self.key, self.fn = key, fn

    def _next(self):
        t = self.out_type
        partials = [self.fn.reduce_by_key(b, t, self.key) for b in self.ups[0]]
        self._ended = True
        if not partials:
            return None
        if len(partials) == 1:
            return partials[0]
        return self.fn.reduce_by_key(np.concatenate(partials), t, self.key)


class LocalHistogram(Operator):
    __slots__ = ("fn", "n")

    def __init__(self, up, fn, n):
        super().__init__(HISTOGRAM_TYPE, up)
        self.fn, self.n = fn, n

    def _next(self):
        counts = np.zeros(self.n, dtype=np.int64)
        for b in self.ups[0]:
            ids = self.fn.buckets(b)
            if ids.min() < 0 or ids.max() >= self.n:
                bad = ids[(ids < 0) | (ids >= self.n)][0]
                raise BucketOutOfRange(f"bucket {bad} outside [0, {self.n})")
            counts += np.bincount(ids, minlength=self.n)
        self._ended = True
        return histogram_block(counts)


def histogram_block(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    out = np.empty(len(counts), dtype=HISTOGRAM_TYPE.dtype)
    out["bucketId"] = np.arange(len(counts))
    out["count"] = counts
    return out


def read_histogram(op: Operator, n: int, what="histogram") -> np.ndarray:
    """Drain a ⟨bucketId, count⟩ upstream into a dense count vector of length n."""
    blocks = drain(op)
    h = concat_blocks(HISTOGRAM_TYPE, blocks)
    if len(h) != n:
        raise HistogramMismatch(f"{what} has {len(h)} buckets, expected {n}")
    counts = np.zeros(n, dtype=np.int64)
    ids = h["bucketId"]
    if ids.min() < 0 or ids.max() >= n or len(np.unique(ids)) != n:
        raise HistogramMismatch(f"{what} bucket ids are not a permutation of 0..{n - 1}")
    counts[ids] = h["count"]
    return counts


_HASH_MULT = np.uint64(0x9E3779B97F4A7C15)


def _key_words(block, attrs):
    h = None
    for a in attrs:
        col = block[a]
        if col.dtype == np.float64:
            w = col.view(np.uint64)
        else:
            w = col.astype(np.int64, copy=False).view(np.uint64)
        h = w.copy() if h is None else (h * _HASH_MULT) ^ w
    return h


def _hash(words, bits):
    if bits == 0:
        return np.zeros(len(words), dtype=np.int64)
    return ((words * _HASH_MULT) >> np.uint64(64 - bits)).astype(np.int64)


class HashTable:
    """Bucket-chained hash table stored as CSR arrays.

    Rows of one bucket are contiguous in ``order`` and keep their insertion
    order, so probing yields matches in build order.
    """

    def __init__(self, rows: np.ndarray, attrs):
        self.rows, self.attrs = rows, list(attrs)
        n = len(rows)
        if n == 0:
            return
        self.bits = max(1, int(2 * n - 1).bit_length()) if n else 0
        size = 1 << self.bits
        h = _hash(_key_words(rows, self.attrs), self.bits)
        self.order = np.argsort(h, kind="stable")
        counts = np.bincount(h, minlength=size)
        self.starts = np.zeros(size, dtype=np.int64)
        np.cumsum(counts[:-1], out=self.starts[1:])
        self.counts = counts

    def probe(self, probe: np.ndarray):
        """(probe_index, build_index) of all matches, probe-major, build order."""
        if not len(self.rows) or not len(probe):
            e = np.zeros(0, dtype=np.int64)
            return e, e
        h = _hash(_key_words(probe, self.attrs), self.bits)
        cnt = self.counts[h]
        total = int(cnt.sum())
        probe_idx = np.repeat(np.arange(len(probe)), cnt)
        first = np.repeat(self.starts[h] - (np.cumsum(cnt) - cnt), cnt)
        cand = self.order[first + np.arange(total)]
        match = np.ones(total, dtype=bool)
        for a in self.attrs:
            match &= self.rows[a][cand] == probe[a][probe_idx]
        return probe_idx[match], cand[match]


class BuildProbe(Operator):
    """Hash join: builds on the left upstream, probes with the right."""

    __slots__ = ("attrs", "table", "_left_rest", "_right_rest")

    def __init__(self, left, right, attrs, out_type=None):
        attrs = list(attrs)
        super().__init__(out_type if out_type is not None else build_probe_type(left.out_type, right.out_type, attrs), left, right)
        self.attrs = attrs
        self.table = None
        self._left_rest = [n for n in left.out_type.names if n not in attrs]
        self._right_rest = [n for n in right.out_type.names if n not in attrs]

    def open(self):
        super().open()
        build = concat_blocks(self.ups[0].out_type, drain(self.ups[0]))
        self.table = HashTable(build, self.attrs)

    def _next(self):
        if not len(self.table.rows):
            return None
        b = self.ups[1].next()
        if b is None:
            return None
        pi, bi = self.table.probe(b)
        out = np.empty(len(pi), dtype=self.out_type.dtype)
        probe_rows = b[pi]
        build_rows = self.table.rows[bi]
        for a in self.attrs:
            out[a] = probe_rows[a]
        for n in self._left_rest:
            out[n] = build_rows[n]
        for n in self._right_rest:
            out[n] = probe_rows[n]
        return out


class RowScan(Operator):
    __slots__ = ("field", "_cur", "_pos", "_tuples", "_ti")

    def __init__(self, up, out_type=None):
        coll = up.out_type.collection_fields
        if len(coll) != 1:
            raise NotACollection(f"RowScan needs exactly one collection field in {up.out_type}")
        self.field = coll[0]
        super().__init__(out_type if out_type is not None else up.out_type[self.field].element, up)
        self._cur, self._pos = None, 0
        self._tuples, self._ti = None, 0

    def next(self):
        if self._ended:
            return None
        while True:
            if self._cur is not None and self._pos < len(self._cur):
                start = self._pos
                self._pos = min(len(self._cur), start + SCAN_BLOCK)
                return self._cur[start:self._pos]
            if self._tuples is None or self._ti >= len(self._tuples):
                self._tuples = self.ups[0].next()
                self._ti = 0
                if self._tuples is None:
                    self._ended = True
                    return None
            rv = self._tuples[self.field][self._ti]
            self._ti += 1
            if not isinstance(rv, RowVector):
                raise NotACollection(f"field {self.field!r} does not hold a RowVector")
            self._cur, self._pos = rv.array, 0


class MaterializeRowVector(Operator):
    __slots__ = ("field",)

    def __init__(self, up, field="data", out_type=None):
        super().__init__(out_type if out_type is not None else TupleType(((field, RV(up.out_type)),)), up)
        self.field = field

    def next(self):
        if self._ended:
            return None
        try:
            data = concat_blocks(self.ups[0].out_type, drain(self.ups[0]))
        except MemoryError as e:
            raise AllocationFailure(str(e)) from e
        self._ended = True
        out = np.empty(1, dtype=self.out_type.dtype)
        out[self.field][0] = RowVector(self.ups[0].out_type, data)
        return out


class LocalPartitioning(Operator):
    """Stable radix scatter driven by an exact histogram; emits n partitions."""

    __slots__ = ("fn", "n", "pid", "data_field")

    def __init__(self, data, hist, fn, n, pid="pid", data_field="data", out_type=None):
        t = out_type if out_type is not None else TupleType(((pid, Int64), (data_field, RV(data.out_type))))
        super().__init__(t, data, hist)
        self.fn, self.n, self.pid, self.data_field = fn, n, pid, data_field

    def _next(self):
        counts = read_histogram(self.ups[1], self.n)
        part = Partitioner(counts, self.ups[0].out_type.dtype)
        for b in self.ups[0]:
            part.add(b, self.fn.buckets(b))
        self._ended = True
        return partition_block(self.out_type, self.ups[0].out_type, part.finish(), self.pid, self.data_field)


def partition_block(out_type, elem_type, blocks, pid="pid", data_field="data", ids=None):
    out = np.empty(len(blocks), dtype=out_type.dtype)
    out[pid] = np.arange(len(blocks)) if ids is None else ids
    col = out[data_field]
    for i, b in enumerate(blocks):
        col[i] = RowVector(elem_type, b)
    return out


# -- orchestration -------------------------------------------------------------------


class NestedMap(Operator):
    """Runs the inner plan once per upstream tuple; one output tuple each."""

    __slots__ = ("plan", "ctx", "binding")

    def __init__(self, up, plan: Plan, ctx=None, out_type=None):
        super().__init__(out_type if out_type is not None else plan.output_type, up)
        self.plan, self.ctx = plan, ctx
        (self.binding,) = plan.inputs

    def _next(self):
        b = self.ups[0].next()
        if b is None:
            return None
        results = [invoke_once(self.plan, self.binding, b[i:i + 1], self.ctx) for i in range(len(b))]
        return concat_blocks(self.out_type, results)


def invoke_once(plan: Plan, binding: str, arg: np.ndarray, ctx) -> np.ndarray:
    res = run_plan(plan, {binding: arg}, ctx)
    if len(res) != 1:
        raise InnerCardinality(f"nested plan produced {len(res)} tuples, expected 1")
    return res


# -- phase timing --------------------------------------------------------------------


class PhaseTimer:
    """Exclusive wall-clock time per phase tag.

    Time spent inside a nested tagged operator is charged to that operator's
    phase and subtracted from the enclosing one.
    """

    def __init__(self):
        self.totals = defaultdict(float)
        self._stack = []

    def enter(self, phase):
        now = time.perf_counter()
        if self._stack:
            top = self._stack[-1]
            self.totals[top[0]] += now - top[1]
        self._stack.append([phase, now])

    def exit(self):
        now = time.perf_counter()
        phase, start = self._stack.pop()
        self.totals[phase] += now - start
        if self._stack:
            self._stack[-1][1] = now


class Timed(Operator):
    __slots__ = ("inner", "phase", "timer")

    def __init__(self, inner, phase, timer):
        super().__init__(inner.out_type)
        self.inner, self.phase, self.timer = inner, phase, timer

    def open(self):
        self.timer.enter(self.phase)
        try:
            self.inner.open()
        finally:
            self.timer.exit()

    def next(self):
        self.timer.enter(self.phase)
        try:
            return self.inner.next()
        finally:
            self.timer.exit()

    def close(self):
        self.inner.close()


# -- plan execution ------------------------------------------------------------------

FACTORIES: dict = {}


def _factory(kind):
    def deco(fn):
        FACTORIES[kind] = fn
        return fn

    return deco


@_factory("Map")
def _(node, ups, t, ctx):
    return Map(ups[0], node.params["fn"], t)


@_factory("ParametrizedMap")
def _(node, ups, t, ctx):
    return ParametrizedMap(ups[0], ups[1], node.params["fn"], t)


@_factory("Projection")
def _(node, ups, t, ctx):
    return Projection(ups[0], node.params["fields"], t)


@_factory("Filter")
def _(node, ups, t, ctx):
    return Filter(ups[0], node.params["predicate"])


@_factory("CartesianProduct")
def _(node, ups, t, ctx):
    return CartesianProduct(ups[0], ups[1], t)


@_factory("Zip")
def _(node, ups, t, ctx):
    return Zip(*ups, out_type=t)


@_factory("Reduce")
def _(node, ups, t, ctx):
    return Reduce(ups[0], node.params["fn"])


@_factory("ReduceByKey")
def _(node, ups, t, ctx):
    return ReduceByKey(ups[0], node.params["key"], node.params["fn"])


@_factory("LocalHistogram")
def _(node, ups, t, ctx):
    return LocalHistogram(ups[0], node.params["fn"], node.params["n"])


@_factory("BuildProbe")
def _(node, ups, t, ctx):
    return BuildProbe(ups[0], ups[1], node.params["attrs"], t)


@_factory("RowScan")
def _(node, ups, t, ctx):
    return RowScan(ups[0], t)


@_factory("MaterializeRowVector")
def _(node, ups, t, ctx):
    return MaterializeRowVector(ups[0], node.params.get("field", "data"), t)


@_factory("LocalPartitioning")
def _(node, ups, t, ctx):
    p = node.params
    return LocalPartitioning(ups[0], ups[1], p["fn"], p["n"], p.get("pid", "pid"), p.get("data", "data"), t)


@_factory("NestedMap")
def _(node, ups, t, ctx):
    return NestedMap(ups[0], node.params["plan"], ctx, t)


def _bind(plan: Plan, bindings: dict) -> dict:
    out = {}
    for name, t in plan.inputs.items():
        if name not in bindings:
            continue
        v = bindings[name]
        if not isinstance(v, np.ndarray):
            v = make_block(t, [v])
        elif v.dtype != t.dtype:
            raise ExecutionError(f"binding {name!r} has dtype {v.dtype}, expected {t}")
        out[name] = v
    return out


class CompiledPlan:
    """A plan's pipelines flattened into post-order instruction lists.

    Built once per plan and cached on it, so a nested plan invoked once per
    tuple pays type inference and pipeline cutting only once.
    """

    SOURCE, LOOKUP, OP = 0, 1, 2

    def __init__(self, plan: Plan):
        types = plan.types()
        sched = plan.schedule()
        mats = sched.materialized
        self.root = sched.root
        self.pipelines = []
        for p in sched.pipelines:
            instrs: list = []

            def emit(i, sink=p.sink):
                node = plan.nodes[i]
                if i in mats and i != sink:
                    instrs.append((self.SOURCE, i, types[i], None, None))
                elif node.kind == "ParameterLookup":
                    instrs.append((self.LOOKUP, node.params.get("binding", "arg"), types[i], None,
                                   node.params.get("phase")))
                else:
                    ups = tuple(emit(u) for u in node.upstreams)
                    instrs.append((self.OP, node, types[i], ups, node.params.get("phase")))
                return len(instrs) - 1

            emit(p.sink)
            trivial = instrs[-1][0] == self.LOOKUP and instrs[-1][4] is None
            self.pipelines.append((p.sink, types[p.sink], instrs, trivial))

    @classmethod
    def of(cls, plan: Plan) -> "CompiledPlan":
        c = plan.__dict__.get("_compiled")
        if c is None:
            c = plan.__dict__["_compiled"] = cls(plan)
        return c


def run_plan(plan: Plan, bindings: dict, ctx) -> np.ndarray:
    """Execute ``plan`` pipeline by pipeline; return the root's output block."""
    compiled = CompiledPlan.of(plan)
    timer = ctx.timer if ctx is not None else None
    done: dict = {}
    SOURCE, LOOKUP = CompiledPlan.SOURCE, CompiledPlan.LOOKUP
    for sink, sink_type, instrs, trivial in compiled.pipelines:
        if trivial:
            name = instrs[-1][1]
            if name not in bindings:
                raise UnboundParameter(f"plan input {name!r} is not bound")
            done[sink] = ParameterLookup(sink_type, bindings[name]).value
            continue
        ops: list = []
        for code, what, t, ups, phase in instrs:
            if code == SOURCE:
                op = Source(t, done[what])
            elif code == LOOKUP:
                if what not in bindings:
                    raise UnboundParameter(f"plan input {what!r} is not bound")
                op = ParameterLookup(t, bindings[what])
            else:
                op = FACTORIES[what.kind](what, [ops[j] for j in ups], t, ctx)
            if phase is not None and timer is not None:
                op = Timed(op, phase, timer)
            ops.append(op)
        op = ops[-1]
        op.open()
        try:
            done[sink] = concat_blocks(sink_type, drain(op))
        finally:
            op.close()
    return done[compiled.root]


def execute(plan: Plan, bindings: dict | None = None, ctx=None) -> np.ndarray:
    """Run a top-level plan; network operators outside an executor see one rank."""
    if ctx is None:
        from .cluster import ExecContext

        ctx = ExecContext()
    return run_plan(plan, _bind(plan, bindings or {}), ctx)


def result_rows(block: np.ndarray) -> list:
    """Flatten a root output: rows of a single materialized RowVector, else the block."""
    if len(block) == 1 and len(block.dtype.names) == 1:
        v = block[block.dtype.names[0]][0]
        if isinstance(v, RowVector):
            return v.rows()
    return block.tolist()
