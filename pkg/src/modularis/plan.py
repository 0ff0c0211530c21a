"""Query plans: DAGs of sub-operator nodes, type inference and pipeline cutting.

Operators consume their input, so a tree of iterators cannot feed one result
to two consumers.  :func:`cut_pipelines` therefore splits a plan into
tree-shaped pipelines: every node with several consumers (and the root)
ends a pipeline in a materialization point, and downstream pipelines read
that materialization.  A pipeline never reads the same materialization
twice; when a tree would, the branch holding the second read is cut off
into a pipeline of its own.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import functions as fns
from .errors import (
    ArityMismatch,
    CycleDetected,
    PlanError,
    TypeMismatch,
    UnboundParameter,
    UnreachableNode,
)
from .partition import RadixSpec
from .typesys import (
    HISTOGRAM_TYPE,
    INT64,
    Int64,
    RowVector,
    TupleType,
    concat_all,
    concat_types,
    parse_type,
    project_type,
)

# operator kinds -> (min arity, max arity); None = unbounded
ARITY = {
    "ParameterLookup": (0, 0),
    "NestedMap": (1, 1),
    "Map": (1, 1),
    "ParametrizedMap": (2, 2),
    "Projection": (1, 1),
    "Filter": (1, 1),
    "CartesianProduct": (2, 2),
    "Zip": (1, None),
    "Reduce": (1, 1),
    "ReduceByKey": (1, 1),
    "LocalHistogram": (1, 1),
    "BuildProbe": (2, 2),
    "RowScan": (1, 1),
    "MaterializeRowVector": (1, 1),
    "LocalPartitioning": (2, 2),
    "MpiExecutor": (1, 1),
    "MpiHistogram": (1, 1),
    "MpiExchange": (3, 3),
    "MpiBroadcast": (3, 3),
}
KINDS = tuple(ARITY)
NESTING_KINDS = ("NestedMap", "MpiExecutor")


@dataclass(frozen=True)
class PlanNode:
    id: int
    kind: str
    params: dict = field(default_factory=dict, hash=False, compare=False)
    upstreams: tuple = ()

    @property
    def phase(self):
        return self.params.get("phase")


class Plan:
    """A DAG of :class:`PlanNode` with a single root.

    ``inputs`` declares the plan's named parameters (looked up by
    ``ParameterLookup``).  A nested plan has exactly one input, bound to the
    tuple its ``NestedMap``/``MpiExecutor`` is currently processing.
    """

    def __init__(self, nodes: Iterable[PlanNode], root: int, inputs: dict | None = None):
        self.nodes = {}
        for n in nodes:
            if n.id in self.nodes:
                raise PlanError(f"duplicate node id {n.id}")
            if n.kind not in ARITY:
                raise PlanError(f"node {n.id}: unknown operator kind {n.kind!r}")
            self.nodes[n.id] = n
        self.root = root
        self.inputs = {k: (parse_type(v) if isinstance(v, str) else v) for k, v in (inputs or {}).items()}
        self._types = None
        self._schedule = None

    def __getitem__(self, node_id) -> PlanNode:
        return self.nodes[node_id]

    def __len__(self):
        return len(self.nodes)

    def consumers(self) -> dict:
        """node id -> list of consuming node ids (one entry per edge)."""
        out = {i: [] for i in self.nodes}
        for n in sorted(self.nodes.values(), key=lambda n: n.id):
            for u in n.upstreams:
                if u in out:
                    out[u].append(n.id)
        return out

    def kinds(self) -> list:
        return [self.nodes[i].kind for i in sorted(self.nodes)]

    def walk(self):
        """This plan and every nested plan, depth first."""
        yield self
        for i in sorted(self.nodes):
            inner = self.nodes[i].params.get("plan")
            if isinstance(inner, Plan):
                yield from inner.walk()

    def types(self) -> dict:
        if self._types is None:
            self._types = validate(self)
        return self._types

    @property
    def output_type(self) -> TupleType:
        return self.types()[self.root]

    def schedule(self) -> "PipelineSchedule":
        if self._schedule is None:
            self._schedule = cut_pipelines(self)
        return self._schedule

    def to_json(self) -> dict:
        return {
            "inputs": {k: str(v) for k, v in self.inputs.items()},
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "params": fns.encode_param(n.params),
                    "upstreams": list(n.upstreams),
                }
                for n in (self.nodes[i] for i in sorted(self.nodes))
            ],
            "root": self.root,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Plan":
        nodes = [
            PlanNode(int(n["id"]), n["kind"], fns.decode_param(n.get("params", {})),
                     tuple(int(u) for u in n.get("upstreams", ())))
            for n in d["nodes"]
        ]
        return cls(nodes, int(d["root"]), d.get("inputs", {}))

    def dumps(self, **kw) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, **kw)

    @classmethod
    def loads(cls, text: str) -> "Plan":
        return cls.from_json(json.loads(text))

    def __repr__(self):
        return f"Plan({len(self.nodes)} nodes, root={self.root})"


class PlanBuilder:
    """Incremental plan construction; every method returns the new node id."""

    def __init__(self, inputs: dict | None = None, first_id: int = 0):
        self.inputs = dict(inputs or {})
        self.nodes: list = []
        self._next = first_id

    def add(self, kind: str, *upstreams: int, **params) -> int:
        node_id = self._next
        self._next += 1
        params = {k: v for k, v in params.items() if v is not None}
        self.nodes.append(PlanNode(node_id, kind, params, tuple(upstreams)))
        return node_id

    def build(self, root: int) -> Plan:
        return Plan(self.nodes, root, self.inputs)

    def lookup(self, binding="arg", **kw):
        return self.add("ParameterLookup", binding=binding, **kw)

    def project(self, up, *fields, **kw):
        return self.add("Projection", up, fields=list(fields), **kw)

    def scan(self, up, **kw):
        return self.add("RowScan", up, **kw)

    def materialize(self, up, field="data", **kw):
        return self.add("MaterializeRowVector", up, field=field, **kw)

    def map(self, up, fn, **kw):
        return self.add("Map", up, fn=fn, **kw)

    def pmap(self, param, up, fn, **kw):
        return self.add("ParametrizedMap", param, up, fn=fn, **kw)

    def filter(self, up, predicate, **kw):
        return self.add("Filter", up, predicate=predicate, **kw)

    def cartesian(self, left, right, **kw):
        return self.add("CartesianProduct", left, right, **kw)

    def zip(self, *ups, **kw):
        return self.add("Zip", *ups, **kw)

    def reduce(self, up, fn, **kw):
        return self.add("Reduce", up, fn=fn, **kw)

    def reduce_by_key(self, up, key, fn, **kw):
        return self.add("ReduceByKey", up, key=key, fn=fn, **kw)

    def local_histogram(self, up, fn, n, **kw):
        return self.add("LocalHistogram", up, fn=fn, n=n, **kw)

    def local_partitioning(self, data, hist, fn, n, pid="pid", data_field="data", **kw):
        return self.add("LocalPartitioning", data, hist, fn=fn, n=n, pid=pid, data=data_field, **kw)

    def build_probe(self, left, right, attrs, **kw):
        return self.add("BuildProbe", left, right, attrs=list(attrs), **kw)

    def nested_map(self, up, plan, **kw):
        return self.add("NestedMap", up, plan=plan, **kw)

    def executor(self, up, plan, **kw):
        return self.add("MpiExecutor", up, plan=plan, **kw)

    def mpi_histogram(self, up, n, **kw):
        return self.add("MpiHistogram", up, n=n, **kw)

    def exchange(self, data, local, global_, fn, n, pid="pid", data_field="data", compress=None, **kw):
        return self.add("MpiExchange", data, local, global_, fn=fn, n=n, pid=pid,
                        data=data_field, compress=compress, **kw)

    def broadcast(self, data, local, global_, **kw):
        return self.add("MpiBroadcast", data, local, global_, **kw)


# -- validation ------------------------------------------------------------------


def _structure(plan: Plan) -> list:
    """Check references, arity, acyclicity and reachability; return topo order."""
    if plan.root not in plan.nodes:
        raise PlanError(f"root {plan.root} is not a node")
    for n in plan.nodes.values():
        lo, hi = ARITY[n.kind]
        k = len(n.upstreams)
        if k < lo or (hi is not None and k > hi):
            want = f"{lo}" if lo == hi else f"{lo}..{hi if hi is not None else '*'}"
            raise ArityMismatch(f"node {n.id} ({n.kind}) has {k} upstreams, needs {want}")
        for u in n.upstreams:
            if u not in plan.nodes:
                raise PlanError(f"node {n.id} references missing upstream {u}")
    order, state = [], {}
    for start in sorted(plan.nodes):
        if state.get(start):
            continue
        stack = [(start, iter(plan.nodes[start].upstreams))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                state[node] = 2
                order.append(node)
            elif state.get(nxt) == 1:
                raise CycleDetected(f"cycle through node {nxt}")
            elif not state.get(nxt):
                state[nxt] = 1
                stack.append((nxt, iter(plan.nodes[nxt].upstreams)))
    reachable, todo = set(), [plan.root]
    while todo:
        i = todo.pop()
        if i not in reachable:
            reachable.add(i)
            todo.extend(plan.nodes[i].upstreams)
    dangling = sorted(set(plan.nodes) - reachable)
    if dangling:
        raise UnreachableNode(f"nodes {dangling} are not reachable from root {plan.root}")
    return order


def validate(plan: Plan) -> dict:
    """Infer the output type of every node (recursing into nested plans)."""
    order = _structure(plan)
    types: dict = {}
    for i in order:
        node = plan.nodes[i]
        ups = [types[u] for u in node.upstreams]
        try:
            types[i] = _infer(node, ups, plan)
        except TypeMismatch as e:
            if getattr(e, "node_id", None) is None:
                raise type(e)(str(e), node_id=i) from e
            raise
    return types


def _param(node, name):
    try:
        return node.params[name]
    except KeyError:
        raise PlanError(f"node {node.id} ({node.kind}) is missing parameter {name!r}") from None


def _check_hist(t, node, what):
    if t != HISTOGRAM_TYPE:
        raise TypeMismatch(f"{what} upstream", node.id, HISTOGRAM_TYPE, t)


def _partition_output(node, data_type):
    pid = node.params.get("pid", "pid")
    data = node.params.get("data", "data")
    return TupleType(((pid, Int64), (data, RowVector(data_type))))


def _infer(node: PlanNode, ups: list, plan: Plan) -> TupleType:
    k = node.kind
    if k == "ParameterLookup":
        binding = node.params.get("binding", "arg")
        if binding not in plan.inputs:
            raise UnboundParameter(f"node {node.id}: no plan input named {binding!r}")
        return plan.inputs[binding]
    if k in NESTING_KINDS:
        inner = _param(node, "plan")
        if len(inner.inputs) != 1:
            raise PlanError(f"node {node.id}: nested plan must declare exactly one input")
        (arg_type,) = inner.inputs.values()
        if arg_type != ups[0]:
            raise TypeMismatch("nested plan input", node.id, ups[0], arg_type)
        return inner.types()[inner.root]
    if k == "Map":
        return _param(node, "fn").output_type(ups[0])
    if k == "ParametrizedMap":
        return _param(node, "fn").output_type(ups[0], ups[1])
    if k == "Projection":
        return project_type(ups[0], _param(node, "fields"))
    if k == "Filter":
        _param(node, "predicate").check_predicate(ups[0], node.id)
        return ups[0]
    if k == "CartesianProduct":
        return concat_types(ups[0], ups[1])
    if k == "Zip":
        return concat_all(ups)
    if k == "Reduce":
        _param(node, "fn").check(ups[0], node.id)
        return ups[0]
    if k == "ReduceByKey":
        key = _param(node, "key")
        if len(ups[0]) < 2:
            raise TypeMismatch("ReduceByKey input arity", node.id, ">= 2 fields", ups[0])
        if ups[0][key].is_collection:
            raise TypeMismatch(f"key field {key!r}", node.id, "atom", ups[0][key])
        _param(node, "fn").check(ups[0].without(key), node.id)
        return ups[0]
    if k == "LocalHistogram":
        _param(node, "fn").check_bucket(ups[0], node.id)
        _positive_n(node)
        return HISTOGRAM_TYPE
    if k == "BuildProbe":
        return build_probe_type(ups[0], ups[1], _param(node, "attrs"), node.id)
    if k == "RowScan":
        coll = ups[0].collection_fields
        if len(coll) != 1:
            raise TypeMismatch("RowScan input", node.id, "exactly one collection field", ups[0])
        return ups[0][coll[0]].element
    if k == "MaterializeRowVector":
        return TupleType(((node.params.get("field", "data"), RowVector(ups[0])),))
    if k == "LocalPartitioning":
        _check_hist(ups[1], node, "histogram")
        _param(node, "fn").check_bucket(ups[0], node.id)
        _positive_n(node)
        return _partition_output(node, ups[0])
    if k == "MpiHistogram":
        _check_hist(ups[0], node, "histogram")
        _positive_n(node)
        return HISTOGRAM_TYPE
    if k in ("MpiExchange", "MpiBroadcast"):
        _check_hist(ups[1], node, "local histogram")
        _check_hist(ups[2], node, "global histogram")
        if not ups[0].is_flat:
            raise TypeMismatch("network data", node.id, "flat tuple (atoms only)", ups[0])
        if k == "MpiBroadcast":
            return ups[0]
        _param(node, "fn").check_bucket(ups[0], node.id)
        _positive_n(node)
        wire = ups[0]
        comp = node.params.get("compress")
        if comp is not None:
            wire = comp.output_type(wire)
        return _partition_output(node, wire)
    raise PlanError(f"no type rule for {k}")  # pragma: no cover


def _positive_n(node):
    n = _param(node, "n")
    if not isinstance(n, int) or n < 1:
        raise PlanError(f"node {node.id}: bucket count must be a positive int, got {n!r}")


def build_probe_type(left: TupleType, right: TupleType, attrs: Sequence[str], node_id=None) -> TupleType:
    attrs = list(attrs)
    for a in attrs:
        lt, rt = left[a], right[a]
        if lt.is_collection or rt.is_collection:
            raise TypeMismatch(f"join attribute {a!r}", node_id, "atom", lt if lt.is_collection else rt)
        if lt != rt:
            raise TypeMismatch(f"join attribute {a!r}", node_id, lt, rt)
    keys = project_type(left, attrs)
    return concat_all([keys, left.without(*attrs), right.without(*attrs)])


# -- pipelines -------------------------------------------------------------------


@dataclass(frozen=True)
class Pipeline:
    """Tree-shaped plan fragment ending in the materialization of ``sink``."""

    sink: int
    nodes: tuple
    reads: tuple  # materialized node ids read as leaves (with multiplicity)
    lookups: tuple  # ParameterLookup nodes (plan inputs)

    @property
    def sources(self) -> tuple:
        return tuple(sorted(set(self.reads))) + self.lookups


@dataclass(frozen=True)
class PipelineSchedule:
    pipelines: tuple
    materialized: frozenset
    root: int

    def __iter__(self):
        return iter(self.pipelines)

    def __len__(self):
        return len(self.pipelines)

    def pipeline_of(self, node_id) -> Pipeline:
        for p in self.pipelines:
            if node_id in p.nodes:
                return p
        raise KeyError(node_id)


def _tree(plan, sink, mats):
    """Walk the pipeline ending at ``sink``; return nodes and leaf reads with paths."""
    nodes, reads = [], []
    stack = [(sink, (sink,))]
    while stack:
        i, path = stack.pop()
        nodes.append(i)
        # reversed so reads come out in upstream order
        for u in reversed(plan.nodes[i].upstreams):
            if u in mats:
                reads.append((u, path))
            else:
                stack.append((u, path + (u,)))
    reads.reverse()
    return nodes, reads


def _ordered_reads(plan, sink, mats):
    out = []

    def visit(i, path):
        for u in plan.nodes[i].upstreams:
            if u in mats:
                out.append((u, path))
            else:
                visit(u, path + (u,))

    visit(sink, (sink,))
    return out


def cut_pipelines(plan: Plan) -> PipelineSchedule:
    plan.types()
    consumers = plan.consumers()
    mats = {i for i, c in consumers.items() if len(c) > 1} | {plan.root}

    changed = True
    while changed:
        changed = False
        for sink in sorted(mats):
            seen = {}
            for m, path in _ordered_reads(plan, sink, mats):
                if m not in seen:
                    seen[m] = path
                    continue
                first = seen[m]
                common = 0
                while common < min(len(first), len(path)) and first[common] == path[common]:
                    common += 1
                if common < len(path):
                    mats.add(path[common])
                    changed = True
                    break
            if changed:
                break

    pipelines = {}
    for sink in mats:
        nodes, reads = _tree(plan, sink, mats)
        lookups = tuple(sorted(i for i in nodes if plan.nodes[i].kind == "ParameterLookup"))
        pipelines[sink] = Pipeline(sink, tuple(sorted(nodes)), tuple(m for m, _ in reads), lookups)

    deps = {s: set(p.reads) for s, p in pipelines.items()}
    users = {s: set() for s in pipelines}
    for s, d in deps.items():
        for m in d:
            users[m].add(s)
    heap = [(min(p.nodes), s) for s, p in pipelines.items() if not deps[s]]
    heapq.heapify(heap)
    ordered = []
    while heap:
        _, s = heapq.heappop(heap)
        ordered.append(pipelines[s])
        for u in sorted(users[s]):
            deps[u].discard(s)
            if not deps[u]:
                heapq.heappush(heap, (min(pipelines[u].nodes), u))
    if len(ordered) != len(pipelines):  # pragma: no cover - plan is a DAG
        raise CycleDetected("pipeline dependencies are cyclic")
    return PipelineSchedule(tuple(ordered), frozenset(mats), plan.root)
