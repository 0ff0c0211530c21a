"""Brute-force reference implementations.

Plain python over lists of tuples.  Nothing here touches the engine's
partitioning, hashing, transport or operator code; the only shared pieces
are the type grammar and the parameter functions themselves (a predicate or
map is the *input* of a plan, so the oracle evaluates the same function).
"""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .typesys import TupleType
from .values import RowVector, make_block


@dataclass
class FlatRelation:
    names: tuple
    rows: list = field(default_factory=list)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FlatRelation":
        return cls(tuple(arr.dtype.names), arr.tolist())

    def index(self, name):
        return self.names.index(name)

    def column(self, name):
        i = self.index(name)
        return [r[i] for r in self.rows]

    def __len__(self):
        return len(self.rows)


def _rel(x) -> FlatRelation:
    if isinstance(x, FlatRelation):
        return x
    if isinstance(x, np.ndarray):
        return FlatRelation.from_array(x)
    raise TypeError(f"expected FlatRelation or structured array, got {type(x).__name__}")


def _join_layout(L: FlatRelation, R: FlatRelation, attrs):
    li = [L.index(a) for a in attrs]
    ri = [R.index(a) for a in attrs]
    lrest = [i for i, n in enumerate(L.names) if n not in attrs]
    rrest = [i for i, n in enumerate(R.names) if n not in attrs]
    names = tuple(attrs) + tuple(L.names[i] for i in lrest) + tuple(R.names[i] for i in rrest)
    return li, ri, lrest, rrest, names


def nl_join(L, R, attrs: Sequence[str]) -> FlatRelation:
    """Nested-loop equi-join; output ``attrs + left rest + right rest``."""
    L, R = _rel(L), _rel(R)
    attrs = list(attrs)
    li, ri, lrest, rrest, names = _join_layout(L, R, attrs)
    out = []
    for r in R.rows:
        rk = [r[i] for i in ri]
        for l in L.rows:
            if [l[i] for i in li] == rk:
                out.append(tuple(rk) + tuple(l[i] for i in lrest) + tuple(r[i] for i in rrest))
    return FlatRelation(names, out)


def indexed_join(L, R, attrs: Sequence[str]) -> FlatRelation:
    """Same result as :func:`nl_join`, with the left side indexed in a dict.

    Used where a quadratic loop is too slow (desk-scale acceptance runs).
    """
    L, R = _rel(L), _rel(R)
    attrs = list(attrs)
    li, ri, lrest, rrest, names = _join_layout(L, R, attrs)
    index = defaultdict(list)
    for l in L.rows:
        index[tuple(l[i] for i in li)].append(tuple(l[i] for i in lrest))
    out = []
    for r in R.rows:
        k = tuple(r[i] for i in ri)
        tail = tuple(r[i] for i in rrest)
        for lr in index.get(k, ()):
            out.append(k + lr + tail)
    return FlatRelation(names, out)


_FOLDS = {
    "sum": lambda a, b: a + b,
    "min": min,
    "max": max,
    "any": lambda a, b: bool(a or b),
    "all": lambda a, b: bool(a and b),
}


def fold_fn(ops: dict, names: Sequence[str]) -> Callable:
    """Per-field fold over tuples with the given field order."""
    fs = [_FOLDS[ops[n]] for n in names]
    return lambda a, b: tuple(f(x, y) for f, x, y in zip(fs, a, b))


def ref_group_by(rel, key: str, f) -> FlatRelation:
    """Fold the non-key fields of each key group; ``f`` is a callable or 'sum'."""
    rel = _rel(rel)
    ki = rel.index(key)
    rest_names = [n for n in rel.names if n != key]
    if isinstance(f, str):
        f = fold_fn({n: f for n in rest_names}, rest_names)
    groups: dict = {}
    for row in rel.rows:
        k = row[ki]
        rest = row[:ki] + row[ki + 1:]
        groups[k] = f(groups[k], rest) if k in groups else rest
    return FlatRelation(rel.names, [tuple(v[:ki]) + (k,) + tuple(v[ki:]) for k, v in groups.items()])


def ref_reduce(rel, f) -> FlatRelation:
    rel = _rel(rel)
    if isinstance(f, str):
        f = fold_fn({n: f for n in rel.names}, rel.names)
    if not rel.rows:
        return FlatRelation(rel.names, [])
    acc = rel.rows[0]
    for r in rel.rows[1:]:
        acc = f(acc, r)
    return FlatRelation(rel.names, [tuple(acc)])


def ref_histogram(rel, bucket_fn: Callable, n: int) -> list:
    """Counts per bucket; ``bucket_fn`` maps a row tuple to a bucket id."""
    counts = [0] * n
    for row in _rel(rel).rows:
        counts[bucket_fn(row)] += 1
    return counts


def ref_sequence_join(relations: Sequence, attrs, join=indexed_join) -> FlatRelation:
    """Left fold of equi-joins; ``attrs`` is one name or one per join."""
    rels = [_rel(r) for r in relations]
    if isinstance(attrs, str):
        attrs = [attrs] * (len(rels) - 1)
    acc = rels[0]
    for r, a in zip(rels[1:], attrs):
        acc = join(acc, r, [a])
    return acc


def ref_filter_join_aggregate(left, right, attr, left_pred=None, right_pred=None,
                              left_fields=None, right_fields=None, post_pred=None,
                              post_map: Callable = None, group_key=None, agg_ops: dict = None):
    """Filter -> project -> join -> per-row map -> (grouped) fold.

    Predicates and ``post_map`` take and return dicts keyed by field name.
    """
    def prep(rel, pred, fields):
        rel = _rel(rel)
        names = list(fields) if fields else list(rel.names)
        rows = []
        for r in rel.rows:
            d = dict(zip(rel.names, r))
            if pred is None or pred(d):
                rows.append(tuple(d[n] for n in names))
        return FlatRelation(tuple(names), rows)

    j = indexed_join(prep(left, left_pred, left_fields), prep(right, right_pred, right_fields), [attr])
    mapped = []
    for r in j.rows:
        d = dict(zip(j.names, r))
        if post_pred is not None and not post_pred(d):
            continue
        mapped.append(post_map(d))
    if not mapped:
        return []
    names = list(mapped[0])
    if group_key is None:
        acc = dict(mapped[0])
        for d in mapped[1:]:
            for n in names:
                acc[n] = _FOLDS[agg_ops[n]](acc[n], d[n])
        return [acc]
    groups: dict = {}
    for d in mapped:
        k = d[group_key]
        if k not in groups:
            groups[k] = dict(d)
        else:
            g = groups[k]
            for n in names:
                if n != group_key:
                    g[n] = _FOLDS[agg_ops[n]](g[n], d[n])
    return list(groups.values())


# -- comparisons -------------------------------------------------------------------


def _canon(v):
    if isinstance(v, float) and v != v:
        return ("nan",)
    if isinstance(v, (list, tuple)):
        return tuple(_canon(x) for x in v)
    if isinstance(v, np.generic):
        return v.item()
    return v


def canonical(rows: Iterable) -> Counter:
    return Counter(_canon(r) for r in rows)


def same_multiset(a: Iterable, b: Iterable) -> bool:
    """Order-free equality of two row collections."""
    return canonical(a) == canonical(b)


def multiset_diff(a: Iterable, b: Iterable, limit=5) -> str:
    ca, cb = canonical(a), canonical(b)
    missing = list((cb - ca).items())[:limit]
    extra = list((ca - cb).items())[:limit]
    return f"missing={missing} extra={extra}"


# -- memoized recursive plan interpreter ---------------------------------------------


def to_python(value, item=None):
    """Engine value -> plain python (RowVector -> list of row tuples)."""
    if isinstance(value, RowVector):
        return [tuple(to_python(x) for x in row) for row in value.rows()]
    if isinstance(value, np.ndarray):
        return [tuple(to_python(x) for x in row) for row in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, tuple):
        return tuple(to_python(x) for x in value)
    return value


def _to_block(t: TupleType, rows):
    return make_block(t, [[_to_engine(v, it) for v, (_, it) in zip(r, t.fields)] for r in rows])


def _to_engine(v, item):
    if item.is_collection:
        return RowVector(item.element, _to_block(item.element, v))
    return v


def _from_block(block) -> list:
    return to_python(block)


def ref_evaluate(plan, bindings: dict) -> list:
    """Evaluate ``plan`` by recursion over the DAG, memoizing every node.

    Every operator is re-implemented here on python lists; a node consumed
    twice is evaluated once and its rows reused.  Network operators behave
    as on a single rank.  Returns the root's rows as python tuples.
    """
    types = plan.types()
    memo: dict = {}

    def ev(i):
        if i in memo:
            return memo[i]
        node = plan.nodes[i]
        ups = [ev(u) for u in node.upstreams]
        utypes = [types[u] for u in node.upstreams]
        memo[i] = _eval_node(node, ups, utypes, types[i], bindings)
        return memo[i]

    return ev(plan.root)


def _eval_node(node, ups, utypes, out_t, bindings):
    k, p = node.kind, node.params
    if k == "ParameterLookup":
        name = p.get("binding", "arg")
        return [tuple(to_python(bindings[name])[0])]
    if k in ("NestedMap", "MpiExecutor"):
        inner = p["plan"]
        (name,) = inner.inputs
        out = []
        for row in ups[0]:
            res = ref_evaluate(inner, {name: _to_block(utypes[0], [row])})
            if len(res) != 1:
                raise AssertionError(f"nested plan produced {len(res)} tuples")
            out.append(res[0])
        return out
    if k == "Map":
        if not ups[0]:
            return []
        return _from_block(p["fn"].apply(_to_block(utypes[0], ups[0]), utypes[0], out_t))
    if k == "ParametrizedMap":
        if len(ups[0]) != 1:
            raise AssertionError("parameter upstream must yield one tuple")
        if not ups[1]:
            return []
        prm = _to_block(utypes[0], ups[0])
        return _from_block(p["fn"].apply(prm, _to_block(utypes[1], ups[1]), utypes[1], out_t))
    if k == "Projection":
        idx = [utypes[0].index(n) for n in p["fields"]]
        return [tuple(r[i] for i in idx) for r in ups[0]]
    if k == "Filter":
        if not ups[0]:
            return []
        mask = p["predicate"].mask(_to_block(utypes[0], ups[0]))
        return [r for r, m in zip(ups[0], mask.tolist()) if m]
    if k == "CartesianProduct":
        return [l + r for l in ups[0] for r in ups[1]]
    if k == "Zip":
        lens = {len(u) for u in ups}
        if len(lens) > 1:
            raise AssertionError("zip length mismatch")
        return [sum(parts, ()) for parts in zip(*ups)]
    if k == "Reduce":
        fn = p["fn"]
        f = fold_fn(fn.ops, out_t.names) if hasattr(fn, "ops") else fn.fn
        return ref_reduce(FlatRelation(out_t.names, ups[0]), f).rows
    if k == "ReduceByKey":
        fn, key = p["fn"], p["key"]
        rest = [n for n in out_t.names if n != key]
        f = fold_fn(fn.ops, rest) if hasattr(fn, "ops") else fn.fn
        return ref_group_by(FlatRelation(out_t.names, ups[0]), key, f).rows
    if k in ("LocalHistogram", "MpiHistogram"):
        n = p["n"]
        if k == "MpiHistogram":
            return list(ups[0])
        ids = _buckets(p["fn"], utypes[0], ups[0])
        counts = [0] * n
        for b in ids:
            counts[b] += 1
        return [(b, c) for b, c in enumerate(counts)]
    if k == "BuildProbe":
        L = FlatRelation(utypes[0].names, ups[0])
        R = FlatRelation(utypes[1].names, ups[1])
        return nl_join(L, R, p["attrs"]).rows
    if k == "RowScan":
        (f,) = utypes[0].collection_fields
        fi = utypes[0].index(f)
        return [x for r in ups[0] for x in r[fi]]
    if k == "MaterializeRowVector":
        return [(list(ups[0]),)]
    if k in ("LocalPartitioning", "MpiExchange"):
        n = p["n"]
        rows = ups[0]
        ids = _buckets(p["fn"], utypes[0], rows)
        if k == "MpiExchange" and p.get("compress") is not None and rows:
            wire_t = out_t[p.get("data", "data")].element
            rows = _from_block(p["compress"].apply(_to_block(utypes[0], rows), utypes[0], wire_t))
        parts = [[] for _ in range(n)]
        for r, b in zip(rows, ids):
            parts[b].append(r)
        return [(b, part) for b, part in enumerate(parts)]
    if k == "MpiBroadcast":
        return list(ups[0])
    raise AssertionError(f"no reference semantics for {k}")


def _buckets(fn, t, rows):
    if not rows:
        return []
    return fn.buckets(_to_block(t, rows)).tolist()
