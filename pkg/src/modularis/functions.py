"""Functions carried as operator parameters.

Every function works on whole blocks (numpy structured arrays) and knows
how to infer its output type, so plans type-check before they run.  The
JSON-serializable ones (expressions, radix slices, compression, aggregates)
can appear in plan files; the ``Py*`` wrappers adapt arbitrary per-tuple
python callables and are in-memory only.

Expressions are built with ordinary operators::

    revenue = col("price") * (100 - col("discount"))
    cheap = (col("price") < 500) & col("mode").isin([1, 3])
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import partition as radix
from .errors import ModularisError, TypeMismatch
from .partition import RadixSpec
from .typesys import (
    BOOL,
    FLOAT64,
    INT64,
    AtomType,
    TupleType,
    parse_type,
)
from .values import block_rows, empty_block, make_block

_REGISTRY: dict = {}


def _register(cls):
    _REGISTRY[cls.tag] = cls
    return cls


class NotSerializable(ModularisError):
    pass


class Function:
    tag = None

    def to_json(self) -> dict:
        raise NotSerializable(f"{type(self).__name__} cannot be written to a plan file")

    def __repr__(self):
        try:
            return f"{type(self).__name__}({self.to_json()})"
        except NotSerializable:
            return f"{type(self).__name__}(<python>)"


def function_from_json(d):
    if isinstance(d, list):
        return expr_from_json(d)
    try:
        cls = _REGISTRY[d["fn"]]
    except KeyError:
        raise ModularisError(f"unknown function {d!r}") from None
    return cls.from_json(d)


def function_to_json(fn):
    return fn.to_json()


# -- expressions ---------------------------------------------------------------

_ARITH = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": np.true_divide,
    "//": np.floor_divide,
    "%": np.remainder,
    "<<": np.left_shift,
    ">>": np.right_shift,
}
_COMPARE = {
    "==": np.equal,
    "!=": np.not_equal,
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
}
_LOGIC = {"&": np.bitwise_and, "|": np.bitwise_or, "^": np.bitwise_xor}


def _lift(x):
    return x if isinstance(x, Expr) else Lit(x)


class Expr(Function):
    """Vectorized scalar expression over the fields of one tuple."""

    def kind(self, t: TupleType) -> str:
        raise NotImplementedError

    def eval(self, block: np.ndarray):
        raise NotImplementedError

    def columns(self) -> set:
        return set()

    # role adapters: an expression is usable as predicate / bucket function
    def check_predicate(self, t: TupleType, node_id=None):
        k = self.kind(t)
        if k != BOOL:
            raise TypeMismatch("predicate result", node_id, BOOL, k)

    def mask(self, block):
        return np.broadcast_to(np.asarray(self.eval(block), dtype=bool), (len(block),))

    def check_bucket(self, t: TupleType, node_id=None):
        k = self.kind(t)
        if k != INT64:
            raise TypeMismatch("bucket function result", node_id, INT64, k)

    def buckets(self, block):
        out = np.asarray(self.eval(block), dtype=np.int64)
        return np.broadcast_to(out, (len(block),))

    def __add__(self, o): return BinOp("+", self, _lift(o))
    def __radd__(self, o): return BinOp("+", _lift(o), self)
    def __sub__(self, o): return BinOp("-", self, _lift(o))
    def __rsub__(self, o): return BinOp("-", _lift(o), self)
    def __mul__(self, o): return BinOp("*", self, _lift(o))
    def __rmul__(self, o): return BinOp("*", _lift(o), self)
    def __truediv__(self, o): return BinOp("/", self, _lift(o))
    def __floordiv__(self, o): return BinOp("//", self, _lift(o))
    def __mod__(self, o): return BinOp("%", self, _lift(o))
    def __lshift__(self, o): return BinOp("<<", self, _lift(o))
    def __rshift__(self, o): return BinOp(">>", self, _lift(o))
    def __and__(self, o): return BinOp("&", self, _lift(o))
    def __rand__(self, o): return BinOp("&", _lift(o), self)
    def __or__(self, o): return BinOp("|", self, _lift(o))
    def __ror__(self, o): return BinOp("|", _lift(o), self)
    def __xor__(self, o): return BinOp("^", self, _lift(o))
    def __invert__(self): return Not(self)
    def __lt__(self, o): return BinOp("<", self, _lift(o))
    def __le__(self, o): return BinOp("<=", self, _lift(o))
    def __gt__(self, o): return BinOp(">", self, _lift(o))
    def __ge__(self, o): return BinOp(">=", self, _lift(o))
    def __eq__(self, o): return BinOp("==", self, _lift(o))  # type: ignore[override]
    def __ne__(self, o): return BinOp("!=", self, _lift(o))  # type: ignore[override]
    __hash__ = Function.__hash__

    def isin(self, values):
        return IsIn(self, tuple(values))

    def between(self, lo, hi):
        """Inclusive range test."""
        return (self >= lo) & (self <= hi)


class Col(Expr):
    def __init__(self, name):
        self.name = name

    def kind(self, t):
        item = t[self.name]
        if item.is_collection:
            raise TypeMismatch(f"expression over collection field {self.name!r}", None, "atom", item)
        return item.kind

    def eval(self, block):
        return block[self.name]

    def columns(self):
        return {self.name}

    def to_json(self):
        return ["col", self.name]


class Size(Expr):
    """Row count of a RowVector field."""

    def __init__(self, name):
        self.name = name

    def kind(self, t):
        item = t[self.name]
        if not item.is_collection:
            raise TypeMismatch(f"size of atom field {self.name!r}", None, "RowVector", item)
        return INT64

    def eval(self, block):
        return np.fromiter((len(v) for v in block[self.name]), dtype=np.int64, count=len(block))

    def columns(self):
        return {self.name}

    def to_json(self):
        return ["size", self.name]


class Lit(Expr):
    def __init__(self, value):
        if isinstance(value, (bool, np.bool_)):
            self.value = bool(value)
        elif isinstance(value, (int, np.integer)):
            self.value = int(value)
        elif isinstance(value, (float, np.floating)):
            self.value = float(value)
        else:
            raise TypeMismatch("literal", None, "int/float/bool", type(value).__name__)

    def kind(self, t):
        if isinstance(self.value, bool):
            return BOOL
        return INT64 if isinstance(self.value, int) else FLOAT64

    def eval(self, block):
        return self.value

    def to_json(self):
        return ["lit", self.value]


class BinOp(Expr):
    def __init__(self, op, left, right):
        if op not in _ARITH and op not in _COMPARE and op not in _LOGIC:
            raise ModularisError(f"unknown operator {op!r}")
        self.op, self.left, self.right = op, left, right

    def kind(self, t):
        a, b = self.left.kind(t), self.right.kind(t)
        if self.op in _COMPARE:
            if (a == BOOL) != (b == BOOL):
                raise TypeMismatch(f"operands of {self.op}", None, a, b)
            return BOOL
        if self.op in _LOGIC:
            if a == FLOAT64 or b == FLOAT64 or a != b:
                raise TypeMismatch(f"operands of {self.op}", None, a, b)
            return a
        if BOOL in (a, b):
            raise TypeMismatch(f"arithmetic {self.op} on Bool", None, "number", BOOL)
        if self.op in ("<<", ">>") and FLOAT64 in (a, b):
            raise TypeMismatch("shift on Float64", None, INT64, FLOAT64)
        if self.op == "/":
            return FLOAT64
        return FLOAT64 if FLOAT64 in (a, b) else INT64

    def eval(self, block):
        fn = _ARITH.get(self.op) or _COMPARE.get(self.op) or _LOGIC[self.op]
        return fn(self.left.eval(block), self.right.eval(block))

    def columns(self):
        return self.left.columns() | self.right.columns()

    def to_json(self):
        return [self.op, self.left.to_json(), self.right.to_json()]


class Not(Expr):
    def __init__(self, arg):
        self.arg = arg

    def kind(self, t):
        k = self.arg.kind(t)
        if k == FLOAT64:
            raise TypeMismatch("operand of ~", None, "Bool/Int64", k)
        return k

    def eval(self, block):
        return np.invert(self.arg.eval(block))

    def columns(self):
        return self.arg.columns()

    def to_json(self):
        return ["~", self.arg.to_json()]


class IsIn(Expr):
    def __init__(self, arg, values):
        self.arg, self.values = arg, tuple(values)

    def kind(self, t):
        self.arg.kind(t)
        return BOOL

    def eval(self, block):
        return np.isin(self.arg.eval(block), self.values)

    def columns(self):
        return self.arg.columns()

    def to_json(self):
        return ["in", self.arg.to_json(), list(self.values)]


class Where(Expr):
    def __init__(self, cond, then, otherwise):
        self.cond, self.then, self.otherwise = cond, _lift(then), _lift(otherwise)

    def kind(self, t):
        if self.cond.kind(t) != BOOL:
            raise TypeMismatch("where condition", None, BOOL, self.cond.kind(t))
        a, b = self.then.kind(t), self.otherwise.kind(t)
        if a == b:
            return a
        if BOOL in (a, b):
            raise TypeMismatch("where branches", None, a, b)
        return FLOAT64

    def eval(self, block):
        return np.where(self.cond.eval(block), self.then.eval(block), self.otherwise.eval(block))

    def columns(self):
        return self.cond.columns() | self.then.columns() | self.otherwise.columns()

    def to_json(self):
        return ["where", self.cond.to_json(), self.then.to_json(), self.otherwise.to_json()]


def col(name: str) -> Col:
    return Col(name)


def size(name: str) -> Size:
    return Size(name)


def lit(value) -> Lit:
    return Lit(value)


def where(cond, then, otherwise) -> Where:
    return Where(cond, then, otherwise)


def expr_from_json(j) -> Expr:
    op = j[0]
    if op == "col":
        return Col(j[1])
    if op == "lit":
        return Lit(j[1])
    if op == "size":
        return Size(j[1])
    if op == "~":
        return Not(expr_from_json(j[1]))
    if op == "in":
        return IsIn(expr_from_json(j[1]), j[2])
    if op == "where":
        return Where(*(expr_from_json(x) for x in j[1:]))
    return BinOp(op, expr_from_json(j[1]), expr_from_json(j[2]))


# -- tuple -> tuple maps ---------------------------------------------------------


class TupleFn(Function):
    def output_type(self, t: TupleType) -> TupleType:
        raise NotImplementedError

    def apply(self, block: np.ndarray, in_type: TupleType, out_type: TupleType) -> np.ndarray:
        raise NotImplementedError


@_register
class Compute(TupleFn):
    """Output tuple made of named expressions (a bare string copies a field)."""

    tag = "compute"

    def __init__(self, outputs: dict):
        self.outputs = {n: (Col(e) if isinstance(e, str) else _lift(e)) for n, e in outputs.items()}

    def output_type(self, t):
        return TupleType(tuple((n, _atom_of(e, t)) for n, e in self.outputs.items()))

    def apply(self, block, in_type, out_type):
        out = np.empty(len(block), dtype=out_type.dtype)
        for name, e in self.outputs.items():
            out[name] = e.eval(block)
        return out

    def to_json(self):
        return {"fn": self.tag, "outputs": {n: e.to_json() for n, e in self.outputs.items()}}

    @classmethod
    def from_json(cls, d):
        return cls({n: expr_from_json(e) for n, e in d["outputs"].items()})


def _atom_of(e: Expr, t: TupleType):
    if isinstance(e, Col):
        item = t[e.name]
        if item.is_collection:
            return item
    return AtomType(e.kind(t))


@_register
class Rename(TupleFn):
    """Rename fields in place; zero-copy (same slot layout)."""

    tag = "rename"

    def __init__(self, mapping: dict):
        self.mapping = dict(mapping)

    def output_type(self, t):
        for old in self.mapping:
            t.index(old)
        return t.rename(self.mapping)

    def apply(self, block, in_type, out_type):
        return block.view(out_type.dtype)

    def to_json(self):
        return {"fn": self.tag, "mapping": self.mapping}

    @classmethod
    def from_json(cls, d):
        return cls(d["mapping"])


def _require_int(t, name, node_id=None):
    item = t[name]
    if item.is_collection or item.kind != INT64:
        raise TypeMismatch(f"field {name!r}", node_id, INT64, item)


@_register
class Compress(TupleFn):
    """``⟨…, key, value, …⟩`` -> ``⟨…, packed, …⟩``.

    The packed word takes the key's position; the value field is removed.
    """

    tag = "compress"

    def __init__(self, spec: RadixSpec, key="key", value="value", packed="packed"):
        self.spec, self.key, self.value, self.packed = spec, key, value, packed

    def output_type(self, t):
        _require_int(t, self.key)
        _require_int(t, self.value)
        fields = []
        for n, item in t.fields:
            if n == self.key:
                fields.append((self.packed, item))
            elif n != self.value:
                fields.append((n, item))
        return TupleType(tuple(fields))

    def apply(self, block, in_type, out_type):
        out = np.empty(len(block), dtype=out_type.dtype)
        out[self.packed] = radix.compress(block[self.key], block[self.value], self.spec)
        for n in out_type.names:
            if n != self.packed:
                out[n] = block[n]
        return out

    def to_json(self):
        return {"fn": self.tag, "spec": self.spec.to_json(), "key": self.key,
                "value": self.value, "packed": self.packed}

    @classmethod
    def from_json(cls, d):
        return cls(RadixSpec.from_json(d["spec"]), d["key"], d["value"], d["packed"])


@_register
class Unpack(TupleFn):
    """Inverse layout of :class:`Compress`; the key holds only its remainder bits.

    The value field is placed directly after the key.
    """

    tag = "unpack"

    def __init__(self, spec: RadixSpec, key="key", value="value", packed="packed"):
        self.spec, self.key, self.value, self.packed = spec, key, value, packed

    def output_type(self, t):
        _require_int(t, self.packed)
        fields = []
        for n, item in t.fields:
            if n == self.packed:
                fields += [(self.key, item), (self.value, item)]
            else:
                fields.append((n, item))
        return TupleType(tuple(fields))

    def apply(self, block, in_type, out_type):
        out = np.empty(len(block), dtype=out_type.dtype)
        rem, value = radix.unpack(block[self.packed], self.spec)
        out[self.key] = rem
        out[self.value] = value
        for n in in_type.names:
            if n != self.packed:
                out[n] = block[n]
        return out

    def to_json(self):
        return {"fn": self.tag, "spec": self.spec.to_json(), "key": self.key,
                "value": self.value, "packed": self.packed}

    @classmethod
    def from_json(cls, d):
        return cls(RadixSpec.from_json(d["spec"]), d["key"], d["value"], d["packed"])


class PyMap(TupleFn):
    """Per-tuple python function ``f(tuple) -> tuple`` with a declared output type."""

    def __init__(self, fn: Callable, out_type: TupleType | str, in_type: TupleType | str | None = None):
        self.fn = fn
        self.out_type = parse_type(out_type) if isinstance(out_type, str) else out_type
        self.in_type = parse_type(in_type) if isinstance(in_type, str) else in_type

    def output_type(self, t):
        if self.in_type is not None and self.in_type != t:
            raise TypeMismatch("map input", None, self.in_type, t)
        return self.out_type

    def apply(self, block, in_type, out_type):
        return make_block(out_type, [self.fn(row) for row in block_rows(block, in_type)])


# -- (param, tuple) -> tuple maps -------------------------------------------------


class ParamFn(Function):
    def output_type(self, param_type: TupleType, t: TupleType) -> TupleType:
        raise NotImplementedError

    def apply(self, param: np.ndarray, block: np.ndarray, in_type, out_type) -> np.ndarray:
        """``param`` is a one-row block of the parameter type."""
        raise NotImplementedError


@_register
class RecoverKey(ParamFn):
    """Adds ``param[pid] << shift`` to the key field."""

    tag = "recover_key"

    def __init__(self, spec: RadixSpec, key="key", pid="pid"):
        self.spec, self.key, self.pid = spec, key, pid

    def output_type(self, param_type, t):
        _require_int(param_type, self.pid)
        _require_int(t, self.key)
        return t

    def apply(self, param, block, in_type, out_type):
        out = block.copy()
        out[self.key] = radix.recover_key(block[self.key], int(param[self.pid][0]), self.spec)
        return out

    def to_json(self):
        return {"fn": self.tag, "spec": self.spec.to_json(), "key": self.key, "pid": self.pid}

    @classmethod
    def from_json(cls, d):
        return cls(RadixSpec.from_json(d["spec"]), d["key"], d["pid"])


@_register
class Decompress(ParamFn):
    """Unpack a compressed word and restore its dropped key bits in one step."""

    tag = "decompress"

    def __init__(self, spec: RadixSpec, key="key", value="value", packed="packed", pid="pid"):
        self.unpack = Unpack(spec, key, value, packed)
        self.spec, self.key, self.value, self.packed, self.pid = spec, key, value, packed, pid

    def output_type(self, param_type, t):
        _require_int(param_type, self.pid)
        return self.unpack.output_type(t)

    def apply(self, param, block, in_type, out_type):
        out = self.unpack.apply(block, in_type, out_type)
        out[self.key] = radix.recover_key(out[self.key], int(param[self.pid][0]), self.spec)
        return out

    def to_json(self):
        return {"fn": self.tag, "spec": self.spec.to_json(), "key": self.key,
                "value": self.value, "packed": self.packed, "pid": self.pid}

    @classmethod
    def from_json(cls, d):
        return cls(RadixSpec.from_json(d["spec"]), d["key"], d["value"], d["packed"], d["pid"])


class PyParamMap(ParamFn):
    """Per-tuple ``f(param_tuple, tuple) -> tuple``."""

    def __init__(self, fn: Callable, out_type: TupleType | str):
        self.fn = fn
        self.out_type = parse_type(out_type) if isinstance(out_type, str) else out_type

    def output_type(self, param_type, t):
        return self.out_type

    def apply(self, param, block, in_type, out_type):
        p = param.tolist()[0]
        return make_block(out_type, [self.fn(p, row) for row in block_rows(block, in_type)])


# -- predicates and bucket functions -----------------------------------------------


class PyPredicate(Function):
    def __init__(self, fn: Callable, in_type: TupleType | str | None = None):
        self.fn = fn
        self.in_type = parse_type(in_type) if isinstance(in_type, str) else in_type

    def check_predicate(self, t, node_id=None):
        if self.in_type is not None and self.in_type != t:
            raise TypeMismatch("predicate input", node_id, self.in_type, t)

    def mask(self, block):
        return np.fromiter((bool(self.fn(r)) for r in block.tolist()), dtype=bool, count=len(block))


@_register
class RadixBits(Function):
    """Bucket = ``(field >> shift) & (2**bits - 1)``, unsigned."""

    tag = "radix_bits"

    def __init__(self, field: str, shift: int, bits: int):
        self.field, self.shift, self.bits = field, int(shift), int(bits)

    @classmethod
    def for_pass(cls, spec: RadixSpec, pass_: int, field="key", packed=False):
        shift = spec.packed_shift(pass_) if packed else spec.shift(pass_)
        return cls(field, shift, spec.bits(pass_))

    @property
    def n(self) -> int:
        return 1 << self.bits

    def check_bucket(self, t, node_id=None):
        _require_int(t, self.field, node_id)

    def buckets(self, block):
        return radix.slice_bits(block[self.field], self.shift, self.bits)

    def to_json(self):
        return {"fn": self.tag, "field": self.field, "shift": self.shift, "bits": self.bits}

    @classmethod
    def from_json(cls, d):
        return cls(d["field"], d["shift"], d["bits"])


class PyBucket(Function):
    def __init__(self, fn: Callable):
        self.fn = fn

    def check_bucket(self, t, node_id=None):
        pass

    def buckets(self, block):
        return np.fromiter((self.fn(r) for r in block.tolist()), dtype=np.int64, count=len(block))


# -- reductions --------------------------------------------------------------------

_AGG_UFUNCS = {
    "sum": np.add,
    "min": np.minimum,
    "max": np.maximum,
    "any": np.logical_or,
    "all": np.logical_and,
}


class Reducer(Function):
    def check(self, t: TupleType, node_id=None):
        raise NotImplementedError

    def reduce(self, block, t) -> np.ndarray:
        """Fold a non-empty block into a one-row block of the same type."""
        raise NotImplementedError

    def reduce_by_key(self, block, t, key) -> np.ndarray:
        raise NotImplementedError


@_register
class Aggregate(Reducer):
    """Per-field associative, commutative ufunc (``sum``/``min``/``max``/``any``/``all``)."""

    tag = "aggregate"

    def __init__(self, ops: dict | None = None, **kw):
        ops = dict(ops or {}, **kw)
        for name, op in ops.items():
            if op not in _AGG_UFUNCS:
                raise ModularisError(f"unknown aggregate {op!r} for field {name!r}")
        self.ops = ops

    def check(self, t, node_id=None):
        missing = set(t.names) - set(self.ops)
        extra = set(self.ops) - set(t.names)
        if missing or extra:
            raise TypeMismatch("aggregate fields", node_id, sorted(t.names), sorted(self.ops))
        for n in t.names:
            item = t[n]
            if item.is_collection:
                raise TypeMismatch(f"aggregate over collection field {n!r}", node_id, "atom", item)

    def reduce(self, block, t):
        out = np.empty(1, dtype=block.dtype)
        for name, op in self.ops.items():
            out[name] = _AGG_UFUNCS[op].reduce(block[name])
        return out

    def reduce_by_key(self, block, t, key):
        keys = block[key]
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
        out = np.empty(len(starts), dtype=block.dtype)
        out[key] = sorted_keys[starts]
        for name, op in self.ops.items():
            out[name] = _AGG_UFUNCS[op].reduceat(block[name][order], starts)
        return out

    def to_json(self):
        return {"fn": self.tag, "ops": self.ops}

    @classmethod
    def from_json(cls, d):
        return cls(d["ops"])


def sum_of(*fields) -> Aggregate:
    return Aggregate({f: "sum" for f in fields})


class PyReducer(Reducer):
    """``f(tuple, tuple) -> tuple`` folded left to right."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def check(self, t, node_id=None):
        pass

    def reduce(self, block, t):
        rows = block_rows(block, t)
        acc = rows[0]
        for r in rows[1:]:
            acc = self.fn(acc, r)
        return make_block(t, [acc])

    def reduce_by_key(self, block, t, key):
        ki = t.index(key)
        groups: dict = {}
        for row in block_rows(block, t):
            k = row[ki]
            rest = row[:ki] + row[ki + 1:]
            groups[k] = self.fn(groups[k], rest) if k in groups else rest
        rows = [tuple(v[:ki]) + (k,) + tuple(v[ki:]) for k, v in groups.items()]
        return make_block(t, rows) if rows else empty_block(t)


# -- plan-file encoding of arbitrary param values ------------------------------------


def encode_param(value):
    from .plan import Plan  # local: plan imports this module

    if isinstance(value, Function):
        return {"$fn": value.to_json()}
    if isinstance(value, Plan):
        return {"$plan": value.to_json()}
    if isinstance(value, RadixSpec):
        return {"$radix": value.to_json()}
    if isinstance(value, TupleType):
        return {"$type": str(value)}
    if isinstance(value, dict):
        return {k: encode_param(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [encode_param(v) for v in value]
    return value


def decode_param(value):
    from .plan import Plan

    if isinstance(value, dict):
        if set(value) == {"$fn"}:
            return function_from_json(value["$fn"])
        if set(value) == {"$plan"}:
            return Plan.from_json(value["$plan"])
        if set(value) == {"$radix"}:
            return RadixSpec.from_json(value["$radix"])
        if set(value) == {"$type"}:
            return parse_type(value["$type"])
        return {k: decode_param(v) for k, v in value.items()}
    if isinstance(value, list):
        return [decode_param(v) for v in value]
    return value
