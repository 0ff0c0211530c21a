"""Recursive tuple/collection type grammar.

A tuple type is an ordered list of named items; an item is either an atom
(``Int64``, ``Float64``, ``Bool``) or a collection of tuples.  The only
collection format is ``RowVector``: a dense row-major array of fixed-width
rows.  Every field occupies one 8-byte slot, laid out in declaration order,
so a tuple type maps one-to-one onto a numpy structured dtype.

Textual notation::

    ⟨k:Int64, v:Float64⟩
    ⟨pid:Int64, data:RowVector⟨k:Int64⟩⟩

ASCII ``<`` / ``>`` are accepted in place of the angle brackets.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Union

import numpy as np

from .errors import FieldCollision, TypeMismatch, TypeParseError, UnknownField

INT64 = "Int64"
FLOAT64 = "Float64"
BOOL = "Bool"
ATOM_KINDS = (INT64, FLOAT64, BOOL)

ROW_VECTOR = "RowVector"
COLLECTION_FORMATS = (ROW_VECTOR,)

SLOT = 8

_NUMPY_FORMATS = {INT64: "<i8", FLOAT64: "<f8", BOOL: "?"}


@dataclass(frozen=True)
class AtomType:
    kind: str

    def __post_init__(self):
        if self.kind not in ATOM_KINDS:
            raise TypeParseError(f"unknown atom kind {self.kind!r}")

    def __str__(self):
        return self.kind

    @property
    def is_collection(self):
        return False


@dataclass(frozen=True)
class CollectionType:
    element: "TupleType"
    format: str = ROW_VECTOR

    def __post_init__(self):
        if self.format not in COLLECTION_FORMATS:
            raise TypeParseError(f"unknown collection format {self.format!r}")
        if not isinstance(self.element, TupleType):
            raise TypeParseError("collection elements must be tuple types")

    def __str__(self):
        return f"{self.format}{self.element}"

    @property
    def is_collection(self):
        return True


ItemType = Union[AtomType, CollectionType]

Int64 = AtomType(INT64)
Float64 = AtomType(FLOAT64)
Bool = AtomType(BOOL)


def RowVector(element: "TupleType") -> CollectionType:
    return CollectionType(element, ROW_VECTOR)


@dataclass(frozen=True)
class TupleType:
    """Ordered, uniquely named list of ``(name, ItemType)`` pairs."""

    fields: tuple = ()

    def __post_init__(self):
        fields = tuple((str(n), t) for n, t in self.fields)
        object.__setattr__(self, "fields", fields)
        seen = set()
        for name, item in fields:
            if not isinstance(item, (AtomType, CollectionType)):
                raise TypeParseError(f"field {name!r} has non-item type {item!r}")
            if name in seen:
                raise FieldCollision(f"duplicate field name {name!r}")
            seen.add(name)

    @classmethod
    def of(cls, **fields: ItemType) -> "TupleType":
        return cls(tuple(fields.items()))

    @property
    def names(self) -> tuple:
        return tuple(n for n, _ in self.fields)

    @property
    def types(self) -> tuple:
        return tuple(t for _, t in self.fields)

    def __len__(self):
        return len(self.fields)

    def __contains__(self, name):
        return name in self._index

    def __getitem__(self, name: str) -> ItemType:
        try:
            return self.fields[self._index[name]][1]
        except KeyError:
            raise UnknownField(f"no field {name!r} in {self}") from None

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownField(f"no field {name!r} in {self}") from None

    @cached_property
    def _index(self):
        return {n: i for i, (n, _) in enumerate(self.fields)}

    @cached_property
    def dtype(self) -> np.dtype:
        """Structured dtype: one 8-byte slot per field, declaration order."""
        formats = [
            "O" if t.is_collection else _NUMPY_FORMATS[t.kind] for t in self.types
        ]
        return np.dtype(
            {
                "names": list(self.names),
                "formats": formats,
                "offsets": [SLOT * i for i in range(len(formats))],
                "itemsize": SLOT * len(formats),
            }
        )

    @property
    def row_width(self) -> int:
        return SLOT * len(self.fields)

    @cached_property
    def collection_fields(self) -> tuple:
        return tuple(n for n, t in self.fields if t.is_collection)

    @cached_property
    def is_flat(self) -> bool:
        return not self.collection_fields

    def rename(self, mapping: dict) -> "TupleType":
        return TupleType(tuple((mapping.get(n, n), t) for n, t in self.fields))

    def without(self, *names: str) -> "TupleType":
        for n in names:
            self.index(n)
        return TupleType(tuple((n, t) for n, t in self.fields if n not in names))

    def __str__(self):
        return "⟨" + ", ".join(f"{n}:{t}" for n, t in self.fields) + "⟩"

    def __repr__(self):
        return f"TupleType({self})"


HISTOGRAM_TYPE = TupleType.of(bucketId=Int64, count=Int64)


def check_field_disjoint(a: TupleType, b: TupleType) -> bool:
    return not (set(a.names) & set(b.names))


def concat_types(a: TupleType, b: TupleType) -> TupleType:
    shared = set(a.names) & set(b.names)
    if shared:
        raise FieldCollision(f"fields {sorted(shared)} occur in both {a} and {b}")
    return TupleType(a.fields + b.fields)


def concat_all(types: Iterable[TupleType]) -> TupleType:
    out = TupleType()
    for t in types:
        out = concat_types(out, t)
    return out


def project_type(t: TupleType, names: Iterable[str]) -> TupleType:
    return TupleType(tuple((n, t[n]) for n in names))


def require_atom(t: TupleType, name: str, kinds=ATOM_KINDS, node_id=None) -> AtomType:
    item = t[name]
    if item.is_collection or item.kind not in kinds:
        raise TypeMismatch(f"field {name!r}", node_id, "/".join(kinds), item)
    return item


# -- textual notation ---------------------------------------------------------

_TOKEN = re.compile(r"\s*(⟨|⟩|<|>|:|,|[A-Za-z_][A-Za-z0-9_]*)")


def _tokenize(text):
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise TypeParseError(f"unexpected character at {pos} in {text!r}")
        tok = m.group(1)
        out.append({"<": "⟨", ">": "⟩"}.get(tok, tok))
        pos = m.end()
    return out


def parse_type(text: str) -> TupleType:
    """Parse ``⟨name:Kind, …⟩`` into a :class:`TupleType`."""
    tokens = _tokenize(text)
    result, pos = _parse_tuple(tokens, 0)
    if pos != len(tokens):
        raise TypeParseError(f"trailing input in {text!r}")
    return result


def parse_item(text: str) -> ItemType:
    tokens = _tokenize(text)
    item, pos = _parse_item(tokens, 0)
    if pos != len(tokens):
        raise TypeParseError(f"trailing input in {text!r}")
    return item


def _expect(tokens, pos, tok):
    if pos >= len(tokens) or tokens[pos] != tok:
        got = tokens[pos] if pos < len(tokens) else "end of input"
        raise TypeParseError(f"expected {tok!r}, got {got!r}")
    return pos + 1


def _parse_tuple(tokens, pos):
    pos = _expect(tokens, pos, "⟨")
    fields = []
    if pos < len(tokens) and tokens[pos] == "⟩":
        return TupleType(), pos + 1
    while True:
        if pos >= len(tokens):
            raise TypeParseError("unterminated tuple type")
        name = tokens[pos]
        pos = _expect(tokens, pos + 1, ":")
        item, pos = _parse_item(tokens, pos)
        fields.append((name, item))
        if pos < len(tokens) and tokens[pos] == ",":
            pos += 1
            continue
        pos = _expect(tokens, pos, "⟩")
        return TupleType(tuple(fields)), pos


def _parse_item(tokens, pos):
    if pos >= len(tokens):
        raise TypeParseError("expected item type")
    tok = tokens[pos]
    if tok in ATOM_KINDS:
        return AtomType(tok), pos + 1
    if tok in COLLECTION_FORMATS:
        element, pos = _parse_tuple(tokens, pos + 1)
        return CollectionType(element, tok), pos
    raise TypeParseError(f"unknown item type {tok!r}")
