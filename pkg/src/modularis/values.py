"""Runtime values: tuples, blocks of tuples and ``RowVector`` collections.

Operators exchange *blocks*: numpy structured arrays whose dtype is
``TupleType.dtype``.  A block of length one is a single tuple.  A
``RowVector`` pairs an element type with such an array; its storage is the
contiguous row-major buffer of the array.  Collection-valued fields hold
``RowVector`` objects in an object slot.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import TypeMismatch
from .typesys import TupleType


class RowVector:
    """Dense row-major collection of fixed-width tuples."""

    __slots__ = ("element_type", "array")

    def __init__(self, element_type: TupleType, array: np.ndarray | None = None):
        self.element_type = element_type
        if array is None:
            array = np.empty(0, dtype=element_type.dtype)
        elif array.dtype != element_type.dtype:
            raise TypeMismatch("RowVector storage", None, element_type, array.dtype)
        self.array = array

    @classmethod
    def from_rows(cls, element_type: TupleType, rows: Iterable) -> "RowVector":
        return cls(element_type, make_block(element_type, rows))

    def __len__(self):
        return len(self.array)

    @property
    def nbytes(self) -> int:
        return len(self.array) * self.element_type.row_width

    def rows(self) -> list:
        return block_rows(self.array, self.element_type)

    def column(self, name: str) -> np.ndarray:
        return self.array[name]

    def __eq__(self, other):
        if not isinstance(other, RowVector):
            return NotImplemented
        return self.element_type == other.element_type and self.rows() == other.rows()

    __hash__ = None

    def __repr__(self):
        shown = self.rows()[:6]
        more = ", …" if len(self) > 6 else ""
        return f"RV{self.element_type}[{', '.join(map(str, shown))}{more}]"


def empty_block(t: TupleType, n: int = 0) -> np.ndarray:
    return np.empty(n, dtype=t.dtype) if n else np.zeros(0, dtype=t.dtype)


def make_block(t: TupleType, rows: Iterable) -> np.ndarray:
    """Build a block from python rows (tuples in field order, or dicts).

    Nested collection values may be given as ``RowVector`` or as a list of
    rows of the element type.
    """
    rows = list(rows)
    out = np.zeros(len(rows), dtype=t.dtype)
    names = t.names
    for i, row in enumerate(rows):
        if isinstance(row, dict):
            row = tuple(row[n] for n in names)
        elif isinstance(row, np.void):
            row = tuple(row)
        if len(row) != len(names):
            raise TypeMismatch("row arity", None, len(names), len(row))
        for (name, item), value in zip(t.fields, row):
            if item.is_collection and not isinstance(value, RowVector):
                value = RowVector.from_rows(item.element, value)
            elif item.is_collection and value.element_type != item.element:
                raise TypeMismatch(f"collection field {name!r}", None, item.element, value.element_type)
            out[name][i] = value
    return out


def block_rows(block: np.ndarray, t: TupleType | None = None) -> list:
    """Block -> list of python tuples (atoms as python scalars)."""
    if t is None or t.is_flat:
        return block.tolist()
    return [tuple(row) for row in block]


def from_columns(t: TupleType, columns: dict, n: int | None = None) -> np.ndarray:
    if n is None:
        n = len(next(iter(columns.values()))) if columns else 0
    out = np.empty(n, dtype=t.dtype)
    for name in t.names:
        out[name] = columns[name]
    return out


def view_as(block: np.ndarray, t: TupleType) -> np.ndarray:
    """Reinterpret a block under a layout-compatible type (same slots, new names)."""
    return block.view(t.dtype)


def concat_blocks(t: TupleType, blocks: Sequence[np.ndarray]) -> np.ndarray:
    if not blocks:
        return empty_block(t)
    if len(blocks) == 1:
        return blocks[0]
    return np.concatenate(blocks)


def merge_blocks(t: TupleType, parts: Sequence[np.ndarray]) -> np.ndarray:
    """Column-concatenate equally long blocks with disjoint field names."""
    n = len(parts[0]) if parts else 0
    out = np.empty(n, dtype=t.dtype)
    for part in parts:
        for name in part.dtype.names:
            out[name] = part[name]
    return out


def one_tuple(t: TupleType, *values) -> np.ndarray:
    return make_block(t, [values])
