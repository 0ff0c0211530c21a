import numpy as np
import pytest

from modularis.errors import FieldCollision, TypeParseError, UnknownField
from modularis.typesys import (
    Bool,
    Float64,
    Int64,
    RowVector,
    TupleType,
    concat_types,
    parse_type,
    project_type,
)


def test_parse_roundtrip_nested():
    text = "⟨pid:Int64, data:RowVector⟨k:Int64, v:Float64⟩⟩"
    t = parse_type(text)
    assert str(t) == text
    assert t["data"].element.names == ("k", "v")
    assert parse_type(str(t)) == t


def test_ascii_brackets_accepted():
    assert parse_type("<a:Int64, b:Bool>") == TupleType.of(a=Int64, b=Bool)


@pytest.mark.parametrize("bad", ["⟨a:Int32⟩", "⟨a Int64⟩", "⟨a:Int64", "⟨a:Int64, a:Int64⟩"])
def test_parse_rejects(bad):
    with pytest.raises((TypeParseError, FieldCollision)):
        parse_type(bad)


def test_dtype_is_one_slot_per_field():
    t = TupleType.of(a=Int64, b=Float64, c=Bool, d=RowVector(TupleType.of(x=Int64)))
    assert t.dtype.names == ("a", "b", "c", "d")
    assert t.row_width == 8 * len(t)
    assert t.dtype["d"] == np.dtype(object)
    assert t.collection_fields == ("d",)
    assert not t.is_flat


def test_concat_collision():
    a = TupleType.of(k=Int64, x=Int64)
    with pytest.raises(FieldCollision):
        concat_types(a, TupleType.of(k=Int64))
    assert concat_types(a, TupleType.of(y=Int64)).names == ("k", "x", "y")


def test_project_and_unknown_field():
    t = TupleType.of(a=Int64, b=Int64, c=Int64)
    assert project_type(t, ["c", "a"]).names == ("c", "a")
    with pytest.raises(UnknownField):
        t["zz"]
    with pytest.raises(UnknownField):
        t.without("zz")


def test_rename_keeps_layout():
    t = TupleType.of(a=Int64, b=Float64)
    r = t.rename({"a": "key"})
    assert r.names == ("key", "b")
    assert r.dtype.itemsize == t.dtype.itemsize
