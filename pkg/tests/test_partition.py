import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modularis.errors import CompressionIllegal, HistogramMismatch, KeyOutOfDomain, SpecInvalid
from modularis.partition import (
    Partitioner,
    RadixSpec,
    brute_histogram,
    compress,
    decompress,
    local_partitioning,
    prefix_offsets,
    radix_bucket,
    unpack,
)


def test_bucket_takes_top_bits():
    spec = RadixSpec.with_local_passes(8, 3, 2)
    key = 0b101_11_010
    assert radix_bucket(key, spec, 0) == 0b101
    assert radix_bucket(key, spec, 1) == 0b11


def test_bucket_rejects_out_of_domain():
    with pytest.raises(KeyOutOfDomain):
        radix_bucket(1 << 8, RadixSpec(8, 3))


def test_spec_validation():
    with pytest.raises(SpecInvalid):
        RadixSpec(8, 9)
    with pytest.raises(SpecInvalid):
        RadixSpec.with_local_passes(8, 4, 5)


def test_compression_legality_boundary():
    assert RadixSpec(32, 0).compression_legal
    assert not RadixSpec(33, 1).compression_legal
    with pytest.raises(CompressionIllegal):
        compress(1, 1, RadixSpec(40, 10))


def test_compress_worked_example():
    spec = RadixSpec(4, 2)
    packed = compress(0b1011, 0b0110, spec)
    assert packed == (0b11 << 4) | 0b0110
    assert unpack(packed, spec) == (0b11, 0b0110)
    assert decompress(packed, 0b10, spec) == (0b1011, 0b0110)


@given(st.integers(1, 32).flatmap(lambda P: st.tuples(st.just(P), st.integers(0, P))), st.data())
@settings(max_examples=200, deadline=None)
def test_compress_roundtrip_property(pf, data):
    P, F = pf
    spec = RadixSpec(P, F)
    key = data.draw(st.integers(0, (1 << P) - 1))
    value = data.draw(st.integers(0, (1 << P) - 1))
    packed = compress(key, value, spec)
    assert decompress(packed, radix_bucket(key, spec), spec) == (key, value)


def test_top_bit_packing_stays_in_word():
    # 2P - F = 64: the packed word uses the sign bit
    spec = RadixSpec(32, 0)
    key = value = (1 << 32) - 1
    packed = compress(key, value, spec)
    assert packed < 0
    assert decompress(packed, 0, spec) == (key, value)


def test_prefix_offsets():
    assert prefix_offsets([3, 0, 2, 5]).tolist() == [0, 3, 3, 5]
    assert prefix_offsets([]).tolist() == []


def test_local_partitioning_stable_and_complete():
    rng = np.random.default_rng(3)
    data = np.arange(200, dtype=np.int64)
    buckets = rng.integers(0, 7, 200)
    parts = local_partitioning(data, brute_histogram(buckets, 7), buckets)
    assert [p for p, _ in parts] == list(range(7))
    for p, block in parts:
        assert block.tolist() == data[buckets == p].tolist()


def test_partitioner_detects_wrong_histogram():
    part = Partitioner([1, 1], np.dtype(np.int64))
    with pytest.raises(HistogramMismatch):
        part.add(np.array([5, 6]), np.array([0, 0]))
    short = Partitioner([2, 1], np.dtype(np.int64))
    short.add(np.array([5, 6]), np.array([0, 0]))
    with pytest.raises(HistogramMismatch):
        short.finish()
