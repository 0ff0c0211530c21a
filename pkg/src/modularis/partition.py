"""Radix partitioning: bucket bit slices, key compression, prefix offsets.

Keys come from a dense domain ``[0, 2**P)``.  The first pass (the network
pass) uses the ``F`` most significant bits of the ``P``-bit key as the
partition id, so every key of a partition shares its top ``F`` bits.  Later
passes take the next lower bit slices.

Compression drops those top ``F`` bits and stores the remaining ``P - F``
key bits above a ``P``-bit value::

    packed = (key & (2**(P-F) - 1)) << P | value

which fits one 64-bit word iff ``2*P - F <= 64``.  The dropped bits come
back from the partition id: ``key = pid << (P - F) | remainder``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    CompressionIllegal,
    HistogramMismatch,
    KeyOutOfDomain,
    SpecInvalid,
    ValueOutOfDomain,
)

_U64 = np.uint64


@dataclass(frozen=True)
class RadixSpec:
    """Bit layout of a multi-pass radix partitioning.

    ``pass_bits[0]`` is the network fan-out ``F``; further entries are the
    bit counts of local passes, consumed from the top of the key downwards.
    """

    P: int
    F: int
    pass_bits: tuple = field(default=())

    def __post_init__(self):
        bits = tuple(int(b) for b in self.pass_bits) or (self.F,)
        object.__setattr__(self, "pass_bits", bits)
        if not 0 < self.P <= 64:
            raise SpecInvalid(f"P must be in (0, 64], got {self.P}")
        if not 0 <= self.F <= self.P:
            raise SpecInvalid(f"need 0 <= F <= P, got F={self.F}, P={self.P}")
        if bits[0] != self.F:
            raise SpecInvalid(f"first pass must use F={self.F} bits, got {bits[0]}")
        if any(b < 0 for b in bits) or sum(bits) > self.P:
            raise SpecInvalid(f"pass bits {bits} exceed key width {self.P}")

    @classmethod
    def with_local_passes(cls, P, F, *local_bits):
        return cls(P, F, (F,) + tuple(local_bits))

    @property
    def fanout(self) -> int:
        return 1 << self.F

    @property
    def remainder_bits(self) -> int:
        return self.P - self.F

    @property
    def compression_legal(self) -> bool:
        return 2 * self.P - self.F <= 64

    @property
    def passes(self) -> int:
        return len(self.pass_bits)

    def bits(self, pass_: int) -> int:
        return self.pass_bits[pass_]

    def shift(self, pass_: int) -> int:
        """Position of the lowest key bit used by ``pass_``."""
        return self.P - sum(self.pass_bits[: pass_ + 1])

    def packed_shift(self, pass_: int) -> int:
        """Same slice, addressed inside a compressed word (passes >= 1 only)."""
        if pass_ == 0:
            raise ValueError("the network pass bits are not stored in packed words")
        return self.P + self.shift(pass_)

    def to_json(self):
        return {"P": self.P, "F": self.F, "passBits": list(self.pass_bits)}

    @classmethod
    def from_json(cls, d):
        return cls(int(d["P"]), int(d["F"]), tuple(d.get("passBits", ())))


# Design default for the desk-scale join benchmark.
DEFAULT_JOIN_RADIX = RadixSpec.with_local_passes(27, 10, 8)


def _check_domain(values, bits, exc, what):
    arr = np.asarray(values)
    if arr.size and (arr.min() < 0 or (bits < 64 and arr.max() >= (1 << bits))):
        raise exc(f"{what} outside [0, 2**{bits})")


def radix_bucket(key, spec: RadixSpec, pass_: int = 0):
    """Bucket id of ``key`` (scalar or array) for the given pass."""
    _check_domain(key, spec.P, KeyOutOfDomain, "key")
    mask = (1 << spec.bits(pass_)) - 1
    out = (np.asarray(key, dtype=np.int64) >> spec.shift(pass_)) & mask
    return int(out) if np.ndim(out) == 0 else out


def slice_bits(words: np.ndarray, shift: int, bits: int) -> np.ndarray:
    """``(words >> shift) & (2**bits - 1)`` treating int64 words as unsigned."""
    u = np.asarray(words, dtype=np.int64).view(_U64)
    if shift >= 64:
        return np.zeros(u.shape, dtype=np.int64)
    return ((u >> _U64(shift)) & _mask(bits)).astype(np.int64)


def _mask(bits):
    return _U64((1 << bits) - 1)


def compress(key, value, spec: RadixSpec):
    """Pack key remainder and value into one 64-bit word (returned as int64)."""
    if not spec.compression_legal:
        raise CompressionIllegal(
            f"2*P - F = {2 * spec.P - spec.F} > 64 (P={spec.P}, F={spec.F})"
        )
    _check_domain(key, spec.P, KeyOutOfDomain, "key")
    _check_domain(value, spec.P, ValueOutOfDomain, "value")
    k = np.atleast_1d(np.asarray(key, dtype=np.int64)).view(_U64)
    v = np.atleast_1d(np.asarray(value, dtype=np.int64)).view(_U64)
    packed = v.copy()
    if spec.remainder_bits:
        packed |= (k & _mask(spec.remainder_bits)) << _U64(spec.P)
    packed = packed.view(np.int64)
    return int(packed[0]) if np.ndim(key) == 0 else packed


def unpack(packed, spec: RadixSpec):
    """Split a packed word into ``(key_remainder, value)``."""
    words = np.atleast_1d(np.asarray(packed, dtype=np.int64)).view(_U64)
    value = (words & _mask(spec.P)).view(np.int64)
    if spec.remainder_bits:
        rem = ((words >> _U64(spec.P)) & _mask(spec.remainder_bits)).view(np.int64)
    else:
        rem = np.zeros_like(value)
    if np.ndim(packed) == 0:
        return int(rem[0]), int(value[0])
    return rem, value


def recover_key(remainder, partition_id, spec: RadixSpec):
    """Shift the partition id back above the remainder bits."""
    pid = np.asarray(partition_id, dtype=np.int64)
    if pid.size and (pid.min() < 0 or pid.max() >= spec.fanout):
        raise KeyOutOfDomain(f"partition id outside [0, {spec.fanout})")
    out = (pid << spec.remainder_bits) | np.asarray(remainder, dtype=np.int64)
    return int(out) if np.ndim(out) == 0 else out


def decompress(packed, partition_id, spec: RadixSpec):
    """Inverse of :func:`compress` given the network partition id."""
    rem, value = unpack(packed, spec)
    return recover_key(rem, partition_id, spec), value


def prefix_offsets(counts: Sequence[int]) -> np.ndarray:
    """Exclusive prefix sum."""
    counts = np.asarray(counts, dtype=np.int64)
    out = np.zeros(len(counts), dtype=np.int64)
    if len(counts) > 1:
        np.cumsum(counts[:-1], out=out[1:])
    return out


def brute_histogram(buckets: np.ndarray, n: int) -> np.ndarray:
    buckets = np.asarray(buckets, dtype=np.int64)
    return np.bincount(buckets, minlength=n)[:n] if len(buckets) else np.zeros(n, np.int64)


class Partitioner:
    """Stable scatter of tuples into ``n`` contiguous partitions.

    Extents are reserved up front from an exact histogram; every write is
    bounds-checked against its bucket's extent.
    """

    def __init__(self, counts, dtype: np.dtype):
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.ndim != 1 or (self.counts < 0).any():
            raise HistogramMismatch("histogram counts must be a non-negative vector")
        self.n = len(self.counts)
        self.offsets = prefix_offsets(self.counts)
        self.ends = self.offsets + self.counts
        self.cursor = self.offsets.copy()
        self.buffer = np.empty(int(self.counts.sum()), dtype=dtype)

    def add(self, block: np.ndarray, buckets: np.ndarray) -> None:
        if not len(block):
            return
        if buckets.min() < 0 or buckets.max() >= self.n:
            raise HistogramMismatch("bucket id outside histogram range")
        counts = np.bincount(buckets, minlength=self.n)
        if (self.cursor + counts > self.ends).any():
            bad = int(np.argmax(self.cursor + counts > self.ends))
            raise HistogramMismatch(f"partition {bad} overflows its reserved extent")
        order = np.argsort(buckets, kind="stable")
        sorted_b = buckets[order]
        block_starts = prefix_offsets(counts)
        dest = self.cursor[sorted_b] + (np.arange(len(order)) - block_starts[sorted_b])
        self.buffer[dest] = block[order]
        self.cursor += counts

    def finish(self) -> list:
        if (self.cursor != self.ends).any():
            bad = int(np.argmax(self.cursor != self.ends))
            raise HistogramMismatch(
                f"partition {bad} received {self.cursor[bad] - self.offsets[bad]} "
                f"tuples, histogram says {self.counts[bad]}"
            )
        return [self.buffer[o:e] for o, e in zip(self.offsets.tolist(), self.ends.tolist())]


def local_partitioning(data: np.ndarray, hist, buckets: np.ndarray) -> list:
    """Partition ``data`` by precomputed bucket ids into ``len(hist)`` blocks.

    Returns ``[(partition_id, block), ...]`` in ascending id, including empty
    partitions; within a block the input order is preserved.
    """
    part = Partitioner(hist, data.dtype)
    part.add(data, np.asarray(buckets, dtype=np.int64))
    return list(enumerate(part.finish()))
