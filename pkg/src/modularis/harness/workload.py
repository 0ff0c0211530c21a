"""Synthetic relations and their on-disk format.

A relation file holds fixed-width rows of little-endian 8-byte fields in
type order; the default ``⟨key, payload⟩`` relations are 16 bytes per row.
A ``workload.json`` manifest next to the files records the generating spec
and each relation's type.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import SpecInvalid
from ..typesys import Int64, TupleType, parse_type

KEY_PAYLOAD = TupleType.of(key=Int64, payload=Int64)
MANIFEST = "workload.json"


@dataclass(frozen=True)
class WorkloadSpec:
    """``correspondence``: ``one-to-one``, ``fanout:k`` or ``random``.

    * one-to-one: every relation's keys are a permutation of ``[0, n)``.
    * fanout:k: keys cover ``[0, n/k)`` with multiplicity k in every
      relation, so joining two relations yields ``k * n`` rows while the
      inputs stay at n rows.
    * random: keys uniform in ``[0, n)``.

    Payloads are uniform in ``[0, 2**bits)`` so a key/payload pair can
    always be compressed into one word.
    """

    tuples: int
    bits: int = 27
    correspondence: str = "one-to-one"
    seed: int = 0
    relations: int = 2

    def __post_init__(self):
        if self.tuples < 0 or self.relations < 1:
            raise SpecInvalid("need tuples >= 0 and at least one relation")
        if not 0 < self.bits <= 62:
            raise SpecInvalid(f"bits must be in (0, 62], got {self.bits}")
        if self.tuples > (1 << self.bits):
            raise SpecInvalid(f"{self.tuples} keys do not fit a {self.bits}-bit dense domain")
        k = self.fanout
        if k is not None and (k < 1 or self.tuples % k):
            raise SpecInvalid(f"fanout {k} must divide the tuple count {self.tuples}")
        if k is None and self.correspondence not in ("one-to-one", "random"):
            raise SpecInvalid(f"unknown correspondence {self.correspondence!r}")

    @property
    def fanout(self):
        m = re.fullmatch(r"fanout:(\d+)", self.correspondence)
        return int(m.group(1)) if m else None

    def names(self) -> list:
        if self.relations == 2:
            return ["left", "right"]
        return [f"r{i}" for i in range(self.relations)]


def parse_correspondence(text: str) -> str:
    text = text.strip().lower().replace("_", "-")
    if text in ("one-to-one", "onetoone", "1:1"):
        return "one-to-one"
    if text == "random" or re.fullmatch(r"fanout:\d+", text):
        return text
    raise SpecInvalid(f"unknown correspondence {text!r}")


def make_keys(spec: WorkloadSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.tuples
    if spec.correspondence == "one-to-one":
        return rng.permutation(n).astype(np.int64)
    if spec.correspondence == "random":
        return rng.integers(0, max(n, 1), n, dtype=np.int64)
    k = spec.fanout
    return rng.permutation(np.repeat(np.arange(n // k, dtype=np.int64), k))


def generate(spec: WorkloadSpec) -> dict:
    """name -> structured array of ``⟨key, payload⟩``; deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    out = {}
    for name in spec.names():
        rel = np.empty(spec.tuples, dtype=KEY_PAYLOAD.dtype)
        rel["key"] = make_keys(spec, rng)
        rel["payload"] = rng.integers(0, 1 << spec.bits, spec.tuples, dtype=np.int64)
        out[name] = rel
    return out


def write_relation(path, rows: np.ndarray) -> None:
    cols = [np.asarray(rows[n]).astype("<i8", copy=False) if rows.dtype[n] != np.float64
            else np.asarray(rows[n]).astype("<f8", copy=False) for n in rows.dtype.names]
    raw = np.empty((len(rows), len(cols)), dtype="<i8")
    for i, c in enumerate(cols):
        raw[:, i] = c.view("<i8")
    Path(path).write_bytes(raw.tobytes())


def read_relation(path, t: TupleType = KEY_PAYLOAD) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<i8")
    width = len(t)
    if raw.size % width:
        raise SpecInvalid(f"{path}: size is not a multiple of the {width * 8}-byte row")
    raw = raw.reshape(-1, width)
    out = np.empty(len(raw), dtype=t.dtype)
    for i, (name, item) in enumerate(t.fields):
        col = np.ascontiguousarray(raw[:, i])
        if item.kind == "Float64":
            out[name] = col.view("<f8")
        elif item.kind == "Bool":
            out[name] = col != 0
        else:
            out[name] = col
    return out


def write_workload(out_dir, relations: dict, spec: WorkloadSpec | None = None, types: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, rows in relations.items():
        write_relation(out / f"{name}.bin", rows)
        t = (types or {}).get(name) or _type_of(rows)
        entries.append({"name": name, "file": f"{name}.bin", "type": str(t), "rows": len(rows)})
    manifest = {"spec": asdict(spec) if spec else None, "relations": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, ensure_ascii=False))
    return out


def _type_of(rows: np.ndarray) -> TupleType:
    kinds = {np.dtype("<i8"): "Int64", np.dtype("<f8"): "Float64", np.dtype("?"): "Bool"}
    return parse_type("⟨" + ", ".join(f"{n}:{kinds[rows.dtype[n]]}" for n in rows.dtype.names) + "⟩")


def read_workload(in_dir) -> dict:
    """name -> structured array, in manifest order."""
    d = Path(in_dir)
    manifest = json.loads((d / MANIFEST).read_text())
    return {e["name"]: read_relation(d / e["file"], parse_type(e["type"])) for e in manifest["relations"]}
