"""Simulated one-sided RMA transport and the network sub-operators.

R worker contexts run as threads of one process.  A *window* is a numpy
buffer owned by one rank; other ranks write into it with offset-addressed
puts.  Offsets come from histograms, so senders never coordinate during the
transfer itself: each sender owns a disjoint region of every window it
writes to.  Fences are barriers that close an epoch; the owner may read a
window only after the fence that closes the epoch the puts happened in.

All collectives (allreduce, allgather, window creation, fence) go through
:meth:`Transport.collective`, which also checks that every rank entered the
same collective.  A rank that never arrives trips the barrier timeout and
surfaces as :class:`Deadlock`.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CollectiveMismatch,
    Deadlock,
    EpochViolation,
    ExecutionError,
    HistogramMismatch,
    ModularisError,
    RegionViolation,
    WorkerAborted,
    WorkerPanic,
)
from .operators import (
    FACTORIES,
    Operator,
    PhaseTimer,
    drain,
    histogram_block,
    partition_block,
    read_histogram,
    run_plan,
)
from .partition import prefix_offsets
from .values import concat_blocks

DEFAULT_PUT_BATCH = 2048
DEFAULT_TIMEOUT = 300.0


@dataclass
class EngineConfig:
    put_batch: int = DEFAULT_PUT_BATCH
    strict_epochs: bool = False
    timeout: float = DEFAULT_TIMEOUT

    def to_json(self):
        return {"putBatch": self.put_batch, "strictEpochs": self.strict_epochs}


class TransportMetrics:
    """Communication counters, safe for concurrent increments.

    ``bytes_put`` / ``tuples_put`` are kept per sending rank; collectives and
    shuffled relations are counted once per logical operation, not per rank.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes_put: dict = {}
        self.tuples_put: dict = {}
        self.windows_allocated = 0
        self.collective_calls = 0
        self.relations_shuffled = 0
        self.puts = 0

    def add_put(self, rank, rows, nbytes):
        with self._lock:
            self.bytes_put[rank] = self.bytes_put.get(rank, 0) + nbytes
            self.tuples_put[rank] = self.tuples_put.get(rank, 0) + rows
            self.puts += 1

    def bump(self, name, k=1):
        with self._lock:
            setattr(self, name, getattr(self, name) + k)

    @property
    def total_bytes(self):
        return sum(self.bytes_put.values())

    @property
    def total_tuples(self):
        return sum(self.tuples_put.values())

    def to_json(self):
        return {
            "bytesPut": self.total_bytes,
            "tuplesPut": self.total_tuples,
            "windowsAllocated": self.windows_allocated,
            "relationsShuffled": self.relations_shuffled,
            "collectiveCalls": self.collective_calls,
        }


class RunStats:
    """Everything a run records: counters, per-rank phase timers, transports."""

    def __init__(self):
        self.metrics = TransportMetrics()
        self.driver_timer = PhaseTimer()
        self.rank_timers: list = []
        self.transports: list = []
        self._lock = threading.Lock()

    def add_rank_timers(self, timers):
        with self._lock:
            self.rank_timers.append(list(timers))

    def phase_times(self) -> dict:
        """Per phase: driver time plus, per executor invocation, the max over ranks."""
        out = dict(self.driver_timer.totals)
        for timers in self.rank_timers:
            phases = set().union(*(t.totals for t in timers)) if timers else set()
            for ph in phases:
                out[ph] = out.get(ph, 0.0) + max(t.totals.get(ph, 0.0) for t in timers)
        return out


class Window:
    """One rank's RMA buffer for a single exchange, with per-sender regions."""

    def __init__(self, owner: int, nrows: int, dtype, epoch: int, strict: bool):
        self.owner = owner
        self.buffer = np.empty(nrows, dtype=dtype)
        self.put_epoch = epoch
        self.strict = strict
        self.regions: list = []  # (sender, start, stop)
        self._cursor: dict = {}
        self._lock = threading.Lock()

    @property
    def nbytes(self):
        return self.buffer.nbytes

    def register(self, sender, start, stop):
        if not 0 <= start <= stop <= len(self.buffer):
            raise RegionViolation(f"region [{start}, {stop}) outside window of {len(self.buffer)} rows")
        with self._lock:
            if self.strict and start < stop:
                for s, a, b in self.regions:
                    if a < stop and start < b:
                        raise RegionViolation(
                            f"rank {sender} region [{start}, {stop}) overlaps rank {s} [{a}, {b}) "
                            f"in window of rank {self.owner}"
                        )
            self.regions.append((sender, start, stop))
            self._cursor[(sender, start)] = start

    def put(self, sender, region_start, region_stop, rows, epoch):
        if self.strict and epoch != self.put_epoch:
            raise EpochViolation(f"put in epoch {epoch}, window open for epoch {self.put_epoch}")
        key = (sender, region_start)
        at = self._cursor[key]
        end = at + len(rows)
        if end > region_stop:
            raise HistogramMismatch(
                f"rank {sender} overflows its region [{region_start}, {region_stop}) "
                f"in window of rank {self.owner}"
            )
        self.buffer[at:end] = rows
        self._cursor[key] = end

    def filled(self, sender, region_start):
        return self._cursor[(sender, region_start)]

    def read(self, rank, epoch):
        if rank != self.owner:
            raise RegionViolation(f"rank {rank} read the window of rank {self.owner}")
        if self.strict and epoch <= self.put_epoch:
            raise EpochViolation("window read before the closing fence of its epoch")
        return self.buffer


class Transport:
    """Shared state of the R ranks of one executor invocation."""

    def __init__(self, R: int, config: EngineConfig | None = None, metrics: TransportMetrics | None = None):
        self.R = R
        self.config = config or EngineConfig()
        self.metrics = metrics or TransportMetrics()
        self._barrier = threading.Barrier(R, timeout=self.config.timeout)
        self._slots = [None] * R
        self.aborted = False
        self.windows: list = []

    def abort(self):
        self.aborted = True
        self._barrier.abort()

    def _wait(self):
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            if self.aborted:
                raise WorkerAborted("a peer rank failed") from None
            self.aborted = True
            raise Deadlock(f"collective did not complete within {self.config.timeout}s") from None

    def collective(self, rank: int, tag, value=None) -> list:
        """All ranks deposit a value; each gets the list of values in rank order."""
        self._slots[rank] = (tag, value)
        self._wait()
        got = list(self._slots)
        self._wait()
        if rank == 0:
            self.metrics.bump("collective_calls")
        tags = {t for t, _ in got}
        if len(tags) != 1:
            raise CollectiveMismatch(f"ranks entered different collectives: {[t for t, _ in got]}")
        return [v for _, v in got]


class RankContext:
    """A worker's view of the cluster: its rank, R, and the transport."""

    def __init__(self, rank: int, transport: Transport):
        self.rank = rank
        self.transport = transport
        self.epoch = 0

    @property
    def R(self):
        return self.transport.R

    @property
    def metrics(self):
        return self.transport.metrics

    def fence(self):
        self.transport.collective(self.rank, ("fence", self.epoch))
        self.epoch += 1

    def all_reduce(self, counts: np.ndarray) -> np.ndarray:
        counts = np.asarray(counts, dtype=np.int64)
        vals = self.transport.collective(self.rank, ("allreduce", len(counts)), counts)
        return np.sum(vals, axis=0)

    def all_gather(self, value, tag="allgather") -> list:
        return self.transport.collective(self.rank, (tag,), value)


class ExecContext:
    """Execution context threaded through every operator of a run."""

    def __init__(self, config: EngineConfig | None = None, stats: RunStats | None = None,
                 cluster: RankContext | None = None, timer: PhaseTimer | None = None):
        self.config = config or EngineConfig()
        self.stats = stats or RunStats()
        if cluster is None:
            t = Transport(1, self.config, self.stats.metrics)
            self.stats.transports.append(t)
            cluster = RankContext(0, t)
        self.cluster = cluster
        self.timer = timer if timer is not None else self.stats.driver_timer

    def for_rank(self, rank_ctx: RankContext, timer: PhaseTimer) -> "ExecContext":
        return ExecContext(self.config, self.stats, rank_ctx, timer)


# -- collectives as plain functions ------------------------------------------------------


def all_reduce_histogram(local, ctx: RankContext) -> np.ndarray:
    """Elementwise sum of every rank's histogram counts."""
    return ctx.all_reduce(local)


def fence(ctx: RankContext) -> None:
    ctx.fence()


def owner_of(p, R):
    return p % R


def exchange_layout(local_all: np.ndarray, R: int):
    """Window sizes and (partition, sender) write offsets.

    ``local_all[s, p]`` is sender s's count for partition p.  Partition p
    lives on rank ``p mod R``; a window stores its owned partitions in
    ascending id, and within a partition the senders' regions follow in
    ascending rank order.  Returns ``(window_rows[R], part_start[n],
    offsets[s, p])`` with offsets relative to the owner's window.
    """
    local_all = np.asarray(local_all, dtype=np.int64)
    n = local_all.shape[1]
    glob = local_all.sum(axis=0)
    owners = np.arange(n) % R
    part_start = np.zeros(n, dtype=np.int64)
    window_rows = np.zeros(R, dtype=np.int64)
    for r in range(R):
        owned = np.flatnonzero(owners == r)
        part_start[owned] = prefix_offsets(glob[owned])
        window_rows[r] = glob[owned].sum()
    sender_prefix = np.zeros_like(local_all)
    if len(local_all) > 1:
        np.cumsum(local_all[:-1], axis=0, out=sender_prefix[1:])
    return window_rows, part_start, part_start[None, :] + sender_prefix


class _Sender:
    """Per-destination put buffers of B tuples, flushed when full."""

    def __init__(self, rank_ctx, windows, regions, batch, itemsize):
        self.ctx = rank_ctx
        self.windows = windows      # destination partition -> Window
        self.regions = regions      # partition -> (start, stop) of our region
        self.batch = max(1, int(batch))
        self.itemsize = itemsize
        self.pending: dict = {}
        self.counts: dict = {}

    def add(self, p, rows):
        self.pending.setdefault(p, []).append(rows)
        c = self.counts.get(p, 0) + len(rows)
        self.counts[p] = c
        if c >= self.batch:
            buf = np.concatenate(self.pending[p]) if len(self.pending[p]) > 1 else self.pending[p][0]
            full = (len(buf) // self.batch) * self.batch
            for i in range(0, full, self.batch):
                self._put(p, buf[i:i + self.batch])
            rest = buf[full:]
            self.pending[p] = [rest] if len(rest) else []
            self.counts[p] = len(rest)

    def flush(self):
        for p, parts in self.pending.items():
            if parts:
                self._put(p, np.concatenate(parts) if len(parts) > 1 else parts[0])
        self.pending.clear()
        self.counts.clear()

    def _put(self, p, rows):
        start, stop = self.regions[p]
        self.windows[p].put(self.ctx.rank, start, stop, rows, self.ctx.epoch)
        self.ctx.metrics.add_put(self.ctx.rank, len(rows), len(rows) * self.itemsize)


def exchange_blocks(blocks, buckets_of, n, local_counts, global_counts, ctx: RankContext,
                    config: EngineConfig, dtype, wire=None):
    """Shuffle tuples so partition p ends up on rank ``p mod R``.

    ``blocks`` is an iterable of data blocks, ``buckets_of(block)`` gives their
    partition ids and ``wire(block)`` (optional) converts a block to the
    transferred representation of dtype ``dtype``.  Returns
    ``[(pid, block), ...]`` for the owned partitions in ascending pid.
    """
    R, rank = ctx.R, ctx.rank
    local_all = np.stack(ctx.all_gather(np.asarray(local_counts, dtype=np.int64), ("hist", n)))
    if (local_all.sum(axis=0) != global_counts).any():
        raise HistogramMismatch("global histogram is not the sum of the local histograms")
    window_rows, part_start, offsets = exchange_layout(local_all, R)
    glob = np.asarray(global_counts, dtype=np.int64)

    win = Window(rank, int(window_rows[rank]), dtype, ctx.epoch + 1, config.strict_epochs)
    windows = ctx.all_gather(win, "win_create")
    ctx.metrics.bump("windows_allocated")
    owners = np.arange(n) % R
    regions = {}
    for p in np.flatnonzero(local_all[rank]).tolist():
        start = int(offsets[rank, p])
        regions[p] = (start, start + int(local_all[rank, p]))
        windows[owners[p]].register(rank, *regions[p])
    ctx.fence()  # opens the put epoch

    sender = _Sender(ctx, {p: windows[owners[p]] for p in regions}, regions, config.put_batch, dtype.itemsize)
    sent = np.zeros(n, dtype=np.int64)
    for b in blocks:
        ids = buckets_of(b)
        if wire is not None:
            b = wire(b)
        order = np.argsort(ids, kind="stable")
        ids_sorted = ids[order]
        b = b[order]
        cuts = np.flatnonzero(np.diff(ids_sorted)) + 1
        starts = np.concatenate(([0], cuts))
        stops = np.concatenate((cuts, [len(ids_sorted)]))
        for s, e in zip(starts.tolist(), stops.tolist()):
            p = int(ids_sorted[s])
            if not 0 <= p < n or p not in regions:
                raise HistogramMismatch(f"tuple for partition {p} not announced in the local histogram")
            sender.add(p, b[s:e])
            sent[p] += e - s
    sender.flush()
    if (sent != local_all[rank]).any():
        raise HistogramMismatch("local histogram does not match the data sent")
    ctx.fence()  # closes it

    buf = win.read(rank, ctx.epoch)
    out = []
    for p in np.flatnonzero(owners == rank).tolist():
        a = int(part_start[p])
        out.append((p, buf[a:a + int(glob[p])]))
    return out


def broadcast_blocks(blocks, local_count, global_count, ctx: RankContext, config: EngineConfig, dtype):
    """Every rank receives every rank's tuples, ordered by sender rank."""
    R, rank = ctx.R, ctx.rank
    counts = np.array(ctx.all_gather(int(local_count), "bcast_hist"), dtype=np.int64)
    if counts.sum() != global_count:
        raise HistogramMismatch("global histogram is not the sum of the local histograms")
    win = Window(rank, int(global_count), dtype, ctx.epoch + 1, config.strict_epochs)
    windows = ctx.all_gather(win, "win_create")
    ctx.metrics.bump("windows_allocated")
    start = int(prefix_offsets(counts)[rank])
    stop = start + int(counts[rank])
    for w in windows:
        w.register(rank, start, stop)
    ctx.fence()
    dests = dict(enumerate(windows))
    sender = _Sender(ctx, dests, {r: (start, stop) for r in dests}, config.put_batch, dtype.itemsize)
    sent = 0
    for b in blocks:
        for r in dests:
            sender.add(r, b)
        sent += len(b)
    sender.flush()
    if sent != counts[rank]:
        raise HistogramMismatch("local histogram does not match the data sent")
    ctx.fence()
    return win.read(rank, ctx.epoch)


# -- network operators -------------------------------------------------------------


class MpiHistogram(Operator):
    __slots__ = ("n", "ctx")

    def __init__(self, up, n, ctx: ExecContext, out_type=None):
        from .typesys import HISTOGRAM_TYPE

        super().__init__(out_type if out_type is not None else HISTOGRAM_TYPE, up)
        self.n, self.ctx = n, ctx

    def _next(self):
        local = read_histogram(self.ups[0], self.n, "local histogram")
        self._ended = True
        return histogram_block(all_reduce_histogram(local, self.ctx.cluster))


class MpiExchange(Operator):
    __slots__ = ("fn", "n", "compress", "pid", "data_field", "ctx")

    def __init__(self, data, local, global_, fn, n, ctx: ExecContext, compress=None,
                 pid="pid", data_field="data", out_type=None):
        from .typesys import Int64, RowVector, TupleType

        if out_type is None:
            wire = compress.output_type(data.out_type) if compress is not None else data.out_type
            out_type = TupleType(((pid, Int64), (data_field, RowVector(wire))))
        super().__init__(out_type, data, local, global_)
        self.fn, self.n, self.compress, self.ctx = fn, n, compress, ctx
        self.pid, self.data_field = pid, data_field

    def _next(self):
        self._ended = True
        local = read_histogram(self.ups[1], self.n, "local histogram")
        glob = read_histogram(self.ups[2], self.n, "global histogram")
        in_t = self.ups[0].out_type
        wire_t = self.out_type[self.data_field].element
        wire = None
        if self.compress is not None:
            comp = self.compress

            def wire(b):
                return comp.apply(b, in_t, wire_t)

        rc = self.ctx.cluster
        if rc.rank == 0:
            rc.metrics.bump("relations_shuffled")
        parts = exchange_blocks(iter(self.ups[0]), self.fn.buckets, self.n, local, glob,
                                rc, self.ctx.config, wire_t.dtype, wire)
        ids = [p for p, _ in parts]
        return partition_block(self.out_type, wire_t, [b for _, b in parts], self.pid, self.data_field, ids)


class MpiBroadcast(Operator):
    __slots__ = ("ctx", "_out", "_done")

    def __init__(self, data, local, global_, ctx: ExecContext, out_type=None):
        super().__init__(out_type if out_type is not None else data.out_type, data, local, global_)
        self.ctx = ctx
        self._done = False

    def _next(self):
        self._ended = True
        local = read_histogram(self.ups[1], 1, "local histogram")
        glob = read_histogram(self.ups[2], 1, "global histogram")
        rc = self.ctx.cluster
        if rc.rank == 0:
            rc.metrics.bump("relations_shuffled")
        return broadcast_blocks(iter(self.ups[0]), local[0], glob[0], rc, self.ctx.config, self.out_type.dtype)


def run_ranks(plan, binding: str, args: np.ndarray, ctx: ExecContext) -> list:
    """Run ``plan`` on R = len(args) concurrent workers, rank r bound to args[r]."""
    R = len(args)
    if R == 0:
        return []
    transport = Transport(R, ctx.config, ctx.stats.metrics)
    ctx.stats.transports.append(transport)
    timers = [PhaseTimer() for _ in range(R)]
    results: list = [None] * R
    errors: list = [None] * R

    def work(r):
        try:
            rctx = ctx.for_rank(RankContext(r, transport), timers[r])
            results[r] = run_plan(plan, {binding: args[r:r + 1]}, rctx)
        except BaseException as e:  # noqa: BLE001 - reported as WorkerPanic below
            errors[r] = e
            transport.abort()

    if R == 1:
        work(0)
    else:
        threads = [threading.Thread(target=work, args=(r,), name=f"rank-{r}") for r in range(R)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    ctx.stats.add_rank_timers(timers)
    failed = [r for r in range(R) if errors[r] is not None]
    if failed:
        primary = [r for r in failed if not isinstance(errors[r], WorkerAborted)] or failed
        r = primary[0]
        raise WorkerPanic(r, errors[r]) from errors[r]
    return results


class MpiExecutor(Operator):
    """NestedMap whose invocations run concurrently, one rank per upstream tuple."""

    __slots__ = ("plan", "ctx", "binding")

    def __init__(self, up, plan, ctx: ExecContext, out_type=None):
        super().__init__(out_type if out_type is not None else plan.output_type, up)
        self.plan, self.ctx = plan, ctx
        (self.binding,) = plan.inputs

    def _next(self):
        self._ended = True
        args = concat_blocks(self.ups[0].out_type, drain(self.ups[0]))
        results = run_ranks(self.plan, self.binding, args, self.ctx)
        for r, res in enumerate(results):
            if len(res) != 1:
                from .errors import InnerCardinality

                raise InnerCardinality(f"rank {r} produced {len(res)} tuples, expected 1")
        return concat_blocks(self.out_type, results)


FACTORIES["MpiHistogram"] = lambda node, ups, t, ctx: MpiHistogram(ups[0], node.params["n"], ctx, t)
FACTORIES["MpiExchange"] = lambda node, ups, t, ctx: MpiExchange(
    ups[0], ups[1], ups[2], node.params["fn"], node.params["n"], ctx,
    node.params.get("compress"), node.params.get("pid", "pid"), node.params.get("data", "data"), t,
)
FACTORIES["MpiBroadcast"] = lambda node, ups, t, ctx: MpiBroadcast(ups[0], ups[1], ups[2], ctx, t)
FACTORIES["MpiExecutor"] = lambda node, ups, t, ctx: MpiExecutor(ups[0], node.params["plan"], ctx, t)

__all__ = [
    "EngineConfig", "TransportMetrics", "RunStats", "Window", "Transport", "RankContext",
    "ExecContext", "all_reduce_histogram", "fence", "exchange_layout", "exchange_blocks",
    "broadcast_blocks", "MpiHistogram", "MpiExchange", "MpiBroadcast", "MpiExecutor",
    "run_ranks", "owner_of", "ModularisError", "ExecutionError",
]
