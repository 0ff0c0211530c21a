import numpy as np
import pytest

from modularis.cluster import (
    EngineConfig,
    ExecContext,
    Window,
    broadcast_blocks,
    exchange_blocks,
    exchange_layout,
    run_ranks,
)
from modularis.errors import (
    CollectiveMismatch,
    Deadlock,
    EpochViolation,
    HistogramMismatch,
    RegionViolation,
    WorkerPanic,
)
from modularis.functions import PyMap
from modularis.plan import PlanBuilder
from net_util import KV, exchange, random_rank_data, run_on_ranks


def test_layout_worked_example():
    # 2 senders, 3 partitions, R=2: rank 0 owns partitions 0 and 2
    local = np.array([[1, 2, 3], [4, 5, 6]])
    window_rows, part_start, offsets = exchange_layout(local, 2)
    assert window_rows.tolist() == [5 + 9, 7]
    assert part_start.tolist() == [0, 0, 5]
    assert offsets.tolist() == [[0, 0, 5], [1, 2, 8]]


@pytest.mark.parametrize("R", [1, 2, 3, 4])
def test_exchange_conserves_and_places(R):
    rng = np.random.default_rng(R)
    P, F = 12, 3
    data = random_rank_data(rng, R, P)
    results, transport = exchange(data, P, F, EngineConfig(put_batch=16, strict_epochs=True, timeout=30.0))
    sent = sorted(r for d in data for r in d.tolist())
    got = sorted(r for res in results for _, b in res for r in b.tolist())
    assert got == sent
    for rank, res in enumerate(results):
        assert [p for p, _ in res] == [p for p in range(1 << F) if p % R == rank]
        for p, b in res:
            assert ((b["key"] >> (P - F)) == p).all()
            # senders' regions follow rank order, each in send order
            assert b["val"].tolist() == sorted(b["val"].tolist())


def test_exchange_counts_bytes_and_batches():
    rng = np.random.default_rng(0)
    data = random_rank_data(rng, 2, 10, max_rows=300)
    _, transport = exchange(data, 10, 2, EngineConfig(put_batch=8, timeout=30.0))
    m = transport.metrics
    total = sum(len(d) for d in data)
    assert m.total_tuples == total
    assert m.total_bytes == total * KV.dtype.itemsize
    assert m.puts >= total // 8


def test_histogram_must_match_data():
    def work(ctx):
        rows = np.zeros(3, dtype=KV.dtype)
        bad = np.array([2, 0])  # claims 2 tuples
        return exchange_blocks([rows], lambda b: np.zeros(len(b), np.int64), 2, bad, ctx.all_reduce(bad),
                               ctx, EngineConfig(), KV.dtype)

    with pytest.raises(HistogramMismatch):
        run_on_ranks(2, work)


def test_global_histogram_checked():
    def work(ctx):
        local = np.array([1, 0])
        return exchange_blocks([], lambda b: b["key"], 2, local, np.array([5, 0]), ctx, EngineConfig(), KV.dtype)

    with pytest.raises(HistogramMismatch):
        run_on_ranks(2, work)


def test_strict_window_rejects_overlap_and_stale_epochs():
    w = Window(0, 10, KV.dtype, epoch=1, strict=True)
    w.register(0, 0, 5)
    with pytest.raises(RegionViolation):
        w.register(1, 4, 8)
    with pytest.raises(EpochViolation):
        w.put(0, 0, 5, np.zeros(2, KV.dtype), epoch=0)
    with pytest.raises(EpochViolation):
        w.read(0, epoch=1)
    with pytest.raises(RegionViolation):
        w.read(1, epoch=2)


def test_put_overflow_detected_even_when_lax():
    w = Window(0, 4, KV.dtype, epoch=1, strict=False)
    w.register(0, 0, 2)
    with pytest.raises(HistogramMismatch):
        w.put(0, 0, 2, np.zeros(3, KV.dtype), epoch=1)


def test_collective_mismatch():
    def work(ctx):
        if ctx.rank == 0:
            return ctx.fence()
        return ctx.all_gather(1)

    with pytest.raises(CollectiveMismatch):
        run_on_ranks(2, work)


def test_missing_rank_deadlocks():
    def work(ctx):
        if ctx.rank == 0:
            ctx.fence()

    with pytest.raises(Deadlock):
        run_on_ranks(2, work, EngineConfig(timeout=0.2))


def test_broadcast_gives_everyone_everything():
    rng = np.random.default_rng(4)
    data = random_rank_data(rng, 3, 8, max_rows=50)

    def work(ctx):
        rows = data[ctx.rank]
        glob = int(ctx.all_reduce(np.array([len(rows)]))[0])
        return broadcast_blocks([rows], len(rows), glob, ctx, EngineConfig(put_batch=5), KV.dtype)

    results, _ = run_on_ranks(3, work)
    want = np.concatenate(data).tolist()
    assert all(r.tolist() == want for r in results)


def test_worker_failure_becomes_panic():
    t = KV
    b = PlanBuilder({"arg": t})

    def boom(row):
        if row[0] == 1:
            raise ValueError("rank 1 fails")
        return row

    plan = b.build(b.materialize(b.map(b.lookup("arg"), PyMap(boom, t))))
    args = np.array([(0, 0), (1, 0), (2, 0)], dtype=t.dtype)
    with pytest.raises(WorkerPanic) as e:
        run_ranks(plan, "arg", args, ExecContext())
    assert e.value.rank == 1
    assert isinstance(e.value.cause, ValueError)


def test_single_rank_context_is_default():
    ctx = ExecContext()
    assert ctx.cluster.R == 1
    assert ctx.cluster.all_reduce(np.array([3, 4])).tolist() == [3, 4]
