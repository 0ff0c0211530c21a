"""Drive raw exchanges over R simulated ranks."""
import threading

import numpy as np

from modularis.cluster import EngineConfig, RankContext, Transport, exchange_blocks
from modularis.errors import WorkerAborted
from modularis.partition import brute_histogram
from modularis.typesys import Int64, TupleType

KV = TupleType.of(key=Int64, val=Int64)


def random_rank_data(rng, R, P, max_rows=400):
    out = []
    for r in range(R):
        n = int(rng.integers(0, max_rows))
        rows = np.empty(n, dtype=KV.dtype)
        rows["key"] = rng.integers(0, 1 << P, n)
        rows["val"] = r * 1_000_000 + np.arange(n)  # unique per (sender, position)
        out.append(rows)
    return out


def run_on_ranks(R, fn, config=None):
    """Run fn(rank_ctx) on R threads sharing one transport; re-raise the first error."""
    transport = Transport(R, config or EngineConfig(timeout=30.0))
    results, errors = [None] * R, [None] * R

    def work(r):
        try:
            results[r] = fn(RankContext(r, transport))
        except BaseException as e:  # noqa: BLE001
            errors[r] = e
            transport.abort()

    threads = [threading.Thread(target=work, args=(r,)) for r in range(R)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    real = [e for e in errors if e is not None and not isinstance(e, WorkerAborted)]
    if real or any(errors):
        raise (real or [e for e in errors if e is not None])[0]
    return results, transport


def exchange(data, P, F, config=None, block=97):
    """Exchange per-rank data on the top F of P key bits; returns per-rank [(pid, rows)]."""
    R, n = len(data), 1 << F
    config = config or EngineConfig(timeout=30.0)

    def buckets_of(b):
        return (b["key"] >> (P - F)) & (n - 1)

    def work(ctx):
        rows = data[ctx.rank]
        local = brute_histogram(buckets_of(rows), n)
        glob = ctx.all_reduce(local)
        blocks = [rows[i:i + block] for i in range(0, len(rows), block)]
        return exchange_blocks(blocks, buckets_of, n, local, glob, ctx, config, KV.dtype)

    return run_on_ranks(R, work, config)
