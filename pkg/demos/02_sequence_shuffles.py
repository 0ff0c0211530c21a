"""Naive vs optimized join sequences: how many relations cross the network.

Run with ``python3 demos/02_sequence_shuffles.py``.  The optimized plan
partitions every input once on the shared key (N+1 shuffles); the naive
plan re-shuffles each intermediate result (2N).  The second table grows the
first join's output with a fan-out workload: the optimized plan's network
bytes stay flat while the naive plan's grow.
"""
from modularis.harness.bench import BenchParams, run_suite

rows = run_suite("sequence", BenchParams(tuples=4096, ranks=(4,), joins=(2, 4, 8)))
print(f"{'N':>2} {'mode':>10} {'shuffled':>9} {'bytesPut':>10} ok")
for r in rows:
    print(f"{r['N']:>2} {r['mode']:>10} {r['relationsShuffled']:>9} {r['bytesPut']:>10} {r['oracleMatch']}")

rows = run_suite("sequence-bytes", BenchParams(tuples=3360, ranks=(4,), fanouts=(1, 2, 4, 8)))
print(f"\n{'fanout':>7} {'mode':>10} {'bytesPut':>10} {'result':>8}")
for r in rows:
    print(f"{r['correspondence']:>7} {r['mode']:>10} {r['bytesPut']:>10} {r['resultRows']:>8}")
