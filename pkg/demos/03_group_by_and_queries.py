"""Distributed GROUP BY and the four filter-join-aggregate query shapes.

Run with ``python3 demos/03_group_by_and_queries.py``.
"""
from modularis.harness.bench import group_by_point, query_point

for groups in (2_000, 32_000):
    res = group_by_point(1 << 18, groups, ranks=4)
    print(f"group by, {groups} groups: {res.report.result_rows} rows, "
          f"oracle match {res.report.extra['oracleMatch']}, {res.report.wall_seconds:.2f}s")

for name in ("q4", "q12", "q14", "q19"):
    res = query_point(name, 1 << 16, ranks=4)
    print(f"{name}: oracle match {res.report.extra['oracleMatch']}")
    for row in res.rows.tolist():
        print("   ", dict(zip(res.rows.dtype.names, row)))
