"""Dictionary-encoded order/lineitem/part tables and four query shapes.

The shapes follow TPC-H Q4, Q12, Q14 and Q19 as filter -> join ->
aggregate patterns over integer-coded columns.  Dates are day numbers,
prices are cents, discounts are percent, categorical strings are small
integer codes.  Each query carries its engine spec and an independent
row-at-a-time formulation for the oracle.

Q4 here counts matching (order, late lineitem) pairs per priority; the
real query's EXISTS semi-join has no single-join counterpart.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..builders import QuerySpec
from ..functions import Aggregate, Compute, col, where
from ..partition import RadixSpec
from ..typesys import Int64, TupleType

ORDERS = TupleType.of(o_orderkey=Int64, o_orderdate=Int64, o_orderpriority=Int64)
LINEITEM = TupleType.of(
    l_orderkey=Int64, l_partkey=Int64, l_quantity=Int64, l_extendedprice=Int64,
    l_discount=Int64, l_shipdate=Int64, l_commitdate=Int64, l_receiptdate=Int64,
    l_shipmode=Int64, l_shipinstruct=Int64,
)
PART = TupleType.of(p_partkey=Int64, p_brand=Int64, p_container=Int64, p_size=Int64, p_promo=Int64)

DAYS = 7 * 365
# dictionary codes
MAIL, SHIP, AIR, AIR_REG = 0, 1, 2, 3
DELIVER_IN_PERSON = 0
SM_CASE, SM_BOX, MED_BAG, MED_BOX, LG_CASE, LG_BOX = 0, 1, 10, 11, 20, 21


def generate_tables(lineitems: int, seed: int = 0) -> dict:
    """orders : lineitem : part at roughly 1 : 4 : 1/2, like the TPC-H ratios."""
    rng = np.random.default_rng(seed)
    n_orders = max(1, lineitems // 4)
    n_parts = max(1, lineitems // 8)

    orders = np.empty(n_orders, dtype=ORDERS.dtype)
    orders["o_orderkey"] = rng.permutation(n_orders)
    orders["o_orderdate"] = rng.integers(0, DAYS - 151, n_orders)
    orders["o_orderpriority"] = rng.integers(0, 5, n_orders)

    part = np.empty(n_parts, dtype=PART.dtype)
    part["p_partkey"] = rng.permutation(n_parts)
    part["p_brand"] = rng.integers(0, 25, n_parts)
    part["p_container"] = rng.integers(0, 40, n_parts)
    part["p_size"] = rng.integers(1, 51, n_parts)
    part["p_promo"] = (rng.random(n_parts) < 1 / 6).astype(np.int64)

    li = np.empty(lineitems, dtype=LINEITEM.dtype)
    ok = rng.integers(0, n_orders, lineitems)
    li["l_orderkey"] = ok
    li["l_partkey"] = rng.integers(0, n_parts, lineitems)
    li["l_quantity"] = rng.integers(1, 51, lineitems)
    li["l_extendedprice"] = rng.integers(90_000, 10_500_000, lineitems)
    li["l_discount"] = rng.integers(0, 11, lineitems)
    # ship/commit/receipt dates follow the order date
    odate = orders["o_orderdate"][np.argsort(orders["o_orderkey"])][ok]
    li["l_shipdate"] = odate + rng.integers(1, 122, lineitems)
    li["l_commitdate"] = odate + rng.integers(30, 91, lineitems)
    li["l_receiptdate"] = li["l_shipdate"] + rng.integers(1, 31, lineitems)
    li["l_shipmode"] = rng.integers(0, 7, lineitems)
    li["l_shipinstruct"] = rng.integers(0, 4, lineitems)
    return {"orders": orders, "lineitem": li, "part": part}


@dataclass
class Query:
    name: str
    left: str            # table bound to the build side
    right: str
    spec: QuerySpec
    # oracle formulation: dict-based predicates and map
    left_pred: Callable | None
    right_pred: Callable | None
    post_pred: Callable | None
    post_map: Callable
    agg_ops: dict
    group_key: str | None = None

    def relations(self, tables: dict) -> dict:
        return {self.spec.left_name: tables[self.left], self.spec.right_name: tables[self.right]}


def _radix(compression):
    # order keys reach 2**18 at desk scale; P=27 leaves room and allows compression
    return RadixSpec.with_local_passes(27, 10, 4)


def q4(compression=False, date=365) -> Query:
    spec = QuerySpec(
        left=ORDERS, right=LINEITEM, join_attr="o_orderkey",
        left_filter=(col("o_orderdate") >= date) & (col("o_orderdate") < date + 90),
        right_filter=col("l_commitdate") < col("l_receiptdate"),
        left_fields=("o_orderkey", "o_orderpriority"),
        right_fields=("o_orderkey",),
        post_map=Compute({"o_orderpriority": "o_orderpriority", "order_count": 1}),
        aggregate=Aggregate(order_count="sum"),
        group_key="o_orderpriority",
        radix=_radix(compression), compression=compression,
        left_name="orders", right_name="lineitem",
    )
    return Query(
        "q4", "orders", "lineitem", _rename_right(spec, {"l_orderkey": "o_orderkey"}),
        left_pred=lambda r: date <= r["o_orderdate"] < date + 90,
        right_pred=lambda r: r["l_commitdate"] < r["l_receiptdate"],
        post_pred=None,
        post_map=lambda r: {"o_orderpriority": r["o_orderpriority"], "order_count": 1},
        agg_ops={"order_count": "sum"}, group_key="o_orderpriority",
    )


def q12(compression=False, year_start=2 * 365, modes=(MAIL, SHIP)) -> Query:
    lo, hi = year_start, year_start + 365
    urgent = col("o_orderpriority") < 2
    spec = QuerySpec(
        left=ORDERS, right=LINEITEM, join_attr="o_orderkey",
        right_filter=(col("l_shipmode").isin(list(modes)) & (col("l_commitdate") < col("l_receiptdate"))
                      & (col("l_shipdate") < col("l_commitdate"))
                      & (col("l_receiptdate") >= lo) & (col("l_receiptdate") < hi)),
        left_fields=("o_orderkey", "o_orderpriority"),
        right_fields=("o_orderkey", "l_shipmode"),
        post_map=Compute({
            "l_shipmode": "l_shipmode",
            "high_line_count": where(urgent, 1, 0),
            "low_line_count": where(urgent, 0, 1),
        }),
        aggregate=Aggregate(high_line_count="sum", low_line_count="sum"),
        group_key="l_shipmode",
        radix=_radix(compression), compression=compression,
        left_name="orders", right_name="lineitem",
    )
    return Query(
        "q12", "orders", "lineitem", _rename_right(spec, {"l_orderkey": "o_orderkey"}),
        left_pred=None,
        right_pred=lambda r: (r["l_shipmode"] in modes and r["l_commitdate"] < r["l_receiptdate"]
                              and r["l_shipdate"] < r["l_commitdate"] and lo <= r["l_receiptdate"] < hi),
        post_pred=None,
        post_map=lambda r: {
            "l_shipmode": r["l_shipmode"],
            "high_line_count": 1 if r["o_orderpriority"] < 2 else 0,
            "low_line_count": 0 if r["o_orderpriority"] < 2 else 1,
        },
        agg_ops={"high_line_count": "sum", "low_line_count": "sum"}, group_key="l_shipmode",
    )


def q14(compression=False, month_start=3 * 365 + 240) -> Query:
    lo, hi = month_start, month_start + 30
    revenue = col("l_extendedprice") * (100 - col("l_discount"))
    spec = QuerySpec(
        left=PART, right=LINEITEM, join_attr="p_partkey",
        right_filter=(col("l_shipdate") >= lo) & (col("l_shipdate") < hi),
        left_fields=("p_partkey", "p_promo"),
        right_fields=("p_partkey", "l_extendedprice", "l_discount"),
        post_map=Compute({"promo_revenue": where(col("p_promo") == 1, revenue, 0), "revenue": revenue}),
        aggregate=Aggregate(promo_revenue="sum", revenue="sum"),
        radix=_radix(compression), compression=compression,
        left_name="part", right_name="lineitem",
    )

    def post(r):
        rev = r["l_extendedprice"] * (100 - r["l_discount"])
        return {"promo_revenue": rev if r["p_promo"] == 1 else 0, "revenue": rev}

    return Query(
        "q14", "part", "lineitem", _rename_right(spec, {"l_partkey": "p_partkey"}),
        left_pred=None,
        right_pred=lambda r: lo <= r["l_shipdate"] < hi,
        post_pred=None, post_map=post,
        agg_ops={"promo_revenue": "sum", "revenue": "sum"},
    )


_Q19_GROUPS = (
    # brand, containers, quantity range, max size
    (12, (SM_CASE, SM_BOX), (1, 11), 5),
    (23, (MED_BAG, MED_BOX), (10, 20), 10),
    (4, (LG_CASE, LG_BOX), (20, 30), 15),
)


def q19(compression=False) -> Query:
    cond = None
    for brand, containers, (qlo, qhi), smax in _Q19_GROUPS:
        c = ((col("p_brand") == brand) & col("p_container").isin(list(containers))
             & col("l_quantity").between(qlo, qhi) & col("p_size").between(1, smax))
        cond = c if cond is None else cond | c
    spec = QuerySpec(
        left=PART, right=LINEITEM, join_attr="p_partkey",
        left_filter=col("p_size") >= 1,
        right_filter=col("l_shipmode").isin([AIR, AIR_REG]) & (col("l_shipinstruct") == DELIVER_IN_PERSON),
        left_fields=("p_partkey", "p_brand", "p_container", "p_size"),
        right_fields=("p_partkey", "l_quantity", "l_extendedprice", "l_discount"),
        post_filter=cond,
        post_map=Compute({"revenue": col("l_extendedprice") * (100 - col("l_discount"))}),
        aggregate=Aggregate(revenue="sum"),
        radix=_radix(compression), compression=compression,
        left_name="part", right_name="lineitem",
    )

    def post_pred(r):
        for brand, containers, (qlo, qhi), smax in _Q19_GROUPS:
            if (r["p_brand"] == brand and r["p_container"] in containers
                    and qlo <= r["l_quantity"] <= qhi and 1 <= r["p_size"] <= smax):
                return True
        return False

    return Query(
        "q19", "part", "lineitem", _rename_right(spec, {"l_partkey": "p_partkey"}),
        left_pred=lambda r: r["p_size"] >= 1,
        right_pred=lambda r: r["l_shipmode"] in (AIR, AIR_REG) and r["l_shipinstruct"] == DELIVER_IN_PERSON,
        post_pred=post_pred,
        post_map=lambda r: {"revenue": r["l_extendedprice"] * (100 - r["l_discount"])},
        agg_ops={"revenue": "sum"},
    )


def _rename_right(spec: QuerySpec, mapping: dict) -> QuerySpec:
    """The right table's foreign key takes the join attribute's name."""
    from dataclasses import replace

    return replace(spec, right=spec.right.rename(mapping))


QUERIES = {"q4": q4, "q12": q12, "q14": q14, "q19": q19}


def query_relations(q: Query, tables: dict) -> dict:
    """Bind tables under the spec's relation names, renaming the right foreign key."""
    rel = q.relations(tables)
    right = rel[q.spec.right_name]
    rel[q.spec.right_name] = right.view(q.spec.right.dtype)
    return rel
