"""
Host reference evaluation of the supported queries.

Straight numpy masks, dictionary joins and exact int64 group sums; no
simulator code is involved apart from the shared output conventions
(column names, canonical order, lanes), so a run_query result must equal
oracle_query exactly.
"""

import logging
from typing import Dict

import numpy as np

from pimsim.aggregation import AVERAGE_SCALE
from pimsim.errors import ConfigError, VerificationError
from pimsim.queries import (Q1_SHIPDATE, Q3_DATE, Q4_FROM, Q4_TO, Q5_FROM, Q5_TO, Q6_FROM, Q6_TO, q3_canonical,
                            q5_canonical, with_lanes)
from pimsim.table import ColumnTable
from pimsim.tpch import code

logger = logging.getLogger(__name__)

JOIN_ORDERS = ('forward', 'reverse')


def _join(inner_keys, outer_keys):
    """Match outer rows against unique inner keys; returns (inner rows, outer rows) in outer order."""
    index = {k: i for i, k in enumerate(np.asarray(inner_keys).tolist())}
    hits = [(index[k], j) for j, k in enumerate(np.asarray(outer_keys).tolist()) if k in index]
    pairs = np.array(hits, dtype=np.int64).reshape(-1, 2)
    return pairs[:, 0], pairs[:, 1]


def _group(keys):
    keys = np.asarray(keys, dtype=np.int64)
    groups, inverse = np.unique(keys, return_inverse=True)
    return groups, inverse.reshape(-1)


def _total(inverse, groups, values):
    out = np.zeros(len(groups), dtype=np.int64)
    np.add.at(out, inverse, np.asarray(values, dtype=np.int64))
    return out


def _q1(tables):
    li = tables['lineitem']
    m = li['l_shipdate'] <= Q1_SHIPDATE
    qty, price, disc, tax = (li[c][m] for c in ('l_quantity', 'l_extendedprice', 'l_discount', 'l_tax'))
    groups, inv = _group((li['l_returnflag'][m] << 1) | li['l_linestatus'][m])
    disc_price = price * (100 - disc)
    count = _total(inv, groups, np.ones(len(qty)))
    divisor = np.maximum(count, 1)
    return ColumnTable('q1', {
        'l_returnflag': groups >> 1,
        'l_linestatus': groups & 1,
        'sum_qty': _total(inv, groups, qty),
        'sum_base_price': _total(inv, groups, price),
        'sum_disc_price': _total(inv, groups, disc_price),
        'sum_charge': _total(inv, groups, disc_price * (100 + tax)),
        'avg_qty': _total(inv, groups, qty) * AVERAGE_SCALE // divisor,
        'avg_price': _total(inv, groups, price) * AVERAGE_SCALE // divisor,
        'avg_disc': _total(inv, groups, disc) * AVERAGE_SCALE // divisor,
        'count_order': count,
    })


def _q3(tables):
    cust, orders, li = tables['customer'], tables['orders'], tables['lineitem']
    building = np.flatnonzero(cust['c_mktsegment'] == code('c_mktsegment', 'BUILDING'))
    early = np.flatnonzero(orders['o_orderdate'] < Q3_DATE)
    _, o = _join(cust['c_custkey'][building], orders['o_custkey'][early])
    qualifying = early[o]
    late = np.flatnonzero(li['l_shipdate'] > Q3_DATE)
    o, l = _join(orders['o_orderkey'][qualifying], li['l_orderkey'][late])
    order_rows, line_rows = qualifying[o], late[l]
    revenue = li['l_extendedprice'][line_rows] * (100 - li['l_discount'][line_rows])
    groups, inv = _group(li['l_orderkey'][line_rows])
    first = np.zeros(len(groups), dtype=np.int64)
    first[inv] = order_rows
    table = ColumnTable('q3', {
        'l_orderkey': groups,
        'o_orderdate': orders['o_orderdate'][first],
        'o_shippriority': orders['o_shippriority'][first],
        'revenue': _total(inv, groups, revenue),
    })
    return q3_canonical(table)


def _q4(tables):
    orders, li = tables['orders'], tables['lineitem']
    late = np.unique(li['l_orderkey'][li['l_commitdate'] < li['l_receiptdate']])
    quarter = (orders['o_orderdate'] >= Q4_FROM) & (orders['o_orderdate'] <= Q4_TO)
    _, o = _join(late, orders['o_orderkey'][quarter])
    groups, inv = _group(orders['o_orderpriority'][quarter][o])
    return ColumnTable('q4', {'o_orderpriority': groups, 'order_count': _total(inv, groups, np.ones(len(inv)))})


def _q5_forward(tables):
    region, nation, cust = tables['region'], tables['nation'], tables['customer']
    orders, li, supp = tables['orders'], tables['lineitem'], tables['supplier']
    asia = np.flatnonzero(region['r_name'] == code('r_name', 'ASIA'))
    _, n = _join(region['r_regionkey'][asia], nation['n_regionkey'])
    _, c = _join(nation['n_nationkey'][n], cust['c_nationkey'])
    year = np.flatnonzero((orders['o_orderdate'] >= Q5_FROM) & (orders['o_orderdate'] <= Q5_TO))
    ci, o = _join(cust['c_custkey'][c], orders['o_custkey'][year])
    o_rows, c_rows = year[o], c[ci]
    oi, l_rows = _join(orders['o_orderkey'][o_rows], li['l_orderkey'])
    c_rows = c_rows[oi]
    s_rows, li_pos = _join(supp['s_suppkey'], li['l_suppkey'][l_rows])
    l_rows, c_rows = l_rows[li_pos], c_rows[li_pos]
    return l_rows, c_rows, s_rows


def _q5_reverse(tables):
    region, nation, cust = tables['region'], tables['nation'], tables['customer']
    orders, li, supp = tables['orders'], tables['lineitem'], tables['supplier']
    s_rows, l_rows = _join(supp['s_suppkey'], li['l_suppkey'])
    year = np.flatnonzero((orders['o_orderdate'] >= Q5_FROM) & (orders['o_orderdate'] <= Q5_TO))
    o, keep = _join(orders['o_orderkey'][year], li['l_orderkey'][l_rows])
    o_rows, l_rows, s_rows = year[o], l_rows[keep], s_rows[keep]
    c_rows, keep = _join(cust['c_custkey'], orders['o_custkey'][o_rows])
    l_rows, s_rows = l_rows[keep], s_rows[keep]
    n_rows, keep = _join(nation['n_nationkey'], cust['c_nationkey'][c_rows])
    l_rows, s_rows, c_rows = l_rows[keep], s_rows[keep], c_rows[keep]
    asia = np.flatnonzero(region['r_name'] == code('r_name', 'ASIA'))
    _, keep = _join(region['r_regionkey'][asia], nation['n_regionkey'][n_rows])
    return l_rows[keep], c_rows[keep], s_rows[keep]


def _q5(tables, join_order='forward'):
    li, cust, supp, nation = tables['lineitem'], tables['customer'], tables['supplier'], tables['nation']
    l_rows, c_rows, s_rows = (_q5_forward if join_order == 'forward' else _q5_reverse)(tables)
    local = cust['c_nationkey'][c_rows] == supp['s_nationkey'][s_rows]
    l_rows, c_rows = l_rows[local], c_rows[local]
    _, n_rows = _join(nation['n_nationkey'], cust['c_nationkey'][c_rows])
    revenue = li['l_extendedprice'][l_rows] * (100 - li['l_discount'][l_rows])
    groups, inv = _group(nation['n_name'][n_rows])
    return q5_canonical(ColumnTable('q5', {'n_name': groups, 'revenue': _total(inv, groups, revenue)}))


def _q6(tables):
    li = tables['lineitem']
    m = ((li['l_shipdate'] >= Q6_FROM) & (li['l_shipdate'] <= Q6_TO)
         & (li['l_discount'] >= 5) & (li['l_discount'] <= 7) & (li['l_quantity'] < 24))
    if not m.any():
        return ColumnTable('q6', {'revenue': np.zeros(0, dtype=np.int64)})
    return ColumnTable('q6', {'revenue': [int(np.sum(li['l_extendedprice'][m] * li['l_discount'][m]))]})


def oracle_query(qid: int, tables: Dict[str, ColumnTable], join_order: str = 'forward') -> ColumnTable:
    """
    Evaluate a query on the host.

    join_order only affects query 5, which can chain its joins from the
    region side ('forward') or from lineitem ('reverse').
    """
    if join_order not in JOIN_ORDERS:
        raise ConfigError(f"unknown join order {join_order!r}")
    if qid == 5:
        result = _q5(tables, join_order)
    elif qid in (1, 3, 4, 6):
        result = {1: _q1, 3: _q3, 4: _q4, 6: _q6}[qid](tables)
    else:
        raise ConfigError(f"no oracle for query {qid}")
    return with_lanes(result, f'q{qid}')


def verify(qid: int, result: ColumnTable, tables: Dict[str, ColumnTable]) -> ColumnTable:
    """
    Compare a simulated result with the oracle.

    Raises:
        VerificationError: with the first differing row
    """
    expected = oracle_query(qid, tables)
    diff = result.first_difference(expected)
    if diff is not None:
        raise VerificationError(f"query {qid} differs from the oracle: {diff}", diff)
    logger.info("q%d verified: %d rows", qid, result.row_count)
    return expected
