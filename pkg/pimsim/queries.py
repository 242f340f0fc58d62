"""
Physical plans for TPC-H queries 1, 3, 4, 5 and 6.

A plan is an ordered list of steps over named intermediates:

  Scan       load columns of a base or derived table into MRAM
  Filter     one selection launch (one predicate term) on a resident table
  Join       equi-join two resident tables; the joined columns are
             assembled on the host and loaded back, so every join
             redistributes its output
  Aggregate  group and aggregate a resident table into a host table
  TopK       k smallest keys of a resident table (descending optional)

Filtered tables stay resident and feed the next step directly. Row ids
travel with every resident table; they index a Relation, the host-side
list of base rows each intermediate row came from.

Money values keep their integer scale through the arithmetic: prices and
discounts are hundredths, so price * (100 - discount) is in 1/10000.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from pimsim.aggregation import AggFunc, AggSpec
from pimsim.config import KernelConfig, MachineConfig
from pimsim.errors import ConfigError
from pimsim.expressions import Add, Col, Const, KeyPack, Mul, Sub
from pimsim.host import makespan
from pimsim.operators import JOIN_METHODS, aggregate, order, select
from pimsim.selection import Cmp
from pimsim.system import PimSystem
from pimsim.table import ColumnTable, date_code
from pimsim.tpch import code

logger = logging.getLogger(__name__)

QUERY_IDS = (1, 3, 4, 5, 6)

TABLE5 = {
    1: {'selection': 1, 'aggregation': 8, 'order': 0, 'join': 0},
    3: {'selection': 3, 'aggregation': 1, 'order': 1, 'join': 2},
    4: {'selection': 2, 'aggregation': 2, 'order': 0, 'join': 1},
    5: {'selection': 3, 'aggregation': 1, 'order': 0, 'join': 5},
    6: {'selection': 3, 'aggregation': 1, 'order': 0, 'join': 0},
}
"""Operator occurrences per query."""

OPERATOR_KINDS = ('selection', 'aggregation', 'order', 'join')

RESULT_LANES = {
    'l_returnflag': 'int32', 'l_linestatus': 'int32', 'sum_qty': 'int64', 'sum_base_price': 'decimal',
    'avg_price': 'decimal', 'o_orderdate': 'date', 'o_shippriority': 'int32', 'l_orderkey': 'int32',
    'o_orderpriority': 'int32', 'order_count': 'int64', 'n_name': 'int32',
}
"""Output lanes for CSV rendering; unlisted columns are int64."""

Q3_LIMIT = 10
Q1_SHIPDATE = date_code('1998-09-02')
Q3_DATE = date_code('1995-03-15')
Q4_FROM, Q4_TO = date_code('1993-07-01'), date_code('1993-09-30')
Q5_FROM, Q5_TO = date_code('1994-01-01'), date_code('1994-12-31')
Q6_FROM, Q6_TO = date_code('1994-01-01'), date_code('1994-12-31')


def disc_price():
    return Mul(Col('l_extendedprice'), Sub(Const(100), Col('l_discount')))


# ---------------------------------------------------------------------------
# Plan steps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scan:
    name: str
    table: str
    columns: Tuple[str, ...]

    def inputs(self):
        return ()


@dataclass(frozen=True)
class Filter:
    name: str
    source: str
    predicate: Cmp
    keep: Tuple[str, ...]

    def inputs(self):
        return (self.source,)


@dataclass(frozen=True)
class Join:
    name: str
    inner: str
    inner_key: str
    outer: str
    outer_key: str
    columns: Tuple[str, ...]

    def inputs(self):
        return (self.inner, self.outer)


@dataclass(frozen=True)
class Aggregate:
    name: str
    source: str
    spec: AggSpec

    def inputs(self):
        return (self.source,)


@dataclass(frozen=True)
class TopK:
    name: str
    source: str
    key: str
    k: int
    descending: bool = False

    def inputs(self):
        return (self.source,)


@dataclass
class QueryPlan:
    qid: int
    steps: List[object]
    finish: Callable
    """finish(context) -> result ColumnTable."""

    def operator_counts(self) -> Dict[str, int]:
        counts = dict.fromkeys(OPERATOR_KINDS, 0)
        for step in self.steps:
            if isinstance(step, Filter):
                counts['selection'] += 1
            elif isinstance(step, Aggregate):
                counts['aggregation'] += len(step.spec.funcs)
            elif isinstance(step, TopK):
                counts['order'] += 1
            elif isinstance(step, Join):
                counts['join'] += 1
        return counts

    def last_uses(self) -> Dict[str, int]:
        last = {}
        for i, step in enumerate(self.steps):
            for name in step.inputs():
                last[name] = i
        return last


# ---------------------------------------------------------------------------
# Relations
# ---------------------------------------------------------------------------

class Relation:
    """Base-table row indices behind each row of an intermediate."""

    def __init__(self, sources: Dict[str, np.ndarray]):
        self.sources = {name: np.asarray(rows, dtype=np.int64) for name, rows in sources.items()}

    @classmethod
    def base(cls, table: ColumnTable) -> 'Relation':
        return cls({table.name: np.arange(table.row_count, dtype=np.int64)})

    def __len__(self):
        return len(next(iter(self.sources.values()))) if self.sources else 0

    def take(self, rows) -> 'Relation':
        rows = np.asarray(rows, dtype=np.int64)
        return Relation({name: idx[rows] for name, idx in self.sources.items()})

    @staticmethod
    def join(inner: 'Relation', outer: 'Relation', pairs) -> 'Relation':
        out = inner.take(pairs['inner']).sources
        out.update(outer.take(pairs['outer']).sources)
        return Relation(out)

    def column(self, name: str, tables: Dict[str, ColumnTable]) -> np.ndarray:
        for source, rows in self.sources.items():
            if name in tables[source]:
                return tables[source][name][rows]
        raise ConfigError(f"no source of {sorted(self.sources)} has column {name!r}")


@dataclass
class Context:
    system: PimSystem
    tables: Dict[str, ColumnTable]
    resident: Dict[str, tuple] = field(default_factory=dict)
    """name -> (DistributedTable, Relation)"""
    ordered: Dict[str, np.ndarray] = field(default_factory=dict)
    join_method: str = 'hash'
    aggregation_method: str = 'hash'


# ---------------------------------------------------------------------------
# Step execution
# ---------------------------------------------------------------------------

def _run_step(ctx: Context, step) -> None:
    system = ctx.system
    if isinstance(step, Scan):
        table = ctx.tables[step.table]
        dt = system.load_columns({c: table[c] for c in step.columns}, f"{step.name}:load")
        ctx.resident[step.name] = (dt, Relation.base(table))
    elif isinstance(step, Filter):
        dt, rel = ctx.resident[step.source]
        res = select(system, dt, (step.predicate,), keep=step.keep, label=step.name)
        ctx.resident[step.name] = (res.output, rel)
    elif isinstance(step, Join):
        inner, inner_rel = ctx.resident[step.inner]
        outer, outer_rel = ctx.resident[step.outer]
        res = JOIN_METHODS[ctx.join_method](system, inner, step.inner_key, outer, step.outer_key,
                                            label=step.name)
        rel = Relation.join(inner_rel, outer_rel, res.output)
        columns = {c: rel.column(c, ctx.tables) for c in step.columns}
        system.host_reorder(8 * len(rel) * len(columns), f"{step.name}:assemble")
        dt = system.load_columns(columns, f"{step.name}:load")
        ctx.resident[step.name] = (dt, rel)
    elif isinstance(step, Aggregate):
        dt, rel = ctx.resident[step.source]
        res = aggregate(system, dt, step.spec, ctx.aggregation_method, label=step.name)
        ctx.tables[step.name] = res.output
    elif isinstance(step, TopK):
        dt, _ = ctx.resident[step.source]
        res = order(system, dt, step.key, mode='topk', k=step.k, descending=step.descending, label=step.name)
        ctx.ordered[step.name] = res.output['p0']
    else:
        raise ConfigError(f"unknown plan step {step!r}")


def _release(ctx: Context, plan: QueryPlan, index: int, last: Dict[str, int]) -> None:
    for name in plan.steps[index].inputs():
        if last.get(name) == index and name in ctx.resident:
            ctx.resident.pop(name)[0].free()


def with_lanes(table: ColumnTable, name: str) -> ColumnTable:
    return ColumnTable(name, {c: table[c] for c in table.column_names},
                       {c: RESULT_LANES.get(c, 'int64') for c in table.column_names})


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

def q1_spec() -> AggSpec:
    charge = Mul(disc_price(), Add(Const(100), Col('l_tax')))
    return AggSpec(
        KeyPack(((Col('l_returnflag'), 2), (Col('l_linestatus'), 1))),
        (AggFunc('sum', 'l_quantity', 'sum_qty'),
         AggFunc('sum', 'l_extendedprice', 'sum_base_price'),
         AggFunc('sum', disc_price(), 'sum_disc_price'),
         AggFunc('sum', charge, 'sum_charge'),
         AggFunc('average', 'l_quantity', 'avg_qty'),
         AggFunc('average', 'l_extendedprice', 'avg_price'),
         AggFunc('average', 'l_discount', 'avg_disc'),
         AggFunc('count', None, 'count_order')),
        ('l_returnflag', 'l_linestatus'))


def _plan_q1(tables):
    steps = [
        Scan('lineitem', 'lineitem', ('l_returnflag', 'l_linestatus', 'l_quantity', 'l_extendedprice',
                                      'l_discount', 'l_tax', 'l_shipdate')),
        Filter('shipped', 'lineitem', Cmp('l_shipdate', '<=', Q1_SHIPDATE),
               ('l_returnflag', 'l_linestatus', 'l_quantity', 'l_extendedprice', 'l_discount', 'l_tax')),
        Aggregate('q1', 'shipped', q1_spec()),
    ]
    return QueryPlan(1, steps, lambda ctx: with_lanes(ctx.tables['q1'], 'q1'))


def orderkey_bits(tables) -> int:
    return max(1, int(tables['orders']['o_orderkey'].max(initial=0)).bit_length())


def _plan_q3(tables):
    spec = AggSpec(
        KeyPack(((Col('l_orderkey'), orderkey_bits(tables)), (Col('o_orderdate'), 16),
                 (Col('o_shippriority'), 1))),
        (AggFunc('sum', disc_price(), 'revenue'),),
        ('l_orderkey', 'o_orderdate', 'o_shippriority'))
    steps = [
        Scan('customer', 'customer', ('c_custkey', 'c_mktsegment')),
        Filter('building', 'customer', Cmp('c_mktsegment', '=', code('c_mktsegment', 'BUILDING')),
               ('c_custkey',)),
        Scan('orders', 'orders', ('o_orderkey', 'o_custkey', 'o_orderdate', 'o_shippriority')),
        Filter('early_orders', 'orders', Cmp('o_orderdate', '<', Q3_DATE),
               ('o_orderkey', 'o_custkey', 'o_orderdate', 'o_shippriority')),
        Join('customer_orders', 'building', 'c_custkey', 'early_orders', 'o_custkey',
             ('o_orderkey', 'o_orderdate', 'o_shippriority')),
        Scan('lineitem', 'lineitem', ('l_orderkey', 'l_shipdate', 'l_extendedprice', 'l_discount')),
        Filter('late_lines', 'lineitem', Cmp('l_shipdate', '>', Q3_DATE),
               ('l_orderkey', 'l_extendedprice', 'l_discount')),
        Join('order_lines', 'customer_orders', 'o_orderkey', 'late_lines', 'l_orderkey',
             ('l_orderkey', 'o_orderdate', 'o_shippriority', 'l_extendedprice', 'l_discount')),
        Aggregate('q3_revenue', 'order_lines', spec),
        Scan('revenue', 'q3_revenue', ('revenue',)),
        TopK('top_revenue', 'revenue', 'revenue', Q3_LIMIT, descending=True),
    ]

    def finish(ctx):
        groups = ctx.tables['q3_revenue'].take(ctx.ordered['top_revenue'])
        return with_lanes(q3_canonical(groups), 'q3')

    return QueryPlan(3, steps, finish)


def q3_canonical(groups: ColumnTable) -> ColumnTable:
    """Revenue descending, then order date, then order key; first ten rows."""
    top = groups.sort_by(('revenue', 'o_orderdate', 'l_orderkey'), descending=('revenue',)).head(Q3_LIMIT)
    return top.select_columns(('l_orderkey', 'revenue', 'o_orderdate', 'o_shippriority'))


def _plan_q4(tables):
    steps = [
        Scan('lineitem', 'lineitem', ('l_orderkey', 'l_commitdate', 'l_receiptdate')),
        Filter('late', 'lineitem', Cmp('l_commitdate', '<', other='l_receiptdate'), ('l_orderkey',)),
        Aggregate('q4_late', 'late', AggSpec('l_orderkey', (AggFunc('unique'),))),
        Scan('late_orders', 'q4_late', ('l_orderkey',)),
        Scan('orders', 'orders', ('o_orderkey', 'o_orderdate', 'o_orderpriority')),
        Filter('quarter', 'orders', Cmp('o_orderdate', 'between', Q4_FROM, Q4_TO),
               ('o_orderkey', 'o_orderpriority')),
        Join('late_quarter', 'late_orders', 'l_orderkey', 'quarter', 'o_orderkey', ('o_orderpriority',)),
        Aggregate('q4', 'late_quarter', AggSpec('o_orderpriority', (AggFunc('count', None, 'order_count'),))),
    ]
    return QueryPlan(4, steps, lambda ctx: with_lanes(ctx.tables['q4'], 'q4'))


def _plan_q5(tables):
    steps = [
        Scan('region', 'region', ('r_regionkey', 'r_name')),
        Filter('asia', 'region', Cmp('r_name', '=', code('r_name', 'ASIA')), ('r_regionkey',)),
        Scan('nation', 'nation', ('n_nationkey', 'n_regionkey', 'n_name')),
        Join('asia_nations', 'asia', 'r_regionkey', 'nation', 'n_regionkey', ('n_nationkey', 'n_name')),
        Scan('customer', 'customer', ('c_custkey', 'c_nationkey')),
        Join('asia_customers', 'asia_nations', 'n_nationkey', 'customer', 'c_nationkey',
             ('c_custkey', 'c_nationkey', 'n_name')),
        Scan('orders', 'orders', ('o_orderkey', 'o_custkey', 'o_orderdate')),
        Filter('year_orders', 'orders', Cmp('o_orderdate', 'between', Q5_FROM, Q5_TO),
               ('o_orderkey', 'o_custkey')),
        Join('customer_orders', 'asia_customers', 'c_custkey', 'year_orders', 'o_custkey',
             ('o_orderkey', 'c_nationkey', 'n_name')),
        Scan('lineitem', 'lineitem', ('l_orderkey', 'l_suppkey', 'l_extendedprice', 'l_discount')),
        Join('order_lines', 'customer_orders', 'o_orderkey', 'lineitem', 'l_orderkey',
             ('l_suppkey', 'c_nationkey', 'n_name', 'l_extendedprice', 'l_discount')),
        Scan('supplier', 'supplier', ('s_suppkey', 's_nationkey')),
        Join('supplied', 'supplier', 's_suppkey', 'order_lines', 'l_suppkey',
             ('s_nationkey', 'c_nationkey', 'n_name', 'l_extendedprice', 'l_discount')),
        Filter('local', 'supplied', Cmp('c_nationkey', '=', other='s_nationkey'),
               ('n_name', 'l_extendedprice', 'l_discount')),
        Aggregate('q5_revenue', 'local', AggSpec('n_name', (AggFunc('sum', disc_price(), 'revenue'),))),
    ]

    def finish(ctx):
        return with_lanes(q5_canonical(ctx.tables['q5_revenue']), 'q5')

    return QueryPlan(5, steps, finish)


def q5_canonical(groups: ColumnTable) -> ColumnTable:
    return groups.sort_by(('revenue', 'n_name'), descending=('revenue',)).select_columns(('n_name', 'revenue'))


def _plan_q6(tables):
    steps = [
        Scan('lineitem', 'lineitem', ('l_shipdate', 'l_discount', 'l_quantity', 'l_extendedprice')),
        Filter('year_lines', 'lineitem', Cmp('l_shipdate', 'between', Q6_FROM, Q6_TO),
               ('l_discount', 'l_quantity', 'l_extendedprice')),
        Filter('discounted', 'year_lines', Cmp('l_discount', 'between', 5, 7), ('l_quantity', 'l_extendedprice',
                                                                                 'l_discount')),
        Filter('small', 'discounted', Cmp('l_quantity', '<', 24), ('l_extendedprice', 'l_discount')),
        Aggregate('q6', 'small', AggSpec(Const(0), (AggFunc('sum', Mul(Col('l_extendedprice'),
                                                                         Col('l_discount')), 'revenue'),))),
    ]
    return QueryPlan(6, steps, lambda ctx: with_lanes(ctx.tables['q6'], 'q6'))


PLANS = {1: _plan_q1, 3: _plan_q3, 4: _plan_q4, 5: _plan_q5, 6: _plan_q6}


def build_plan(qid: int, tables: Dict[str, ColumnTable]) -> QueryPlan:
    if qid not in PLANS:
        raise ConfigError(f"no plan for query {qid}; supported: {', '.join(map(str, QUERY_IDS))}")
    plan = PLANS[qid](tables)
    if plan.operator_counts() != TABLE5[qid]:
        raise ConfigError(f"plan for query {qid} has operator counts {plan.operator_counts()}")
    return plan


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

@dataclass
class QueryRun:
    qid: int
    result: ColumnTable
    system: PimSystem
    op_counts: Dict[str, int]
    kernel_seconds: float
    makespan: float
    breakdown: Dict[str, float]
    """Seconds per timeline event kind."""

    @property
    def timeline(self):
        return self.system.timeline

    def class_count(self, cls: str) -> int:
        return sum(m.class_counts.get(cls, 0) for m in self.system.metrics)

    def summary(self) -> dict:
        return {
            'query': self.qid, 'rows': self.result.row_count, 'kernel_seconds': self.kernel_seconds,
            'makespan': self.makespan, **{f'{kind}_seconds': s for kind, s in sorted(self.breakdown.items())},
            **{f'{kind}_ops': n for kind, n in self.op_counts.items()},
        }


def run_query(qid: int, tables: Dict[str, ColumnTable], machine: Optional[MachineConfig] = None,
              kernel: Optional[KernelConfig] = None, mode: str = 'optimized', dpus: Optional[int] = None,
              join: str = 'hash', aggregation: str = 'hash', tasklets: Optional[int] = None) -> QueryRun:
    """
    Execute a query plan end to end: column loads, operators, result copy
    and host finishing.

    Raises:
        ConfigError: unknown query, join or aggregation method
        CapacityError: the loaded columns do not fit the DPUs' MRAM
    """
    if join not in JOIN_METHODS:
        raise ConfigError(f"unknown join method {join!r}")
    if aggregation not in ('hash', 'sort'):
        raise ConfigError(f"unknown aggregation method {aggregation!r}")
    plan = build_plan(qid, tables)
    system = PimSystem(machine, kernel, dpus, mode, tasklets)
    ctx = Context(system, dict(tables), join_method=join, aggregation_method=aggregation)
    last = plan.last_uses()
    for i, step in enumerate(plan.steps):
        logger.debug("q%d step %d: %s", qid, i, step.name)
        _run_step(ctx, step)
        _release(ctx, plan, i, last)
    for dt, _ in ctx.resident.values():
        dt.free()
    result = plan.finish(ctx)

    breakdown = {}
    for event in system.timeline:
        breakdown[event.kind] = breakdown.get(event.kind, 0.0) + event.duration
    op_counts = {kind: system.op_counts.get(kind, 0) for kind in OPERATOR_KINDS}
    run = QueryRun(qid, result, system, op_counts, system.kernel_seconds(), makespan(system.timeline), breakdown)
    logger.info("q%d: %d rows, kernel %.6f s, makespan %.6f s (%s)", qid, result.row_count, run.kernel_seconds,
                run.makespan, mode)
    return run
