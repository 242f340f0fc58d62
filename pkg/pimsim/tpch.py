"""
Deterministic TPC-H style data at desk scale.

Only the columns the five supported queries read are generated, all
integer encoded:

  dates         days since 1970-01-01 ('date' lane)
  money         hundredths ('decimal' lane): extendedprice, discount, tax
  quantity      whole units
  text columns  dictionary codes, see DICTIONARIES

Distributions follow the reference generator in simplified form: order
dates uniform over 1992-01-01 .. 1998-08-02, one to 121 days to ship,
commit 30 to 90 days after the order, receipt one to 30 days after
shipping; lines pick their order uniformly so an order has four lines on
average (some have none). Order keys are dense.
"""

import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np

from pimsim.errors import ConfigError
from pimsim.table import ColumnTable, date_code

logger = logging.getLogger(__name__)

REGIONS = ('AFRICA', 'AMERICA', 'ASIA', 'EUROPE', 'MIDDLE EAST')

NATIONS = (
    ('ALGERIA', 0), ('ARGENTINA', 1), ('BRAZIL', 1), ('CANADA', 1), ('EGYPT', 4),
    ('ETHIOPIA', 0), ('FRANCE', 3), ('GERMANY', 3), ('INDIA', 2), ('INDONESIA', 2),
    ('IRAN', 4), ('IRAQ', 4), ('JAPAN', 2), ('JORDAN', 4), ('KENYA', 0),
    ('MOROCCO', 0), ('MOZAMBIQUE', 0), ('PERU', 1), ('CHINA', 2), ('ROMANIA', 3),
    ('SAUDI ARABIA', 4), ('VIETNAM', 2), ('RUSSIA', 3), ('UNITED KINGDOM', 3), ('UNITED STATES', 1),
)

SEGMENTS = ('AUTOMOBILE', 'BUILDING', 'FURNITURE', 'HOUSEHOLD', 'MACHINERY')
PRIORITIES = ('1-URGENT', '2-HIGH', '3-MEDIUM', '4-NOT SPECIFIED', '5-LOW')
RETURN_FLAGS = ('A', 'N', 'R')
LINE_STATUS = ('F', 'O')

DICTIONARIES = {
    'r_name': REGIONS,
    'n_name': tuple(name for name, _ in NATIONS),
    'c_mktsegment': SEGMENTS,
    'o_orderpriority': PRIORITIES,
    'l_returnflag': RETURN_FLAGS,
    'l_linestatus': LINE_STATUS,
}

START_DATE = date_code('1992-01-01')
END_DATE = date_code('1998-12-31')
CURRENT_DATE = date_code('1995-06-17')
LAST_ORDER_DATE = END_DATE - 151

BASE_ROWS = {'lineitem': 6_000_000, 'orders': 1_500_000, 'customer': 150_000, 'supplier': 10_000}


def code(column: str, value: str) -> int:
    """Dictionary code of a text value."""
    try:
        return DICTIONARIES[column].index(value)
    except (KeyError, ValueError):
        raise ConfigError(f"{value!r} is not a value of {column}")


@dataclass(frozen=True)
class GenSpec:
    sf: float = 0.01
    seed: int = 42

    def __post_init__(self):
        if not self.sf > 0:
            raise ConfigError(f"scale factor must be positive, got {self.sf}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit 64 bits")

    def rows(self, table: str) -> int:
        if table == 'nation':
            return len(NATIONS)
        if table == 'region':
            return len(REGIONS)
        return max(1, int(round(BASE_ROWS[table] * self.sf)))


def generate(spec: GenSpec) -> Dict[str, ColumnTable]:
    """Generate region, nation, supplier, customer, orders and lineitem."""
    rng = np.random.default_rng(spec.seed)
    tables = {}

    tables['region'] = ColumnTable('region', {
        'r_regionkey': np.arange(len(REGIONS)),
        'r_name': np.arange(len(REGIONS)),
    }, {'r_regionkey': 'int32', 'r_name': 'int32'})

    tables['nation'] = ColumnTable('nation', {
        'n_nationkey': np.arange(len(NATIONS)),
        'n_name': np.arange(len(NATIONS)),
        'n_regionkey': [region for _, region in NATIONS],
    }, {'n_nationkey': 'int32', 'n_name': 'int32', 'n_regionkey': 'int32'})

    S = spec.rows('supplier')
    tables['supplier'] = ColumnTable('supplier', {
        's_suppkey': np.arange(1, S + 1),
        's_nationkey': rng.integers(0, len(NATIONS), S),
    }, {'s_suppkey': 'int32', 's_nationkey': 'int32'})

    C = spec.rows('customer')
    tables['customer'] = ColumnTable('customer', {
        'c_custkey': np.arange(1, C + 1),
        'c_nationkey': rng.integers(0, len(NATIONS), C),
        'c_mktsegment': rng.integers(0, len(SEGMENTS), C),
    }, {'c_custkey': 'int32', 'c_nationkey': 'int32', 'c_mktsegment': 'int32'})

    O = spec.rows('orders')
    orderdate = rng.integers(START_DATE, LAST_ORDER_DATE + 1, O)
    tables['orders'] = ColumnTable('orders', {
        'o_orderkey': np.arange(1, O + 1),
        'o_custkey': rng.integers(1, C + 1, O),
        'o_orderdate': orderdate,
        'o_orderpriority': rng.integers(0, len(PRIORITIES), O),
        'o_shippriority': np.zeros(O, dtype=np.int64),
    }, {'o_orderkey': 'int32', 'o_custkey': 'int32', 'o_orderdate': 'date', 'o_orderpriority': 'int32',
        'o_shippriority': 'int32'})

    L = spec.rows('lineitem')
    orderkey = np.sort(rng.integers(1, O + 1, L))
    quantity = rng.integers(1, 51, L)
    unit_price = rng.integers(90_000, 210_000, L)
    shipdate = orderdate[orderkey - 1] + rng.integers(1, 122, L)
    commitdate = orderdate[orderkey - 1] + rng.integers(30, 91, L)
    receiptdate = shipdate + rng.integers(1, 31, L)
    returned = rng.integers(0, 2, L)
    returnflag = np.where(receiptdate <= CURRENT_DATE,
                          np.where(returned == 1, code('l_returnflag', 'R'), code('l_returnflag', 'A')),
                          code('l_returnflag', 'N'))
    linestatus = np.where(shipdate > CURRENT_DATE, code('l_linestatus', 'O'), code('l_linestatus', 'F'))
    tables['lineitem'] = ColumnTable('lineitem', {
        'l_orderkey': orderkey,
        'l_suppkey': rng.integers(1, S + 1, L),
        'l_quantity': quantity,
        'l_extendedprice': quantity * unit_price,
        'l_discount': rng.integers(0, 11, L),
        'l_tax': rng.integers(0, 9, L),
        'l_returnflag': returnflag,
        'l_linestatus': linestatus,
        'l_shipdate': shipdate,
        'l_commitdate': commitdate,
        'l_receiptdate': receiptdate,
    }, {'l_orderkey': 'int32', 'l_suppkey': 'int32', 'l_quantity': 'int32', 'l_extendedprice': 'decimal',
        'l_discount': 'decimal', 'l_tax': 'decimal', 'l_returnflag': 'int32', 'l_linestatus': 'int32',
        'l_shipdate': 'date', 'l_commitdate': 'date', 'l_receiptdate': 'date'})

    logger.info("generated sf=%g seed=%d: %s", spec.sf, spec.seed,
                ', '.join(f"{name} {t.row_count}" for name, t in tables.items()))
    return tables
