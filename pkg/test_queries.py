"""Generated tables, query plans and end-to-end queries against the host oracle."""

import numpy as np
import pytest

from pimsim.errors import ConfigError, VerificationError
from pimsim.host import check_timeline
from pimsim.oracle import oracle_query, verify
from pimsim.queries import QUERY_IDS, TABLE5, build_plan, run_query
from pimsim.table import ColumnTable, date_code, load_tables, save_tables
from pimsim.tpch import GenSpec, code, generate


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def test_generated_row_counts(tables):
    counts = {name: t.row_count for name, t in tables.items()}
    assert counts == {'region': 5, 'nation': 25, 'supplier': 100, 'customer': 1500, 'orders': 15000,
                      'lineitem': 60000}


def test_generation_is_deterministic():
    first = generate(GenSpec(0.001, 3))
    second = generate(GenSpec(0.001, 3))
    other = generate(GenSpec(0.001, 4))
    assert all(first[name].equals(second[name]) for name in first)
    assert not first['lineitem'].equals(other['lineitem'])


def test_generated_dates_are_consistent(tables):
    li = tables['lineitem']
    orders = tables['orders']
    orderdate = orders['o_orderdate'][li['l_orderkey'] - 1]
    assert np.all(li['l_shipdate'] > orderdate)
    assert np.all(li['l_receiptdate'] > li['l_shipdate'])
    assert np.all(np.diff(li['l_orderkey']) >= 0)
    np.testing.assert_array_equal(orders['o_orderkey'], np.arange(1, 15001))


def test_bad_generator_inputs():
    with pytest.raises(ConfigError):
        GenSpec(0)
    with pytest.raises(ConfigError):
        code('r_name', 'ATLANTIS')
    assert code('r_name', 'ASIA') == 2


def test_tables_survive_a_save(tmp_path, tables):
    paths = save_tables({'nation': tables['nation'], 'orders': tables['orders']}, tmp_path)
    assert [p.rsplit('/', 1)[-1] for p in paths] == ['nation.pimcol', 'orders.pimcol']

    loaded = load_tables(tmp_path)
    assert loaded['orders'].equals(tables['orders'])
    assert loaded['orders'].lane('o_orderdate') == 'date'


def test_corrupt_table_file():
    with pytest.raises(ConfigError):
        ColumnTable.from_bytes(b'PIMCOL01\x05')


def test_csv_rendering():
    table = ColumnTable('t', {'d': [date_code('1995-03-15')], 'price': [-1205], 'n': [3]},
                        {'d': 'date', 'price': 'decimal', 'n': 'int32'})
    assert table.to_csv() == 'd,price,n\n1995-03-15,-12.05,3\n'


# ---------------------------------------------------------------------------
# Plans and oracle
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('qid', QUERY_IDS)
def test_plan_operator_counts(tables, qid):
    assert build_plan(qid, tables).operator_counts() == TABLE5[qid]


def test_unknown_query(tables):
    with pytest.raises(ConfigError):
        build_plan(2, tables)
    with pytest.raises(ConfigError):
        oracle_query(2, tables)
    with pytest.raises(ConfigError):
        run_query(6, tables, join='nested-loop')
    with pytest.raises(ConfigError):
        run_query(6, tables, aggregation='radix')


def test_q5_join_orders_agree(tables):
    assert oracle_query(5, tables, 'forward').equals(oracle_query(5, tables, 'reverse'))
    with pytest.raises(ConfigError):
        oracle_query(5, tables, 'sideways')


def test_verify_reports_the_first_difference(tables):
    expected = oracle_query(6, tables)
    assert expected.row_count == 1
    wrong = ColumnTable('q6', {'revenue': expected['revenue'] + 1})

    with pytest.raises(VerificationError) as exc:
        verify(6, wrong, tables)
    assert exc.value.first_difference.startswith('row 0')


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('qid', QUERY_IDS)
def test_query_matches_oracle(tables, qid):
    run = run_query(qid, tables, dpus=8)

    verify(qid, run.result, tables)
    assert run.op_counts == TABLE5[qid]
    assert run.kernel_seconds > 0
    assert run.makespan >= run.kernel_seconds
    check_timeline(run.timeline)


@pytest.mark.parametrize('qid, join, aggregation', [
    (1, 'hash', 'sort'),
    (3, 'sort-merge', 'hash'),
    (4, 'sort-merge', 'sort'),
    (5, 'sort-merge', 'sort'),
])
def test_query_variants_match_oracle(tables, qid, join, aggregation):
    run = run_query(qid, tables, dpus=8, join=join, aggregation=aggregation)
    verify(qid, run.result, tables)


def test_naive_transfers_same_result_slower(tables):
    naive = run_query(3, tables, dpus=8, mode='naive')
    optimized = run_query(3, tables, dpus=8, mode='optimized')

    assert naive.result.equals(optimized.result)
    assert naive.makespan > optimized.makespan


def test_q6_summary(tables):
    run = run_query(6, tables, dpus=4)
    summary = run.summary()

    assert summary['query'] == 6
    assert summary['rows'] == 1
    assert (summary['selection_ops'], summary['aggregation_ops'], summary['join_ops']) == (3, 1, 0)
    assert summary['kernel_seconds'] > 0
    assert run.class_count('mul32') > 0
    assert run.result.lane('revenue') == 'int64'


def test_more_tasklets_run_faster(tables):
    single = run_query(6, tables, dpus=4, tasklets=1)
    full = run_query(6, tables, dpus=4, tasklets=16)
    assert single.result.equals(full.result)
    assert full.kernel_seconds < single.kernel_seconds


@pytest.mark.slow
@pytest.mark.parametrize('qid', QUERY_IDS)
def test_query_at_scale(qid):
    tables = generate(GenSpec(0.1, 42))
    run = run_query(qid, tables)
    verify(qid, run.result, tables)
    assert run.op_counts == TABLE5[qid]
