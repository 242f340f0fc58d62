"""Operators over a multi-DPU system, checked against numpy oracles."""

import numpy as np
import pytest

from pimsim.aggregation import AggFunc, AggSpec
from pimsim.errors import ConfigError, SkewOverflowError
from pimsim.experiments import (METRICS_COLUMNS, VARIANTS, aggregation_crossover, bench_operator, ipc_sweep,
                                radix_sweep, run_sweep, strong_scaling, weak_scaling)
from pimsim.expressions import Col, Const, KeyPack, Mul, Sub
from pimsim.operators import JOIN_METHODS, ORDER_DTYPE, aggregate, join_hash, join_sort_merge, order, select
from pimsim.selection import Cmp


def _load(system, rng, rows=2000, groups=40):
    columns = {
        'a': rng.integers(0, 1000, rows),
        'b': rng.integers(0, 100, rows),
        'k': rng.integers(0, groups, rows),
        'v': rng.integers(-500, 500, rows),
    }
    return columns, system.load_columns(columns)


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def test_select_matches_filter(make_system, rng):
    system = make_system(4)
    columns, table = _load(system, rng)
    result = select(system, table, [Cmp('a', 'between', 100, high=500), Cmp('b', '<', 50)], keep=['a', 'v'])
    mask = (columns['a'] >= 100) & (columns['a'] <= 500) & (columns['b'] < 50)

    out = result.output.to_host()
    assert result.info == {'rows_in': 2000, 'rows_out': int(mask.sum())}
    np.testing.assert_array_equal(out['_rowid'], np.flatnonzero(mask))
    np.testing.assert_array_equal(out['a'], columns['a'][mask])
    np.testing.assert_array_equal(out['v'], columns['v'][mask])
    assert sorted(result.output.columns) == ['_rowid', 'a', 'v']
    assert system.op_counts['selection'] == 1
    assert result.kernel_seconds > 0


def test_select_chain_keeps_base_row_ids(make_system, rng):
    system = make_system(4)
    columns, table = _load(system, rng)
    first = select(system, table, [Cmp('a', '>=', 300)]).output
    second = select(system, first, [Cmp('k', '=', 7)]).output
    mask = (columns['a'] >= 300) & (columns['k'] == 7)

    np.testing.assert_array_equal(second.to_host(['k'])['_rowid'], np.flatnonzero(mask))
    assert system.op_counts['selection'] == 2


def test_select_same_rows_in_both_transfer_modes(make_system, rng):
    columns = {'a': rng.integers(0, 1000, 1500)}
    results = []
    for mode in ('naive', 'optimized'):
        system = make_system(4, mode=mode)
        table = system.load_columns(columns)
        results.append(select(system, table, [Cmp('a', '<', 250)]).output.to_host()['_rowid'])
    np.testing.assert_array_equal(results[0], results[1])


def test_unknown_transfer_mode(make_system):
    with pytest.raises(ConfigError):
        make_system(4, mode='bulk')


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _grouped(keys, values):
    uniq, inverse = np.unique(keys, return_inverse=True)
    return uniq, np.bincount(inverse, weights=values).astype(np.int64), np.bincount(inverse)


@pytest.mark.parametrize('method', ['hash', 'sort'])
@pytest.mark.parametrize('groups', [1, 40, 1500])
def test_aggregate_matches_oracle(make_system, rng, method, groups):
    system = make_system(4)
    columns, table = _load(system, rng, groups=groups)
    spec = AggSpec('k', (AggFunc('sum', 'v', 'total'), AggFunc('count', name='n')))
    result = aggregate(system, table, spec, method)
    keys, totals, counts = _grouped(columns['k'], columns['v'])

    out = result.output
    np.testing.assert_array_equal(out['k'], keys)
    np.testing.assert_array_equal(out['total'], totals)
    np.testing.assert_array_equal(out['n'], counts)
    assert result.info['method'] == method
    assert result.info['partial_groups'] >= len(keys)
    assert system.op_counts['aggregation'] == 2


def test_aggregate_average_keeps_two_decimals(make_system):
    system = make_system(2)
    table = system.load_columns({'k': [1, 1, 1, 2], 'v': [10, 10, 11, 7]})
    spec = AggSpec('k', (AggFunc('average', 'v', 'avg'),))
    out = aggregate(system, table, spec).output
    assert out['avg'].tolist() == [1033, 700]


def test_aggregate_packed_key_and_expression(make_system, rng):
    system = make_system(4)
    columns = {
        'flag': rng.integers(0, 3, 1000),
        'status': rng.integers(0, 2, 1000),
        'price': rng.integers(100, 10000, 1000),
        'disc': rng.integers(0, 10, 1000),
    }
    table = system.load_columns(columns)
    key = KeyPack(((Col('flag'), 4), (Col('status'), 4)))
    revenue = Mul(Col('price'), Sub(Const(100), Col('disc')))
    spec = AggSpec(key, (AggFunc('sum', revenue, 'revenue'),), key_names=('flag', 'status'))
    out = aggregate(system, table, spec, 'sort').output

    packed = columns['flag'] * 16 + columns['status']
    keys, totals, _ = _grouped(packed, columns['price'] * (100 - columns['disc']))
    np.testing.assert_array_equal(out['flag'], keys // 16)
    np.testing.assert_array_equal(out['status'], keys % 16)
    np.testing.assert_array_equal(out['revenue'], totals)


def test_aggregate_constant_key_is_one_group(make_system, rng):
    system = make_system(4)
    columns, table = _load(system, rng)
    out = aggregate(system, table, AggSpec(Const(0), (AggFunc('sum', 'v', 'total'),))).output
    assert out['total'].tolist() == [int(columns['v'].sum())]


def test_aggregate_unknown_method(make_system, rng):
    system = make_system(2)
    _, table = _load(system, rng, rows=100)
    with pytest.raises(ConfigError):
        aggregate(system, table, AggSpec('k', (AggFunc('count'),)), 'radix')


# ---------------------------------------------------------------------------
# Ordering
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('local_sort', ['quicksort', 'mergesort'])
def test_global_order(make_system, rng, local_sort):
    system = make_system(4)
    columns, table = _load(system, rng)
    result = order(system, table, 'a', local_sort=local_sort)
    out = result.output.to_host()

    assert out.dtype == ORDER_DTYPE
    assert np.all(np.diff(out['key']) >= 0)
    np.testing.assert_array_equal(out['key'], np.sort(columns['a']))
    np.testing.assert_array_equal(np.sort(out['p0']), np.arange(2000))
    np.testing.assert_array_equal(columns['a'][out['p0']], out['key'])
    assert sum(result.output.counts()) == 2000
    assert system.op_counts['order'] == 1


def test_global_order_descending(make_system, rng):
    system = make_system(4)
    columns, table = _load(system, rng)
    out = order(system, table, 'a', descending=True).output.to_host()
    np.testing.assert_array_equal(-out['key'], np.sort(columns['a'])[::-1])


def test_topk_includes_ties(make_system, rng):
    system = make_system(4)
    columns, table = _load(system, rng)
    out = order(system, table, 'b', mode='topk', k=25).output
    kth = np.sort(columns['b'])[24]

    assert len(out) == int((columns['b'] <= kth).sum())
    assert np.all(np.diff(out['key']) >= 0)
    np.testing.assert_array_equal(columns['b'][out['p0']], out['key'])


def test_topk_reads_ties_through_dma(make_system):
    system = make_system(2)
    table = system.load_columns({'a': np.concatenate([np.arange(5), np.full(40, 7), np.arange(100, 155)])})
    result = order(system, table, 'a', mode='topk', k=10)

    assert len(result.output) == 45
    heads = [m for m in result.metrics if m.kernel == 'sorted_head']
    assert len(heads) == 2
    assert sum(m.dma_read_bytes for m in heads) > 16 * 2


def test_order_skew_overflows(make_system):
    system = make_system(4)
    table = system.load_columns({'a': np.full(400, 5)})
    with pytest.raises(SkewOverflowError):
        order(system, table, 'a', capacity=200)


@pytest.mark.parametrize('kwargs', [{'mode': 'bucket'}, {'local_sort': 'heapsort'}, {'mode': 'topk', 'k': 0}])
def test_order_bad_arguments(make_system, rng, kwargs):
    system = make_system(2)
    _, table = _load(system, rng, rows=100)
    with pytest.raises(ConfigError):
        order(system, table, 'a', **kwargs)


# ---------------------------------------------------------------------------
# Joins
# ---------------------------------------------------------------------------

def _join_inputs(rng, n_inner=800, n_outer=3000):
    inner_keys = rng.permutation(2 * n_inner)[:n_inner]
    outer_keys = rng.integers(0, 2 * n_inner, n_outer)
    return inner_keys, outer_keys


def _oracle_pairs(inner_keys, outer_keys):
    position = {int(k): i for i, k in enumerate(inner_keys)}
    return sorted((position[int(k)], j) for j, k in enumerate(outer_keys) if int(k) in position)


def _pairs(out):
    return sorted(zip(out['inner'].tolist(), out['outer'].tolist()))


@pytest.mark.parametrize('method', sorted(JOIN_METHODS))
@pytest.mark.parametrize('dpus', [1, 4])
def test_join_matches_oracle(make_system, rng, method, dpus):
    system = make_system(dpus)
    inner_keys, outer_keys = _join_inputs(rng)
    inner = system.load_columns({'k': inner_keys})
    outer = system.load_columns({'k': outer_keys})
    result = JOIN_METHODS[method](system, inner, 'k', outer, 'k')

    assert _pairs(result.output) == _oracle_pairs(inner_keys, outer_keys)
    assert result.info['algorithm'] == method
    assert system.op_counts['join'] == 1


def test_join_methods_agree_after_selection(make_system, rng):
    inner_keys, outer_keys = _join_inputs(rng)
    found = []
    for join in (join_sort_merge, join_hash):
        system = make_system(4)
        inner = system.load_columns({'k': inner_keys})
        outer = select(system, system.load_columns({'k': outer_keys}), [Cmp('k', '<', 600)]).output
        found.append(_pairs(join(system, inner, 'k', outer, 'k').output))

    mask = outer_keys < 600
    expected = _oracle_pairs(inner_keys, outer_keys)
    assert found[0] == found[1]
    assert found[0] == [(i, j) for i, j in expected if mask[j]]


@pytest.mark.parametrize('join', [join_sort_merge, join_hash])
def test_join_with_empty_side(make_system, rng, join):
    system = make_system(4)
    inner = system.load_columns({'k': np.arange(100)})
    outer = select(system, system.load_columns({'k': np.arange(100)}), [Cmp('k', '<', 0)]).output
    assert len(join(system, inner, 'k', outer, 'k').output) == 0


# ---------------------------------------------------------------------------
# Operator benchmarks
# ---------------------------------------------------------------------------

def test_bench_record_columns(machine):
    record = bench_operator('selection', 1024, dpus=2, tasklets=11, machine=machine)

    assert list(record) == list(METRICS_COLUMNS)
    assert (record['op'], record['variant'], record['dpus'], record['tasklets']) == ('selection', 'select', 2, 11)
    assert record['rows'] == 2048
    assert 0 < record['ipc'] <= 1
    assert record['kernel_seconds'] > 0
    assert record['dma_bytes'] > 0


@pytest.mark.parametrize('op, variant', [(op, v) for op, variants in VARIANTS.items() for v in variants])
def test_every_variant_runs(machine, op, variant):
    record = bench_operator(op, 256, dpus=2, variant=variant, machine=machine)
    assert record['variant'] == variant
    assert record['instructions'] > 0


@pytest.mark.parametrize('op, variant', [('scan', None), ('order', 'heapsort')])
def test_bench_rejects_unknown(op, variant):
    with pytest.raises(ConfigError):
        bench_operator(op, 256, variant=variant)


def test_ipc_grows_with_tasklets(machine):
    one, eleven = ipc_sweep('selection', tasklets=(1, 11), rows=8192, machine=machine)
    assert one['ipc'] <= 1 / 11 + 1e-9
    assert eleven['ipc'] > 4 * one['ipc']
    assert eleven['kernel_seconds'] < one['kernel_seconds']


def test_hash_aggregation_wins_with_few_groups(machine):
    hashed, by_sort = aggregation_crossover(rows=4096, exponents=(6,), machine=machine)
    assert (hashed['variant'], by_sort['variant']) == ('hash', 'sort')
    assert hashed['kernel_seconds'] < by_sort['kernel_seconds']
    assert hashed['hash_events'] >= 4096


def test_radix_sweep_records(machine):
    records = radix_sweep(rows=2048, total_bits=6, bits=(2, 3, 6), machine=machine)
    assert [r['param'] for r in records] == [2, 3, 6]
    assert all(r['instructions'] > 0 for r in records)
    # one pass moves the data once
    assert records[2]['dma_bytes'] < records[0]['dma_bytes']


def test_weak_scaling_baseline(machine):
    records = weak_scaling('selection', rows_per_dpu=512, dpus=(1, 2), machine=machine)
    assert [r['dpus'] for r in records] == [1, 2]
    assert records[0]['efficiency'] == pytest.approx(1.0)
    assert records[1]['rows'] == 1024


def test_strong_scaling_splits_the_input(machine):
    records = strong_scaling('selection', total_rows=2048, dpus=(1, 4), machine=machine)
    assert [r['rows'] for r in records] == [2048, 2048]
    assert records[1]['kernel_seconds'] < records[0]['kernel_seconds']


def test_unknown_sweep():
    with pytest.raises(ConfigError):
        run_sweep('latency')


# ---------------------------------------------------------------------------
# Sweeps at their default sizes
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_selection_throughput_saturates_at_eleven_tasklets(machine):
    records = ipc_sweep('selection', machine=machine)
    tasklets = np.array([r['tasklets'] for r in records])
    throughput = np.array([r['rows'] / r['kernel_seconds'] for r in records])
    assert tasklets.tolist() == list(range(1, 25))
    for r in records:
        assert r['ipc'] <= min(1.0, r['tasklets'] / 11) + 1e-9

    slope, _ = np.polyfit(tasklets[:11], throughput[:11], 1)
    r2 = np.corrcoef(tasklets[:11], throughput[:11])[0, 1] ** 2
    assert slope > 0
    assert r2 >= 0.98
    assert (throughput[23] - throughput[10]) / 13 < 0.2 * slope


@pytest.mark.slow
def test_hash_aggregation_grows_with_groups_while_sort_stays_flat(machine):
    records = aggregation_crossover(machine=machine)
    hashed = [r['kernel_seconds'] for r in records if r['variant'] == 'hash']
    by_sort = [r['kernel_seconds'] for r in records if r['variant'] == 'sort']
    assert len(hashed) == len(by_sort) == 9

    assert sum(b > a for a, b in zip(hashed, hashed[1:])) >= 4
    assert max(by_sort) / min(by_sort) - 1 <= 0.15

    fifty = {v: bench_operator('aggregation', 1 << 14, variant=v, param=50, machine=machine)['kernel_seconds']
             for v in ('hash', 'sort')}
    assert fifty['sort'] >= 2 * fifty['hash']


def test_radix_bits_have_an_interior_optimum(machine):
    records = radix_sweep(machine=machine)
    seconds = {r['param']: r['kernel_seconds'] for r in records}
    assert sorted(seconds) == [3, 4, 5, 6]

    best = min(seconds, key=seconds.get)
    assert best in (4, 5)
    assert seconds[best] < seconds[3]
    assert seconds[best] < seconds[6]


@pytest.mark.slow
def test_order_strong_scaling(machine):
    records = strong_scaling(machine=machine)
    assert [r['dpus'] for r in records] == [4, 8, 16, 32]
    seconds = [r['kernel_seconds'] for r in records]
    assert all(b < a for a, b in zip(seconds, seconds[1:]))
    assert all(r['efficiency'] >= 0.60 for r in records)


@pytest.mark.slow
def test_order_weak_scaling(machine):
    records = weak_scaling(machine=machine)
    efficiency = [r['efficiency'] for r in records]
    assert efficiency[0] == pytest.approx(1.0)
    assert all(0 < e <= 1 + 1e-9 for e in efficiency)
    assert all(b <= a + 0.02 for a, b in zip(efficiency, efficiency[1:]))


def test_repeated_runs_give_identical_records(machine):
    first = run_sweep('radix', machine=machine, rows=1024, total_bits=6, bits=(2, 3))
    second = run_sweep('radix', machine=machine, rows=1024, total_bits=6, bits=(2, 3))
    assert first == second
    assert bench_operator('order', 512, 4, machine=machine) == bench_operator('order', 512, 4, machine=machine)


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------

def _random_instance(instance):
    r = np.random.default_rng([11, instance])
    dpus = int(r.integers(1, 33))
    rows = int(r.integers(10, 65)) * dpus
    return r, dpus, rows


@pytest.mark.parametrize('instance', [i if i % 20 == 0 else pytest.param(i, marks=pytest.mark.slow)
                                      for i in range(200)])
def test_random_instances_match_oracles(make_system, instance):
    r, dpus, rows = _random_instance(instance)
    system = make_system(dpus)
    op = ('select', 'aggregate', 'order', 'join')[instance % 4]
    second = (instance // 4) % 2 == 1

    if op == 'select':
        columns = {'a': r.integers(0, 1000, rows), 'v': r.integers(-500, 500, rows)}
        bound = int(r.integers(0, 1000))
        out = select(system, system.load_columns(columns), [Cmp('a', '<', bound)], keep=['v']).output.to_host()
        mask = columns['a'] < bound
        np.testing.assert_array_equal(out['_rowid'], np.flatnonzero(mask))
        np.testing.assert_array_equal(out['v'], columns['v'][mask])
    elif op == 'aggregate':
        columns = {'k': r.integers(0, int(r.integers(1, 200)), rows), 'v': r.integers(-500, 500, rows)}
        spec = AggSpec('k', (AggFunc('sum', 'v', 'total'), AggFunc('count', name='n')))
        out = aggregate(system, system.load_columns(columns), spec, 'sort' if second else 'hash').output
        keys, totals, counts = _grouped(columns['k'], columns['v'])
        np.testing.assert_array_equal(out['k'], keys)
        np.testing.assert_array_equal(out['total'], totals)
        np.testing.assert_array_equal(out['n'], counts)
    elif op == 'order':
        keys = r.integers(-(1 << 20), 1 << 20, rows)
        local_sort = 'mergesort' if second else 'quicksort'
        out = order(system, system.load_columns({'a': keys}), 'a', local_sort=local_sort).output.to_host()
        np.testing.assert_array_equal(out['key'], np.sort(keys))
        np.testing.assert_array_equal(keys[out['p0']], out['key'])
    else:
        inner_keys, outer_keys = _join_inputs(r, n_inner=max(1, rows // 4), n_outer=rows)
        join = join_sort_merge if second else join_hash
        result = join(system, system.load_columns({'k': inner_keys}), 'k', system.load_columns({'k': outer_keys}), 'k')
        assert _pairs(result.output) == _oracle_pairs(inner_keys, outer_keys)
