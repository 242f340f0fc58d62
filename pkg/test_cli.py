"""The pimbench command and the run layer behind it."""

import argparse
import json

import pytest

import pimbench
from pimsim.config import load_config
from pimsim.errors import ConfigError, VerificationError
from pimsim.experiments import METRICS_COLUMNS, calibrate
from pimsim.jobs import RUN_KINDS, execute, metrics_csv, read_metrics_csv, timeline_json


def test_int_range():
    assert pimbench.int_range('1..4') == [1, 2, 3, 4]
    assert pimbench.int_range('8,16,32') == [8, 16, 32]
    assert pimbench.int_range('11') == [11]
    for bad in ('a..b', 'x', ','):
        with pytest.raises(argparse.ArgumentTypeError):
            pimbench.int_range(bad)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def test_bench_writes_versioned_csv(capsys):
    code = pimbench.main(['bench', '--op', 'selection', '--rows', '256', '--tasklets', '1,11'])
    out = capsys.readouterr().out

    assert code == pimbench.EXIT_OK
    assert out.startswith('# pimsim-metrics v1\n')
    records = read_metrics_csv(out)
    assert [r['tasklets'] for r in records] == ['1', '11']
    assert all(r['op'] == 'selection' for r in records)


def test_bench_json_to_file(tmp_path, capsys):
    target = tmp_path / 'order.json'
    code = pimbench.main(['--format', 'json', '--out', str(target), 'bench', '--op', 'order',
                          '--variant', 'mergesort', '--rows', '128', '--dpus', '2,4'])

    assert code == pimbench.EXIT_OK
    records = json.loads(target.read_text())
    assert [r['dpus'] for r in records] == [2, 4]
    assert {r['variant'] for r in records} == {'mergesort'}
    assert 'Wrote' in capsys.readouterr().out


def test_reruns_write_identical_files(tmp_path, capsys):
    paths = [tmp_path / 'first.csv', tmp_path / 'second.csv']
    for path in paths:
        code = pimbench.main(['--out', str(path), 'bench', '--op', 'aggregation', '--rows', '256',
                              '--dpus', '1,4'])
        assert code == pimbench.EXIT_OK
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert len(read_metrics_csv(paths[0].read_text())) == 2


def test_query_passes_and_writes_artifacts(tmp_path, capsys):
    result, timeline = tmp_path / 'q6.csv', tmp_path / 'q6.json'
    code = pimbench.main(['--out', str(tmp_path / 'metrics.csv'), 'query', '6', '--sf', '0.001', '--dpus', '4',
                          '--result', str(result), '--timeline', str(timeline)])
    err = capsys.readouterr().err

    assert code == pimbench.EXIT_OK
    assert 'q6 PASS' in err
    assert result.read_text().splitlines()[0] == 'revenue'
    stream = json.loads(timeline.read_text())
    assert stream['schema'] == 'pimsim-timeline'
    assert set(stream['events'][0]) == {'kind', 'rank', 'start_ns', 'end_ns', 'bytes'}
    assert read_metrics_csv((tmp_path / 'metrics.csv').read_text())[0]['op'] == 'q6'


def test_query_mismatch_exits_one(monkeypatch, capsys):
    def disagree(qid, result, tables):
        raise VerificationError('mismatch', 'row 0: planted')

    monkeypatch.setattr('pimsim.jobs.verify', disagree)
    code = pimbench.main(['query', '6', '--sf', '0.001', '--dpus', '2'])
    err = capsys.readouterr().err

    assert code == pimbench.EXIT_FAILED
    assert 'q6 FAIL' in err
    assert 'row 0: planted' in err


def test_gen_then_query_from_disk(tmp_path, capsys):
    data = tmp_path / 'sf'
    assert pimbench.main(['gen', '--sf', '0.001', '--data', str(data)]) == pimbench.EXIT_OK
    assert len(list(data.glob('*.pimcol'))) == 6

    code = pimbench.main(['query', '1', '--data', str(data), '--dpus', '4', '--aggregation', 'sort'])
    assert code == pimbench.EXIT_OK
    assert 'q1 PASS' in capsys.readouterr().err


def test_timeline_command(tmp_path):
    target = tmp_path / 'naive.json'
    code = pimbench.main(['--out', str(target), 'timeline', '--mode', 'naive', '--rows', '128', '--dpus', '8'])

    assert code == pimbench.EXIT_OK
    stream = json.loads(target.read_text())
    kinds = {e['kind'] for e in stream['events']}
    assert {'host_alloc', 'host_reorder', 'p2h', 'h2p', 'kernel'} <= kinds
    starts = [e['start_ns'] for e in stream['events']]
    assert starts == sorted(starts)


def test_calibrate_saves_config(tmp_path, capsys, config_path):
    target = tmp_path / 'calibrated.conf'
    code = pimbench.main(['--config', config_path, 'calibrate', '--save', str(target)])

    assert code == pimbench.EXIT_OK
    fitted, _ = calibrate()
    machine, _ = load_config(str(target))
    assert machine.dma_alpha == pytest.approx(fitted.dma_alpha)
    assert 'dma_alpha' in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('argv', [
    ['bench', '--op', 'order', '--variant', 'heapsort', '--rows', '64'],
    ['bench', '--op', 'selection', '--rows', '64', '--tasklets', '25'],
    ['sweep', 'radix', '--op', 'order'],
    ['query', '6', '--data', '/nonexistent/pimsim-data'],
])
def test_configuration_errors_exit_two(argv, capsys):
    assert pimbench.main(argv) == pimbench.EXIT_CONFIG
    assert 'Configuration error' in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    code = pimbench.main(['--config', str(tmp_path / 'absent.conf'), 'bench', '--op', 'selection'])
    assert code == pimbench.EXIT_CONFIG
    assert 'absent.conf' in capsys.readouterr().err


@pytest.mark.parametrize('argv', [[], ['bench'], ['query', '2'], ['timeline', '--mode', 'bulk']])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        pimbench.main(argv)
    assert exc.value.code == 2


def test_record_stores_the_run(app, capsys):
    from models import RunMetric, SimulationRun

    code = pimbench.main(['--record', 'bench', '--op', 'selection', '--rows', '64', '--tasklets', '4,8'])
    assert code == pimbench.EXIT_OK
    assert 'Recorded run' in capsys.readouterr().out

    run = SimulationRun.query.one()
    assert (run.kind, run.status, run.triggered_by, run.success) == ('bench', 'completed', 'pimbench', True)
    assert RunMetric.query.filter_by(run_id=run.id).count() == 2


# ---------------------------------------------------------------------------
# Run layer
# ---------------------------------------------------------------------------

def test_execute_rejects_bad_params():
    with pytest.raises(ConfigError):
        execute('profile', {})
    with pytest.raises(ConfigError):
        execute('bench', {'op': 'selection', 'rows': 'many'})
    with pytest.raises(ConfigError):
        execute('query', {'qid': 2})
    with pytest.raises(ConfigError):
        execute('sweep', {'name': 'latency'})
    assert set(RUN_KINDS) == {'bench', 'query', 'sweep', 'timeline', 'calibrate'}


def test_execute_sweep_with_rows():
    result = execute('sweep', {'name': 'crossover', 'rows': 512})
    assert result.output == {'sweep': 'crossover', 'points': len(result.records)}
    assert {r['variant'] for r in result.records} == {'hash', 'sort'}
    assert all(r['rows'] == 512 for r in result.records)


def test_calibrate_run_reports_the_machine():
    result = execute('calibrate', {'read_target': 600e6, 'write_target': 600e6})
    assert result.machine.dma_alpha == result.output['machine']['dma_alpha']
    assert result.output['dma_bandwidth'] == pytest.approx(600e6, rel=0.01)


def test_metrics_csv_layout():
    text = metrics_csv([{name: '' for name in METRICS_COLUMNS} | {'op': 'join', 'dpus': 8}])
    lines = text.splitlines()
    assert lines[0] == '# pimsim-metrics v1'
    assert lines[1].split(',') == list(METRICS_COLUMNS)
    assert read_metrics_csv(text)[0]['dpus'] == '8'
    with pytest.raises(ConfigError):
        read_metrics_csv('experiment,op\n')


def test_timeline_json_envelope():
    stream = json.loads(timeline_json([]))
    assert stream == {'schema': 'pimsim-timeline', 'version': 1, 'events': []}
