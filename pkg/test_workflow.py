"""
Results service workflow, end to end through the Flask test client:

1. Health and machine configuration
2. Start runs (bench, timeline, query) and read their status
3. Search runs
4. Download metrics CSV, timeline and query result
5. Error responses
"""

import json

import pytest

from pimsim.jobs import read_metrics_csv


def _start(client, kind, params, **extra):
    return client.post('/api/runs', json={'kind': kind, 'params': params, **extra})


def test_health(client):
    response = client.get('/health')
    assert response.status_code == 200
    assert response.get_json() == {'status': 'ok', 'service': 'pimsim'}


def test_config(client, config_path):
    data = client.get('/api/config').get_json()
    assert data['config_path'] == config_path
    assert data['machine']['dpu_count'] == 32
    assert data['rank_count'] == 4
    assert data['kernel']['tasklets'] >= 1


def test_bench_run_workflow(client):
    response = _start(client, 'bench', {'op': 'selection', 'rows': 256, 'tasklets': [1, 11]},
                      triggered_by='tester')
    assert response.status_code == 201
    created = response.get_json()
    assert created['success'] is True
    assert created['verdict'] is None
    run_id = created['run_id']

    run = client.get(f'/api/runs/{run_id}').get_json()
    assert (run['kind'], run['status'], run['triggered_by']) == ('bench', 'completed', 'tester')
    assert run['params']['tasklets'] == [1, 11]
    assert run['metrics_count'] == 2
    assert run['output'] == {'op': 'selection', 'points': 2}
    assert not run['has_timeline']
    assert not run['has_result']

    response = client.get(f'/api/runs/{run_id}/csv')
    assert response.status_code == 200
    assert response.mimetype == 'text/csv'
    assert f'bench_{run_id[:8]}.csv' in response.headers['Content-Disposition']
    records = read_metrics_csv(response.get_data(as_text=True))
    assert [r['tasklets'] for r in records] == ['1', '11']

    assert client.get(f'/api/runs/{run_id}/timeline').status_code == 404
    assert client.get(f'/api/runs/{run_id}/result').status_code == 404


def test_timeline_run(client):
    created = _start(client, 'timeline', {'mode': 'scatter', 'rows': 128, 'dpus': 8}).get_json()
    run = client.get(f"/api/runs/{created['run_id']}").get_json()
    assert run['has_timeline']
    assert run['output']['mode'] == 'scatter'
    assert run['makespan'] == run['output']['makespan']

    response = client.get(f"/api/runs/{created['run_id']}/timeline")
    assert response.mimetype == 'application/json'
    stream = json.loads(response.get_data(as_text=True))
    assert stream['schema'] == 'pimsim-timeline'
    assert 'host_reorder' not in {e['kind'] for e in stream['events']}


def test_query_run_result(client):
    response = _start(client, 'query', {'qid': 6, 'sf': 0.001, 'dpus': 4})
    assert response.status_code == 201
    created = response.get_json()
    assert created['verdict'] == 'PASS'

    run = client.get(f"/api/runs/{created['run_id']}").get_json()
    assert run['output']['selection_ops'] == 3
    assert run['has_result'] and run['has_timeline']

    result = client.get(f"/api/runs/{created['run_id']}/result").get_data(as_text=True)
    assert result.splitlines()[0] == 'revenue'
    assert len(result.splitlines()) == 2


def test_search_runs(client):
    bench_id = _start(client, 'bench', {'op': 'aggregation', 'rows': 128}).get_json()['run_id']
    _start(client, 'timeline', {'mode': 'naive', 'rows': 64, 'dpus': 8})
    _start(client, 'bench', {'op': 'selection', 'rows': 128, 'tasklets': 30})

    listing = client.get('/api/runs').get_json()
    assert listing['total'] == 3
    assert (listing['limit'], listing['offset']) == (50, 0)

    benches = client.get('/api/runs?kind=bench').get_json()
    assert benches['total'] == 2

    by_op = client.get('/api/runs?op=aggregation').get_json()
    assert [r['id'] for r in by_op['results']] == [bench_id]

    failed = client.get('/api/runs?status=failed').get_json()
    assert failed['total'] == 1
    assert failed['results'][0]['success'] is False

    page = client.get('/api/runs?limit=1&offset=1').get_json()
    assert (page['total'], len(page['results'])) == (3, 1)

    assert client.get('/api/runs?limit=all').status_code == 400


def test_failed_run_is_kept(client):
    response = _start(client, 'bench', {'op': 'order', 'variant': 'heapsort', 'rows': 64})
    assert response.status_code == 400
    body = response.get_json()
    assert body['error'].startswith('Run failed')

    run = client.get(f"/api/runs/{body['run_id']}").get_json()
    assert run['status'] == 'failed'
    assert 'heapsort' in run['error']
    assert client.get(f"/api/runs/{body['run_id']}/csv").status_code == 404


@pytest.mark.parametrize('payload', [
    None,
    {'kind': 'profile'},
    {'kind': 'bench', 'params': [1, 2]},
])
def test_bad_requests(client, payload):
    if payload is None:
        response = client.post('/api/runs', data='not json', content_type='text/plain')
    else:
        response = client.post('/api/runs', json=payload)
    assert response.status_code == 400
    assert 'error' in response.get_json()


@pytest.mark.parametrize('suffix', ['', '/csv', '/timeline', '/result'])
def test_unknown_run(client, suffix):
    response = client.get(f'/api/runs/00000000-0000-0000-0000-000000000000{suffix}')
    assert response.status_code == 404
    assert response.get_json() == {'error': 'Run not found'}


def test_helm_logger_ships_run_tagged_entries(monkeypatch):
    from app.helm_logger import HelmLogger, run_context

    sent = []

    class Accepted:
        status_code = 200
        text = ''

    def post(url, json=None, headers=None, timeout=None):
        sent.append((url, json, headers))
        return Accepted()

    monkeypatch.setenv('HELM_SERVICE_TOKEN', 'test-token')
    monkeypatch.setattr('app.helm_logger.requests.post', post)
    helm = HelmLogger('pimsim', 'http://helm.test', batch_size=100, flush_interval=60)
    with run_context('run-1'):
        helm.info('kernel finished', {'dpus': 8})
    helm.warning('outside any run')
    helm.shutdown()

    url, body, headers = sent[0]
    assert url == 'http://helm.test/api/logs/ingest'
    assert headers == {'Authorization': 'Bearer test-token'}
    assert body['service_name'] == 'pimsim'
    first, second = body['logs']
    assert first['context'] == {'dpus': 8, 'run_id': 'run-1'}
    assert (second['level'], second['context']) == ('WARNING', {})
