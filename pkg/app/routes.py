"""
Results Service Routes

This service provides:
1. API to start simulation runs and track their status
2. Run search and retrieval
3. Metrics CSV, timeline and query result downloads
4. The machine configuration runs use
"""

from flask import jsonify, request, Response
from app import app
from app.runner import start_run, get_run_status, run_summary
from extensions import db
from models import SimulationRun, RunMetric
from pimsim.config import load_config
from pimsim.errors import ConfigError
from pimsim.jobs import RUN_KINDS
from dataclasses import asdict


def _machine():
    return load_config(app.config.get('PIMSIM_CONFIG'))


@app.route('/health')
def health():
    """Health check endpoint."""
    return jsonify({'status': 'ok', 'service': app.config['SERVICE_NAME']}), 200


@app.route('/api/config', methods=['GET'])
def get_config():
    """Machine, host and kernel parameters runs are simulated with."""
    try:
        machine, kernel = _machine()
    except ConfigError as e:
        return jsonify({'error': str(e)}), 500

    return jsonify({
        'config_path': app.config.get('PIMSIM_CONFIG'),
        'machine': asdict(machine),
        'kernel': asdict(kernel),
        'rank_count': machine.rank_count
    }), 200


# ===== RUN API ENDPOINTS =====

@app.route('/api/runs', methods=['POST'])
def create_run():
    """
    Execute a simulation run and store the results.

    Expected JSON payload:
    {
        "kind": "query",
        "params": {"qid": 6, "sf": 0.01, "mode": "optimized"},
        "triggered_by": "admin@company.com"  // Optional
    }
    """
    data = request.get_json(silent=True)

    if not data:
        return jsonify({'error': 'No data provided'}), 400

    kind = data.get('kind')
    if kind not in RUN_KINDS:
        return jsonify({'error': f'kind must be one of: {", ".join(RUN_KINDS)}'}), 400

    params = data.get('params') or {}
    if not isinstance(params, dict):
        return jsonify({'error': 'params must be an object'}), 400

    try:
        machine, kernel = _machine()
    except ConfigError as e:
        return jsonify({'error': str(e)}), 500

    run_id, success, message = start_run(kind, params, data.get('triggered_by', 'api'), machine, kernel)
    status = get_run_status(run_id)

    if status['status'] == 'failed':
        return jsonify({'error': message, 'run_id': run_id}), 400

    return jsonify({
        'message': message,
        'run_id': run_id,
        'success': success,
        'verdict': status['verdict']
    }), 201


@app.route('/api/runs', methods=['GET'])
def list_runs():
    """
    List runs with filters.

    Query params:
    - kind: bench, query, sweep, timeline, calibrate
    - status: running, completed, failed
    - op: runs with at least one metrics record for this operator/query
    - limit: Max results (default 50)
    - offset: Pagination offset
    """
    query = SimulationRun.query

    if request.args.get('kind'):
        query = query.filter_by(kind=request.args.get('kind'))

    if request.args.get('status'):
        query = query.filter_by(status=request.args.get('status'))

    if request.args.get('op'):
        matching = db.select(RunMetric.run_id).filter_by(op=request.args.get('op'))
        query = query.filter(SimulationRun.id.in_(matching))

    try:
        limit = min(int(request.args.get('limit', 50)), 500)
        offset = int(request.args.get('offset', 0))
    except ValueError:
        return jsonify({'error': 'limit and offset must be integers'}), 400

    # Most recent first
    query = query.order_by(SimulationRun.started_at.desc())

    total = query.count()
    runs = query.limit(limit).offset(offset).all()

    return jsonify({
        'total': total,
        'limit': limit,
        'offset': offset,
        'results': [run_summary(r) for r in runs]
    }), 200


@app.route('/api/runs/<run_id>', methods=['GET'])
def get_run(run_id):
    """Get detailed status of a specific run."""
    run_data = get_run_status(run_id)

    if not run_data:
        return jsonify({'error': 'Run not found'}), 404

    return jsonify(run_data), 200


def _download(run_id, attribute, mimetype, suffix, what):
    run = db.session.get(SimulationRun, run_id)

    if not run:
        return jsonify({'error': 'Run not found'}), 404

    content = getattr(run, attribute)
    if content is None:
        return jsonify({'error': f'Run has no {what}'}), 404

    filename = f"{run.kind}_{run.id[:8]}{suffix}"

    return Response(
        content,
        mimetype=mimetype,
        headers={
            'Content-Disposition': f'attachment; filename="{filename}"'
        }
    )


@app.route('/api/runs/<run_id>/csv', methods=['GET'])
def download_metrics_csv(run_id):
    """Download the metrics CSV of a run."""
    return _download(run_id, 'metrics_csv', 'text/csv', '.csv', 'metrics')


@app.route('/api/runs/<run_id>/timeline', methods=['GET'])
def download_timeline(run_id):
    """Download the timeline event stream of a run."""
    return _download(run_id, 'timeline', 'application/json', '_timeline.json', 'timeline')


@app.route('/api/runs/<run_id>/result', methods=['GET'])
def download_result(run_id):
    """Download the result table of a query run."""
    return _download(run_id, 'result_csv', 'text/csv', '_result.csv', 'query result')
