"""
Run Tracking

Executes simulation runs and keeps their results in the database.
"""

from app.helm_logger import run_context
from extensions import db
from models import SimulationRun, RunMetric
from pimsim.errors import PimError
from pimsim.jobs import execute, metrics_csv, timeline_json
from datetime import datetime
import json
import logging
import uuid

logger = logging.getLogger(__name__)

NUMERIC_FIELDS = ('dpus', 'tasklets', 'rows', 'rep', 'instructions', 'cycles')
FLOAT_FIELDS = ('kernel_seconds', 'ipc', 'transfer_seconds', 'makespan')


def _metric_row(run_id, record):
    values = {}
    for name in NUMERIC_FIELDS:
        values[name] = int(record[name]) if record.get(name) not in (None, '') else None
    for name in FLOAT_FIELDS:
        values[name] = float(record[name]) if record.get(name) not in (None, '') else None
    return RunMetric(
        run_id=run_id,
        experiment=record['experiment'],
        op=record.get('op') or None,
        variant=record.get('variant') or None,
        param=str(record['param']) if record.get('param') not in (None, '') else None,
        **values
    )


def _complete(run, result):
    run.status = 'completed'
    run.completed_at = datetime.now().isoformat()
    run.success = result.passed
    run.verdict = result.verdict
    run.output = json.dumps(result.output, default=str)
    run.metrics_csv = metrics_csv(result.records)
    run.timeline = timeline_json(result.timeline) if result.timeline is not None else None
    run.result_csv = result.result_csv
    for record in result.records:
        db.session.add(_metric_row(run.id, record))


def _fail(run, error):
    run.status = 'failed'
    run.completed_at = datetime.now().isoformat()
    run.success = False
    run.error = error


def _new_run(kind, params, triggered_by):
    run = SimulationRun(
        id=str(uuid.uuid4()),
        kind=kind,
        status='running',
        params=json.dumps(params, sort_keys=True),
        started_at=datetime.now().isoformat(),
        triggered_by=triggered_by
    )
    db.session.add(run)
    db.session.commit()
    return run


def start_run(kind, params, triggered_by='api', machine=None, kernel=None):
    """
    Execute a run and store its results.

    Args:
        kind: bench, query, sweep, timeline or calibrate
        params: run parameters (see pimsim.jobs)
        triggered_by: user name, 'api' or 'pimbench'

    Returns:
        tuple: (run_id, success, message)
    """
    run = _new_run(kind, params, triggered_by)
    run_id = run.id

    try:
        with run_context(run_id):
            result = execute(kind, params, machine, kernel)
    except PimError as e:
        _fail(run, f"{type(e).__name__}: {e}")
        db.session.commit()
        logger.warning(f"Run {run_id} ({kind}) failed: {e}")
        return run_id, False, f"Run failed: {e}"

    _complete(run, result)
    db.session.commit()

    if not result.passed:
        return run_id, False, f"Verification failed: {result.output.get('difference')}"
    logger.info(f"Run {run_id} ({kind}) completed with {len(result.records)} records")
    return run_id, True, f"Completed with {len(result.records)} metrics records"


def record_run(kind, params, result=None, triggered_by='pimbench', error=None):
    """
    Store a run executed elsewhere (the pimbench command).

    Returns:
        str: run id
    """
    run = _new_run(kind, params, triggered_by)
    if result is None:
        _fail(run, error or 'unknown error')
    else:
        _complete(run, result)
    db.session.commit()
    return run.id


def run_summary(run):
    output = json.loads(run.output) if run.output else {}
    return {
        'id': run.id,
        'kind': run.kind,
        'status': run.status,
        'started_at': run.started_at,
        'completed_at': run.completed_at,
        'success': run.success,
        'verdict': run.verdict,
        'triggered_by': run.triggered_by,
        'metrics_count': run.metrics.count(),
        'makespan': output.get('makespan')
    }


def get_run_status(run_id):
    """
    Get status of a simulation run.

    Returns:
        dict: Run status information, None for unknown ids
    """
    run = db.session.get(SimulationRun, run_id)

    if not run:
        return None

    return {
        **run_summary(run),
        'params': json.loads(run.params),
        'output': json.loads(run.output) if run.output else {},
        'has_timeline': run.timeline is not None,
        'has_result': run.result_csv is not None,
        'error': run.error
    }
