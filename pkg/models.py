"""
Results Database Models

Stores simulation runs (benchmarks, sweeps, queries, timelines,
calibrations) so results can be searched and downloaded later.

Key Principles:
- A run is written once when it finishes; only its status fields change
  while it is running
- Metrics are kept twice: the CSV exactly as pimbench writes it, and one
  RunMetric row per record for searching
- Params, output and timeline are stored as JSON text
"""

from extensions import db
from sqlalchemy import Index


class SimulationRun(db.Model):
    """
    One execution of a pimbench command (CLI or service triggered).
    """
    __tablename__ = 'simulation_runs'

    id = db.Column(db.String(50), primary_key=True)  # UUID
    kind = db.Column(db.String(20), nullable=False, index=True)  # bench, query, sweep, timeline, calibrate
    status = db.Column(db.String(20), nullable=False)  # 'running', 'completed', 'failed'

    # What was run
    params = db.Column(db.Text, nullable=False)  # JSON

    # Timing
    started_at = db.Column(db.String(50), nullable=False)
    completed_at = db.Column(db.String(50))

    # Outcome
    success = db.Column(db.Boolean)
    verdict = db.Column(db.String(10))  # PASS/FAIL for queries
    output = db.Column(db.Text)  # JSON summary
    metrics_csv = db.Column(db.Text)
    timeline = db.Column(db.Text)  # JSON event stream
    result_csv = db.Column(db.Text)  # Query result table
    error = db.Column(db.Text)

    # Who triggered it
    triggered_by = db.Column(db.String(100))  # Username, 'api' or 'pimbench'

    __table_args__ = (
        Index('idx_run_started', 'started_at'),
    )


class RunMetric(db.Model):
    """
    One metrics record of a run.
    Denormalized for easier searching and reporting.
    """
    __tablename__ = 'run_metrics'

    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.String(50), db.ForeignKey('simulation_runs.id'), nullable=False, index=True)

    experiment = db.Column(db.String(50), nullable=False)
    op = db.Column(db.String(50), index=True)
    variant = db.Column(db.String(50))
    dpus = db.Column(db.Integer)
    tasklets = db.Column(db.Integer)
    rows = db.Column(db.BigInteger)
    param = db.Column(db.String(50))
    rep = db.Column(db.Integer)

    kernel_seconds = db.Column(db.Float)
    ipc = db.Column(db.Float)
    transfer_seconds = db.Column(db.Float)
    makespan = db.Column(db.Float)
    instructions = db.Column(db.BigInteger)
    cycles = db.Column(db.BigInteger)

    # Relationship
    run = db.relationship('SimulationRun', backref=db.backref('metrics', lazy='dynamic'))
