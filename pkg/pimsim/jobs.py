"""
Run execution shared by the pimbench command and the results service.

A run is a kind plus a flat params dict (the JSON the service stores);
execute() performs it and returns a JobResult holding the metrics
records, the timeline events and, for queries, the verified result.
"""

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

from pimsim.config import KernelConfig, MachineConfig
from pimsim.errors import ConfigError, VerificationError
from pimsim.experiments import (DEFAULT_SEED, METRICS_COLUMNS, METRICS_VERSION, MRAM_READ_TARGET, SWEEPS,
                                WRAM_TARGET, BenchSpec, calibrate, run_bench, run_sweep, system_record,
                                timeline_records, transfer_timeline)
from pimsim.oracle import verify
from pimsim.queries import QUERY_IDS, run_query
from pimsim.table import load_tables
from pimsim.tpch import GenSpec, generate

logger = logging.getLogger(__name__)

RUN_KINDS = ('bench', 'query', 'sweep', 'timeline', 'calibrate')
SWEEP_NAMES = tuple(sorted(SWEEPS)) + ('pipeline',)
TIMELINE_VERSION = 1

# CLI-facing row option -> keyword of each sweep driver
SWEEP_ROWS = {
    'ipc': 'rows', 'crossover': 'rows', 'radix': 'rows', 'buffer': 'rows',
    'strong': 'total_rows', 'weak': 'rows_per_dpu', 'joins': 'rows_per_dpu', 'pipeline': 'rows_per_dpu',
}
SWEEP_OPS = ('ipc', 'strong', 'weak')


@dataclass
class JobResult:
    kind: str
    records: List[dict] = field(default_factory=list)
    timeline: Optional[List[dict]] = None
    output: dict = field(default_factory=dict)
    verdict: Optional[str] = None
    """PASS or FAIL for queries."""
    result_csv: Optional[str] = None
    machine: Optional[MachineConfig] = None
    """The fitted machine of a calibrate run."""

    @property
    def passed(self) -> bool:
        return self.verdict != 'FAIL'


def metrics_csv(records) -> str:
    """CSV text: versioned header line, column header, one row per record."""
    buffer = io.StringIO()
    buffer.write(f"# pimsim-metrics v{METRICS_VERSION}\n")
    writer = csv.DictWriter(buffer, fieldnames=METRICS_COLUMNS, lineterminator='\n')
    writer.writeheader()
    for record in records:
        writer.writerow(record)
    return buffer.getvalue()


def read_metrics_csv(text: str) -> List[dict]:
    lines = text.splitlines()
    if not lines or lines[0] != f"# pimsim-metrics v{METRICS_VERSION}":
        raise ConfigError("not a pimsim metrics file of this version")
    return list(csv.DictReader(lines[1:]))


def timeline_json(events: List[dict]) -> str:
    return json.dumps({'schema': 'pimsim-timeline', 'version': TIMELINE_VERSION, 'events': events}, indent=2)


def _int(params, name, default=None):
    value = params.get(name)
    if value is None:
        return default
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer, got {value!r}")


def _int_list(params, name, default):
    value = params.get(name)
    if value is None:
        value = default
    if isinstance(value, (int, str)):
        value = [value]
    try:
        return [int(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a list of integers, got {value!r}")


def _bench(params, machine, kernel):
    spec = BenchSpec(
        op=params.get('op') or 'selection',
        rows=_int(params, 'rows', 4096),
        dpus=_int_list(params, 'dpus', [1]),
        tasklets=_int_list(params, 'tasklets', [kernel.tasklets]),
        mode=params.get('mode') or 'optimized',
        variant=params.get('variant'),
        param=_int(params, 'param'),
        repetitions=_int(params, 'repetitions', 1),
        seed=_int(params, 'seed', DEFAULT_SEED),
        fixed_size=bool(params.get('fixed_size', False)),
    )
    records = run_bench(spec, machine, kernel)
    return JobResult('bench', records, output={'op': spec.op, 'points': len(records)})


def _tables(params):
    if params.get('data'):
        if not os.path.isdir(params['data']):
            raise ConfigError(f"data directory not found: {params['data']}")
        return load_tables(params['data'])
    try:
        sf = float(params.get('sf') or 0.01)
    except (TypeError, ValueError):
        raise ConfigError(f"sf must be a number, got {params['sf']!r}")
    return generate(GenSpec(sf, _int(params, 'seed', DEFAULT_SEED)))


def _query(params, machine, kernel):
    qid = _int(params, 'qid')
    if qid not in QUERY_IDS:
        raise ConfigError(f"unknown query {qid}; choose from {', '.join(map(str, QUERY_IDS))}")
    tables = _tables(params)
    mode = params.get('mode') or 'optimized'
    join, aggregation = params.get('join') or 'hash', params.get('aggregation') or 'hash'
    run = run_query(qid, tables, machine, kernel, mode, _int(params, 'dpus'), join, aggregation,
                    _int(params, 'tasklets'))
    output = run.summary()
    try:
        verify(qid, run.result, tables)
        verdict = 'PASS'
    except VerificationError as exc:
        verdict = 'FAIL'
        output['difference'] = exc.first_difference
    record = system_record(run.system, experiment='query', op=f'q{qid}', variant=mode, rows=run.result.row_count,
                           param=f'{join}/{aggregation}', rep=0)
    return JobResult('query', [record], timeline_records(run.timeline), output, verdict, run.result.to_csv())


def _sweep(params, machine, kernel):
    name = params.get('name')
    if name not in SWEEP_NAMES:
        raise ConfigError(f"unknown sweep {name!r}; choose from {', '.join(SWEEP_NAMES)}")
    kwargs = {}
    if params.get('rows') is not None:
        kwargs[SWEEP_ROWS[name]] = _int(params, 'rows')
    if params.get('op') is not None:
        if name not in SWEEP_OPS:
            raise ConfigError(f"sweep {name} takes no operator")
        kwargs['op'] = params['op']
    records = run_sweep(name, seed=_int(params, 'seed', DEFAULT_SEED), machine=machine, kernel=kernel, **kwargs)
    return JobResult('sweep', records, output={'sweep': name, 'points': len(records)})


def _timeline(params, machine, kernel):
    events, record = transfer_timeline(params.get('mode') or 'scatter_pooled', _int(params, 'rows', 8192),
                                       _int(params, 'dpus'), _int(params, 'seed', DEFAULT_SEED), machine, kernel)
    kinds = {}
    for e in events:
        kinds[e.kind] = kinds.get(e.kind, 0) + 1
    return JobResult('timeline', [record], timeline_records(events),
                     {'mode': record['variant'], 'makespan': record['makespan'], 'events': kinds})


def _calibrate(params, machine, kernel):
    targets = {k: float(params[k]) for k in ('read_target', 'write_target') if params.get(k) is not None}
    fitted, records = calibrate(machine, **targets)
    efficiency = {r['op']: r['efficiency'] for r in records}
    output = {'dma_alpha': fitted.dma_alpha, 'dma_beta': fitted.dma_beta,
              'dma_bandwidth': efficiency['mram_read'] * targets.get('read_target', MRAM_READ_TARGET),
              'wram_bandwidth': efficiency['wram'] * WRAM_TARGET}
    return JobResult('calibrate', records, output=output, machine=fitted)


_EXECUTORS = {
    'bench': _bench,
    'query': _query,
    'sweep': _sweep,
    'timeline': _timeline,
    'calibrate': _calibrate,
}


def execute(kind: str, params: dict, machine: Optional[MachineConfig] = None,
            kernel: Optional[KernelConfig] = None) -> JobResult:
    """
    Perform one run.

    Raises:
        ConfigError: unknown kind or invalid params
        PimError: the simulation failed; a query that merely disagrees
            with the oracle returns verdict FAIL instead
    """
    if kind not in _EXECUTORS:
        raise ConfigError(f"unknown run kind {kind!r}; choose from {', '.join(RUN_KINDS)}")
    machine = machine or MachineConfig.desk()
    kernel = kernel or KernelConfig()
    logger.info("run %s %s", kind, json.dumps(params, sort_keys=True))
    result = _EXECUTORS[kind](dict(params), machine, kernel)
    if result.machine is not None:
        result.output['machine'] = asdict(result.machine)
    return result
