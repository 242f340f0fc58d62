"""
Experiment drivers behind the pimbench command.

Every driver returns metrics records: flat dicts over METRICS_COLUMNS,
one per configuration point and repetition. Simulated times come from
the cost model; kernel_seconds sums, over the operator's steps, the
slowest DPU of each step.

Data is drawn from numpy generators seeded with (seed, repetition), so a
driver called twice with the same arguments returns identical records.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from pimsim.aggregation import AggFunc, AggSpec
from pimsim.config import KernelConfig, MachineConfig, calibrated_alpha
from pimsim.errors import ConfigError
from pimsim.hashing import BucketSpec, PartitionPassKernel, multipass_radix_partition
from pimsim.host import HostRuntime, Stage, TimelineEvent, makespan
from pimsim.machine import run_kernel
from pimsim.operators import (JOIN_METHODS, aggregate, bucket_fragments, order, range_partitions, receive_buckets,
                              select, sort_regions)
from pimsim.records import KV_DTYPE, kv_records
from pimsim.selection import Cmp
from pimsim.sorting import partition_parallel
from pimsim.streaming import measure_bandwidth
from pimsim.system import PimSystem
from pimsim.tiling import chunk_bounds

logger = logging.getLogger(__name__)

METRICS_VERSION = 1
METRICS_COLUMNS = (
    'experiment', 'op', 'variant', 'dpus', 'tasklets', 'rows', 'param', 'rep',
    'kernel_seconds', 'ipc', 'instructions', 'cycles', 'dma_bytes', 'hash_events',
    'transfer_seconds', 'makespan', 'efficiency',
)

OPERATORS = ('selection', 'aggregation', 'order', 'join', 'partition')
VARIANTS = {
    'selection': ('select',),
    'aggregation': ('hash', 'sort'),
    'order': ('quicksort', 'mergesort'),
    'join': ('hash', 'sort-merge'),
    'partition': ('hash', 'sort'),
}
TIMELINE_MODES = ('naive', 'scatter', 'scatter_pooled', 'async')
PIPELINE_SHAPES = ('order', 'aggregation')

DEFAULT_SEED = 42
KEY_RANGE = 1 << 30
SELECTIVITY = 0.2

# Memory bandwidth targets at 2 KiB DMA jobs and for 8-byte scratchpad words.
MRAM_READ_TARGET = 628e6
MRAM_WRITE_TARGET = 633e6
WRAM_TARGET = 2818e6


def empty_record(**values) -> dict:
    record = dict.fromkeys(METRICS_COLUMNS, '')
    unknown = set(values) - set(METRICS_COLUMNS)
    if unknown:
        raise ConfigError(f"unknown metrics columns {sorted(unknown)}")
    record.update(values)
    return record


def system_record(system: PimSystem, **values) -> dict:
    """Metrics of everything a system has run so far."""
    metrics = system.metrics
    instructions = sum(m.instructions for m in metrics)
    cycles = sum(m.cycles for m in metrics)
    transfers = sum(e.duration for e in system.timeline if e.kind in ('h2p', 'p2h'))
    return empty_record(
        dpus=system.dpu_count,
        tasklets=system.tasklets,
        kernel_seconds=system.kernel_seconds(),
        ipc=round(instructions / cycles, 6) if cycles else 0.0,
        instructions=instructions,
        cycles=cycles,
        dma_bytes=sum(m.dma_read_bytes + m.dma_write_bytes for m in metrics),
        hash_events=sum(m.events.get('hash', 0) for m in metrics),
        transfer_seconds=transfers,
        makespan=makespan(system.timeline),
        **values)


# ---------------------------------------------------------------------------
# Operator benchmarks
# ---------------------------------------------------------------------------

def _bench_selection(system, rng, n, variant, param):
    table = system.load_columns({'v': rng.integers(0, KEY_RANGE, n)}, 'selection')
    select(system, table, (Cmp('v', '<', int(SELECTIVITY * KEY_RANGE)),), keep=['v'], label='selection')
    return 'select', SELECTIVITY


def _bench_aggregation(system, rng, n, variant, param):
    groups = int(param or 64)
    table = system.load_columns({'k': rng.integers(0, groups, n), 'v': rng.integers(0, 1000, n)}, 'aggregation')
    aggregate(system, table, AggSpec('k', (AggFunc('sum', 'v', 'total'),)), variant or 'hash', label='aggregation')
    return variant or 'hash', groups


def _bench_order(system, rng, n, variant, param):
    table = system.load_columns({'k': rng.integers(0, KEY_RANGE, n)}, 'order')
    order(system, table, 'k', 'global', local_sort=variant or 'quicksort', label='order')
    return variant or 'quicksort', ''


def _bench_join(system, rng, n, variant, param):
    ratio = int(param or 1)
    inner = system.load_columns({'k': rng.permutation(n)}, 'join:inner')
    outer = system.load_columns({'k': rng.integers(0, n, n * ratio)}, 'join:outer')
    JOIN_METHODS[variant or 'hash'](system, inner, 'k', outer, 'k', label='join')
    return variant or 'hash', ratio


def _bench_partition(system, rng, n, variant, param):
    variant = variant or 'hash'
    buckets = int(param or system.kernel.radix_buckets)
    keys = rng.integers(0, KEY_RANGE, n)
    P = system.dpu_count
    bounds = [chunk_bounds(n, P, i) for i in range(P)]
    regions = system.scatter({d: kv_records(keys[lo:hi], np.arange(lo, hi)) for d, (lo, hi) in enumerate(bounds)},
                             'partition:h2p')
    splitters = (np.arange(1, buckets, dtype=np.int64) * KEY_RANGE) // buckets
    cfg = system.kernel

    def run(dpu):
        lo, hi = bounds[dpu.id]
        count = hi - lo
        out = dpu.mram_alloc(count * KV_DTYPE.itemsize)
        try:
            if variant == 'hash':
                launch = run_kernel([dpu], PartitionPassKernel, system.tasklets, {
                    'src': regions[dpu.id], 'dst': out, 'groups': [(0, count)],
                    'spec': BucketSpec.low_bits(buckets), 'dtype': KV_DTYPE, 'buffer_elems': cfg.buffer_elems,
                })
                metrics = launch.metrics[0]
            else:
                metrics, _, _ = partition_parallel(dpu, regions[dpu.id], count, out, splitters=splitters, cfg=cfg,
                                                   tasklets=system.tasklets, dtype=KV_DTYPE)
        finally:
            dpu.mram_free(out)
        return metrics, None

    system.launch(f"partition:{variant}", run)
    system.free(regions)
    return variant, buckets


_BENCHES = {
    'selection': _bench_selection,
    'aggregation': _bench_aggregation,
    'order': _bench_order,
    'join': _bench_join,
    'partition': _bench_partition,
}


def bench_operator(op: str, rows_per_dpu: int, dpus: int = 1, tasklets: Optional[int] = None,
                   mode: str = 'optimized', variant: Optional[str] = None, param=None, seed: int = DEFAULT_SEED,
                   machine: Optional[MachineConfig] = None, kernel: Optional[KernelConfig] = None,
                   experiment: str = 'bench', rep: int = 0, total_rows: Optional[int] = None) -> dict:
    """
    Run one operator on uniform data and return its metrics record.

    rows_per_dpu scales the input with the DPU count unless total_rows
    fixes it. param is the operator's knob: groups for aggregation, outer
    rows per inner row for joins, buckets for partitioning.
    """
    if op not in OPERATORS:
        raise ConfigError(f"unknown operator {op!r}; choose from {', '.join(OPERATORS)}")
    if variant is not None and variant not in VARIANTS[op]:
        raise ConfigError(f"unknown {op} variant {variant!r}; choose from {', '.join(VARIANTS[op])}")
    system = PimSystem(machine or MachineConfig.desk(), kernel, dpus, mode, tasklets)
    rows = total_rows if total_rows is not None else rows_per_dpu * system.dpu_count
    if rows < 1:
        raise ConfigError("benchmarks need at least one row")
    rng = np.random.default_rng([seed, rep])
    variant, param = _BENCHES[op](system, rng, rows, variant, param)
    record = system_record(system, experiment=experiment, op=op, variant=variant, rows=rows, param=param, rep=rep)
    logger.debug("%s %s: %d rows on %d DPUs x %d tasklets, %.6f s, ipc %.3f", op, variant, rows, system.dpu_count,
                 system.tasklets, record['kernel_seconds'], record['ipc'])
    return record


@dataclass
class BenchSpec:
    """A grid of operator benchmarks."""

    op: str
    rows: int = 4096
    """Rows per DPU, or the first DPU count's rows per DPU with fixed_size."""
    dpus: Sequence[int] = (1,)
    tasklets: Sequence[int] = (16,)
    mode: str = 'optimized'
    variant: Optional[str] = None
    param: Optional[int] = None
    repetitions: int = 1
    seed: int = DEFAULT_SEED
    fixed_size: bool = False
    experiment: str = 'bench'

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise ConfigError(f"unknown operator {self.op!r}; choose from {', '.join(OPERATORS)}")
        if not self.dpus or not self.tasklets:
            raise ConfigError("dpus and tasklets need at least one value")
        if self.repetitions < 1 or self.rows < 1:
            raise ConfigError("rows and repetitions must be positive")
        self.dpus = tuple(int(d) for d in self.dpus)
        self.tasklets = tuple(int(t) for t in self.tasklets)


def run_bench(spec: BenchSpec, machine: Optional[MachineConfig] = None,
              kernel: Optional[KernelConfig] = None) -> List[dict]:
    """One record per (dpus, tasklets, repetition), in that nesting order."""
    machine = machine or MachineConfig.desk()
    total = spec.rows * spec.dpus[0] if spec.fixed_size else None
    records = []
    for dpus in spec.dpus:
        for tasklets in spec.tasklets:
            if tasklets > machine.max_tasklets:
                raise ConfigError(f"{tasklets} tasklets exceed max_tasklets {machine.max_tasklets}")
            for rep in range(spec.repetitions):
                records.append(bench_operator(
                    spec.op, spec.rows, dpus, tasklets, spec.mode, spec.variant, spec.param, spec.seed, machine,
                    kernel, spec.experiment, rep, total))
    logger.info("bench %s: %d records", spec.op, len(records))
    return records


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def ipc_sweep(op: str = 'selection', tasklets: Sequence[int] = range(1, 25), rows: int = 1 << 14,
              variant: Optional[str] = None, seed: int = DEFAULT_SEED, machine=None, kernel=None) -> List[dict]:
    """IPC and kernel time of one operator on a single DPU as the tasklet count grows."""
    return [bench_operator(op, rows, 1, t, variant=variant, seed=seed, machine=machine, kernel=kernel,
                           experiment='ipc') for t in tasklets]


def aggregation_crossover(rows: int = 1 << 14, exponents: Sequence[int] = range(6, 15),
                          seed: int = DEFAULT_SEED, machine=None, kernel=None) -> List[dict]:
    """Hash against sort aggregation on one DPU, sweeping the number of groups 2**e."""
    records = []
    for e in exponents:
        for method in ('hash', 'sort'):
            records.append(bench_operator('aggregation', rows, 1, variant=method, param=1 << e, seed=seed,
                                          machine=machine, kernel=kernel, experiment='crossover'))
    return records


def radix_sweep(rows: int = 8192, total_bits: int = 10, bits: Sequence[int] = (3, 4, 5, 6),
                seed: int = DEFAULT_SEED, machine=None, kernel=None, tasklets: Optional[int] = None) -> List[dict]:
    """
    Multi-pass radix partitioning of the same records to 2**total_bits
    groups with different bits per pass.

    Fewer passes move the data fewer times; more bits per pass shrink the
    per-bucket cache slots and multiply the groups of the later passes.
    """
    machine = machine or MachineConfig.desk()
    rng = np.random.default_rng([seed, 0])
    keys = rng.integers(0, KEY_RANGE, rows)
    records = []
    for b in bits:
        system = PimSystem(machine, kernel, 1, tasklets=tasklets)
        dpu = system.dpus[0]
        (addr,) = system.scatter({0: kv_records(keys, np.arange(rows))}, 'radix:h2p').values()
        system.launch(f"radix:{b}", lambda d: (multipass_radix_partition(
            d, addr, rows, total_bits, b, system.kernel, system.tasklets)[0], None), [dpu])
        records.append(system_record(system, experiment='radix', op='partition', variant='radix', rows=rows,
                                     param=b, rep=0))
    return records


def buffer_sweep(ops: Sequence[str] = ('selection', 'aggregation', 'order'), sizes: Sequence[int] = (64, 256),
                 rows: int = 4096, seed: int = DEFAULT_SEED, machine=None, kernel=None) -> List[dict]:
    """The same operators with different scratchpad buffer sizes (records per buffer)."""
    kernel = kernel or KernelConfig()
    records = []
    for op in ops:
        for size in sizes:
            record = bench_operator(op, rows, 1, seed=seed, machine=machine,
                                    kernel=replace(kernel, buffer_elems=size), experiment='buffer')
            record['param'] = size
            records.append(record)
    return records


def strong_scaling(op: str = 'order', total_rows: int = 1 << 18, dpus: Sequence[int] = (4, 8, 16, 32),
                   seed: int = DEFAULT_SEED, machine=None, kernel=None) -> List[dict]:
    """Fixed total input over growing DPU counts; efficiency relative to the first point."""
    records = [bench_operator(op, 0, p, seed=seed, machine=machine, kernel=kernel, experiment='strong',
                              total_rows=total_rows) for p in dpus]
    base = records[0]['kernel_seconds'] * records[0]['dpus']
    for r in records:
        r['efficiency'] = base / (r['kernel_seconds'] * r['dpus']) if r['kernel_seconds'] else 0.0
    return records


def weak_scaling(op: str = 'order', rows_per_dpu: int = 2048, dpus: Sequence[int] = (4, 8, 16, 32),
                 seed: int = DEFAULT_SEED, machine=None, kernel=None) -> List[dict]:
    """Fixed rows per DPU over growing DPU counts; efficiency relative to the first point."""
    records = [bench_operator(op, rows_per_dpu, p, seed=seed, machine=machine, kernel=kernel, experiment='weak')
               for p in dpus]
    base = records[0]['kernel_seconds']
    for r in records:
        r['efficiency'] = base / r['kernel_seconds'] if r['kernel_seconds'] else 0.0
    return records


def join_comparison(rows_per_dpu: int = 2048, dpus: int = 8, ratio: int = 4, seed: int = DEFAULT_SEED,
                    machine=None, kernel=None) -> List[dict]:
    """Radix hash join against sort-merge join on the same relations."""
    return [bench_operator('join', rows_per_dpu, dpus, variant=method, param=ratio, seed=seed, machine=machine,
                           kernel=kernel, experiment='joins') for method in VARIANTS['join']]


# ---------------------------------------------------------------------------
# Transfer timelines
# ---------------------------------------------------------------------------

def _rank_durations(events, kind):
    out = {}
    for e in events:
        if e.kind == kind:
            out[e.rank] = out.get(e.rank, 0.0) + e.duration
    return out


def _rank_kernel_seconds(machine, steps):
    """Per rank, the sum over steps of the rank's slowest DPU."""
    out = {}
    for step in steps:
        per_dpu = {}
        for m in step.metrics:
            per_dpu[m.dpu_id] = per_dpu.get(m.dpu_id, 0.0) + m.seconds
        per_rank = {}
        for d, seconds in per_dpu.items():
            r = machine.rank_of(d)
            per_rank[r] = max(per_rank.get(r, 0.0), seconds)
        for r, seconds in per_rank.items():
            out[r] = out.get(r, 0.0) + seconds
    return out


def transfer_timeline(mode: str = 'scatter_pooled', rows_per_dpu: int = 8192, dpus: Optional[int] = None,
                      seed: int = DEFAULT_SEED, machine=None, kernel=None):
    """
    Timeline of the redistribution and local sort of a global order.

    naive, scatter and scatter_pooled select the redistribution path; async
    is scatter_pooled with every rank sorting as soon as its own data has
    arrived instead of after all ranks.

    Returns:
        tuple: (list of TimelineEvent from the start of the redistribution,
                metrics record)
    """
    if mode not in TIMELINE_MODES:
        raise ConfigError(f"unknown timeline mode {mode!r}; choose from {', '.join(TIMELINE_MODES)}")
    machine = machine or MachineConfig.desk()
    system = PimSystem(machine, kernel, dpus)
    rng = np.random.default_rng([seed, 0])
    table = system.load_columns({'k': rng.integers(0, KEY_RANGE, rows_per_dpu * system.dpu_count)}, 'timeline')
    partitions, _ = range_partitions(system, table, 'k', label='timeline')
    table.free()

    mark = len(system.timeline)
    step_mark = len(system.steps)
    origin = system.host.now
    moved = system.host.redistribute(bucket_fragments(partitions), 'scatter_pooled' if mode == 'async' else mode,
                                     'redistribute')
    regions = receive_buckets(system, partitions, moved)
    sort_regions(system, regions, 'quicksort', 'sort')
    events = list(system.timeline[mark:])

    if mode == 'async':
        events = _replay_async(machine, events, origin)
    record = empty_record(experiment='timeline', op='order', variant=mode, dpus=system.dpu_count,
                          tasklets=system.tasklets, rows=table.rows, param='', rep=0,
                          kernel_seconds=sum(s.seconds for s in system.steps[step_mark:]),
                          transfer_seconds=sum(e.duration for e in events if e.kind in ('h2p', 'p2h')),
                          makespan=makespan(events, origin))
    logger.info("timeline %s: %d events, makespan %.6f s", mode, len(events), record['makespan'])
    return events, record


def _replay_async(machine, events, origin):
    """Re-run the h2p and kernel part of a synchronous redistribution as an asynchronous rank pipeline."""
    first_h2p = min(i for i, e in enumerate(events) if e.kind == 'h2p')
    head = events[:first_h2p]
    host = HostRuntime(machine)
    host.now = max((e.end for e in head), default=origin)
    h2p = _rank_durations(events[first_h2p:], 'h2p')
    kernel = _rank_durations(events[first_h2p:], 'kernel')
    stages = []
    for rank in sorted(set(h2p) | set(kernel)):
        if rank in h2p:
            stages.append(Stage(f'h2p:{rank}', rank, 'h2p', seconds=h2p[rank]))
        if rank in kernel:
            stages.append(Stage(f'sort:{rank}', rank, 'kernel', seconds=kernel[rank]))
    result = host.run_pipeline(stages, 'async')
    return head + result.events


def pipeline_gain(shape: str = 'order', rows_per_dpu: int = 4096, host_threads: int = 2,
                  seed: int = DEFAULT_SEED, machine=None, kernel=None) -> List[dict]:
    """
    Synchronous against asynchronous rank scheduling of one operator.

    order: per rank, load the input, sort it, copy the sorted records back.
    aggregation: per rank, aggregate resident data and copy the partial
    groups back.

    Stage sizes and kernel times are taken from a simulated run of the
    operator; the pipelines then run on a host with host_threads threads.
    """
    if shape not in PIPELINE_SHAPES:
        raise ConfigError(f"unknown pipeline shape {shape!r}")
    machine = machine or MachineConfig.desk()
    op = 'order' if shape == 'order' else 'aggregation'
    system = PimSystem(machine, kernel)
    rng = np.random.default_rng([seed, 0])
    n = rows_per_dpu * system.dpu_count
    if shape == 'order':
        table = system.load_columns({'k': rng.integers(0, KEY_RANGE, n)}, 'pipeline')
        h2p_bytes = {}
        for p in table.parts:
            r = machine.rank_of(p.dpu)
            h2p_bytes[r] = h2p_bytes.get(r, 0) + 16 * p.count
        mark = len(system.steps)
        order(system, table, 'k', 'global', label='pipeline')
        p2h_bytes = h2p_bytes
    else:
        table = system.load_columns({'k': rng.integers(0, 64, n), 'v': rng.integers(0, 1000, n)}, 'pipeline')
        mark = len(system.steps)
        res = aggregate(system, table, AggSpec('k', (AggFunc('sum', 'v', 'total'),)), 'hash', label='pipeline')
        h2p_bytes = {}
        groups = res.info['partial_groups'] // max(system.dpu_count, 1)
        p2h_bytes = {r: 16 * groups * machine.dpus_per_rank for r in range(machine.rank_count)}

    kernel_seconds = _rank_kernel_seconds(machine, system.steps[mark:])

    threaded = replace(machine, host=replace(machine.host, host_threads=host_threads))
    stages = []
    for rank in range(machine.rank_count):
        if h2p_bytes.get(rank):
            stages.append(Stage(f'h2p:{rank}', rank, 'h2p', nbytes=h2p_bytes[rank]))
        stages.append(Stage(f'{op}:{rank}', rank, 'kernel', seconds=kernel_seconds.get(rank, 0.0)))
        if p2h_bytes.get(rank):
            stages.append(Stage(f'p2h:{rank}', rank, 'p2h', nbytes=p2h_bytes[rank]))

    results = {m: HostRuntime(threaded).run_pipeline(stages, m) for m in ('sync', 'async')}
    gain = 1.0 - results['async'].makespan / results['sync'].makespan if results['sync'].makespan else 0.0
    records = []
    for m, result in results.items():
        records.append(empty_record(
            experiment='pipeline', op=shape, variant=m, dpus=system.dpu_count, tasklets=system.tasklets, rows=n,
            param=round(gain, 6), rep=0, kernel_seconds=max(kernel_seconds.values(), default=0.0),
            transfer_seconds=sum(e.duration for e in result.events if e.kind != 'kernel'),
            makespan=result.makespan))
    logger.info("pipeline %s: sync %.6f s, async %.6f s, gain %.1f%%", shape, results['sync'].makespan,
                results['async'].makespan, 100 * gain)
    return records


def timeline_records(events: Sequence[TimelineEvent]) -> List[dict]:
    return [e.as_record() for e in sorted(events, key=lambda e: (e.start, e.rank, e.kind))]


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def calibrate(machine: Optional[MachineConfig] = None, read_target: float = MRAM_READ_TARGET,
              write_target: float = MRAM_WRITE_TARGET, nbytes: int = 2048, tasklets: int = 16):
    """
    Fit the DMA cost to measured bank-memory bandwidth.

    One alpha serves both directions, so it is fitted to the mean of the
    read and write targets at nbytes-sized jobs with beta unchanged. The
    fitted machine is then checked by streaming kernels: MRAM reads and
    writes of nbytes jobs and 8-byte scratchpad loads, with bandwidth taken
    from the simulated cycles.

    Returns:
        tuple: (calibrated MachineConfig, metrics records)
    """
    machine = machine or MachineConfig.desk()
    alpha = calibrated_alpha((read_target + write_target) / 2, machine.clock_hz, machine.dma_beta, nbytes)
    fitted = replace(machine, dma_alpha=round(alpha, 6))
    targets = {'mram_read': read_target, 'mram_write': write_target, 'wram': WRAM_TARGET}
    records = []
    for op, target in targets.items():
        measured = measure_bandwidth(fitted, op, nbytes, tasklets)
        records.append(empty_record(
            experiment='calibrate', op=op, variant='load8' if op == 'wram' else 'dma', tasklets=tasklets,
            param=nbytes, rep=0, cycles=measured['cycles'], dma_bytes=0 if op == 'wram' else measured['bytes'],
            efficiency=round(measured['bandwidth'] / target, 6)))
        logger.info("calibrate %s: %.1f MB/s measured, target %.0f MB/s", op, measured['bandwidth'] / 1e6,
                    target / 1e6)
    logger.info("calibrated dma_alpha %.6f at %d B jobs", fitted.dma_alpha, nbytes)
    return fitted, records


SWEEPS = {
    'ipc': ipc_sweep,
    'crossover': aggregation_crossover,
    'radix': radix_sweep,
    'buffer': buffer_sweep,
    'strong': strong_scaling,
    'weak': weak_scaling,
    'joins': join_comparison,
}


def run_sweep(name: str, seed: int = DEFAULT_SEED, machine=None, kernel=None, **kwargs) -> List[dict]:
    if name == 'pipeline':
        return [r for shape in PIPELINE_SHAPES
                for r in pipeline_gain(shape, seed=seed, machine=machine, kernel=kernel, **kwargs)]
    if name not in SWEEPS:
        raise ConfigError(f"unknown sweep {name!r}; choose from {', '.join(sorted(SWEEPS) + ['pipeline'])}")
    return SWEEPS[name](seed=seed, machine=machine, kernel=kernel, **kwargs)
