"""
Database operators over a PimSystem.

Each operator launches its kernels on every DPU of the system, moves data
through the host runtime and returns an OperatorResult with the output,
the kernel metrics of its steps and the timeline events it produced.

select            one SelectKernel launch per DPU; the output stays resident
aggregate         pack + hash or sort aggregation per DPU; partial groups are
                  combined on the host
order             'global': sampled splitters, range partitioning, direct
                  redistribution, local sort; 'topk': local sort and a host
                  merge of the heads
join_sort_merge   range co-partitioning of both relations, local sort and
                  merge join
join_hash         hash redistribution of both relations, then radix
                  partitioning and scratchpad hash join on every DPU
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from pimsim.aggregation import AggSpec, aggregate_hash_mram, aggregate_sort_mram, combine_partials
from pimsim.errors import ConfigError, RangeMismatchError, SkewOverflowError
from pimsim.expressions import Const, Sub, as_expr, pack_mram
from pimsim.hashing import BucketSpec, PartitionPassKernel
from pimsim.host import Fragment, TimelineEvent, TransferDescriptor
from pimsim.joins import hash_join_mram, merge_join_mram
from pimsim.machine import KernelMetrics, run_kernel
from pimsim.records import PAIR_DTYPE, payload_matrix, record_dtype
from pimsim.selection import select_mram
from pimsim.sorting import mergesort_mram, partition_parallel, quicksort_mram, sorted_head_mram
from pimsim.system import DistributedArray, DistributedTable, Part, PimSystem
from pimsim.table import ColumnTable
from pimsim.tiling import ceil_log2, sorted_order

logger = logging.getLogger(__name__)

ORDER_DTYPE = record_dtype(1)
"""Sort record: key, row id."""

SAMPLES_PER_DPU = 64
MAX_RESAMPLES = 3
RESAMPLE_FACTOR = 4
LOCAL_SORTS = {'quicksort': quicksort_mram, 'mergesort': mergesort_mram}


@dataclass
class OperatorResult:
    output: object
    metrics: List[KernelMetrics] = field(default_factory=list)
    timeline: List[TimelineEvent] = field(default_factory=list)
    info: dict = field(default_factory=dict)
    kernel_seconds: float = 0.0
    """Sum over steps of the slowest DPU."""

    @property
    def makespan(self) -> float:
        if not self.timeline:
            return 0.0
        return max(e.end for e in self.timeline) - min(e.start for e in self.timeline)


def _mark(system: PimSystem):
    return len(system.steps), len(system.host.events)


def _finish(system: PimSystem, mark, output, **info) -> OperatorResult:
    steps = system.steps[mark[0]:]
    return OperatorResult(output, [m for s in steps for m in s.metrics], list(system.host.events[mark[1]:]),
                          info, sum(s.seconds for s in steps))


def _parts(table: DistributedTable):
    return {p.dpu: p for p in table.parts}


def _dpus(system, table):
    return [system.dpus[p.dpu] for p in table.parts]


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def select(system: PimSystem, table: DistributedTable, predicate, keep=None, label='select') -> OperatorResult:
    """
    Keep the rows satisfying a conjunction of comparisons.

    The output is a resident DistributedTable with the `keep` columns
    (default: all) and the row ids of the kept rows.
    """
    mark = _mark(system)
    predicate = tuple(predicate)
    keep = [c for c in (table.columns if keep is None else keep) if c != '_rowid']
    parts = _parts(table)
    cfg = system.kernel
    system.op_counts['selection'] += 1

    def run(dpu):
        part = parts[dpu.id]
        outputs = {name: dpu.mram_alloc(8 * part.count) for name in keep}
        rowid_out = dpu.mram_alloc(8 * part.count)
        metrics, kept = select_mram(dpu, part.columns, part.count, predicate, outputs, rowid_out,
                                    part.rowid_base, cfg, system.tasklets)
        return metrics, Part(dpu.id, kept, {**outputs, '_rowid': rowid_out}, None)

    out = DistributedTable(system, system.launch(label, run, _dpus(system, table)))
    logger.info("%s: %d of %d rows kept", label, out.rows, table.rows)
    return _finish(system, mark, out, rows_in=table.rows, rows_out=out.rows)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate(system: PimSystem, table: DistributedTable, spec: AggSpec, method: str = 'hash',
              label: str = 'aggregate') -> OperatorResult:
    """
    Group and aggregate; the finalized groups come back as a ColumnTable
    ordered by group key.
    """
    if method not in ('hash', 'sort'):
        raise ConfigError(f"unknown aggregation method {method!r}")
    mark = _mark(system)
    parts = _parts(table)
    cfg = system.kernel
    lanes = spec.lanes
    dtype = record_dtype(lanes)
    system.op_counts['aggregation'] += len(spec.funcs)

    def run(dpu):
        part = parts[dpu.id]
        addr = dpu.mram_alloc(part.count * dtype.itemsize)
        try:
            pm, _ = pack_mram(dpu, part.columns, part.count, spec.key, addr, spec.lane_exprs(), cfg=cfg,
                              tasklets=system.tasklets)
            if method == 'hash':
                m, groups, passes = aggregate_hash_mram(dpu, addr, part.count, lanes, cfg, system.tasklets)
                metrics = [pm, m]
            else:
                ms, groups = aggregate_sort_mram(dpu, addr, part.count, lanes, cfg, system.tasklets)
                metrics, passes = [pm] + ms, 1
        finally:
            dpu.mram_free(addr)
        return metrics, (groups, passes)

    results = system.launch(f"{label}:{method}", run, _dpus(system, table))
    system.charge_gather({p.dpu: groups.nbytes for p, (groups, _) in zip(table.parts, results)}, f"{label}:p2h")
    groups = np.concatenate([g for g, _ in results]) if results else np.zeros(0, dtype)
    system.host_reorder(groups.nbytes, f"{label}:combine")
    keys, lanes_matrix = combine_partials(groups['key'], payload_matrix(groups))
    columns = spec.finalize(keys, lanes_matrix)
    out = ColumnTable(label, columns)
    passes = max((p for _, p in results), default=0)
    logger.info("%s: %d rows -> %d groups (%s, %d passes)", label, table.rows, out.row_count, method, passes)
    return _finish(system, mark, out, method=method, passes=passes, partial_groups=len(groups))


# ---------------------------------------------------------------------------
# Packing and sampling helpers
# ---------------------------------------------------------------------------

def _pack_keys(system, table, key, label):
    """(key, row id) records per DPU; returns dpu id -> (address, count)."""
    parts = _parts(table)
    cfg = system.kernel
    key = as_expr(key)

    def run(dpu):
        part = parts[dpu.id]
        addr = dpu.mram_alloc(part.count * ORDER_DTYPE.itemsize)
        rowid = 'base' if part.rowid_base is not None else 'column'
        m, _ = pack_mram(dpu, part.columns, part.count, key, addr, (), rowid, part.rowid_base or 0, cfg,
                         system.tasklets)
        return m, (addr, part.count)

    outs = system.launch(f"{label}:pack", run, _dpus(system, table))
    return {p.dpu: region for p, region in zip(table.parts, outs)}


def _free_regions(system, regions):
    for d, (addr, _) in regions.items():
        system.dpus[d].mram_free(addr)


def _sample_keys(system, regions, per_dpu, label):
    """Read evenly spaced keys of every region with one scatter/gather p2h transfer."""
    rec = ORDER_DTYPE.itemsize
    fragments = {}
    for d, (addr, count) in regions.items():
        if count:
            take = min(per_dpu, count)
            positions = np.unique(((2 * np.arange(take) + 1) * count) // (2 * take))
            fragments[d] = [(addr + int(p) * rec, 8) for p in positions]
    if not fragments:
        return np.zeros(0, dtype=np.int64)
    _, data = system.host.transfer(TransferDescriptor('scatter_gather', 'p2h', fragments), label=label)
    return np.sort(np.concatenate([np.concatenate(pieces).view('<i8') for _, pieces in sorted(data.items())]))


def _pick_splitters(samples, parts):
    if not len(samples):
        return np.zeros(parts - 1, dtype=np.int64)
    return samples[[(j * len(samples)) // parts for j in range(1, parts)]].astype(np.int64)


def _default_capacity(system, factor):
    return min(d.mram_available for d in system.dpus) // (factor * ORDER_DTYPE.itemsize)


def _range_partition(system, regions, splitters, label):
    """Partition every region by the splitters; returns dpu -> (out address, starts, sizes)."""
    cfg = system.kernel

    def run(dpu):
        addr, count = regions[dpu.id]
        out = dpu.mram_alloc(count * ORDER_DTYPE.itemsize)
        m, starts, sizes = partition_parallel(dpu, addr, count, out, splitters=splitters, cfg=cfg,
                                              tasklets=system.tasklets, dtype=ORDER_DTYPE)
        return m, (out, starts, sizes)

    outs = system.launch(f"{label}:partition", run, [system.dpus[d] for d in sorted(regions)])
    return dict(zip(sorted(regions), outs))


def _hash_partition(system, regions, spec, label):
    cfg = system.kernel

    def run(dpu):
        addr, count = regions[dpu.id]
        out = dpu.mram_alloc(count * ORDER_DTYPE.itemsize)
        launch = run_kernel([dpu], PartitionPassKernel, system.tasklets, {
            'src': addr, 'dst': out, 'groups': [(0, count)], 'spec': spec, 'dtype': ORDER_DTYPE,
            'buffer_elems': cfg.buffer_elems,
        })
        starts = launch.outputs[0][0]
        sizes = np.diff(np.append(starts, count))
        return launch.metrics[0], (out, starts, sizes)

    outs = system.launch(f"{label}:distribute", run, [system.dpus[d] for d in sorted(regions)])
    return dict(zip(sorted(regions), outs))


def _bucket_totals(partitions, buckets):
    totals = np.zeros(buckets, dtype=np.int64)
    for _, _, sizes in partitions.values():
        totals += np.asarray(sizes, dtype=np.int64)
    return totals


def bucket_fragments(partitions):
    """Fragments sending bucket b of every partitioned region to DPU b."""
    rec = ORDER_DTYPE.itemsize
    fragments = []
    for d in sorted(partitions):
        out, starts, sizes = partitions[d]
        for b, (start, size) in enumerate(zip(starts, sizes)):
            if size:
                fragments.append(Fragment(d, out + int(start) * rec, int(size) * rec, b))
    return fragments


def receive_buckets(system, partitions, moved):
    """Free the partitioned regions; returns dpu -> (address, count) of the received records."""
    rec = ORDER_DTYPE.itemsize
    for d, (out, _, _) in partitions.items():
        system.dpus[d].mram_free(out)
    received = {d: (addr, nbytes // rec) for d, (addr, nbytes) in moved.placement.items()}
    for d in range(system.dpu_count):
        if d not in received:
            received[d] = (system.dpus[d].mram_alloc(rec), 0)
    return received


def _move_buckets(system, partitions, label):
    moved = system.redistribute(bucket_fragments(partitions), label)
    return receive_buckets(system, partitions, moved)


def sort_regions(system, regions, algorithm='quicksort', label='sort'):
    """Sort every (key, row id) region in place, one launch over the DPUs."""
    sort = LOCAL_SORTS[algorithm]
    cfg = system.kernel

    def run(dpu):
        addr, count = regions[dpu.id]
        return sort(dpu, addr, count, cfg, system.tasklets, ORDER_DTYPE), None

    system.launch(f"{label}:{algorithm}", run, [system.dpus[d] for d in sorted(regions)])


def range_partitions(system, table, key, samples=SAMPLES_PER_DPU, label='order'):
    """
    Pack keys and range partition them by sampled splitters, one bucket
    per DPU; the packed input is freed.

    Returns:
        tuple: (partitions dpu -> (address, starts, sizes), splitters)
    """
    regions = _pack_keys(system, table, key, label)
    splitters = _pick_splitters(_sample_keys(system, regions, samples, f"{label}:sample"), system.dpu_count)
    partitions = _range_partition(system, regions, splitters, label)
    _free_regions(system, regions)
    return partitions, splitters


# ---------------------------------------------------------------------------
# Ordering
# ---------------------------------------------------------------------------

def order(system: PimSystem, table: DistributedTable, key, mode: str = 'global', k: int = 10,
          descending: bool = False, local_sort: str = 'quicksort', capacity: Optional[int] = None,
          samples: int = SAMPLES_PER_DPU, label: str = 'order') -> OperatorResult:
    """
    Sort rows by a key expression.

    mode 'global' returns a DistributedArray of (key, row id) records that
    is sorted in DPU order. mode 'topk' returns a host array with the k
    smallest records plus every record tied with the k-th key. Descending
    order sorts the negated key.

    capacity bounds the records one DPU may receive; when the sampled
    splitters overload a DPU the sample grows and the partitioning is
    repeated, up to MAX_RESAMPLES times.
    """
    if mode not in ('global', 'topk'):
        raise ConfigError(f"unknown order mode {mode!r}")
    if local_sort not in LOCAL_SORTS:
        raise ConfigError(f"unknown local sort {local_sort!r}")
    mark = _mark(system)
    system.op_counts['order'] += 1
    key = as_expr(key)
    if descending:
        key = Sub(Const(0), key)
    regions = _pack_keys(system, table, key, label)

    if mode == 'topk':
        return _finish(system, mark, _top_k(system, regions, k, local_sort, label), mode=mode, k=k)

    P = system.dpu_count
    resamples = 0
    if P > 1 and table.rows:
        capacity = capacity or _default_capacity(system, 3)
        per_dpu = samples
        while True:
            splitters = _pick_splitters(_sample_keys(system, regions, per_dpu, f"{label}:sample"), P)
            partitions = _range_partition(system, regions, splitters, label)
            totals = _bucket_totals(partitions, P)
            if totals.max() <= capacity:
                break
            for d, (out, _, _) in partitions.items():
                system.dpus[d].mram_free(out)
            if resamples == MAX_RESAMPLES:
                _free_regions(system, regions)
                raise SkewOverflowError(
                    f"{label}: DPU {int(totals.argmax())} would receive {int(totals.max())} records "
                    f"(capacity {capacity}) after {resamples} resamples")
            resamples += 1
            per_dpu *= RESAMPLE_FACTOR
            logger.info("%s: bucket of %d records over capacity %d, resampling with %d keys per DPU",
                        label, int(totals.max()), capacity, per_dpu)
        _free_regions(system, regions)
        regions = _move_buckets(system, partitions, label)
    sort_regions(system, regions, local_sort, label)
    out = DistributedArray(system, regions, ORDER_DTYPE)
    logger.info("%s: %d rows sorted over %d DPUs (%d resamples)", label, out.rows, P, resamples)
    return _finish(system, mark, out, mode=mode, resamples=resamples)


def _top_k(system, regions, k, local_sort, label):
    if k < 1:
        raise ConfigError("top-k needs k >= 1")
    sort_regions(system, regions, local_sort, label)
    cfg = system.kernel

    def head(dpu):
        addr, count = regions[dpu.id]
        return sorted_head_mram(dpu, addr, count, k, cfg, ORDER_DTYPE)

    dpu_ids = sorted(regions)
    takes = system.launch(f"{label}:head", head, [system.dpus[d] for d in dpu_ids])
    heads, sizes = [], {}
    for d, take in zip(dpu_ids, takes):
        addr, _ = regions[d]
        dpu = system.dpus[d]
        heads.append(dpu.mram_get(addr, take, ORDER_DTYPE))
        sizes[d] = take * ORDER_DTYPE.itemsize
        dpu.mram_free(addr)
    system.charge_gather(sizes, f"{label}:heads")
    merged = np.concatenate(heads) if heads else np.zeros(0, ORDER_DTYPE)
    merged = merged[sorted_order(merged['key'])]
    if len(merged) > k:
        merged = merged[merged['key'] <= merged['key'][k - 1]]
    return merged


# ---------------------------------------------------------------------------
# Joins
# ---------------------------------------------------------------------------

def _empty_join(system, mark, inner_regions, outer_regions, algorithm):
    _free_regions(system, inner_regions)
    _free_regions(system, outer_regions)
    return _finish(system, mark, np.zeros(0, PAIR_DTYPE), algorithm=algorithm)


def _collect_pairs(system, outs, label):
    system.charge_gather({d: pairs.nbytes for d, pairs in outs}, f"{label}:p2h")
    return np.concatenate([pairs for _, pairs in outs]) if outs else np.zeros(0, PAIR_DTYPE)


def _check_ranges(system, regions, splitters, what):
    """Verify every DPU's sorted records lie in its splitter range (reads the first and last key)."""
    fragments = {}
    for d, (addr, count) in regions.items():
        if count:
            fragments[d] = [(addr, 8), (addr + (count - 1) * ORDER_DTYPE.itemsize, 8)]
    if not fragments:
        return
    _, data = system.host.transfer(TransferDescriptor('scatter_gather', 'p2h', fragments), label='range-check')
    for d, (first, last) in data.items():
        lo = splitters[d - 1] if d > 0 else None
        hi = splitters[d] if d < len(splitters) else None
        first, last = int(first.view('<i8')[0]), int(last.view('<i8')[0])
        if (lo is not None and first < lo) or (hi is not None and last >= hi):
            raise RangeMismatchError(f"{what} on DPU {d} spans [{first}, {last}], outside its range")


def join_sort_merge(system: PimSystem, inner: DistributedTable, inner_key: str, outer: DistributedTable,
                    outer_key: str, capacity: Optional[int] = None, label: str = 'join') -> OperatorResult:
    """
    Equi-join with unique inner keys; output (inner row id, outer row id) pairs.

    Both relations are range partitioned by the same splitters (sampled
    from the inner relation), so DPU d holds the same key range of both.
    """
    mark = _mark(system)
    system.op_counts['join'] += 1
    label = f"{label}:sort-merge"
    inner_regions = _pack_keys(system, inner, inner_key, f"{label}:inner")
    outer_regions = _pack_keys(system, outer, outer_key, f"{label}:outer")
    if not inner.rows or not outer.rows:
        return _empty_join(system, mark, inner_regions, outer_regions, 'sort-merge')

    P = system.dpu_count
    if P > 1:
        capacity = capacity or _default_capacity(system, 4)
        splitters = _pick_splitters(_sample_keys(system, inner_regions, SAMPLES_PER_DPU, f"{label}:sample"), P)
        moved = []
        for regions, what in ((inner_regions, 'inner'), (outer_regions, 'outer')):
            partitions = _range_partition(system, regions, splitters, f"{label}:{what}")
            totals = _bucket_totals(partitions, P)
            if totals.max() > capacity:
                raise SkewOverflowError(
                    f"{label}: {what} range {int(totals.argmax())} holds {int(totals.max())} records "
                    f"(capacity {capacity})")
            _free_regions(system, regions)
            moved.append(_move_buckets(system, partitions, f"{label}:{what}"))
        inner_regions, outer_regions = moved

    sort_regions(system, inner_regions, 'quicksort', f"{label}:inner")
    sort_regions(system, outer_regions, 'quicksort', f"{label}:outer")
    if P > 1:
        _check_ranges(system, inner_regions, splitters, 'inner relation')
        _check_ranges(system, outer_regions, splitters, 'outer relation')
    cfg = system.kernel

    def run(dpu):
        (ia, ni), (oa, no) = inner_regions[dpu.id], outer_regions[dpu.id]
        metrics, pairs = merge_join_mram(dpu, ia, ni, oa, no, cfg, system.tasklets, presorted=True)
        return metrics, (dpu.id, pairs)

    outs = system.launch(f"{label}:merge", run, [system.dpus[d] for d in sorted(inner_regions)])
    _free_regions(system, inner_regions)
    _free_regions(system, outer_regions)
    pairs = _collect_pairs(system, outs, label)
    logger.info("%s: %d x %d rows -> %d pairs", label, inner.rows, outer.rows, len(pairs))
    return _finish(system, mark, pairs, algorithm='sort-merge')


def join_hash(system: PimSystem, inner: DistributedTable, inner_key: str, outer: DistributedTable,
              outer_key: str, capacity: Optional[int] = None, label: str = 'join') -> OperatorResult:
    """
    Radix hash join with unique inner keys.

    Global bucket b (top hash bits, one bucket per DPU) of both relations
    goes to DPU b; every DPU then radix partitions on the following bits
    and joins group by group in the scratchpad.
    """
    mark = _mark(system)
    system.op_counts['join'] += 1
    label = f"{label}:hash"
    inner_regions = _pack_keys(system, inner, inner_key, f"{label}:inner")
    outer_regions = _pack_keys(system, outer, outer_key, f"{label}:outer")
    if not inner.rows or not outer.rows:
        return _empty_join(system, mark, inner_regions, outer_regions, 'hash')

    P = system.dpu_count
    bit_offset = 0
    if P > 1:
        capacity = capacity or _default_capacity(system, 4)
        spec = BucketSpec.spread(P)
        bit_offset = ceil_log2(P)
        moved = []
        for regions, what in ((inner_regions, 'inner'), (outer_regions, 'outer')):
            partitions = _hash_partition(system, regions, spec, f"{label}:{what}")
            totals = _bucket_totals(partitions, P)
            if totals.max() > capacity:
                raise SkewOverflowError(
                    f"{label}: {what} bucket {int(totals.argmax())} holds {int(totals.max())} records "
                    f"(capacity {capacity}); skewed keys are not redistributed")
            _free_regions(system, regions)
            moved.append(_move_buckets(system, partitions, f"{label}:{what}"))
        inner_regions, outer_regions = moved
    cfg = system.kernel

    def run(dpu):
        (ia, ni), (oa, no) = inner_regions[dpu.id], outer_regions[dpu.id]
        metrics, pairs = hash_join_mram(dpu, ia, ni, oa, no, cfg, system.tasklets, bit_offset)
        return metrics, (dpu.id, pairs)

    outs = system.launch(f"{label}:build-probe", run, [system.dpus[d] for d in sorted(inner_regions)])
    _free_regions(system, inner_regions)
    _free_regions(system, outer_regions)
    pairs = _collect_pairs(system, outs, label)
    logger.info("%s: %d x %d rows -> %d pairs", label, inner.rows, outer.rows, len(pairs))
    return _finish(system, mark, pairs, algorithm='hash')


JOIN_METHODS = {'sort-merge': join_sort_merge, 'hash': join_hash}
