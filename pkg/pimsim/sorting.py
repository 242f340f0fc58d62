"""
Sorting kernels.

  prefix_sum     cooperative exclusive prefix sum over an MRAM array
  copy           region copy through the scratchpad
  partition      cooperative partition of a region into key ranges
                 (tasklet chunks, per-tasklet counts, prefix sum, writes at
                 the computed offsets)
  quicksort      iterative quicksort: cooperative sample partitioning while
                 ranges are large, then workers pull the remaining ranges
                 and split them on private work stacks with the two-window
                 swap scan; ranges that fit both windows are sorted in the
                 scratchpad
  merge_pass     three-buffer streaming merge of sorted run pairs
  mergesort      scratchpad tile sort followed by merge passes
  sorted_head    top-k prefix length of a sorted region, ties included

All kernels work on fixed-width records whose first lane is the int64 key.
"""

import logging

import numpy as np

from pimsim.config import KernelConfig
from pimsim.errors import ConfigError, InvalidSizeError, ScratchpadExhaustedError
from pimsim.machine import Kernel, register_kernel, run_kernel
from pimsim.records import KV_DTYPE
from pimsim.tiling import (busy_tile, ceil_log2, charge_add64, charge_compare, charge_loop, charge_move,
                           charge_scan, charge_search, charge_sort, chunk_bounds, dma_in, dma_out,
                           sorted_order, tile_records)

logger = logging.getLogger(__name__)

BUSY_TILE = 32
COOP_TILES = 2
LEAF_MUTEX = 0


def exclusive_prefix_sum(counts):
    """
    Exclusive prefix sum.

    Returns:
        tuple: (offsets int64 array, total)
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise InvalidSizeError("prefix sum over negative counts")
    offsets = np.zeros(len(counts), dtype=np.int64)
    if len(counts) > 1:
        np.cumsum(counts[:-1], out=offsets[1:])
    return offsets, int(counts.sum())


@register_kernel
class PrefixSumKernel(Kernel):
    """Exclusive prefix sum of `count` int64 values at `addr`, written to `out`."""

    name = 'prefix_sum'

    def __init__(self, dpu, tasklets, addr, count, out=None, buffer_elems=256):
        super().__init__(dpu, tasklets)
        self.addr = addr
        self.count = count
        self.out = addr if out is None else out
        self.totals_addr = dpu.wram_alloc(8 * tasklets)
        self.totals = dpu.wram_array(self.totals_addr, tasklets, '<i8')
        self.w = tile_records(dpu.wram_free, tasklets, 8, 1, buffer_elems)
        self.buf_addr = [dpu.wram_alloc(8 * self.w) for _ in range(tasklets)]
        self.total = 0

    def program(self, tl):
        lo, hi = chunk_bounds(self.count, self.tasklets, tl.id)
        buf = self.dpu.wram_array(self.buf_addr[tl.id], self.w, '<i8')
        running = 0
        for start in range(lo, hi, self.w):
            k = min(self.w, hi - start)
            yield from dma_in(tl, self.addr + 8 * start, self.buf_addr[tl.id], 8 * k)
            running += int(buf[:k].sum())
            charge_add64(tl, k)
            charge_loop(tl, k)
        self.totals[tl.id] = running
        yield tl.barrier()

        if tl.id == 0:
            offsets, self.total = exclusive_prefix_sum(self.totals)
            self.totals[:] = offsets
            charge_add64(tl, self.tasklets)
        yield tl.barrier()

        running = int(self.totals[tl.id])
        for start in range(lo, hi, self.w):
            k = min(self.w, hi - start)
            yield from dma_in(tl, self.addr + 8 * start, self.buf_addr[tl.id], 8 * k)
            values = buf[:k].copy()
            buf[:k] = running + np.cumsum(values) - values
            running += int(values.sum())
            charge_add64(tl, k)
            charge_loop(tl, k)
            yield from dma_out(tl, self.out + 8 * start, self.buf_addr[tl.id], 8 * k)

    def result(self):
        return self.total


class _RecordKernel(Kernel):
    """Common setup: record layout and one scratchpad area per tasklet."""

    def __init__(self, dpu, tasklets, addr, count, dtype=KV_DTYPE, buffer_elems=256,
                 buffers=2, shared_bytes=0, least=None):
        super().__init__(dpu, tasklets)
        self.addr = addr
        self.count = int(count)
        self.dtype = np.dtype(dtype)
        self.rec = self.dtype.itemsize
        self.lanes = self.rec // 8
        budget = dpu.wram_free - shared_bytes
        if least is None:
            self.workers = tasklets
            self.w = tile_records(budget, tasklets, self.rec, buffers, buffer_elems)
        else:
            self.workers, self.w = busy_tile(budget, tasklets, self.rec, buffers, buffer_elems, least)
        self.area_addr = [dpu.wram_alloc(buffers * self.w * self.rec) for _ in range(self.workers)]
        self.areas = [dpu.wram_array(a, buffers * self.w, self.dtype) for a in self.area_addr]

    def _copy(self, tl, src, dst, lo, hi):
        """Stream records [lo, hi) from src to dst through this tasklet's area."""
        span = len(self.areas[tl.id])
        for start in range(lo, hi, span):
            k = min(span, hi - start)
            yield from dma_in(tl, src + start * self.rec, self.area_addr[tl.id], k * self.rec)
            charge_loop(tl, 1)
            yield from dma_out(tl, dst + start * self.rec, self.area_addr[tl.id], k * self.rec)


@register_kernel
class CopyKernel(_RecordKernel):
    """Copy `count` records from src to dst, one contiguous chunk per tasklet."""

    name = 'copy'

    def __init__(self, dpu, tasklets, src, dst, count, dtype=KV_DTYPE, buffer_elems=256):
        super().__init__(dpu, tasklets, src, count, dtype, buffer_elems, 1)
        self.dst = dst

    def program(self, tl):
        lo, hi = chunk_bounds(self.count, self.tasklets, tl.id)
        yield from self._copy(tl, self.addr, self.dst, lo, hi)


class _CooperativePartitioner(_RecordKernel):
    """
    Cooperative range partitioning of one region by the working tasklets.

    Each worker owns a contiguous chunk of the range. Splitters are ranked
    picks from a key sample, every worker ranking its own samples. A count
    pass fills a (worker x bucket) table; the workers turn its columns into
    running sums in parallel and tasklet 0 lays out the bucket starts; a
    scatter pass stages records per bucket in the worker's area and flushes
    full staging slots at the offsets. When every key lands in one bucket
    the range is split by position.
    """

    def _setup_partition(self, dpu, fanout, samples_per_tasklet):
        P = self.workers
        self.max_buckets = fanout
        self.table = dpu.wram_array(dpu.wram_alloc(8 * P * fanout), P * fanout, '<i8').reshape(P, fanout)
        self.totals = dpu.wram_array(dpu.wram_alloc(8 * fanout), fanout, '<i8')
        self.splitters = dpu.wram_array(dpu.wram_alloc(8 * fanout), fanout, '<i8')
        self.samples_per_tasklet = samples_per_tasklet
        self.sample_addr = dpu.wram_alloc(8 * P * samples_per_tasklet)
        self.samples = dpu.wram_array(self.sample_addr, P * samples_per_tasklet, '<i8')
        self.position_mode = False
        self.split_by_position = True
        self.bucket_starts = np.zeros(0, dtype=np.int64)
        self.bucket_sizes = np.zeros(0, dtype=np.int64)
        self.nsplit = 0

    @staticmethod
    def partition_shared_bytes(tasklets, fanout, samples):
        return 8 * (tasklets * fanout + 2 * fanout + samples)

    def _classify(self, tl, keys, positions, lo, n, splitters, by_position=False):
        buckets = len(splitters) + 1
        if by_position:
            tl.charge('add32', 2 * len(keys))
            return ((positions - lo) * buckets) // n
        tl.charge('wram_load8', len(keys))
        charge_search(tl, ceil_log2(buckets) * len(keys))
        charge_loop(tl, len(keys))
        return np.searchsorted(splitters, keys, side='right')

    def _rank_samples(self, tl):
        """Place this worker's samples whose rank in the whole sample is a splitter pick."""
        S = self.samples_per_tasklet
        sample = self.samples
        N = len(sample)
        B = self.max_buckets
        picks = {(i * N) // B: i - 1 for i in range(1, B)}
        for j in range(tl.id * S, (tl.id + 1) * S):
            x = sample[j]
            rank = int(np.count_nonzero(sample < x)) + int(np.count_nonzero(sample[:j] == x))
            if rank in picks:
                self.splitters[picks[rank]] = x
        charge_compare(tl, S * N)
        charge_loop(tl, S * N)
        tl.charge('add32', S)

    def _partition(self, tl, lo, hi, src, dst, splitters=None):
        """Partition records [lo, hi) of src into dst; every tasklet runs this."""
        P = self.workers
        worker = tl.id < P
        n = hi - lo
        w = self.w
        clo, chi = chunk_bounds(n, P, tl.id) if worker else (n, n)
        clo, chi = clo + lo, chi + lo

        if splitters is None:
            S = self.samples_per_tasklet
            if worker:
                for j in range(S):
                    pos = clo + ((2 * j + 1) * (chi - clo)) // (2 * S) if chi > clo else lo
                    yield tl.dma_read(src + pos * self.rec, self.sample_addr + 8 * (tl.id * S + j), 8)
            yield tl.barrier()
            if worker:
                self._rank_samples(tl)
            self.nsplit = self.max_buckets - 1
            yield tl.barrier()
            split = self.splitters[:self.nsplit].copy()
        else:
            split = np.asarray(splitters, dtype=np.int64)
        B = len(split) + 1
        staging = w // B
        if staging < 1:
            raise ScratchpadExhaustedError(f"{B} buckets need more than {w} staging records per tasklet")

        # count pass
        if worker:
            area = self.areas[tl.id]
            area_addr = self.area_addr[tl.id]
            row = self.table[tl.id]
            row[:B] = 0
            for start in range(clo, chi, w):
                k = min(w, chi - start)
                yield from dma_in(tl, src + start * self.rec, area_addr, k * self.rec)
                buckets = self._classify(tl, area['key'][:k], None, lo, n, split)
                row[:B] += np.bincount(buckets, minlength=B)
                tl.charge('wram_load8', k)
                tl.charge('add32', k)
                tl.charge('wram_store8', k)
        yield tl.barrier()

        # bucket columns: running sums over the workers, in parallel
        if worker:
            for b in range(tl.id, B, P):
                col = self.table[:, b]
                self.totals[b] = col.sum()
                col[:] = np.cumsum(col) - col
                charge_add64(tl, P)
                charge_loop(tl, P)
        yield tl.barrier()

        if tl.id == 0:
            totals = self.totals[:B].copy()
            charge_compare(tl, B)
            self.position_mode = self.split_by_position and n > 1 and totals.max() == n
            if self.position_mode:
                edges = lo + (np.arange(B + 1) * n + B - 1) // B
                counts = self.table[:, :B]
                for t in range(P):
                    tlo, thi = chunk_bounds(n, P, t)
                    tlo, thi = tlo + lo, thi + lo
                    counts[t] = np.maximum(0, np.minimum(thi, edges[1:]) - np.maximum(tlo, edges[:-1]))
                totals = counts.sum(axis=0)
                counts[:] = np.cumsum(counts, axis=0) - counts
                charge_add64(tl, 2 * P * B)
            starts, _ = exclusive_prefix_sum(totals)
            self.bucket_starts = starts + lo
            self.bucket_sizes = totals
            charge_add64(tl, B)
            charge_loop(tl, B)
        yield tl.barrier()

        # scatter pass
        if worker:
            cursor = self.table[tl.id, :B] + self.bucket_starts
            charge_add64(tl, B)
            fill = np.zeros(B, dtype=np.int64)
            for start in range(clo, chi, w):
                k = min(w, chi - start)
                yield from dma_in(tl, src + start * self.rec, area_addr, k * self.rec)
                positions = np.arange(start, start + k)
                buckets = self._classify(tl, area['key'][:k], positions, lo, n, split, self.position_mode)
                order = sorted_order(buckets)
                grouped = area[:k][order]
                bounds = np.searchsorted(buckets[order], np.arange(B + 1))
                # slot address, fill counter and full check per record
                tl.charge('add32', k)
                tl.charge('cmp', k)
                tl.charge('branch', k)
                for b in range(B):
                    i, end = bounds[b], bounds[b + 1]
                    while i < end:
                        take = min(staging - fill[b], end - i)
                        slot = w + b * staging + fill[b]
                        area[slot:slot + take] = grouped[i:i + take]
                        charge_move(tl, take, self.lanes)
                        fill[b] += take
                        i += take
                        if fill[b] == staging:
                            yield from dma_out(tl, dst + int(cursor[b]) * self.rec,
                                               area_addr + (w + b * staging) * self.rec, staging * self.rec)
                            cursor[b] += staging
                            fill[b] = 0
            for b in range(B):
                if fill[b]:
                    yield from dma_out(tl, dst + int(cursor[b]) * self.rec,
                                       area_addr + (w + b * staging) * self.rec, int(fill[b]) * self.rec)
                    cursor[b] += fill[b]
                    fill[b] = 0
        yield tl.barrier()


@register_kernel
class PartitionKernel(_CooperativePartitioner):
    """
    Partition a region into dst by a pivot or a sorted list of splitters.

    Records with key < splitters[0] come first, then keys in
    [splitters[0], splitters[1]), and so on. The result holds the bucket
    start offsets and sizes.
    """

    name = 'partition'

    def __init__(self, dpu, tasklets, addr, count, out, pivot=None, splitters=None,
                 dtype=KV_DTYPE, buffer_elems=256):
        if splitters is None:
            if pivot is None:
                raise ConfigError("partition needs a pivot or splitters")
            splitters = [pivot]
        self.split = np.sort(np.asarray(splitters, dtype=np.int64))
        fanout = len(self.split) + 1
        shared = self.partition_shared_bytes(tasklets, fanout, tasklets)
        super().__init__(dpu, tasklets, addr, count, dtype, buffer_elems, 2, shared)
        self._setup_partition(dpu, fanout, 1)
        self.split_by_position = False
        self.out = out

    def program(self, tl):
        if self.count:
            yield from self._partition(tl, 0, self.count, self.addr, self.out, self.split)

    def result(self):
        starts = self.bucket_starts if self.count else np.zeros(len(self.split) + 1, dtype=np.int64)
        sizes = self.bucket_sizes if self.count else np.zeros(len(self.split) + 1, dtype=np.int64)
        return {'starts': starts.copy(), 'sizes': sizes.copy(), 'position_split': self.position_mode}


@register_kernel
class QuicksortKernel(_CooperativePartitioner):
    """
    In-place ascending sort of `count` records at `addr`.

    `scratch` is a disjoint region of the same size, required when more
    than one tasklet cooperates on the first levels. Tiles never shrink
    below BUSY_TILE records; tasklets without room for them only join the
    barriers. Workers pull leaf ranges one at a time under LEAF_MUTEX.
    """

    name = 'quicksort'

    def __init__(self, dpu, tasklets, addr, count, scratch=None, dtype=KV_DTYPE,
                 buffer_elems=256, fanout=8, oversample=4):
        shared = self.partition_shared_bytes(tasklets, fanout, oversample * fanout + tasklets)
        super().__init__(dpu, tasklets, addr, count, dtype, buffer_elems, 2, shared, least=BUSY_TILE)
        fanout = max(2, min(fanout, self.w))
        self._setup_partition(dpu, fanout, max(1, -(-oversample * fanout // self.workers)))
        self.threshold = COOP_TILES * self.workers * self.w
        self.scratch = scratch
        coop = self.workers > 1 and self.count >= self.threshold
        if coop and scratch is None:
            raise ConfigError(f"sorting {self.count} records with {tasklets} tasklets needs a scratch region")
        self.coop_ranges = [(0, self.count, addr)] if coop else []
        self.leaves = [] if coop or not self.count else [(0, self.count, addr)]
        self.next_leaf = 0

    def program(self, tl):
        r = 0
        while r < len(self.coop_ranges):
            lo, hi, src = self.coop_ranges[r]
            dst = self.scratch if src == self.addr else self.addr
            yield from self._partition(tl, lo, hi, src, dst)
            if tl.id == 0:
                self._route(tl, dst)
            yield tl.barrier()
            r += 1
        if tl.id >= self.workers:
            return
        while True:
            yield tl.lock(LEAF_MUTEX)
            i = self.next_leaf
            self.next_leaf += 1
            charge_loop(tl, 1)
            yield tl.unlock(LEAF_MUTEX)
            if i >= len(self.leaves):
                return
            yield from self._sort_range(tl, *self.leaves[i])

    def _sort_range(self, tl, lo, hi, buf):
        stack = [(lo, hi, buf)]
        while stack:
            lo, hi, buf = stack.pop()
            if hi - lo <= 2 * self.w:
                yield from self._sort_leaf(tl, lo, hi, buf)
                continue
            split = yield from self._split(tl, lo, hi, buf)
            left, right = (lo, split, buf), (split, hi, buf)
            if split - lo >= hi - split:
                stack += [left, right]
            else:
                stack += [right, left]
            charge_loop(tl, 2)

    def _route(self, tl, dst):
        for start, size in zip(self.bucket_starts, self.bucket_sizes):
            if size == 0:
                continue
            child = (int(start), int(start + size), dst)
            if size >= self.threshold:
                self.coop_ranges.append(child)
            else:
                self.leaves.append(child)
            charge_loop(tl, 2)

    def _sort_leaf(self, tl, lo, hi, buf):
        m = hi - lo
        if m == 0:
            return
        area = self.areas[tl.id]
        yield from dma_in(tl, buf + lo * self.rec, self.area_addr[tl.id], m * self.rec)
        seg = area[:m]
        seg[:] = seg[sorted_order(seg['key'])]
        charge_sort(tl, m, self.lanes)
        yield from dma_out(tl, self.addr + lo * self.rec, self.area_addr[tl.id], m * self.rec)

    def _pivot(self, tl, lo, hi, buf):
        slot = self.area_addr[tl.id]
        for i, pos in enumerate((lo, (lo + hi) // 2, hi - 1)):
            yield tl.dma_read(buf + pos * self.rec, slot + 8 * i, 8)
        keys = self.dpu.wram_array(slot, 3, '<i8')
        charge_compare(tl, 3)
        return int(np.sort(keys)[1])

    def _split(self, tl, lo, hi, buf):
        """
        Two-window swap scan around a median-of-three pivot.

        The left window advances from lo and stops at keys >= pivot, the right
        window retreats from hi and stops at keys <= pivot; stopped pairs are
        swapped. An exhausted window is written back and the next one loaded.
        When the windows would meet, the remaining middle (under two windows)
        is partitioned in the scratchpad. Returns the split point s with
        keys[lo:s] <= pivot <= keys[s:hi] and lo < s < hi.
        """
        pivot = yield from self._pivot(tl, lo, hi, buf)
        w, rec = self.w, self.rec
        area = self.areas[tl.id]
        left, right = area[:w], area[w:2 * w]
        left_addr = self.area_addr[tl.id]
        right_addr = left_addr + w * rec

        L, R = lo, hi - w
        yield from dma_in(tl, buf + L * rec, left_addr, w * rec)
        yield from dma_in(tl, buf + R * rec, right_addr, w * rec)
        a, b = 0, w
        dirty_left = dirty_right = False
        while True:
            lm = np.flatnonzero(left['key'][a:] >= pivot) + a
            rm = np.flatnonzero(right['key'][:b] <= pivot)[::-1]
            k = min(len(lm), len(rm))
            if k:
                li, ri = lm[:k], rm[:k]
                held = left[li].copy()
                left[li] = right[ri]
                right[ri] = held
                charge_move(tl, 2 * k, self.lanes)
                dirty_left = dirty_right = True
            new_a = int(lm[k]) if k < len(lm) else w
            new_b = int(rm[k]) + 1 if k < len(rm) else 0
            charge_scan(tl, (new_a - a) + (b - new_b))
            a, b = new_a, new_b

            stuck = False
            if a == w:
                if dirty_left:
                    yield from dma_out(tl, buf + L * rec, left_addr, w * rec)
                    dirty_left = False
                if L + 2 * w <= R:
                    L += w
                    yield from dma_in(tl, buf + L * rec, left_addr, w * rec)
                    a = 0
                else:
                    stuck = True
            if b == 0 and not stuck:
                if dirty_right:
                    yield from dma_out(tl, buf + R * rec, right_addr, w * rec)
                    dirty_right = False
                if R - w >= L + w:
                    R -= w
                    yield from dma_in(tl, buf + R * rec, right_addr, w * rec)
                    b = w
                else:
                    stuck = True
            if stuck:
                break

        if dirty_left:
            yield from dma_out(tl, buf + L * rec, left_addr, w * rec)
        if dirty_right:
            yield from dma_out(tl, buf + R * rec, right_addr, w * rec)

        s0, s1 = L + a, R + b
        m = s1 - s0
        below = 0
        equal = 0
        if m > 0:
            yield from dma_in(tl, buf + s0 * rec, left_addr, m * rec)
            seg = area[:m]
            keys = seg['key']
            lt, eq = keys < pivot, keys == pivot
            below, equal = int(lt.sum()), int(eq.sum())
            seg[:] = np.concatenate([seg[lt], seg[eq], seg[~(lt | eq)]])
            charge_scan(tl, m)
            charge_move(tl, m, self.lanes)
            yield from dma_out(tl, buf + s0 * rec, left_addr, m * rec)
        s_min = s0 + below
        split = min(max((lo + hi) // 2, s_min), s_min + equal)
        if not lo < split < hi:
            raise RuntimeError(f"quicksort split {split} outside ({lo}, {hi})")
        return split


@register_kernel
class MergePassKernel(_RecordKernel):
    """
    Merge sorted run pairs.

    pairs: list of (a_addr, a_count, b_addr, b_count, out_addr); pair i is
    merged by tasklet i % T through three scratchpad buffers. Ties take the
    record from run A first.
    """

    name = 'merge_pass'

    def __init__(self, dpu, tasklets, pairs, dtype=KV_DTYPE, buffer_elems=256):
        super().__init__(dpu, tasklets, 0, 0, dtype, buffer_elems, 3)
        self.pairs = list(pairs)

    def program(self, tl):
        for i in range(tl.id, len(self.pairs), self.tasklets):
            a, na, b, nb, out = self.pairs[i]
            yield from self._merge(tl, a, na, b, nb, out)

    def _merge(self, tl, a_addr, na, b_addr, nb, out_addr):
        w, rec = self.w, self.rec
        area = self.areas[tl.id]
        buf_a, buf_b, out = area[:w], area[w:2 * w], area[2 * w:3 * w]
        addr_a = self.area_addr[tl.id]
        addr_b = addr_a + w * rec
        addr_out = addr_b + w * rec
        ia = ib = 0
        ca = ea = cb = eb = 0
        fill = written = 0
        while True:
            if ca == ea and ia < na:
                k = min(w, na - ia)
                yield from dma_in(tl, a_addr + ia * rec, addr_a, k * rec)
                ia, ca, ea = ia + k, 0, k
            if cb == eb and ib < nb:
                k = min(w, nb - ib)
                yield from dma_in(tl, b_addr + ib * rec, addr_b, k * rec)
                ib, cb, eb = ib + k, 0, k
            if ca == ea and cb == eb:
                break
            bounds = []
            if ca < ea and ia < na:
                bounds.append(int(buf_a['key'][ea - 1]))
            if cb < eb and ib < nb:
                bounds.append(int(buf_b['key'][eb - 1]))
            if bounds:
                limit = min(bounds)
                ta = int(np.searchsorted(buf_a['key'][ca:ea], limit, side='right'))
                tb = int(np.searchsorted(buf_b['key'][cb:eb], limit, side='right'))
            else:
                ta, tb = ea - ca, eb - cb
            merged = np.concatenate([buf_a[ca:ca + ta], buf_b[cb:cb + tb]])
            merged = merged[sorted_order(merged['key'])]
            ca += ta
            cb += tb
            charge_compare(tl, len(merged))
            charge_move(tl, len(merged), self.lanes)
            charge_loop(tl, len(merged))
            i = 0
            while i < len(merged):
                take = min(w - fill, len(merged) - i)
                out[fill:fill + take] = merged[i:i + take]
                fill += take
                i += take
                if fill == w:
                    yield from dma_out(tl, out_addr + written * rec, addr_out, w * rec)
                    written += w
                    fill = 0
        if fill:
            yield from dma_out(tl, out_addr + written * rec, addr_out, fill * rec)


@register_kernel
class MergesortKernel(MergePassKernel):
    """Sort in place: tasklets sort scratchpad-sized runs, then merge pairs pass by pass."""

    name = 'mergesort'

    def __init__(self, dpu, tasklets, addr, count, scratch=None, dtype=KV_DTYPE, buffer_elems=256):
        super().__init__(dpu, tasklets, [], dtype, buffer_elems)
        self.addr = addr
        self.count = int(count)
        self.run0 = 3 * self.w
        if self.count > self.run0 and scratch is None:
            raise ConfigError(f"mergesort of {self.count} records needs a scratch region")
        self.scratch = scratch

    def program(self, tl):
        n, rec = self.count, self.rec
        area = self.areas[tl.id]
        tiles = -(-n // self.run0)
        for i in range(tl.id, tiles, self.tasklets):
            lo = i * self.run0
            m = min(self.run0, n - lo)
            yield from dma_in(tl, self.addr + lo * rec, self.area_addr[tl.id], m * rec)
            seg = area[:m]
            seg[:] = seg[sorted_order(seg['key'])]
            charge_sort(tl, m, self.lanes)
            yield from dma_out(tl, self.addr + lo * rec, self.area_addr[tl.id], m * rec)
        yield tl.barrier()

        run, src, dst = self.run0, self.addr, self.scratch
        while run < n:
            pairs = -(-n // (2 * run))
            for j in range(tl.id, pairs, self.tasklets):
                lo = j * 2 * run
                mid = min(n, lo + run)
                hi = min(n, lo + 2 * run)
                if mid == hi:
                    yield from self._copy(tl, src, dst, lo, hi)
                else:
                    yield from self._merge(tl, src + lo * rec, mid - lo, src + mid * rec, hi - mid,
                                           dst + lo * rec)
            yield tl.barrier()
            run *= 2
            src, dst = dst, src
        if src != self.addr:
            lo, hi = chunk_bounds(n, self.tasklets, tl.id)
            yield from self._copy(tl, src, self.addr, lo, hi)


@register_kernel
class SortedHeadKernel(_RecordKernel):
    """
    Length of the first `k` records of a sorted region extended over every
    record tied with the k-th key. One tasklet streams the tail after
    position k until the key changes.
    """

    name = 'sorted_head'

    def __init__(self, dpu, tasklets, addr, count, k, dtype=KV_DTYPE, buffer_elems=256):
        super().__init__(dpu, tasklets, addr, count, dtype, buffer_elems, 1)
        self.k = int(k)
        self.take = 0

    def program(self, tl):
        if tl.id or not self.count:
            return
        rec, w = self.rec, self.w
        keys = self.areas[0]['key']
        pos = min(self.k, self.count)
        yield from dma_in(tl, self.addr + (pos - 1) * rec, self.area_addr[0], rec)
        boundary = int(keys[0])
        while pos < self.count:
            n = min(w, self.count - pos)
            yield from dma_in(tl, self.addr + pos * rec, self.area_addr[0], n * rec)
            other = np.flatnonzero(keys[:n] != boundary)
            tied = int(other[0]) if len(other) else n
            charge_scan(tl, min(n, tied + 1))
            pos += tied
            if tied < n:
                break
        self.take = pos

    def result(self):
        return self.take


# ---------------------------------------------------------------------------
# Single-DPU entry points
# ---------------------------------------------------------------------------

def _launch_cfg(cfg, tasklets):
    cfg = cfg or KernelConfig()
    return cfg, tasklets or cfg.tasklets


def quicksort_mram(dpu, addr, count, cfg=None, tasklets=None, dtype=KV_DTYPE):
    """Sort `count` records at `addr` in place; returns KernelMetrics."""
    cfg, tasklets = _launch_cfg(cfg, tasklets)
    rec = np.dtype(dtype).itemsize
    scratch = dpu.mram_alloc(count * rec) if tasklets > 1 and count else None
    try:
        launch = run_kernel([dpu], QuicksortKernel, tasklets, {
            'addr': addr, 'count': count, 'scratch': scratch, 'dtype': dtype,
            'buffer_elems': cfg.buffer_elems,
        })
    finally:
        if scratch is not None:
            dpu.mram_free(scratch)
    return launch.metrics[0]


def mergesort_mram(dpu, addr, count, cfg=None, tasklets=None, dtype=KV_DTYPE):
    cfg, tasklets = _launch_cfg(cfg, tasklets)
    rec = np.dtype(dtype).itemsize
    scratch = dpu.mram_alloc(count * rec) if count else None
    try:
        launch = run_kernel([dpu], MergesortKernel, tasklets, {
            'addr': addr, 'count': count, 'scratch': scratch, 'dtype': dtype,
            'buffer_elems': cfg.buffer_elems,
        })
    finally:
        if scratch is not None:
            dpu.mram_free(scratch)
    return launch.metrics[0]


def partition_parallel(dpu, addr, count, out, pivot=None, splitters=None, cfg=None, tasklets=None,
                       dtype=KV_DTYPE):
    """
    Partition `count` records at `addr` into `out`.

    Returns:
        tuple: (KernelMetrics, bucket starts, bucket sizes); with a single
        pivot the boundary index is starts[1]
    """
    cfg, tasklets = _launch_cfg(cfg, tasklets)
    launch = run_kernel([dpu], PartitionKernel, tasklets, {
        'addr': addr, 'count': count, 'out': out, 'pivot': pivot, 'splitters': splitters,
        'dtype': dtype, 'buffer_elems': cfg.buffer_elems,
    })
    res = launch.outputs[0]
    return launch.metrics[0], res['starts'], res['sizes']


def merge_pass(dpu, run_a, run_b, out, cfg=None, dtype=KV_DTYPE):
    """
    Merge two sorted runs into out with one tasklet.

    run_a, run_b: (addr, count) tuples
    """
    cfg = cfg or KernelConfig()
    launch = run_kernel([dpu], MergePassKernel, 1, {
        'pairs': [(run_a[0], run_a[1], run_b[0], run_b[1], out)],
        'dtype': dtype, 'buffer_elems': cfg.buffer_elems,
    })
    return launch.metrics[0]


def prefix_sum_mram(dpu, addr, count, out=None, cfg=None, tasklets=None):
    cfg, tasklets = _launch_cfg(cfg, tasklets)
    launch = run_kernel([dpu], PrefixSumKernel, tasklets, {
        'addr': addr, 'count': count, 'out': out, 'buffer_elems': cfg.buffer_elems,
    })
    return launch.metrics[0], launch.outputs[0]


def sorted_head_mram(dpu, addr, count, k, cfg=None, dtype=KV_DTYPE):
    """
    Top-k prefix length of a sorted region, ties of the k-th key included.

    Returns:
        tuple: (KernelMetrics, record count)
    """
    cfg = cfg or KernelConfig()
    launch = run_kernel([dpu], SortedHeadKernel, 1, {
        'addr': addr, 'count': count, 'k': k, 'dtype': dtype, 'buffer_elems': cfg.buffer_elems,
    })
    return launch.metrics[0], launch.outputs[0]
