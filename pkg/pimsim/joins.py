"""
Join kernels on one DPU.

Both joins take records of (key, row id) and emit (inner row id, outer row
id) pairs. Inner keys are unique. Tasklets collect pairs in a private
buffer and flush it at a shared output cursor taken under a mutex.

merge_join   both relations sorted; each tasklet owns a slice of the outer
             relation, seeds its inner position by binary search (8-byte
             reads), then merges tile against tile.
hash_join    both relations grouped by the same radix bits; tasklet g % T
             builds a scratchpad table from inner group g (in chunks when
             the group is larger than the table) and probes it with the
             outer group.
"""

import logging

import numpy as np

from pimsim.config import KernelConfig
from pimsim.errors import ConfigError, ScratchpadExhaustedError
from pimsim.hashing import SpmHashTable, charge_hash, charge_probes, hash32, multipass_radix_partition
from pimsim.machine import Kernel, register_kernel, run_kernel
from pimsim.records import PAIR_DTYPE, record_dtype
from pimsim.sorting import quicksort_mram
from pimsim.tiling import (ceil_log2, charge_add64, charge_compare, charge_loop, charge_move, charge_search,
                           chunk_bounds, dma_in, dma_out, pow2_floor, tile_records)

logger = logging.getLogger(__name__)

JOIN_DTYPE = record_dtype(1)
"""Join input record: key, row id."""

_OUT_MUTEX = 0


class _PairWriter(Kernel):
    """Per-tasklet pair buffers flushed at a shared cursor."""

    def _setup_output(self, dpu, out, w):
        self.out = out
        self.pair_w = w
        self.pair_addr = [dpu.wram_alloc(w * PAIR_DTYPE.itemsize) for _ in range(self.tasklets)]
        self.pair_fill = [0] * self.tasklets
        self.out_cursor = 0

    def _emit_pairs(self, tl, inner_ids, outer_ids):
        buf = self.dpu.wram_array(self.pair_addr[tl.id], self.pair_w, PAIR_DTYPE)
        i = 0
        while i < len(inner_ids):
            fill = self.pair_fill[tl.id]
            take = min(self.pair_w - fill, len(inner_ids) - i)
            buf['inner'][fill:fill + take] = inner_ids[i:i + take]
            buf['outer'][fill:fill + take] = outer_ids[i:i + take]
            charge_move(tl, take, 2)
            self.pair_fill[tl.id] = fill + take
            i += take
            if self.pair_fill[tl.id] == self.pair_w:
                yield from self._flush_pairs(tl)

    def _flush_pairs(self, tl):
        fill = self.pair_fill[tl.id]
        if not fill:
            return
        yield tl.lock(_OUT_MUTEX)
        offset = self.out_cursor
        self.out_cursor += fill
        charge_add64(tl, 1)
        yield tl.unlock(_OUT_MUTEX)
        yield from dma_out(tl, self.out + offset * PAIR_DTYPE.itemsize, self.pair_addr[tl.id],
                           fill * PAIR_DTYPE.itemsize)
        self.pair_fill[tl.id] = 0

    def result(self):
        return self.out_cursor


@register_kernel
class MergeJoinKernel(_PairWriter):
    name = 'merge_join'

    def __init__(self, dpu, tasklets, inner, n_inner, outer, n_outer, out, buffer_elems=256):
        super().__init__(dpu, tasklets)
        self.inner, self.outer = inner, outer
        self.n_inner, self.n_outer = int(n_inner), int(n_outer)
        self.rec = JOIN_DTYPE.itemsize
        self.w = tile_records(dpu.wram_free - 8 * tasklets, tasklets, self.rec, 3, buffer_elems)
        self.in_addr = [dpu.wram_alloc(self.w * self.rec) for _ in range(tasklets)]
        self.out_addr = [dpu.wram_alloc(self.w * self.rec) for _ in range(tasklets)]
        self.probe_addr = [dpu.wram_alloc(8) for _ in range(tasklets)]
        self._setup_output(dpu, out, self.w)

    def _seed(self, tl, key):
        """First inner position whose key is >= key."""
        probe = self.dpu.wram_array(self.probe_addr[tl.id], 1, '<i8')
        lo, hi = 0, self.n_inner
        while lo < hi:
            mid = (lo + hi) // 2
            yield tl.dma_read(self.inner + mid * self.rec, self.probe_addr[tl.id], 8)
            charge_search(tl, 1)
            if probe[0] < key:
                lo = mid + 1
            else:
                hi = mid
        return lo

    def program(self, tl):
        olo, ohi = chunk_bounds(self.n_outer, self.tasklets, tl.id)
        if olo >= ohi or not self.n_inner:
            return
        w, rec = self.w, self.rec
        yield tl.dma_read(self.outer + olo * rec, self.probe_addr[tl.id], 8)
        first = int(self.dpu.wram_array(self.probe_addr[tl.id], 1, '<i8')[0])
        ipos = yield from self._seed(tl, first)
        if ipos >= self.n_inner:
            return

        inner = self.dpu.wram_array(self.in_addr[tl.id], w, JOIN_DTYPE)
        outer = self.dpu.wram_array(self.out_addr[tl.id], w, JOIN_DTYPE)
        ki = min(w, self.n_inner - ipos)
        yield from dma_in(tl, self.inner + ipos * rec, self.in_addr[tl.id], ki * rec)
        opos = olo
        ko = min(w, ohi - opos)
        yield from dma_in(tl, self.outer + opos * rec, self.out_addr[tl.id], ko * rec)
        ic = oc = 0
        while True:
            if oc == ko:
                opos += ko
                if opos >= ohi:
                    break
                ko = min(w, ohi - opos)
                yield from dma_in(tl, self.outer + opos * rec, self.out_addr[tl.id], ko * rec)
                oc = 0
            if ic == ki:
                ipos += ki
                if ipos >= self.n_inner:
                    break
                ki = min(w, self.n_inner - ipos)
                yield from dma_in(tl, self.inner + ipos * rec, self.in_addr[tl.id], ki * rec)
                ic = 0
            ikeys = inner['key'][ic:ki]
            okeys = outer['key'][oc:ko]
            take = int(np.searchsorted(okeys, ikeys[-1], side='right'))
            if not take:
                ic = ki
                charge_compare(tl, 1)
                continue
            pos = np.searchsorted(ikeys, okeys[:take])
            hit = ikeys[pos] == okeys[:take]
            steps = take + int(pos[-1])
            charge_compare(tl, steps)
            charge_loop(tl, steps)
            if hit.any():
                yield from self._emit_pairs(tl, inner['p0'][ic + pos[hit]], outer['p0'][oc + np.flatnonzero(hit)])
            ic += int(pos[-1])
            oc += take
        yield from self._flush_pairs(tl)


@register_kernel
class HashJoinKernel(_PairWriter):
    name = 'hash_join'

    def __init__(self, dpu, tasklets, inner, inner_bounds, outer, outer_bounds, out, buffer_elems=256,
                 fill_max=0.5):
        super().__init__(dpu, tasklets)
        if len(inner_bounds) != len(outer_bounds):
            raise ConfigError("inner and outer relations must share the radix grouping")
        self.inner, self.outer = inner, outer
        self.inner_bounds = np.asarray(inner_bounds, dtype=np.int64)
        self.outer_bounds = np.asarray(outer_bounds, dtype=np.int64)
        self.rec = JOIN_DTYPE.itemsize
        self.w, slots = self.layout(dpu.wram_free, tasklets, buffer_elems)
        if not slots:
            raise ScratchpadExhaustedError(f"no room for {tasklets} probe tables")
        self.tile_addr = [dpu.wram_alloc(self.w * self.rec) for _ in range(tasklets)]
        self._setup_output(dpu, out, self.w)
        self.tables = [SpmHashTable.in_wram(dpu, slots, 1, fill_max=fill_max, policy='unique')
                       for _ in range(tasklets)]

    @staticmethod
    def layout(budget, tasklets, buffer_elems):
        """(tile records, table slots per tasklet) for a scratchpad budget."""
        rec = JOIN_DTYPE.itemsize
        w = tile_records(budget // 2, tasklets, rec, 2, buffer_elems)
        left = budget - tasklets * (w * rec + w * PAIR_DTYPE.itemsize)
        slots = pow2_floor(left // (tasklets * SpmHashTable.slot_bytes(1)))
        if slots < 2:
            slots = 0
        return w, slots

    def program(self, tl):
        table = self.tables[tl.id]
        tile = self.dpu.wram_array(self.tile_addr[tl.id], self.w, JOIN_DTYPE)
        groups = len(self.inner_bounds) - 1
        for g in range(tl.id, groups, self.tasklets):
            ilo, ihi = int(self.inner_bounds[g]), int(self.inner_bounds[g + 1])
            olo, ohi = int(self.outer_bounds[g]), int(self.outer_bounds[g + 1])
            charge_loop(tl, 1)
            if ilo == ihi or olo == ohi:
                continue
            for clo in range(ilo, ihi, table.max_entries):
                chi = min(ihi, clo + table.max_entries)
                for start in range(clo, chi, self.w):
                    k = min(self.w, chi - start)
                    yield from dma_in(tl, self.inner + start * self.rec, self.tile_addr[tl.id], k * self.rec)
                    keys = tile['key'][:k]
                    hashed = hash32(keys)
                    charge_hash(tl, k)
                    _, probes = table.insert_batch(keys, tile['p0'][:k], hashed=hashed)
                    charge_probes(tl, int(probes.sum()))
                    tl.charge('wram_store8', 2 * k)
                    charge_loop(tl, k)
                for start in range(olo, ohi, self.w):
                    k = min(self.w, ohi - start)
                    yield from dma_in(tl, self.outer + start * self.rec, self.tile_addr[tl.id], k * self.rec)
                    keys = tile['key'][:k]
                    hashed = hash32(keys)
                    charge_hash(tl, k)
                    slots, probes = table.probe_batch(keys, hashed=hashed)
                    charge_probes(tl, int(probes.sum()))
                    charge_loop(tl, k)
                    hit = np.flatnonzero(slots >= 0)
                    if len(hit):
                        tl.charge('wram_load8', len(hit))
                        inner_ids = table.payload[slots[hit], 0].copy()
                        outer_ids = tile['p0'][hit].copy()
                        yield from self._emit_pairs(tl, inner_ids, outer_ids)
                table.clear()
                tl.charge('wram_store8', table.capacity)
        yield from self._flush_pairs(tl)


# ---------------------------------------------------------------------------
# Single-DPU entry points
# ---------------------------------------------------------------------------

def merge_join_mram(dpu, inner, n_inner, outer, n_outer, cfg=None, tasklets=None, presorted=False):
    """
    Sort both relations (unless presorted) and merge-join them.

    Returns:
        tuple: (list of KernelMetrics, pairs array)
    """
    cfg = cfg or KernelConfig()
    tasklets = tasklets or cfg.tasklets
    metrics = []
    if not presorted:
        metrics.append(quicksort_mram(dpu, inner, n_inner, cfg, tasklets, JOIN_DTYPE))
        metrics.append(quicksort_mram(dpu, outer, n_outer, cfg, tasklets, JOIN_DTYPE))
    out = dpu.mram_alloc(max(n_outer, 1) * PAIR_DTYPE.itemsize)
    try:
        launch = run_kernel([dpu], MergeJoinKernel, tasklets, {
            'inner': inner, 'n_inner': n_inner, 'outer': outer, 'n_outer': n_outer, 'out': out,
            'buffer_elems': cfg.buffer_elems,
        })
        pairs = dpu.mram_get(out, launch.outputs[0], PAIR_DTYPE)
    finally:
        dpu.mram_free(out)
    metrics.append(launch.metrics[0])
    return metrics, pairs


def join_radix_bits(dpu, n_inner, cfg, tasklets, bit_offset=0, fill_max=None):
    """Radix bits that bring inner groups down to about half a probe table."""
    fill_max = cfg.ht_fill_max if fill_max is None else fill_max
    budget = dpu.config.wram_bytes - dpu.config.stack_reserve * tasklets - 16 * tasklets
    _, slots = HashJoinKernel.layout(budget, tasklets, cfg.buffer_elems)
    target = max(1, int(slots * fill_max) // 2)
    return min(32 - bit_offset, ceil_log2(-(-max(n_inner, 1) // target)))


def hash_join_mram(dpu, inner, n_inner, outer, n_outer, cfg=None, tasklets=None, bit_offset=0):
    """
    Radix-partition both relations and hash-join them group by group.

    Returns:
        tuple: (list of KernelMetrics, pairs array)
    """
    cfg = cfg or KernelConfig()
    tasklets = tasklets or cfg.tasklets
    bits = join_radix_bits(dpu, n_inner, cfg, tasklets, bit_offset)
    metrics = []
    m, inner_bounds = multipass_radix_partition(dpu, inner, n_inner, bits, cfg.radix_bits, cfg, tasklets,
                                                bit_offset, JOIN_DTYPE)
    metrics += m
    m, outer_bounds = multipass_radix_partition(dpu, outer, n_outer, bits, cfg.radix_bits, cfg, tasklets,
                                                bit_offset, JOIN_DTYPE)
    metrics += m
    out = dpu.mram_alloc(max(n_outer, 1) * PAIR_DTYPE.itemsize)
    try:
        launch = run_kernel([dpu], HashJoinKernel, tasklets, {
            'inner': inner, 'inner_bounds': inner_bounds, 'outer': outer, 'outer_bounds': outer_bounds,
            'out': out, 'buffer_elems': cfg.buffer_elems, 'fill_max': cfg.ht_fill_max,
        })
        pairs = dpu.mram_get(out, launch.outputs[0], PAIR_DTYPE)
    finally:
        dpu.mram_free(out)
    metrics.append(launch.metrics[0])
    logger.debug("dpu %d: hash join %d x %d with %d radix bits -> %d pairs", dpu.id, n_inner, n_outer,
                 bits, len(pairs))
    return metrics, pairs
