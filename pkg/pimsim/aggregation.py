"""
Grouped aggregation on one DPU.

Both variants work on packed records: an int64 group key followed by one
int64 lane per accumulator. Every supported function reduces to lane-wise
addition (count is a lane of ones, average ships a sum lane and a count
lane), so partial groups from different passes or DPUs combine by adding.

aggregate_hash: tasklets insert their tiles into a shared scratchpad hash
table split into independently locked stripes. Records that find no room
are compacted and written to a residue region; when the input is done the
table is emitted and cleared, and the residue is processed in the next
pass.

aggregate_sort: quicksort, then a reduce over sorted tiles in which the
tasklets chain the output offset and the open group at the tile boundary
through handshakes.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from pimsim.config import KernelConfig
from pimsim.errors import ConfigError, ScratchpadExhaustedError, TableFullError
from pimsim.expressions import Const, Expr, KeyPack, as_expr
from pimsim.hashing import NOT_PLACED, SpmHashTable, charge_hash, charge_probes, hash32
from pimsim.machine import Kernel, register_kernel, run_kernel
from pimsim.records import payload_matrix, record_dtype
from pimsim.sorting import quicksort_mram
from pimsim.tiling import (charge_add64, charge_compare, charge_loop, charge_move, charge_scan, dma_in, dma_out,
                           pow2_floor, sorted_order, tile_records)

logger = logging.getLogger(__name__)

AGG_FUNCTIONS = ('unique', 'count', 'sum', 'average')

# Averages keep two extra decimal digits: floor(sum * 100 / count).
AVERAGE_SCALE = 100


@dataclass(frozen=True)
class AggFunc:
    func: str
    expr: Optional[Expr] = None
    name: str = ''

    def __post_init__(self):
        if self.func not in AGG_FUNCTIONS:
            raise ConfigError(f"unknown aggregate function {self.func!r}")
        if self.func in ('sum', 'average') and self.expr is None:
            raise ConfigError(f"{self.func} needs an input expression")
        if self.expr is not None:
            object.__setattr__(self, 'expr', as_expr(self.expr))

    @property
    def lanes(self) -> int:
        return {'unique': 0, 'count': 1, 'sum': 1, 'average': 2}[self.func]

    def lane_exprs(self):
        if self.func == 'count':
            return [Const(1)]
        if self.func == 'sum':
            return [self.expr]
        if self.func == 'average':
            return [self.expr, Const(1)]
        return []


@dataclass(frozen=True)
class AggSpec:
    """
    Group key plus aggregate functions.

    key is a column name, an expression or a KeyPack; key_names names the
    output key column(s), one per KeyPack field. A constant key gives a
    single global group.
    """

    key: object
    funcs: Tuple[AggFunc, ...] = field(default_factory=tuple)
    key_names: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'key', as_expr(self.key))
        object.__setattr__(self, 'funcs', tuple(self.funcs))
        if not self.key_names and isinstance(self.key, Expr) and self.key.columns() and not isinstance(
                self.key, KeyPack):
            object.__setattr__(self, 'key_names', tuple(sorted(self.key.columns())))

    @property
    def lanes(self) -> int:
        return sum(f.lanes for f in self.funcs)

    def lane_exprs(self):
        out = []
        for f in self.funcs:
            out.extend(f.lane_exprs())
        return out

    def columns(self) -> set:
        cols = set(self.key.columns())
        for expr in self.lane_exprs():
            cols |= expr.columns()
        return cols

    def uses_mul(self) -> bool:
        return self.key.uses_mul() or any(e.uses_mul() for e in self.lane_exprs())

    def finalize(self, keys, lanes) -> dict:
        """Host side: key columns and one column per non-unique function, ordered by key."""
        keys = np.asarray(keys, dtype=np.int64)
        lanes = lane_matrix(lanes, len(keys))
        out = {}
        if isinstance(self.key, KeyPack):
            for name, values in zip(self.key_names, self.key.unpack(keys)):
                out[name] = values
        elif self.key_names:
            out[self.key_names[0]] = keys.copy()
        i = 0
        for f in self.funcs:
            if f.func in ('count', 'sum'):
                out[f.name or f.func] = lanes[:, i].copy()
            elif f.func == 'average':
                total, count = lanes[:, i], lanes[:, i + 1]
                out[f.name or f.func] = (total * AVERAGE_SCALE) // np.maximum(count, 1)
            i += f.lanes
        return out


def lane_matrix(lanes, rows: int) -> np.ndarray:
    """(rows, lanes) int64 matrix; a flat empty input gives zero lanes."""
    lanes = np.asarray(lanes, dtype=np.int64)
    if lanes.ndim == 2:
        return lanes
    if not rows:
        return np.zeros((0, 0), dtype=np.int64)
    return lanes.reshape(rows, -1)


def combine_partials(keys, lanes):
    """
    Merge partial groups by key (lane-wise sum).

    Returns:
        tuple: (sorted unique keys, lanes matrix)
    """
    keys = np.asarray(keys, dtype=np.int64)
    lanes = lane_matrix(lanes, len(keys))
    if not len(keys):
        return keys, lanes
    order = sorted_order(keys)
    keys, lanes = keys[order], lanes[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    summed = np.add.reduceat(lanes, starts, axis=0) if lanes.shape[1] else lanes[starts]
    return keys[starts], summed


# ---------------------------------------------------------------------------
# Hash variant
# ---------------------------------------------------------------------------

@register_kernel
class HashAggregateKernel(Kernel):
    """
    Aggregate `count` records at addr into out.

    scratch is a residue region of `count` records; residue passes ping-pong
    between scratch and addr, so the input is consumed.
    """

    name = 'aggregate_hash'

    def __init__(self, dpu, tasklets, addr, count, scratch, out, lanes, stripes=8, fill_max=0.5,
                 buffer_elems=256):
        super().__init__(dpu, tasklets)
        self.addr, self.scratch, self.out = addr, scratch, out
        self.count = int(count)
        self.lanes = lanes
        self.dtype = record_dtype(lanes)
        self.rec = self.dtype.itemsize
        self.stripes = stripes
        self.res_mutex = stripes
        self.out_mutex = stripes + 1

        budget = dpu.wram_free
        self.w = tile_records(budget // 3, tasklets, self.rec, 1, buffer_elems)
        self.tile_addr = [dpu.wram_alloc(self.w * self.rec) for _ in range(tasklets)]
        slots = pow2_floor(dpu.wram_free // SpmHashTable.slot_bytes(lanes)) // stripes
        if slots < 2:
            raise ScratchpadExhaustedError(f"no room for {stripes} hash table stripes")
        shift = stripes.bit_length() - 1
        self.tables = [SpmHashTable.in_wram(dpu, slots, lanes, fill_max=fill_max, shift=shift)
                       for _ in range(stripes)]
        self.capacity = slots * stripes

        self.src, self.dst = addr, scratch
        self.pending = self.count
        self.res_cursor = 0
        self.out_cursor = 0
        self.passes = 0

    def program(self, tl):
        T = self.tasklets
        tile = self.dpu.wram_array(self.tile_addr[tl.id], self.w, self.dtype)
        while self.pending:
            n = self.pending
            for i in range(tl.id, -(-n // self.w), T):
                start = i * self.w
                k = min(self.w, n - start)
                yield from dma_in(tl, self.src + start * self.rec, self.tile_addr[tl.id], k * self.rec)
                yield from self._insert_tile(tl, tile, start, k)
            yield tl.barrier()

            for s in range(tl.id, self.stripes, T):
                yield from self._emit(tl, tile, s)
            yield tl.barrier()

            if tl.id == 0:
                if self.res_cursor == n:
                    raise TableFullError(f"aggregation pass {self.passes} placed none of {n} records")
                self.passes += 1
                logger.debug("dpu %d: aggregation pass %d left %d of %d records", self.dpu.id,
                             self.passes, self.res_cursor, n)
                self.pending = self.res_cursor
                self.res_cursor = 0
                self.src, self.dst = self.dst, self.src
                charge_loop(tl, 4)
            yield tl.barrier()

    def _insert_tile(self, tl, tile, start, k):
        keys = tile['key'][:k].copy()
        payload = payload_matrix(tile[:k]) if self.lanes else None
        hashed = hash32(keys)
        charge_hash(tl, k)
        stripe = hashed.astype(np.int64) & (self.stripes - 1)
        tl.charge('add32', 3 * k)
        order = sorted_order(stripe)
        bounds = np.searchsorted(stripe[order], np.arange(self.stripes + 1))
        placed = np.zeros(k, dtype=bool)
        for s in range(self.stripes):
            rows = order[bounds[s]:bounds[s + 1]]
            if not len(rows):
                continue
            yield tl.lock(s)
            status, probes = self.tables[s].insert_batch(
                keys[rows], None if payload is None else payload[rows], hashed=hashed[rows])
            charge_probes(tl, int(probes.sum()))
            done = status != NOT_PLACED
            charge_add64(tl, int(done.sum()) * max(self.lanes, 1))
            charge_loop(tl, len(rows))
            yield tl.unlock(s)
            placed[rows] = done

        residue = np.flatnonzero(~placed)
        r = len(residue)
        if not r:
            return
        tile[:r] = tile[residue]
        charge_move(tl, r, self.lanes + 1)
        yield tl.lock(self.res_mutex)
        offset = self.res_cursor
        self.res_cursor += r
        charge_add64(tl, 1)
        yield tl.unlock(self.res_mutex)
        yield from dma_out(tl, self.dst + offset * self.rec, self.tile_addr[tl.id], r * self.rec)

    def _emit(self, tl, tile, s):
        table = self.tables[s]
        occupied = table.occupied()
        charge_scan(tl, table.capacity)
        m = len(occupied)
        if m:
            yield tl.lock(self.out_mutex)
            offset = self.out_cursor
            self.out_cursor += m
            charge_add64(tl, 1)
            yield tl.unlock(self.out_mutex)
            lanes = tile.view('<i8').reshape(self.w, -1)
            for j in range(0, m, self.w):
                chunk = occupied[j:j + self.w]
                c = len(chunk)
                lanes[:c, 0] = table.keys[chunk]
                if self.lanes:
                    lanes[:c, 1:] = table.payload[chunk, :self.lanes]
                charge_move(tl, c, self.lanes + 1)
                yield from dma_out(tl, self.out + (offset + j) * self.rec, self.tile_addr[tl.id], c * self.rec)
        table.clear()
        tl.charge('wram_store8', table.capacity * (1 + max(self.lanes, 1)))
        charge_loop(tl, table.capacity)

    def result(self):
        return {'groups': self.out_cursor, 'passes': self.passes, 'capacity': self.capacity}


# ---------------------------------------------------------------------------
# Sort variant
# ---------------------------------------------------------------------------

@register_kernel
class GroupReduceKernel(Kernel):
    """
    Reduce runs of equal keys of a sorted region into out.

    Tile i is reduced by tasklet i % T. The handshake from the previous
    tile's tasklet hands over the output offset and the group still open
    at the tile boundary; it is merged into the first group of this tile
    or written out ahead of it.
    """

    name = 'group_reduce'

    def __init__(self, dpu, tasklets, addr, count, out, lanes, buffer_elems=256):
        super().__init__(dpu, tasklets)
        self.addr, self.out = addr, out
        self.count = int(count)
        self.lanes = lanes
        self.dtype = record_dtype(lanes)
        self.rec = self.dtype.itemsize
        carry_bytes = self.rec + 16
        self.w = tile_records(dpu.wram_free - carry_bytes - tasklets * self.rec, tasklets, self.rec, 2,
                              buffer_elems)
        self.in_addr = [dpu.wram_alloc(self.w * self.rec) for _ in range(tasklets)]
        self.out_addr = [dpu.wram_alloc((self.w + 1) * self.rec) for _ in range(tasklets)]
        self.carry = dpu.wram_array(dpu.wram_alloc(self.rec), 1, self.dtype)
        self.state = dpu.wram_array(dpu.wram_alloc(16), 2, '<i8')
        self.state[:] = 0  # output offset, carry valid
        self.tiles = -(-self.count // self.w)

    def program(self, tl):
        T = self.tasklets
        tile = self.dpu.wram_array(self.in_addr[tl.id], self.w, self.dtype)
        outbuf = self.dpu.wram_array(self.out_addr[tl.id], self.w + 1, self.dtype)
        out_lanes = outbuf.view('<i8').reshape(self.w + 1, -1)
        carry_lanes = self.carry.view('<i8').reshape(1, -1)
        for i in range(tl.id, self.tiles, T):
            start = i * self.w
            k = min(self.w, self.count - start)
            yield from dma_in(tl, self.addr + start * self.rec, self.in_addr[tl.id], k * self.rec)
            rows = tile.view('<i8').reshape(self.w, -1)[:k]
            keys = rows[:, 0]
            starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
            groups = np.add.reduceat(rows, starts, axis=0)
            groups[:, 0] = keys[starts]
            g = len(starts)
            charge_compare(tl, k)
            charge_add64(tl, k * self.lanes)
            charge_loop(tl, k)

            if T > 1 and i > 0:
                yield tl.wait_for((tl.id - 1) % T)
            offset, has_carry = int(self.state[0]), bool(self.state[1])
            pos = 0
            if has_carry:
                if carry_lanes[0, 0] == groups[0, 0]:
                    groups[0, 1:] += carry_lanes[0, 1:]
                    charge_add64(tl, self.lanes)
                else:
                    out_lanes[0] = carry_lanes[0]
                    charge_move(tl, 1, self.lanes + 1)
                    pos = 1
                charge_compare(tl, 1)
            last = i + 1 == self.tiles
            emit = g if last else g - 1
            out_lanes[pos:pos + emit] = groups[:emit]
            charge_move(tl, emit, self.lanes + 1)
            written = pos + emit
            if not last:
                carry_lanes[0] = groups[-1]
                charge_move(tl, 1, self.lanes + 1)
            self.state[0] = offset + written
            self.state[1] = 0 if last else 1
            charge_add64(tl, 2)
            if T > 1 and not last:
                yield tl.notify((tl.id + 1) % T)
            if written:
                yield from dma_out(tl, self.out + offset * self.rec, self.out_addr[tl.id], written * self.rec)

    def result(self):
        return int(self.state[0])


# ---------------------------------------------------------------------------
# Single-DPU entry points
# ---------------------------------------------------------------------------

def aggregate_hash_mram(dpu, addr, count, lanes, cfg=None, tasklets=None):
    """
    Hash-aggregate packed records; the input region is consumed.

    Returns:
        tuple: (KernelMetrics, group records, passes)
    """
    cfg = cfg or KernelConfig()
    dtype = record_dtype(lanes)
    scratch = dpu.mram_alloc(count * dtype.itemsize)
    out = dpu.mram_alloc(count * dtype.itemsize)
    try:
        launch = run_kernel([dpu], HashAggregateKernel, tasklets or cfg.tasklets, {
            'addr': addr, 'count': count, 'scratch': scratch, 'out': out, 'lanes': lanes,
            'stripes': cfg.ht_stripes, 'fill_max': cfg.ht_fill_max, 'buffer_elems': cfg.buffer_elems,
        })
        res = launch.outputs[0]
        groups = dpu.mram_get(out, res['groups'], dtype)
    finally:
        dpu.mram_free(out)
        dpu.mram_free(scratch)
    return launch.metrics[0], groups, res['passes']


def aggregate_sort_mram(dpu, addr, count, lanes, cfg=None, tasklets=None):
    """
    Sort-aggregate packed records (sorted in place).

    Returns:
        tuple: (list of KernelMetrics for sort and reduce, group records)
    """
    cfg = cfg or KernelConfig()
    tasklets = tasklets or cfg.tasklets
    dtype = record_dtype(lanes)
    sort_metrics = quicksort_mram(dpu, addr, count, cfg, tasklets, dtype)
    out = dpu.mram_alloc(count * dtype.itemsize)
    try:
        launch = run_kernel([dpu], GroupReduceKernel, tasklets, {
            'addr': addr, 'count': count, 'out': out, 'lanes': lanes, 'buffer_elems': cfg.buffer_elems,
        })
        groups = dpu.mram_get(out, launch.outputs[0], dtype)
    finally:
        dpu.mram_free(out)
    return [sort_metrics, launch.metrics[0]], groups
