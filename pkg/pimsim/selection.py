"""
Selection kernel.

Tiles of the input columns are dealt round-robin to the tasklets. A
tasklet evaluates the predicate on its tile, then waits for the handshake
of the tasklet that owns the previous tile, takes the running output
offset, advances it by its match count and notifies the owner of the
next tile. The compacted tile is written at the received offset, so the
output keeps the input row order.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from pimsim.config import KernelConfig
from pimsim.errors import ConfigError
from pimsim.machine import Kernel, register_kernel, run_kernel
from pimsim.tiling import charge_compare, charge_loop, charge_move, charge_scan, dma_in, dma_out, tile_records

logger = logging.getLogger(__name__)

OPERATORS = ('<', '<=', '=', '>=', '>', 'between')


@dataclass(frozen=True)
class Cmp:
    """
    One comparison of a column against a constant or another column.

    'between' is inclusive at both ends: value <= column <= high.
    """

    column: str
    op: str
    value: int = 0
    high: Optional[int] = None
    other: Optional[str] = None

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise ConfigError(f"unknown comparison {self.op!r}")
        if self.op == 'between' and (self.high is None or self.other is not None):
            raise ConfigError("'between' needs a constant high bound")

    def columns(self) -> set:
        return {self.column} | ({self.other} if self.other else set())

    def evaluate(self, cols: dict, n: int) -> np.ndarray:
        left = cols[self.column][:n]
        right = cols[self.other][:n] if self.other else self.value
        if self.op == '<':
            return left < right
        if self.op == '<=':
            return left <= right
        if self.op == '=':
            return left == right
        if self.op == '>=':
            return left >= right
        if self.op == '>':
            return left > right
        return (left >= self.value) & (left <= self.high)

    def charge(self, tl, n: int) -> None:
        charge_scan(tl, n)
        if self.other:
            tl.charge('wram_load8', n)
        if self.op == 'between':
            charge_compare(tl, n)


def predicate_columns(predicate: Sequence[Cmp]) -> set:
    out = set()
    for term in predicate:
        out |= term.columns()
    return out


@register_kernel
class SelectKernel(Kernel):
    """
    Filter `count` rows of int64 columns by a conjunction of comparisons.

    columns: name -> input column address. outputs: name -> output column
    address for every column to keep. rowid_out, when given, receives the
    row id of each kept row: rowid_base + row, or the `_rowid` input column
    when rowid_base is None.
    """

    name = 'select'

    def __init__(self, dpu, tasklets, columns, count, predicate, outputs, rowid_out=None, rowid_base=0,
                 buffer_elems=256):
        super().__init__(dpu, tasklets)
        self.predicate = tuple(predicate)
        self.count = int(count)
        self.outputs = dict(outputs)
        self.rowid_out = rowid_out
        self.rowid_base = rowid_base
        self.pred_names = sorted(predicate_columns(self.predicate))
        needed = set(self.pred_names) | set(self.outputs)
        if rowid_out is not None and rowid_base is None:
            needed.add('_rowid')
        missing = needed - set(columns)
        if missing:
            raise ConfigError(f"select needs columns {sorted(missing)}")
        self.names = sorted(needed)
        self.late_names = [n for n in sorted(needed - set(self.pred_names))]
        self.addrs = {name: columns[name] for name in self.names}
        lanes = len(self.names) + (rowid_out is not None)
        w = tile_records(dpu.wram_free - 8, tasklets, 8 * lanes, 1, buffer_elems)
        # fewest rounds of tiles that fit, rows spread evenly over them
        rounds = max(1, -(-self.count // (tasklets * w)))
        self.w = min(w, -(-self.count // (tasklets * rounds))) if self.count else w
        self.bufs = [{name: dpu.wram_alloc(8 * self.w) for name in self.names} for _ in range(tasklets)]
        self.rowid_bufs = [dpu.wram_alloc(8 * self.w) if rowid_out is not None else None for _ in range(tasklets)]
        self.cursor_addr = dpu.wram_alloc(8)
        self.cursor = dpu.wram_array(self.cursor_addr, 1, '<i8')
        self.cursor[0] = 0
        self.tiles = -(-self.count // self.w)

    def program(self, tl):
        T = self.tasklets
        bufs = self.bufs[tl.id]
        cols = {name: self.dpu.wram_array(a, self.w, '<i8') for name, a in bufs.items()}
        for i in range(tl.id, self.tiles, T):
            start = i * self.w
            k = min(self.w, self.count - start)
            for name in self.pred_names:
                yield from dma_in(tl, self.addrs[name] + 8 * start, bufs[name], 8 * k)

            # short-circuit: later terms only see rows that passed earlier ones
            mask = np.ones(k, dtype=bool)
            for term in self.predicate:
                alive = int(mask.sum())
                if not alive:
                    break
                term.charge(tl, alive)
                mask &= term.evaluate(cols, k)
            kept = np.flatnonzero(mask)
            m = len(kept)
            charge_loop(tl, k)

            if T > 1 and i > 0:
                yield tl.wait_for((tl.id - 1) % T)
            offset = int(self.cursor[0])
            self.cursor[0] = offset + m
            charge_loop(tl, 1)
            if T > 1 and i + 1 < self.tiles:
                yield tl.notify((tl.id + 1) % T)

            if not m:
                continue
            for name in self.late_names:
                yield from dma_in(tl, self.addrs[name] + 8 * start, bufs[name], 8 * k)
            if self.rowid_out is not None:
                rid = self.dpu.wram_array(self.rowid_bufs[tl.id], self.w, '<i8')
                if self.rowid_base is None:
                    rid[:m] = cols['_rowid'][kept]
                    charge_move(tl, m, 1)
                else:
                    rid[:m] = self.rowid_base + start + kept
                    tl.charge('add32', 2 * m)
                    tl.charge('wram_store8', m)
                yield from dma_out(tl, self.rowid_out + 8 * offset, self.rowid_bufs[tl.id], 8 * m)
            for name, out in self.outputs.items():
                col = cols[name]
                col[:m] = col[kept]
                charge_move(tl, m, 1)
                yield from dma_out(tl, out + 8 * offset, bufs[name], 8 * m)

    def result(self):
        return int(self.cursor[0])


def select_mram(dpu, columns, count, predicate, outputs, rowid_out=None, rowid_base=0, cfg=None, tasklets=None):
    """
    Single-DPU selection.

    Returns:
        tuple: (KernelMetrics, number of kept rows)
    """
    cfg = cfg or KernelConfig()
    launch = run_kernel([dpu], SelectKernel, tasklets or cfg.tasklets, {
        'columns': columns, 'count': count, 'predicate': predicate, 'outputs': outputs,
        'rowid_out': rowid_out, 'rowid_base': rowid_base, 'buffer_elems': cfg.buffer_elems,
    })
    return launch.metrics[0], launch.outputs[0]
