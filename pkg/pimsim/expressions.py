"""
Integer expressions evaluated on the DPU.

Aggregate inputs and composite keys are built from fixed-width columns
with Col, Const, Add, Sub and Mul; KeyPack concatenates non-negative bit
fields into one 64-bit key. All arithmetic is exact int64.

On the 32-bit core a 64-bit add or subtract is two instructions (add64),
a product is two 32-bit software multiplies plus a 64-bit add, and a
shift of a 64-bit value is three 32-bit operations.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from pimsim.config import KernelConfig
from pimsim.errors import ConfigError
from pimsim.machine import Kernel, register_kernel, run_kernel
from pimsim.records import record_dtype
from pimsim.tiling import charge_loop, chunk_bounds, dma_in, dma_out, tile_records


class Expr:
    def columns(self) -> set:
        return set()

    def evaluate(self, cols: dict, n: int) -> np.ndarray:
        raise NotImplementedError

    def charge(self, tl, n: int) -> None:
        pass

    def uses_mul(self) -> bool:
        return False


@dataclass(frozen=True)
class Col(Expr):
    name: str

    def columns(self):
        return {self.name}

    def evaluate(self, cols, n):
        return np.asarray(cols[self.name][:n], dtype=np.int64)

    def charge(self, tl, n):
        tl.charge('wram_load8', n)


@dataclass(frozen=True)
class Const(Expr):
    value: int

    def evaluate(self, cols, n):
        return np.full(n, self.value, dtype=np.int64)


@dataclass(frozen=True)
class _Binary(Expr):
    left: Expr
    right: Expr

    def columns(self):
        return self.left.columns() | self.right.columns()

    def charge(self, tl, n):
        self.left.charge(tl, n)
        self.right.charge(tl, n)
        tl.charge('add64', n)

    def uses_mul(self):
        return self.left.uses_mul() or self.right.uses_mul()


class Add(_Binary):
    def evaluate(self, cols, n):
        return self.left.evaluate(cols, n) + self.right.evaluate(cols, n)


class Sub(_Binary):
    def evaluate(self, cols, n):
        return self.left.evaluate(cols, n) - self.right.evaluate(cols, n)


class Mul(_Binary):
    def evaluate(self, cols, n):
        return self.left.evaluate(cols, n) * self.right.evaluate(cols, n)

    def charge(self, tl, n):
        super().charge(tl, n)
        tl.charge('mul32', 2 * n)

    def uses_mul(self):
        return True


@dataclass(frozen=True)
class KeyPack(Expr):
    """
    Concatenate bit fields, first field in the most significant position.

    fields: tuple of (Expr, bits); every value must lie in [0, 2**bits).
    """

    fields: Tuple[Tuple[Expr, int], ...]

    def __post_init__(self):
        if sum(bits for _, bits in self.fields) > 63:
            raise ConfigError("packed key fields exceed 63 bits")

    def columns(self):
        out = set()
        for expr, _ in self.fields:
            out |= expr.columns()
        return out

    def evaluate(self, cols, n):
        key = np.zeros(n, dtype=np.int64)
        for expr, bits in self.fields:
            values = expr.evaluate(cols, n)
            if n and (values.min() < 0 or values.max() >= 1 << bits):
                raise ConfigError(f"value outside a {bits}-bit key field")
            key = (key << bits) | values
        return key

    def charge(self, tl, n):
        for expr, _ in self.fields:
            expr.charge(tl, n)
            tl.charge('add32', 4 * n)

    def uses_mul(self):
        return any(expr.uses_mul() for expr, _ in self.fields)

    def unpack(self, keys) -> list:
        """Host side: split packed keys back into one array per field."""
        keys = np.asarray(keys, dtype=np.int64)
        out = []
        shift = sum(bits for _, bits in self.fields)
        for _, bits in self.fields:
            shift -= bits
            out.append((keys >> shift) & ((1 << bits) - 1))
        return out


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, str):
        return Col(value)
    if isinstance(value, (int, np.integer)):
        return Const(int(value))
    raise ConfigError(f"cannot use {value!r} as an expression")


@register_kernel
class PackKernel(Kernel):
    """
    Build row-major records from columns.

    columns: name -> MRAM address of an int64 column of `count` rows. Each
    output record holds key, then one lane per value expression, then the
    row id when `rowid` is 'base' (rowid_base + row) or 'column' (copied
    from the `rowid_column` column).
    """

    name = 'pack'

    def __init__(self, dpu, tasklets, columns, count, key, out, values=(), rowid='none', rowid_base=0,
                 rowid_column='_rowid', buffer_elems=256):
        super().__init__(dpu, tasklets)
        if rowid not in ('none', 'base', 'column'):
            raise ConfigError(f"unknown rowid mode {rowid!r}")
        self.key = as_expr(key)
        self.values = [as_expr(v) for v in values]
        self.rowid = rowid
        self.rowid_base = int(rowid_base)
        self.rowid_column = rowid_column
        used = set(self.key.columns())
        for v in self.values:
            used |= v.columns()
        if rowid == 'column':
            used.add(rowid_column)
        missing = used - set(columns)
        if missing:
            raise ConfigError(f"pack needs columns {sorted(missing)}")
        self.names = sorted(used)
        self.addrs = {name: columns[name] for name in self.names}
        self.count = int(count)
        self.out = out
        self.dtype = record_dtype(len(self.values) + (rowid != 'none'))
        self.rec = self.dtype.itemsize
        per_record = 8 * len(self.names) + self.rec
        self.w = tile_records(dpu.wram_free, tasklets, per_record, 1, buffer_elems)
        self.col_addr = [{name: dpu.wram_alloc(8 * self.w) for name in self.names} for _ in range(tasklets)]
        self.out_addr = [dpu.wram_alloc(self.w * self.rec) for _ in range(tasklets)]

    def program(self, tl):
        lo, hi = chunk_bounds(self.count, self.tasklets, tl.id)
        cols = {name: self.dpu.wram_array(a, self.w, '<i8') for name, a in self.col_addr[tl.id].items()}
        out = self.dpu.wram_array(self.out_addr[tl.id], self.w, self.dtype)
        lanes = out.view('<i8').reshape(self.w, -1)
        for start in range(lo, hi, self.w):
            k = min(self.w, hi - start)
            for name in self.names:
                yield from dma_in(tl, self.addrs[name] + 8 * start, self.col_addr[tl.id][name], 8 * k)
            lanes[:k, 0] = self.key.evaluate(cols, k)
            self.key.charge(tl, k)
            for i, expr in enumerate(self.values, start=1):
                lanes[:k, i] = expr.evaluate(cols, k)
                expr.charge(tl, k)
            if self.rowid == 'base':
                lanes[:k, -1] = self.rowid_base + np.arange(start, start + k)
                tl.charge('add32', 2 * k)
            elif self.rowid == 'column':
                lanes[:k, -1] = cols[self.rowid_column][:k]
                tl.charge('wram_load8', k)
            tl.charge('wram_store8', k * lanes.shape[1])
            charge_loop(tl, k)
            yield from dma_out(tl, self.out + start * self.rec, self.out_addr[tl.id], k * self.rec)


def pack_mram(dpu, columns, count, key, out, values=(), rowid='none', rowid_base=0, cfg=None, tasklets=None):
    """Single-DPU pack; returns (KernelMetrics, record dtype)."""
    cfg = cfg or KernelConfig()
    launch = run_kernel([dpu], PackKernel, tasklets or cfg.tasklets, {
        'columns': columns, 'count': count, 'key': key, 'out': out, 'values': values,
        'rowid': rowid, 'rowid_base': rowid_base, 'buffer_elems': cfg.buffer_elems,
    })
    return launch.metrics[0], record_dtype(len(values) + (rowid != 'none'))
