"""
Scratchpad tiling, DMA streaming and per-element instruction recipes.

Kernels size their tiles with tile_records(), move data with the
dma_in()/dma_out() generators (which split copies into jobs of at most
dma_max_bytes) and charge work through the recipe helpers below, so all
kernels agree on what a 64-bit compare or a record move costs on a 32-bit
DPU core.
"""

import math

import numpy as np

from pimsim.errors import ScratchpadExhaustedError

MIN_TILE = 8


def pow2_floor(x: int) -> int:
    return 1 << (int(x).bit_length() - 1) if x >= 1 else 0


def ceil_log2(x: int) -> int:
    return max(0, math.ceil(math.log2(x))) if x > 1 else 0


def tile_records(budget: int, tasklets: int, record_bytes: int, buffers: int, limit: int) -> int:
    """
    Records per scratchpad buffer.

    The largest power of two, at most `limit`, such that `buffers` buffers
    per tasklet for all tasklets fit in `budget` bytes.

    Raises:
        ScratchpadExhaustedError: when not even MIN_TILE records fit
    """
    fit = budget // (tasklets * buffers * record_bytes)
    records = min(pow2_floor(fit), pow2_floor(limit)) if fit >= 1 else 0
    if records < MIN_TILE:
        raise ScratchpadExhaustedError(
            f"{tasklets} tasklets x {buffers} buffers x {MIN_TILE} records of "
            f"{record_bytes} B exceed the {budget} B scratchpad budget")
    return records


def busy_tile(budget: int, tasklets: int, record_bytes: int, buffers: int, limit: int, least: int):
    """
    (workers, records per buffer) with tiles of at least `least` records.

    All tasklets work while tile_records() reaches `least`; below that the
    tile stays at `least` and only the tasklets whose buffers fit take part.

    Raises:
        ScratchpadExhaustedError: when not even one tasklet fits
    """
    least = min(pow2_floor(limit), least)
    fit = budget // (tasklets * buffers * record_bytes)
    if min(pow2_floor(fit), pow2_floor(limit)) >= least:
        return tasklets, tile_records(budget, tasklets, record_bytes, buffers, limit)
    workers = min(tasklets, budget // (buffers * least * record_bytes))
    if workers < 1:
        raise ScratchpadExhaustedError(
            f"{buffers} buffers x {least} records of {record_bytes} B exceed the {budget} B scratchpad budget")
    return workers, least


def dma_in(tl, mram_addr: int, wram_addr: int, nbytes: int):
    """MRAM -> WRAM copy split into DMA jobs; yields nothing for nbytes == 0."""
    step = tl.dpu.config.dma_max_bytes
    for off in range(0, nbytes, step):
        yield tl.dma_read(mram_addr + off, wram_addr + off, min(step, nbytes - off))


def dma_out(tl, mram_addr: int, wram_addr: int, nbytes: int):
    """WRAM -> MRAM copy split into DMA jobs."""
    step = tl.dpu.config.dma_max_bytes
    for off in range(0, nbytes, step):
        yield tl.dma_write(mram_addr + off, wram_addr + off, min(step, nbytes - off))


def chunk_bounds(n: int, parts: int, index: int, align: int = 1):
    """Contiguous [start, end) of part `index` when n items are split into `parts`."""
    per = -(-n // parts) if n else 0
    per = -(-per // align) * align
    start = min(n, index * per)
    return start, min(n, start + per)


# ---------------------------------------------------------------------------
# Instruction recipes
# ---------------------------------------------------------------------------
# 64-bit compares are sub + subc + conditional jump on the 32-bit core;
# record addressing is a shift and an add.

def charge_loop(tl, n: int) -> None:
    """Loop counter update and back branch."""
    tl.charge('add32', n)
    tl.charge('branch', n)


def charge_scan(tl, n: int) -> None:
    """Load a key, compare it against a 64-bit value, branch, advance."""
    tl.charge('add32', 2 * n)
    tl.charge('wram_load8', n)
    tl.charge('cmp', 3 * n)
    tl.charge('branch', n)
    charge_loop(tl, n)


def charge_compare(tl, n: int) -> None:
    """Compare two keys already addressed in WRAM."""
    tl.charge('wram_load8', n)
    tl.charge('cmp', 3 * n)
    tl.charge('branch', n)


def charge_move(tl, records: int, lanes: int) -> None:
    """Copy records of `lanes` 8-byte lanes within WRAM."""
    tl.charge('add32', records)
    tl.charge('wram_load8', records * lanes)
    tl.charge('wram_store8', records * lanes)


def charge_sort(tl, m: int, lanes: int) -> None:
    """In-scratchpad comparison sort of m records."""
    if m < 2:
        return
    depth = ceil_log2(m)
    compares = m * depth
    charge_compare(tl, compares)
    tl.charge('add32', 2 * compares)
    charge_move(tl, compares // 2, lanes)


def charge_search(tl, steps: int) -> None:
    """Binary-search steps over a WRAM array of keys."""
    tl.charge('add32', 3 * steps)
    charge_compare(tl, steps)


def charge_add64(tl, n: int) -> None:
    tl.charge('wram_load8', n)
    tl.charge('add64', n)
    tl.charge('wram_store8', n)


def sorted_order(keys: np.ndarray) -> np.ndarray:
    """Stable ascending order of a key array."""
    return np.argsort(keys, kind='stable')
