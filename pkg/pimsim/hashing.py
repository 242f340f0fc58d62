"""
Hashing building blocks.

hash32 folds a 64-bit key to 32 bits (low word xor high word) and mixes it
with Thomas Wang's shift/add/xor avalanche, grouped in three rounds:

    round 1:  h = ~h + (h << 15);       h ^= h >> 12
    round 2:  h += h << 2;              h ^= h >> 4
    round 3:  h = h + (h << 3) + (h << 11);  h ^= h >> 16

No multiply or divide is involved; one hash is charged HASH_INSTRUCTIONS
add32-class instructions.

Buckets come from bit fields of the hash: a table or a single-pass
partition uses the low bits (hash & (buckets - 1)); radix passes and the
global distribution over DPUs use top-bit fields so that every later pass
refines the groups of the earlier ones.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from pimsim.config import KernelConfig
from pimsim.errors import (BucketOverflowError, ConfigError, DuplicateKeyError, ScratchpadExhaustedError,
                           TableFullError)
from pimsim.machine import Kernel, register_kernel, run_kernel
from pimsim.records import EMPTY_KEY, KV_DTYPE
from pimsim.sorting import CopyKernel, exclusive_prefix_sum
from pimsim.tiling import (ceil_log2, charge_add64, charge_compare, charge_loop, charge_move, chunk_bounds,
                           dma_in, dma_out, pow2_floor, sorted_order, tile_records)

logger = logging.getLogger(__name__)

HASH_INSTRUCTIONS = 17

_U32 = np.uint32


def hash32(keys):
    """32-bit hash of int64 keys; accepts a scalar or an array."""
    scalar = np.ndim(keys) == 0
    k = np.asarray(keys, dtype=np.int64).reshape(-1).astype(np.uint64)
    h = (k & np.uint64(0xFFFFFFFF)).astype(_U32) ^ (k >> np.uint64(32)).astype(_U32)
    with np.errstate(over='ignore'):
        h = ~h + (h << _U32(15))
        h ^= h >> _U32(12)
        h += h << _U32(2)
        h ^= h >> _U32(4)
        h = h + (h << _U32(3)) + (h << _U32(11))
        h ^= h >> _U32(16)
    return int(h[0]) if scalar else h


def charge_hash(tl, n: int) -> None:
    tl.charge('add32', HASH_INSTRUCTIONS * n)
    tl.note('hash', n)


@dataclass(frozen=True)
class BucketSpec:
    """
    How records map to buckets.

    Hash buckets take `bits` bits of hash32 starting at bit `shift`; when
    `modulo` is set the field is reduced modulo that count. Range buckets
    use sorted splitters: bucket i holds splitters[i-1] <= key < splitters[i].
    """

    buckets: int
    shift: int = 0
    bits: int = 0
    modulo: Optional[int] = None
    splitters: Optional[Tuple[int, ...]] = None

    @classmethod
    def low_bits(cls, buckets: int) -> 'BucketSpec':
        if buckets < 1 or buckets & (buckets - 1):
            raise ConfigError(f"hash bucket count {buckets} is not a power of two")
        return cls(buckets, 0, buckets.bit_length() - 1)

    @classmethod
    def top_bits(cls, offset_bits: int, bits: int) -> 'BucketSpec':
        """The `bits`-wide field just below the top `offset_bits` bits."""
        if offset_bits + bits > 32:
            raise ConfigError(f"radix field {offset_bits}+{bits} exceeds 32 hash bits")
        return cls(1 << bits, 32 - offset_bits - bits, bits)

    @classmethod
    def spread(cls, parts: int) -> 'BucketSpec':
        """Global distribution: top ceil(log2 parts) bits, modulo parts."""
        bits = ceil_log2(parts)
        modulo = None if parts == 1 << bits else parts
        return cls(parts, 32 - bits, bits, modulo)

    @classmethod
    def ranges(cls, splitters) -> 'BucketSpec':
        split = tuple(int(s) for s in np.sort(np.asarray(splitters, dtype=np.int64)))
        return cls(len(split) + 1, splitters=split)

    def assign(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        if self.splitters is not None:
            return np.searchsorted(np.asarray(self.splitters, dtype=np.int64), keys, side='right')
        if self.bits == 0:
            return np.zeros(len(keys), dtype=np.int64)
        field = (hash32(keys).astype(np.int64) >> self.shift) & ((1 << self.bits) - 1)
        return field % self.modulo if self.modulo else field

    def charge(self, tl, n: int) -> None:
        tl.charge('wram_load8', n)
        if self.splitters is not None:
            charge_compare(tl, ceil_log2(self.buckets) * n)
            tl.charge('add32', 3 * ceil_log2(self.buckets) * n)
            return
        charge_hash(tl, n)
        tl.charge('add32', 2 * n)
        if self.modulo:
            tl.charge('div32', n)


# ---------------------------------------------------------------------------
# Scratchpad hash table
# ---------------------------------------------------------------------------

INSERTED = 1
AGGREGATED = 2
NOT_PLACED = 0


class SpmHashTable:
    """
    Linear-probing hash table over scratchpad arrays.

    Slots hold an int64 key (EMPTY_KEY when free) and `lanes` int64 payload
    lanes. The home slot of a key is (hash32(key) >> shift) & (capacity - 1).
    With policy 'combine' an insert of a present key adds its payload to the
    stored one; with policy 'unique' it raises DuplicateKeyError. At most
    capacity * fill_max keys are stored.
    """

    def __init__(self, keys: np.ndarray, payload: np.ndarray, fill_max: float = 0.5,
                 shift: int = 0, policy: str = 'combine'):
        capacity = len(keys)
        if capacity < 1 or capacity & (capacity - 1):
            raise ConfigError(f"hash table capacity {capacity} is not a power of two")
        if policy not in ('combine', 'unique'):
            raise ConfigError(f"unknown hash table policy {policy!r}")
        self.keys = keys
        self.payload = payload
        self.capacity = capacity
        self.mask = capacity - 1
        self.shift = shift
        self.policy = policy
        self.max_entries = max(1, int(capacity * fill_max))
        self.size = 0
        self.clear()

    @classmethod
    def on_host(cls, capacity: int, lanes: int = 1, **kwargs) -> 'SpmHashTable':
        return cls(np.empty(capacity, dtype=np.int64), np.empty((capacity, lanes), dtype=np.int64), **kwargs)

    @classmethod
    def in_wram(cls, dpu, capacity: int, lanes: int = 1, **kwargs) -> 'SpmHashTable':
        keys = dpu.wram_array(dpu.wram_alloc(8 * capacity), capacity, '<i8')
        payload = dpu.wram_array(dpu.wram_alloc(8 * capacity * max(lanes, 1)),
                                 capacity * max(lanes, 1), '<i8').reshape(capacity, max(lanes, 1))
        return cls(keys, payload, **kwargs)

    @staticmethod
    def slot_bytes(lanes: int) -> int:
        return 8 * (1 + max(lanes, 1))

    def clear(self) -> None:
        self.keys[:] = EMPTY_KEY
        self.payload[:] = 0
        self.size = 0

    def home(self, keys) -> np.ndarray:
        return (hash32(np.asarray(keys, dtype=np.int64)).astype(np.int64) >> self.shift) & self.mask

    def insert_batch(self, keys, payloads=None, hashed=None):
        """
        Insert a batch of keys.

        Keys meet their slots in rounds: in round r every unplaced key looks
        at home + r. A key equal to the slot's key is combined; free slots go
        to the first key of the batch that reaches them while the table has
        room. A key that reaches a free slot it cannot take is not placed.

        Returns:
            tuple: (status per record: NOT_PLACED / INSERTED / AGGREGATED,
                    probes per record)
        """
        keys = np.asarray(keys, dtype=np.int64)
        n = len(keys)
        if n == 0:
            return np.zeros(0, dtype=np.int8), np.zeros(0, dtype=np.int64)
        uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        if self.policy == 'unique' and len(uniq) < n:
            raise DuplicateKeyError(f"{n - len(uniq)} duplicate keys in one build batch")
        arrival = np.argsort(first, kind='stable')
        rank = np.empty(len(uniq), dtype=np.int64)
        rank[arrival] = np.arange(len(uniq))
        record_u = rank[inverse.reshape(-1)]
        ukeys = uniq[arrival]
        upay = None
        if payloads is not None:
            payloads = np.asarray(payloads, dtype=np.int64).reshape(n, -1)
            upay = np.zeros((len(uniq), payloads.shape[1]), dtype=np.int64)
            np.add.at(upay, record_u, payloads)

        home = self.home(ukeys) if hashed is None else (
            (np.asarray(hashed, dtype=np.int64)[first[arrival]] >> self.shift) & self.mask)
        status = np.zeros(len(ukeys), dtype=np.int8)
        slots = np.full(len(ukeys), -1, dtype=np.int64)
        probes = np.zeros(len(ukeys), dtype=np.int64)
        pending = np.arange(len(ukeys))
        step = 0
        while pending.size and step < self.capacity:
            pos = (home[pending] + step) & self.mask
            probes[pending] += 1
            held = self.keys[pos]
            hit = held == ukeys[pending]
            if self.policy == 'unique' and hit.any():
                raise DuplicateKeyError(f"key {int(ukeys[pending[hit][0]])} already in the table")
            status[pending[hit]] = AGGREGATED
            slots[pending[hit]] = pos[hit]
            done = hit.copy()

            free = (held == EMPTY_KEY) & ~hit
            if free.any():
                free_idx = np.flatnonzero(free)
                _, first_claim = np.unique(pos[free_idx], return_index=True)
                claims = free_idx[np.sort(first_claim)]
                room = max(0, self.max_entries - self.size)
                winners, blocked = claims[:room], claims[room:]
                wk = pending[winners]
                self.keys[pos[winners]] = ukeys[wk]
                self.payload[pos[winners]] = 0
                status[wk] = INSERTED
                slots[wk] = pos[winners]
                self.size += len(winners)
                done[winners] = True
                done[blocked] = True
            pending = pending[~done]
            step += 1

        placed = slots >= 0
        if upay is not None and placed.any():
            self.payload[slots[placed], :upay.shape[1]] += upay[placed]
        return status[record_u], probes[record_u]

    def probe_batch(self, keys, hashed=None):
        """
        Returns:
            tuple: (slot per key or -1 on a miss, probes per key)
        """
        keys = np.asarray(keys, dtype=np.int64)
        home = self.home(keys) if hashed is None else (np.asarray(hashed, dtype=np.int64) >> self.shift) & self.mask
        slots = np.full(len(keys), -1, dtype=np.int64)
        probes = np.zeros(len(keys), dtype=np.int64)
        pending = np.arange(len(keys))
        step = 0
        while pending.size and step < self.capacity:
            pos = (home[pending] + step) & self.mask
            probes[pending] += 1
            held = self.keys[pos]
            hit = held == keys[pending]
            slots[pending[hit]] = pos[hit]
            pending = pending[~(hit | (held == EMPTY_KEY))]
            step += 1
        return slots, probes

    def insert(self, key: int, payload=None) -> str:
        """Insert one key; returns 'inserted' or 'aggregated'."""
        status, _ = self.insert_batch([key], None if payload is None else [payload])
        if status[0] == NOT_PLACED:
            raise TableFullError(f"no slot for key {key} ({self.size}/{self.capacity} used)")
        return 'inserted' if status[0] == INSERTED else 'aggregated'

    def probe(self, key: int):
        """Payload of key (an int for one lane, a tuple otherwise) or None on a miss."""
        slots, _ = self.probe_batch([key])
        if slots[0] < 0:
            return None
        row = self.payload[slots[0]]
        return int(row[0]) if len(row) == 1 else tuple(int(v) for v in row)

    def occupied(self) -> np.ndarray:
        return np.flatnonzero(self.keys != EMPTY_KEY)


def charge_probes(tl, probes: int) -> None:
    """Slot visits of inserts and lookups."""
    tl.charge('add32', 2 * probes)
    charge_compare(tl, probes)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

@register_kernel
class PartitionPassKernel(Kernel):
    """
    Count and scatter records into buckets, group by group.

    groups: list of (lo, hi) record ranges of src. Each group is split into
    spec.buckets buckets written to dst at the same range. Tasklets count
    into private counters, reduce them into shared bucket sizes, tasklet 0
    computes the offsets, then every tasklet moves its records through a
    shared scratchpad bucket cache: one slot and one mutex per bucket, a
    full slot is flushed to the bucket's cursor by the tasklet that filled
    it, and remaining partial slots are flushed after a barrier.

    phase 'count' stops after the offsets; phase 'scatter' takes the
    offsets from `offsets` (one array per group) instead of counting.
    """

    name = 'partition_pass'

    def __init__(self, dpu, tasklets, src, dst, groups, spec: BucketSpec, phase='both', offsets=None,
                 dtype=KV_DTYPE, buffer_elems=256, cache_records=1024):
        super().__init__(dpu, tasklets)
        if phase not in ('count', 'scatter', 'both'):
            raise ConfigError(f"unknown partition phase {phase!r}")
        self.src, self.dst = src, dst
        self.groups = [(int(lo), int(hi)) for lo, hi in groups]
        self.spec = spec
        self.phase = phase
        self.given_offsets = offsets
        self.dtype = np.dtype(dtype)
        self.rec = self.dtype.itemsize
        self.lanes = self.rec // 8
        B = spec.buckets
        T = tasklets

        self.local = dpu.wram_array(dpu.wram_alloc(8 * T * B), T * B, '<i8').reshape(T, B)
        self.sizes = dpu.wram_array(dpu.wram_alloc(8 * B), B, '<i8')
        self.cursor = dpu.wram_array(dpu.wram_alloc(8 * B), B, '<i8')
        self.end = dpu.wram_array(dpu.wram_alloc(8 * B), B, '<i8')
        self.fill = dpu.wram_array(dpu.wram_alloc(8 * B), B, '<i8')

        remaining = dpu.wram_free
        self.w = tile_records(remaining // 2, T, self.rec, 1, buffer_elems)
        self.tile_addr = [dpu.wram_alloc(self.w * self.rec) for _ in range(T)]
        self.tiles = [dpu.wram_array(a, self.w, self.dtype) for a in self.tile_addr]
        total = min(pow2_floor(dpu.wram_free // self.rec), cache_records)
        self.slot = min(total // B, dpu.config.dma_max_bytes // self.rec)
        if self.slot < 1:
            raise ScratchpadExhaustedError(f"no room for a {B}-bucket cache ({dpu.wram_free} B left)")
        self.cache_addr = dpu.wram_alloc(B * self.slot * self.rec)
        self.cache = dpu.wram_array(self.cache_addr, B * self.slot, self.dtype)
        self.group_offsets = []

    def program(self, tl):
        T, B = self.tasklets, self.spec.buckets
        for gi, (lo, hi) in enumerate(self.groups):
            clo, chi = chunk_bounds(hi - lo, T, tl.id)
            clo, chi = clo + lo, chi + lo
            if self.phase == 'scatter':
                if tl.id == 0:
                    self._set_offsets(tl, lo, hi, np.asarray(self.given_offsets[gi], dtype=np.int64))
                yield tl.barrier()
            else:
                yield from self._count(tl, clo, chi)
                yield tl.barrier()
                for b in range(tl.id, B, T):
                    self.sizes[b] = self.local[:, b].sum()
                    charge_add64(tl, T)
                yield tl.barrier()
                if tl.id == 0:
                    offsets, _ = exclusive_prefix_sum(self.sizes)
                    self._set_offsets(tl, lo, hi, offsets + lo)
                yield tl.barrier()
            if self.phase == 'count':
                continue
            yield from self._scatter(tl, clo, chi)
            yield tl.barrier()
            for b in range(tl.id, B, T):
                yield from self._flush(tl, b)
            yield tl.barrier()
            if tl.id == 0:
                short = np.flatnonzero(self.cursor[:B] != self.end[:B])
                if short.size:
                    b = int(short[0])
                    raise BucketOverflowError(
                        f"group {gi} bucket {b}: wrote up to {int(self.cursor[b])}, offsets end at {int(self.end[b])}")
                charge_compare(tl, B)

    def _set_offsets(self, tl, lo, hi, offsets):
        B = self.spec.buckets
        ends = np.append(offsets[1:], hi)
        self.cursor[:B] = offsets
        self.end[:B] = ends
        self.fill[:B] = 0
        self.group_offsets.append(offsets.copy())
        charge_add64(tl, 2 * B)

    def _count(self, tl, clo, chi):
        B = self.spec.buckets
        row = self.local[tl.id]
        row[:] = 0
        tile = self.tiles[tl.id]
        for start in range(clo, chi, self.w):
            k = min(self.w, chi - start)
            yield from dma_in(tl, self.src + start * self.rec, self.tile_addr[tl.id], k * self.rec)
            row += np.bincount(self.spec.assign(tile['key'][:k]), minlength=B)
            self.spec.charge(tl, k)
            tl.charge('wram_load8', k)
            tl.charge('add32', k)
            tl.charge('wram_store8', k)
            charge_loop(tl, k)

    def _scatter(self, tl, clo, chi):
        tile = self.tiles[tl.id]
        for start in range(clo, chi, self.w):
            k = min(self.w, chi - start)
            yield from dma_in(tl, self.src + start * self.rec, self.tile_addr[tl.id], k * self.rec)
            buckets = self.spec.assign(tile['key'][:k])
            self.spec.charge(tl, k)
            charge_loop(tl, k)
            order = sorted_order(buckets)
            grouped = tile[:k][order]
            ordered = buckets[order]
            present, first = np.unique(ordered, return_index=True)
            tl.charge('add32', 2 * k)
            bounds = list(first) + [k]
            for j, b in enumerate(present):
                b = int(b)
                run = grouped[bounds[j]:bounds[j + 1]]
                yield tl.lock(b)
                i = 0
                while i < len(run):
                    fill = int(self.fill[b])
                    take = min(self.slot - fill, len(run) - i)
                    base = b * self.slot + fill
                    self.cache[base:base + take] = run[i:i + take]
                    charge_move(tl, take, self.lanes)
                    self.fill[b] = fill + take
                    i += take
                    if fill + take == self.slot:
                        yield from self._flush(tl, b)
                charge_loop(tl, 1)
                yield tl.unlock(b)

    def _flush(self, tl, b):
        fill = int(self.fill[b])
        if not fill:
            return
        cursor = int(self.cursor[b])
        if cursor + fill > self.end[b]:
            raise BucketOverflowError(f"bucket {b}: {cursor + fill} records past its end {int(self.end[b])}")
        yield from dma_out(tl, self.dst + cursor * self.rec, self.cache_addr + b * self.slot * self.rec,
                           fill * self.rec)
        self.cursor[b] = cursor + fill
        self.fill[b] = 0
        charge_add64(tl, 2)

    def result(self):
        return [offsets for offsets in self.group_offsets]


def hash_partition_count(dpu, addr, count, buckets, cfg=None, tasklets=None, dtype=KV_DTYPE, spec=None):
    """
    Bucket sizes and offsets of a region (buckets = hash32 & (buckets - 1)).

    Returns:
        tuple: (KernelMetrics, sizes, offsets)
    """
    cfg = cfg or KernelConfig()
    spec = spec or BucketSpec.low_bits(buckets)
    launch = run_kernel([dpu], PartitionPassKernel, tasklets or cfg.tasklets, {
        'src': addr, 'dst': addr, 'groups': [(0, count)], 'spec': spec, 'phase': 'count',
        'dtype': dtype, 'buffer_elems': cfg.buffer_elems,
    })
    offsets = launch.outputs[0][0]
    sizes = np.diff(np.append(offsets, count))
    return launch.metrics[0], sizes, offsets


def hash_partition_scatter(dpu, addr, count, offsets, buckets, out, cfg=None, tasklets=None,
                           dtype=KV_DTYPE, spec=None):
    """Move records into out so bucket b occupies [offsets[b], offsets[b+1])."""
    cfg = cfg or KernelConfig()
    spec = spec or BucketSpec.low_bits(buckets)
    launch = run_kernel([dpu], PartitionPassKernel, tasklets or cfg.tasklets, {
        'src': addr, 'dst': out, 'groups': [(0, count)], 'spec': spec, 'phase': 'scatter',
        'offsets': [np.asarray(offsets, dtype=np.int64)], 'dtype': dtype, 'buffer_elems': cfg.buffer_elems,
    })
    return launch.metrics[0]


def radix_pass_bits(total_bits: int, bits_per_pass: int):
    """Bits of each pass; the last pass takes the remainder."""
    if total_bits < 0 or bits_per_pass < 1:
        raise ConfigError("total_bits must be >= 0 and bits_per_pass >= 1")
    passes = []
    left = total_bits
    while left > 0:
        passes.append(min(bits_per_pass, left))
        left -= passes[-1]
    return passes


def multipass_radix_partition(dpu, addr, count, total_bits, bits_per_pass, cfg=None, tasklets=None,
                              bit_offset=0, dtype=KV_DTYPE, scratch=None):
    """
    Group records by the hash32 bit field [bit_offset, bit_offset + total_bits)
    counted from the top, refining bits_per_pass bits per pass.

    Returns:
        tuple: (list of KernelMetrics, group bounds array of length
                2**total_bits + 1); records of group g lie in
                [bounds[g], bounds[g+1]) of the region at addr
    """
    cfg = cfg or KernelConfig()
    tasklets = tasklets or cfg.tasklets
    rec = np.dtype(dtype).itemsize
    own_scratch = scratch is None and count > 0
    if own_scratch:
        scratch = dpu.mram_alloc(count * rec)
    metrics = []
    groups = [(0, count)]
    src, dst = addr, scratch
    done_bits = bit_offset
    try:
        for bits in radix_pass_bits(total_bits, bits_per_pass):
            spec = BucketSpec.top_bits(done_bits, bits)
            launch = run_kernel([dpu], PartitionPassKernel, tasklets, {
                'src': src, 'dst': dst, 'groups': groups, 'spec': spec,
                'dtype': dtype, 'buffer_elems': cfg.buffer_elems,
            })
            metrics.append(launch.metrics[0])
            next_groups = []
            for (lo, hi), offsets in zip(groups, launch.outputs[0]):
                edges = np.append(offsets, hi)
                next_groups.extend(zip(edges[:-1].tolist(), edges[1:].tolist()))
            groups = next_groups
            done_bits += bits
            src, dst = dst, src
        if src != addr and count:
            launch = run_kernel([dpu], CopyKernel, tasklets, {
                'src': src, 'dst': addr, 'count': count, 'dtype': dtype, 'buffer_elems': cfg.buffer_elems,
            })
            metrics.append(launch.metrics[0])
    finally:
        if own_scratch:
            dpu.mram_free(scratch)
    bounds = np.array([lo for lo, _ in groups] + [count], dtype=np.int64)
    logger.debug("dpu %d: radix %d bits in %d passes, %d groups", dpu.id, total_bits,
                 len(radix_pass_bits(total_bits, bits_per_pass)), len(groups))
    return metrics, bounds
