"""
Simulated host side.

HostRuntime owns the simulated host clock and a timeline of events. Host
<-> DPU copies are rank-granular: all bytes a transfer moves to or from
the DPUs of one rank form one event of bytes / host_rank_bw seconds
(plus a per-fragment cost for scatter/gather), a rank serves one transfer
or one kernel at a time, and at most host_threads rank transfers run at
once. Synchronous host calls advance the clock to the end of their last
event.

Timelines export as records with the schema kind, rank, start_ns, end_ns,
bytes; host-only events (allocation, reordering) use rank -1.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pimsim.config import MachineConfig
from pimsim.errors import (ConfigError, DependencyCycleError, DestinationOverflowError, InvalidSizeError,
                           KernelActiveError, OutOfBoundsError, UnalignedAccessError)

logger = logging.getLogger(__name__)

TRANSFER_KINDS = ('serial', 'broadcast', 'parallel', 'scatter_gather')
EVENT_KINDS = ('host_alloc', 'host_reorder', 'h2p', 'p2h', 'kernel')
REDISTRIBUTION_MODES = ('naive', 'scatter', 'scatter_pooled')
HOST_RANK = -1
TIMELINE_SCHEMA = ('kind', 'rank', 'start_ns', 'end_ns', 'bytes')


@dataclass
class TransferDescriptor:
    """
    One host <-> DPU copy request.

    fragments maps a DPU id to its list of (mram address, length) pieces.
    serial: one DPU, one piece. parallel and broadcast: one identical
    piece on every DPU. scatter_gather: any pieces per DPU. With reorder
    set, the host also reorders the whole payload in its own memory (before
    an h2p copy, after a p2h copy).
    """

    kind: str
    direction: str
    fragments: Dict[int, List[Tuple[int, int]]]
    reorder: bool = False

    def __post_init__(self):
        if self.kind not in TRANSFER_KINDS:
            raise ConfigError(f"unknown transfer kind {self.kind!r}")
        if self.direction not in ('h2p', 'p2h'):
            raise ConfigError(f"transfer direction must be h2p or p2h, not {self.direction!r}")
        if self.kind == 'broadcast' and self.direction != 'h2p':
            raise ConfigError("broadcast transfers only go host to PIM")
        self.fragments = {int(d): [(int(a), int(n)) for a, n in pieces] for d, pieces in self.fragments.items()}
        if not self.fragments:
            raise InvalidSizeError("transfer without target DPUs")
        for dpu, pieces in self.fragments.items():
            for addr, nbytes in pieces:
                if nbytes <= 0:
                    raise InvalidSizeError(f"DPU {dpu}: fragment of {nbytes} bytes")
                if addr % 8 or nbytes % 8:
                    raise UnalignedAccessError(f"DPU {dpu}: fragment ({addr}, {nbytes}) not 8-byte aligned")
        if self.kind == 'serial' and (len(self.fragments) != 1 or
                                      len(next(iter(self.fragments.values()))) != 1):
            raise ConfigError("a serial transfer targets one DPU with one fragment")
        if self.kind in ('parallel', 'broadcast'):
            shapes = {tuple(pieces) for pieces in self.fragments.values()}
            if len(shapes) != 1 or len(next(iter(shapes))) != 1:
                raise ConfigError(f"a {self.kind} transfer uses one identical fragment on every DPU")

    @property
    def total_bytes(self) -> int:
        return sum(n for pieces in self.fragments.values() for _, n in pieces)

    def by_rank(self, machine: MachineConfig) -> Dict[int, List[int]]:
        ranks = defaultdict(list)
        for dpu in sorted(self.fragments):
            ranks[machine.rank_of(dpu)].append(dpu)
        return dict(sorted(ranks.items()))


@dataclass(frozen=True)
class TimelineEvent:
    kind: str
    rank: int
    start: float
    end: float
    bytes: int = 0
    label: str = ''

    @property
    def duration(self) -> float:
        return self.end - self.start

    def as_record(self) -> dict:
        return {
            'kind': self.kind,
            'rank': self.rank,
            'start_ns': int(round(self.start * 1e9)),
            'end_ns': int(round(self.end * 1e9)),
            'bytes': int(self.bytes),
        }


def makespan(events: Sequence[TimelineEvent], origin: float = 0.0) -> float:
    return max((e.end for e in events), default=origin) - origin


def check_timeline(events: Sequence[TimelineEvent]) -> None:
    """Raise KernelActiveError if a transfer overlaps a kernel on the same rank."""
    by_rank = defaultdict(list)
    for e in events:
        if e.rank >= 0:
            by_rank[e.rank].append(e)
    for rank, evs in by_rank.items():
        kernels = [e for e in evs if e.kind == 'kernel']
        for e in evs:
            if e.kind not in ('h2p', 'p2h'):
                continue
            for k in kernels:
                if e.start < k.end - 1e-15 and k.start < e.end - 1e-15:
                    raise KernelActiveError(
                        f"rank {rank}: {e.kind} [{e.start:.9f}, {e.end:.9f}] overlaps a kernel")


@dataclass(frozen=True)
class Fragment:
    """Bytes [addr, addr + nbytes) of DPU src that belong on DPU dst."""

    src: int
    addr: int
    nbytes: int
    dst: int


@dataclass
class Redistribution:
    events: List[TimelineEvent]
    placement: Dict[int, Tuple[int, int]]
    """Destination DPU -> (MRAM address, bytes) of its contiguous region."""

    @property
    def seconds(self) -> float:
        return makespan(self.events, min((e.start for e in self.events), default=0.0))


@dataclass(frozen=True)
class Stage:
    """
    One step of a rank pipeline.

    Transfers last nbytes / host_rank_bw unless seconds is given. after
    lists the names of stages that must finish first; None means the
    previous stage of the same rank.
    """

    name: str
    rank: int
    kind: str
    nbytes: int = 0
    seconds: float = 0.0
    after: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if self.kind not in ('h2p', 'kernel', 'p2h'):
            raise ConfigError(f"unknown stage kind {self.kind!r}")


@dataclass
class PipelineResult:
    events: List[TimelineEvent] = field(default_factory=list)
    makespan: float = 0.0


class HostRuntime:
    """Host clock, rank/thread availability and the event timeline."""

    def __init__(self, machine: MachineConfig, dpus=None):
        self.machine = machine
        self.cost = machine.host
        self.dpus = list(dpus or [])
        self.events: List[TimelineEvent] = []
        self.now = 0.0
        self.rank_free = [0.0] * machine.rank_count
        self.kernel_end = [0.0] * machine.rank_count
        self.threads = [0.0] * self.cost.host_threads

    def _record(self, event: TimelineEvent) -> TimelineEvent:
        self.events.append(event)
        return event

    def _dpu(self, dpu_id: int):
        if not 0 <= dpu_id < len(self.dpus):
            raise OutOfBoundsError(f"no DPU {dpu_id} in a system of {len(self.dpus)}")
        return self.dpus[dpu_id]

    # -- allocation ------------------------------------------------------------

    def alloc_host(self, nbytes: int, pooled: bool = True):
        """
        Allocate a host buffer.

        Returns:
            tuple: (uint8 buffer, host_alloc TimelineEvent)
        """
        if nbytes <= 0:
            raise InvalidSizeError(f"host allocation of {nbytes} bytes")
        seconds = self.cost.alloc_seconds(nbytes, pooled)
        event = self._record(TimelineEvent('host_alloc', HOST_RANK, self.now, self.now + seconds, nbytes,
                                           'pooled' if pooled else 'naive'))
        self.now = event.end
        return np.empty(nbytes, dtype=np.uint8), event

    def reorder(self, nbytes: int, label: str = '') -> TimelineEvent:
        event = self._record(TimelineEvent('host_reorder', HOST_RANK, self.now,
                                           self.now + nbytes / self.cost.host_memcpy_bw, nbytes, label))
        self.now = event.end
        return event

    # -- transfers -------------------------------------------------------------

    def _rank_copy(self, direction, rank, nbytes, fragments, start, label=''):
        seconds = nbytes / self.cost.host_rank_bw + fragments * self.cost.fragment_overhead
        slot = min(range(len(self.threads)), key=lambda t: (self.threads[t], t))
        begin = max(start, self.rank_free[rank], self.threads[slot])
        end = begin + seconds
        self.threads[slot] = end
        self.rank_free[rank] = end
        return self._record(TimelineEvent(direction, rank, begin, end, nbytes, label))

    def transfer(self, desc: TransferDescriptor, payload=None, at: Optional[float] = None, label: str = ''):
        """
        Execute a transfer.

        payload (h2p): dpu id -> list of arrays, one per fragment; for a
        broadcast a single array.

        Returns:
            tuple: (events, data) where data (p2h) maps dpu id -> list of
            uint8 arrays, one per fragment

        Raises:
            OutOfBoundsError: a fragment is not inside an allocated MRAM block
            KernelActiveError: `at` falls inside a kernel on a target rank
        """
        ranks = desc.by_rank(self.machine)
        start = self.now if at is None else at
        if at is not None:
            for rank in ranks:
                if self.kernel_end[rank] > at:
                    raise KernelActiveError(f"rank {rank} runs a kernel until {self.kernel_end[rank]:.9f}s")

        events = []
        data = None
        for dpu_id, pieces in desc.fragments.items():
            dpu = self._dpu(dpu_id)
            for addr, nbytes in pieces:
                dpu.check_mram_allocated(addr, nbytes)
        if desc.direction == 'h2p':
            if payload is None:
                raise InvalidSizeError("h2p transfer without payload")
            if desc.reorder:
                events.append(self.reorder(desc.total_bytes, label))
                start = max(start, self.now)
            for dpu_id, pieces in desc.fragments.items():
                dpu = self._dpu(dpu_id)
                arrays = [payload] if desc.kind == 'broadcast' else payload[dpu_id]
                for (addr, nbytes), array in zip(pieces, arrays):
                    raw = np.ascontiguousarray(array).view(np.uint8).reshape(-1)
                    if len(raw) > nbytes:
                        raise InvalidSizeError(f"DPU {dpu_id}: {len(raw)} payload bytes for a {nbytes}-byte fragment")
                    dpu.mram_put(addr, raw)
        else:
            data = {dpu_id: [self._dpu(dpu_id).mram.read(addr, nbytes) for addr, nbytes in pieces]
                    for dpu_id, pieces in desc.fragments.items()}

        for rank, dpu_ids in ranks.items():
            if desc.kind == 'broadcast':
                nbytes = desc.fragments[dpu_ids[0]][0][1]
                frags = 0
            else:
                nbytes = sum(n for d in dpu_ids for _, n in desc.fragments[d])
                frags = sum(len(desc.fragments[d]) for d in dpu_ids) if desc.kind == 'scatter_gather' else 0
            events.append(self._rank_copy(desc.direction, rank, nbytes, frags, start, label))
        self.now = max(self.now, max(e.end for e in events))

        if desc.direction == 'p2h' and desc.reorder:
            events.append(self.reorder(desc.total_bytes, label))
        return events, data

    # -- kernels ---------------------------------------------------------------

    def kernel(self, rank_seconds: Dict[int, float], label: str = '') -> List[TimelineEvent]:
        """Launch on the given ranks at the current host time and wait for all of them."""
        events = []
        for rank, seconds in sorted(rank_seconds.items()):
            begin = max(self.now, self.rank_free[rank])
            end = begin + seconds
            self.rank_free[rank] = end
            self.kernel_end[rank] = end
            events.append(self._record(TimelineEvent('kernel', rank, begin, end, 0, label)))
        if events:
            self.now = max(e.end for e in events)
        return events

    # -- redistribution ----------------------------------------------------------

    def redistribute(self, fragments: Sequence[Fragment], mode: str = 'scatter_pooled',
                     label: str = 'redistribute') -> Redistribution:
        """
        Move fragments between DPUs through the host.

        Each destination receives one contiguous region holding its
        fragments ordered by source DPU, then fragment order.

        naive           parallel p2h padded to the largest source, host
                        reorder, parallel h2p padded to the largest
                        destination, OS allocations
        scatter         scatter/gather both ways, no reorder, OS allocations
        scatter_pooled  as scatter with pooled allocations
        """
        if mode not in REDISTRIBUTION_MODES:
            raise ConfigError(f"unknown redistribution mode {mode!r}")
        fragments = [f for f in fragments if f.nbytes > 0]
        for f in fragments:
            if f.addr % 8 or f.nbytes % 8:
                raise UnalignedAccessError(f"fragment {f} not 8-byte aligned")
        order = sorted(range(len(fragments)), key=lambda i: (fragments[i].src, i))
        dst_bytes = defaultdict(int)
        src_bytes = defaultdict(int)
        for f in fragments:
            dst_bytes[f.dst] += f.nbytes
            src_bytes[f.src] += f.nbytes
        for dst, nbytes in dst_bytes.items():
            available = self._dpu(dst).mram_available
            if nbytes > available:
                raise DestinationOverflowError(f"DPU {dst} would receive {nbytes} bytes, {available} free")

        pieces = [self._dpu(fragments[i].src).mram.read(fragments[i].addr, fragments[i].nbytes) for i in order]
        placement = {}
        cursor = {}
        for dst in sorted(dst_bytes):
            placement[dst] = (self._dpu(dst).mram_alloc(dst_bytes[dst]), dst_bytes[dst])
            cursor[dst] = placement[dst][0]
        for i, raw in zip(order, pieces):
            dst = fragments[i].dst
            self._dpu(dst).mram_put(cursor[dst], raw)
            cursor[dst] += len(raw)

        total = sum(dst_bytes.values())
        start = len(self.events)
        if total:
            self._account_redistribution(fragments, src_bytes, dst_bytes, total, mode, label)
        events = self.events[start:]
        logger.debug("%s: %d fragments, %d bytes, mode %s, %.3f ms", label, len(fragments), total, mode,
                     1e3 * makespan(events, events[0].start if events else 0.0))
        return Redistribution(events, placement)

    def _account_redistribution(self, fragments, src_bytes, dst_bytes, total, mode, label):
        m = self.machine
        pooled = mode == 'scatter_pooled'
        self.alloc_host(total, pooled)
        if mode == 'naive':
            self.charge_transfer('p2h', src_bytes, 'parallel', label)
            self.reorder(total, label)
            self.alloc_host(total, pooled=False)
            self.charge_transfer('h2p', dst_bytes, 'parallel', label)
            return
        src_frags = defaultdict(int)
        dst_frags = defaultdict(int)
        for f in fragments:
            src_frags[m.rank_of(f.src)] += 1
            dst_frags[m.rank_of(f.dst)] += 1
        self.charge_transfer('p2h', src_bytes, 'scatter_gather', label, src_frags)
        self.charge_transfer('h2p', dst_bytes, 'scatter_gather', label, dst_frags)

    def charge_transfer(self, direction: str, per_dpu_bytes: Dict[int, int], kind: str = 'scatter_gather',
                        label: str = '', rank_fragments: Optional[Dict[int, int]] = None) -> List[TimelineEvent]:
        """
        Account a rank-parallel copy whose bytes the caller moves itself.

        parallel pads every DPU to the largest size; scatter_gather moves
        exact sizes and pays one fragment per DPU unless rank_fragments
        (rank -> fragment count) says otherwise.
        """
        if kind not in ('parallel', 'scatter_gather'):
            raise ConfigError(f"cannot account a {kind} transfer in bulk")
        sizes = {d: n for d, n in per_dpu_bytes.items() if n > 0}
        if not sizes:
            return []
        if kind == 'parallel':
            span = max(sizes.values())
            sizes = {d: span for d in sizes}
        per_rank = defaultdict(int)
        counted = defaultdict(int)
        for dpu, nbytes in sizes.items():
            rank = self.machine.rank_of(dpu)
            per_rank[rank] += nbytes
            counted[rank] += 1
        if kind == 'parallel':
            counted = {}
        elif rank_fragments is not None:
            counted = rank_fragments
        start = self.now
        events = [self._rank_copy(direction, rank, nbytes, counted.get(rank, 0), start, label)
                  for rank, nbytes in sorted(per_rank.items())]
        self.now = max(self.now, max(e.end for e in events))
        return events

    # -- pipelines ---------------------------------------------------------------

    def run_pipeline(self, stages: Sequence[Stage], mode: str = 'sync') -> PipelineResult:
        """
        Schedule per-rank stage chains.

        sync: stages run in waves by dependency depth with a global barrier
        between waves. async: every stage starts as soon as its
        dependencies, its rank and (for transfers) a host thread allow;
        when that greedy placement does not finish strictly earlier than
        the wave schedule, the wave schedule is used.
        """
        if mode not in ('sync', 'async'):
            raise ConfigError(f"unknown pipeline mode {mode!r}")
        stages = list(stages)
        names = {s.name: i for i, s in enumerate(stages)}
        if len(names) != len(stages):
            raise ConfigError("stage names must be unique")
        deps = []
        last_on_rank = {}
        for i, s in enumerate(stages):
            if not 0 <= s.rank < self.machine.rank_count:
                raise ConfigError(f"stage {s.name}: no rank {s.rank}")
            if s.after is None:
                deps.append([last_on_rank[s.rank]] if s.rank in last_on_rank else [])
            else:
                try:
                    deps.append([names[n] for n in s.after])
                except KeyError as exc:
                    raise ConfigError(f"stage {s.name} depends on unknown stage {exc.args[0]}")
            last_on_rank[s.rank] = i
        topo = _topological_order(deps)

        origin = self.now
        plan = self._schedule(stages, deps, topo, 'sync', origin)
        if mode == 'async':
            greedy = self._schedule(stages, deps, topo, 'async', origin)
            if greedy.makespan < plan.makespan:
                plan = greedy
            else:
                logger.debug(f"async placement ({greedy.makespan:.9f}s) is no better than waves "
                             f"({plan.makespan:.9f}s); keeping waves")

        self.rank_free, self.kernel_end, self.threads = plan.rank_free, plan.kernel_end, plan.threads
        for event in plan.events:
            self._record(event)
        result = PipelineResult(plan.events, plan.makespan)
        self.now = max(self.now, origin + result.makespan)
        return result

    def _schedule(self, stages, deps, topo, mode, origin) -> '_Plan':
        """Place stages on copies of the rank and thread clocks."""
        rank_free = list(self.rank_free)
        kernel_end = list(self.kernel_end)
        threads = list(self.threads)
        finish = {}
        events = []

        def duration(s):
            if s.kind == 'kernel' or s.seconds:
                return s.seconds
            return s.nbytes / self.cost.host_rank_bw

        def place(i, earliest):
            s = stages[i]
            begin = max(earliest, rank_free[s.rank])
            slot = None
            if s.kind != 'kernel':
                slot = min(range(len(threads)), key=lambda t: (threads[t], t))
                begin = max(begin, threads[slot])
            end = begin + duration(s)
            rank_free[s.rank] = end
            if slot is not None:
                threads[slot] = end
            else:
                kernel_end[s.rank] = end
            finish[i] = end
            events.append(TimelineEvent(s.kind, s.rank, begin, end, s.nbytes, s.name))

        if mode == 'sync':
            depth = {}
            for i in topo:
                depth[i] = 1 + max((depth[d] for d in deps[i]), default=-1)
            barrier = origin
            for level in range(max(depth.values(), default=-1) + 1):
                for i in topo:
                    if depth[i] == level:
                        place(i, barrier)
                barrier = max([barrier] + [finish[i] for i in topo if depth[i] == level])
        else:
            pending = set(range(len(stages)))
            rank_of_topo = {i: k for k, i in enumerate(topo)}

            def earliest(i):
                s = stages[i]
                t = max([origin] + [finish[d] for d in deps[i]] + [rank_free[s.rank]])
                if s.kind != 'kernel':
                    t = max(t, min(threads))
                return t, rank_of_topo[i]

            while pending:
                ready = [i for i in pending if all(d in finish for d in deps[i])]
                best = min(ready, key=earliest)
                place(best, max([origin] + [finish[d] for d in deps[best]]))
                pending.remove(best)

        return _Plan(events, makespan(events, origin), rank_free, kernel_end, threads)


@dataclass
class _Plan:
    events: List[TimelineEvent]
    makespan: float
    rank_free: List[float]
    kernel_end: List[float]
    threads: List[float]


def _topological_order(deps) -> List[int]:
    indegree = [len(d) for d in deps]
    users = defaultdict(list)
    for i, ds in enumerate(deps):
        for d in ds:
            users[d].append(i)
    ready = [i for i, n in enumerate(indegree) if n == 0]
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for u in users[i]:
            indegree[u] -= 1
            if indegree[u] == 0:
                ready.append(u)
    if len(order) != len(deps):
        stuck = sorted(set(range(len(deps))) - set(order))
        raise DependencyCycleError(f"stages {stuck} form a dependency cycle")
    return order
