"""
PIM machine model.

A DpuState owns one DPU's bank memory (MRAM), scratchpad (WRAM), a single
FIFO DMA engine and the synchronization devices (handshakes, mutexes,
barrier). Kernels run as one generator per tasklet; a generator charges
instructions through its TaskletState and yields steps (DMA, notify,
wait_for, lock, unlock, barrier) that the scheduler interprets.

Dispatch model: the instructions charged before a step form a burst.
While k tasklets have bursts in flight each advances at
1 / max(k, dispatch_gap) instructions per cycle, i.e. round-robin dispatch
of at most one instruction per cycle with a tasklet never dispatched twice
within dispatch_gap cycles. A single tasklet therefore runs at IPC
1/dispatch_gap and dispatch_gap tasklets fill the pipeline.
"""

import heapq
import logging
import math
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from pimsim.config import INSTRUCTION_CLASSES, MachineConfig
from pimsim.errors import (ConfigError, DeadlockError, InvalidSizeError, OutOfBoundsError,
                           ScratchpadExhaustedError, SyncError, UnalignedAccessError)

logger = logging.getLogger(__name__)

_EPS_INSTR = 1e-7
_EPS_CYCLES = 1e-6


# ---------------------------------------------------------------------------
# Memory images
# ---------------------------------------------------------------------------

class MemoryImage:
    """
    Byte image of one memory space.

    The backing array grows on demand up to `size`, so a 64 MiB bank that
    only ever holds a few KiB costs a few KiB on the host.
    """

    def __init__(self, name: str, size: int, eager: bool = False):
        self.name = name
        self.size = size
        self._buf = np.zeros(size if eager else min(size, 4096), dtype=np.uint8)

    def _check(self, addr: int, nbytes: int):
        if addr < 0 or nbytes < 0 or addr + nbytes > self.size:
            raise OutOfBoundsError(
                f"{self.name} access [{addr}, {addr + nbytes}) outside {self.size} bytes")
        needed = addr + nbytes
        if needed > len(self._buf):
            grown = np.zeros(min(self.size, max(needed, 2 * len(self._buf))), dtype=np.uint8)
            grown[:len(self._buf)] = self._buf
            self._buf = grown

    def view(self, addr: int, nbytes: int) -> np.ndarray:
        """Writable uint8 view; valid until the image grows again."""
        self._check(addr, nbytes)
        return self._buf[addr:addr + nbytes]

    def read(self, addr: int, nbytes: int) -> np.ndarray:
        return self.view(addr, nbytes).copy()

    def write(self, addr: int, data) -> None:
        raw = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
        self.view(addr, len(raw))[:] = raw

    def typed(self, addr: int, count: int, dtype) -> np.ndarray:
        dtype = np.dtype(dtype)
        return self.view(addr, count * dtype.itemsize).view(dtype)

    @property
    def resident_bytes(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# Kernel steps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DmaStep:
    direction: str  # 'read' (MRAM -> WRAM) or 'write' (WRAM -> MRAM)
    mram_addr: int
    wram_addr: int
    nbytes: int


@dataclass(frozen=True)
class NotifyStep:
    target: int


@dataclass(frozen=True)
class WaitForStep:
    source: int


@dataclass(frozen=True)
class LockStep:
    mutex: int


@dataclass(frozen=True)
class UnlockStep:
    mutex: int


@dataclass(frozen=True)
class BarrierStep:
    pass


_DONE = object()


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class TaskletMetrics:
    tasklet: int
    instructions: int = 0
    finish_cycle: float = 0.0


@dataclass
class KernelMetrics:
    """Counters of one kernel launch on one DPU."""

    dpu_id: int
    kernel: str
    tasklets: int
    clock_hz: float
    instructions: int = 0
    cycles: int = 0
    dma_read_bytes: int = 0
    dma_write_bytes: int = 0
    dma_jobs: int = 0
    class_counts: Dict[str, int] = field(default_factory=dict)
    events: Dict[str, int] = field(default_factory=dict)
    per_tasklet: List[TaskletMetrics] = field(default_factory=list)

    @property
    def ipc(self) -> float:
        return self.instructions / self.cycles if self.cycles else 0.0

    @property
    def seconds(self) -> float:
        return self.cycles / self.clock_hz

    def as_record(self) -> dict:
        return {
            'dpu': self.dpu_id,
            'kernel': self.kernel,
            'tasklets': self.tasklets,
            'instructions': self.instructions,
            'cycles': self.cycles,
            'ipc': round(self.ipc, 6),
            'dma_read_bytes': self.dma_read_bytes,
            'dma_write_bytes': self.dma_write_bytes,
        }


@dataclass
class LaunchResult:
    """Per-DPU metrics and kernel outputs of one launch over a DPU set."""

    kernel: str
    metrics: List[KernelMetrics]
    outputs: list

    @property
    def cycles(self) -> int:
        """Worst case over DPUs."""
        return max((m.cycles for m in self.metrics), default=0)

    @property
    def seconds(self) -> float:
        return max((m.seconds for m in self.metrics), default=0.0)

    @property
    def instructions(self) -> int:
        return sum(m.instructions for m in self.metrics)

    @property
    def ipc(self) -> float:
        cycles = sum(m.cycles for m in self.metrics)
        return self.instructions / cycles if cycles else 0.0

    def class_count(self, cls: str) -> int:
        return sum(m.class_counts.get(cls, 0) for m in self.metrics)

    def event_count(self, event: str) -> int:
        return sum(m.events.get(event, 0) for m in self.metrics)


# ---------------------------------------------------------------------------
# Tasklets and DPUs
# ---------------------------------------------------------------------------

class TaskletState:
    """One hardware thread inside a kernel launch."""

    def __init__(self, tid: int, dpu: 'DpuState', tasklet_count: int):
        self.id = tid
        self.dpu = dpu
        self.tasklet_count = tasklet_count
        self.status = 'ready'
        self.next_dispatch_cycle = 0.0
        self.program = None
        self.pending = 0
        self.counts = Counter()
        self.events = Counter()
        self.instructions = 0

    def charge(self, cls: str, n: int = 1) -> None:
        """Add instr_cost[cls] * n instructions to this tasklet's dispatch stream."""
        if n <= 0:
            return
        cost = self.dpu.config.instr_cost[cls]
        issued = cost * int(n)
        self.pending += issued
        self.counts[cls] += issued
        self.instructions += issued

    def note(self, event: str, n: int = 1) -> None:
        """Count a named operation (e.g. a hash) without charging instructions."""
        self.events[event] += int(n)

    def _dma(self, direction, mram_addr, wram_addr, nbytes) -> DmaStep:
        if nbytes <= 0:
            raise InvalidSizeError(f"DMA of {nbytes} bytes")
        if mram_addr % 8 or wram_addr % 8 or nbytes % 8:
            raise UnalignedAccessError(
                f"DMA mram={mram_addr} wram={wram_addr} size={nbytes} not 8-byte aligned")
        if nbytes > self.dpu.config.dma_max_bytes:
            raise InvalidSizeError(
                f"DMA of {nbytes} bytes exceeds dma_max_bytes {self.dpu.config.dma_max_bytes}")
        self.dpu.check_wram_access(wram_addr, nbytes)
        if mram_addr < 0 or mram_addr + nbytes > self.dpu.config.mram_bytes:
            raise OutOfBoundsError(f"MRAM access [{mram_addr}, {mram_addr + nbytes})")
        self.charge('dma')
        return DmaStep(direction, mram_addr, wram_addr, nbytes)

    def dma_read(self, mram_addr: int, wram_addr: int, nbytes: int) -> DmaStep:
        return self._dma('read', mram_addr, wram_addr, nbytes)

    def dma_write(self, mram_addr: int, wram_addr: int, nbytes: int) -> DmaStep:
        return self._dma('write', mram_addr, wram_addr, nbytes)

    def notify(self, target: int) -> NotifyStep:
        self.charge('sync')
        return NotifyStep(target)

    def wait_for(self, source: int) -> WaitForStep:
        self.charge('sync')
        return WaitForStep(source)

    def lock(self, mutex: int) -> LockStep:
        self.charge('sync')
        return LockStep(mutex)

    def unlock(self, mutex: int) -> UnlockStep:
        self.charge('sync')
        return UnlockStep(mutex)

    def barrier(self) -> BarrierStep:
        self.charge('sync')
        return BarrierStep()


class DpuState:
    """One PIM core."""

    def __init__(self, dpu_id: int, config: MachineConfig):
        self.id = dpu_id
        self.config = config
        self.mram = MemoryImage(f"dpu{dpu_id}.mram", config.mram_bytes)
        self.wram = MemoryImage(f"dpu{dpu_id}.wram", config.wram_bytes, eager=True)
        self.tasklets: List[TaskletState] = []
        self.dma_queue = deque()
        self.mutexes: Dict[int, Optional[int]] = {}
        self.handshake_slots: Dict[int, int] = {}
        self.cycle_now = 0
        self._wram_regions = []
        self._wram_budget = config.wram_bytes - config.stack_reserve
        self._mram_top = 0
        self._mram_holes = []
        self._mram_blocks = {}

    # -- scratchpad ---------------------------------------------------------

    def reset_wram(self, tasklets: int = 1) -> None:
        """Drop all scratchpad regions; reserve stack space for `tasklets`."""
        self._wram_regions = []
        self._wram_budget = self.config.wram_bytes - self.config.stack_reserve * tasklets
        if self._wram_budget < 0:
            raise ScratchpadExhaustedError(
                f"{tasklets} tasklet stacks exceed {self.config.wram_bytes} bytes of WRAM")

    @property
    def wram_budget(self) -> int:
        return self._wram_budget

    @property
    def wram_free(self) -> int:
        top = self._wram_regions[-1][0] + self._wram_regions[-1][1] if self._wram_regions else 0
        return self._wram_budget - top

    def wram_alloc(self, nbytes: int, align: int = 8) -> int:
        if nbytes <= 0:
            raise InvalidSizeError(f"scratchpad allocation of {nbytes} bytes")
        if align not in (1, 2, 4, 8):
            raise ConfigError(f"alignment {align} must divide 8")
        top = self._wram_regions[-1][0] + self._wram_regions[-1][1] if self._wram_regions else 0
        offset = -(-top // align) * align
        if offset + nbytes > self._wram_budget:
            raise ScratchpadExhaustedError(
                f"DPU {self.id}: {nbytes} bytes requested, "
                f"{max(0, self._wram_budget - offset)} of {self._wram_budget} left")
        self._wram_regions.append((offset, nbytes))
        return offset

    def check_wram_access(self, addr: int, nbytes: int) -> None:
        for start, size in self._wram_regions:
            if start <= addr and addr + nbytes <= start + size:
                return
        raise OutOfBoundsError(f"DPU {self.id}: WRAM [{addr}, {addr + nbytes}) outside any allocation")

    def wram_array(self, addr: int, count: int, dtype) -> np.ndarray:
        dtype = np.dtype(dtype)
        self.check_wram_access(addr, count * dtype.itemsize)
        return self.wram.typed(addr, count, dtype)

    # -- bank memory ---------------------------------------------------------

    def mram_alloc(self, nbytes: int, at: Optional[int] = None) -> int:
        """
        First-fit allocation of an 8-byte aligned MRAM block.

        With `at`, claim exactly [at, at + size) instead; the host uses this
        to place one buffer at the same address on several DPUs.
        """
        if nbytes < 0:
            raise InvalidSizeError(f"MRAM allocation of {nbytes} bytes")
        size = -(-max(nbytes, 8) // 8) * 8
        if at is not None:
            return self._mram_claim(at, size)
        for i, (start, length) in enumerate(self._mram_holes):
            if length >= size:
                if length == size:
                    del self._mram_holes[i]
                else:
                    self._mram_holes[i] = (start + size, length - size)
                self._mram_blocks[start] = size
                return start
        if self._mram_top + size > self.config.mram_bytes:
            raise OutOfBoundsError(
                f"DPU {self.id}: MRAM exhausted ({self._mram_top + size} > {self.config.mram_bytes})")
        addr = self._mram_top
        self._mram_top += size
        self._mram_blocks[addr] = size
        return addr

    def _mram_claim(self, addr: int, size: int) -> int:
        if addr % 8:
            raise UnalignedAccessError(f"DPU {self.id}: MRAM claim at {addr}")
        if addr < 0 or addr + size > self.config.mram_bytes:
            raise OutOfBoundsError(f"DPU {self.id}: MRAM claim [{addr}, {addr + size}) out of range")
        if addr >= self._mram_top:
            if addr > self._mram_top:
                self._mram_holes.append((self._mram_top, addr - self._mram_top))
            self._mram_top = addr + size
        else:
            for i, (start, length) in enumerate(self._mram_holes):
                if start <= addr and addr + size <= start + length:
                    pieces = [(start, addr - start), (addr + size, start + length - addr - size)]
                    self._mram_holes[i:i + 1] = [p for p in pieces if p[1] > 0]
                    break
            else:
                raise OutOfBoundsError(f"DPU {self.id}: MRAM [{addr}, {addr + size}) already in use")
        self._mram_blocks[addr] = size
        return addr

    @property
    def mram_top(self) -> int:
        """End of the highest allocated block."""
        return self._mram_top

    def mram_free(self, addr: int) -> None:
        size = self._mram_blocks.pop(addr, None)
        if size is None:
            raise OutOfBoundsError(f"DPU {self.id}: MRAM free of unallocated address {addr}")
        holes = sorted(self._mram_holes + [(addr, size)])
        merged = []
        for start, length in holes:
            if merged and merged[-1][0] + merged[-1][1] == start:
                merged[-1] = (merged[-1][0], merged[-1][1] + length)
            else:
                merged.append((start, length))
        if merged and merged[-1][0] + merged[-1][1] == self._mram_top:
            self._mram_top = merged.pop()[0]
        self._mram_holes = merged

    def mram_reset(self) -> None:
        self._mram_top = 0
        self._mram_holes = []
        self._mram_blocks = {}

    @property
    def mram_used(self) -> int:
        return sum(self._mram_blocks.values())

    @property
    def mram_available(self) -> int:
        """Bytes still allocatable in one block or another."""
        return self.config.mram_bytes - self.mram_used

    def check_mram_allocated(self, addr: int, nbytes: int) -> None:
        """Raise OutOfBoundsError unless [addr, addr + nbytes) lies inside one allocated block."""
        for start, size in self._mram_blocks.items():
            if start <= addr and addr + nbytes <= start + size:
                return
        raise OutOfBoundsError(f"DPU {self.id}: MRAM [{addr}, {addr + nbytes}) outside any allocation")

    def mram_put(self, addr: int, array: np.ndarray) -> None:
        self.mram.write(addr, array)

    def mram_get(self, addr: int, count: int, dtype) -> np.ndarray:
        return self.mram.typed(addr, count, dtype).copy()

    # -- execution -----------------------------------------------------------

    def begin_launch(self, tasklets: int) -> None:
        if not 1 <= tasklets <= self.config.max_tasklets:
            raise ConfigError(f"tasklet count {tasklets} outside 1..{self.config.max_tasklets}")
        self.reset_wram(tasklets)
        self.tasklets = [TaskletState(i, self, tasklets) for i in range(tasklets)]
        self.mutexes = {}
        self.handshake_slots = {}
        self.dma_queue.clear()

    def execute(self, program, name: str = 'kernel') -> KernelMetrics:
        """Run program(tasklet) on every tasklet of the current launch."""
        if not self.tasklets:
            raise ConfigError("execute() called before begin_launch()")
        for tl in self.tasklets:
            tl.program = program(tl)
        metrics = _Scheduler(self, name).run()
        self.cycle_now += metrics.cycles
        return metrics


class _Scheduler:
    """Event loop for one launch on one DPU."""

    def __init__(self, dpu: DpuState, name: str):
        self.dpu = dpu
        self.name = name
        self.cfg = dpu.config
        self.tls = dpu.tasklets
        self.now = 0.0
        self.running: Dict[int, float] = {}
        self.arrivals: Dict[int, object] = {}
        self.ready: List[int] = []
        self.wakeups = []
        self.dma_free = 0.0
        self.wake_seq = 0
        self.queues = defaultdict(deque)
        self.notifying: Dict[int, int] = {}
        self.waiting: Dict[int, int] = {}
        self.barrier: List[int] = []
        self.done = 0
        self.metrics = KernelMetrics(dpu.id, name, len(self.tls), self.cfg.clock_hz)
        self.finish = [0.0] * len(self.tls)

    def run(self) -> KernelMetrics:
        self.ready = list(range(len(self.tls)))
        heapq.heapify(self.ready)
        while True:
            while self.ready:
                self._resume(heapq.heappop(self.ready))
            if self.done == len(self.tls):
                break
            if not self.running and not self.wakeups:
                blocked = ', '.join(f"t{tl.id}:{tl.status}" for tl in self.tls if tl.status != 'done')
                raise DeadlockError(f"DPU {self.dpu.id} kernel {self.name}: {blocked}")
            self._advance()
        return self._finish()

    def _wake(self, tid: int) -> None:
        self.tls[tid].status = 'ready'
        heapq.heappush(self.ready, tid)

    def _wake_at(self, tid: int, cycle: float) -> None:
        """Wake tid once the clock reaches cycle (DMA completion, handshake release)."""
        self.wake_seq += 1
        heapq.heappush(self.wakeups, (cycle, self.wake_seq, tid))

    def _resume(self, tid: int) -> None:
        tl = self.tls[tid]
        try:
            step = next(tl.program)
        except StopIteration:
            step = _DONE
        if tl.pending > 0:
            self.running[tid] = float(tl.pending)
            self.arrivals[tid] = step
            tl.pending = 0
            tl.status = 'running'
        else:
            self._arrive(tid, step)

    def _advance(self) -> None:
        share = max(len(self.running), self.cfg.dispatch_gap)
        t_compute = self.now + min(self.running.values()) * share if self.running else math.inf
        t_wake = self.wakeups[0][0] if self.wakeups else math.inf
        t_next = min(t_compute, t_wake)
        if self.running:
            progress = (t_next - self.now) / share
            for tid in self.running:
                self.running[tid] -= progress
        self.now = t_next

        events = set()
        for tid, remaining in list(self.running.items()):
            if remaining <= _EPS_INSTR:
                del self.running[tid]
                events.add(tid)
        completed = set()
        while self.wakeups and self.wakeups[0][0] <= self.now + _EPS_CYCLES:
            completed.add(heapq.heappop(self.wakeups)[2])
        for tid in sorted(events | completed):
            if tid in events:
                self.tls[tid].next_dispatch_cycle = self.now + self.cfg.dispatch_gap
                self._arrive(tid, self.arrivals.pop(tid))
            if tid in completed:
                self._wake(tid)

    def _arrive(self, tid: int, step) -> None:
        tl = self.tls[tid]
        if step is _DONE:
            tl.status = 'done'
            self.finish[tid] = self.now
            self.done += 1
        elif isinstance(step, DmaStep):
            self._dma(tid, step)
        elif isinstance(step, NotifyStep):
            self._check_peer(tid, step.target)
            if self.waiting.get(step.target) == tid:
                del self.waiting[step.target]
                self._handshake(step.target, tid)
            else:
                self.notifying[tid] = step.target
                tl.status = 'blocked-sync'
        elif isinstance(step, WaitForStep):
            self._check_peer(tid, step.source)
            if self.notifying.get(step.source) == tid:
                del self.notifying[step.source]
                self._handshake(step.source, tid)
            else:
                self.waiting[tid] = step.source
                tl.status = 'blocked-sync'
        elif isinstance(step, LockStep):
            holder = self.dpu.mutexes.get(step.mutex)
            if holder is None:
                self.dpu.mutexes[step.mutex] = tid
                self._wake(tid)
            else:
                self.queues[step.mutex].append(tid)
                tl.status = 'blocked-sync'
        elif isinstance(step, UnlockStep):
            if self.dpu.mutexes.get(step.mutex) != tid:
                raise SyncError(f"tasklet {tid} unlocks mutex {step.mutex} it does not hold")
            if self.queues[step.mutex]:
                nxt = self.queues[step.mutex].popleft()
                self.dpu.mutexes[step.mutex] = nxt
                self._wake(nxt)
            else:
                self.dpu.mutexes[step.mutex] = None
            self._wake(tid)
        elif isinstance(step, BarrierStep):
            self.barrier.append(tid)
            tl.status = 'blocked-sync'
            if len(self.barrier) == len(self.tls):
                for waiter in self.barrier:
                    self._wake(waiter)
                self.barrier = []
        else:
            raise TypeError(f"kernel {self.name} yielded {step!r}")

    def _handshake(self, first: int, second: int) -> None:
        # both sides resume one cycle after the later of notify and wait_for
        self.tls[second].status = 'blocked-sync'
        self._wake_at(first, self.now + 1)
        self._wake_at(second, self.now + 1)

    def _check_peer(self, tid: int, peer: int) -> None:
        if peer == tid or not 0 <= peer < len(self.tls):
            raise SyncError(f"tasklet {tid}: invalid handshake peer {peer}")

    def _dma(self, tid: int, step: DmaStep) -> None:
        dpu = self.dpu
        if step.direction == 'read':
            dpu.wram.write(step.wram_addr, dpu.mram.view(step.mram_addr, step.nbytes))
            self.metrics.dma_read_bytes += step.nbytes
        else:
            dpu.mram.write(step.mram_addr, dpu.wram.view(step.wram_addr, step.nbytes))
            self.metrics.dma_write_bytes += step.nbytes
        self.metrics.dma_jobs += 1
        start = max(self.now, self.dma_free)
        end = start + self.cfg.dma_cycles(step.nbytes)
        self.dma_free = end
        self._wake_at(tid, end)
        self.tls[tid].status = 'blocked-dma'

    def _finish(self) -> KernelMetrics:
        m = self.metrics
        total = Counter()
        events = Counter()
        for tl in self.tls:
            total.update(tl.counts)
            events.update(tl.events)
            m.per_tasklet.append(TaskletMetrics(tl.id, tl.instructions, self.finish[tl.id]))
        m.instructions = sum(tl.instructions for tl in self.tls)
        m.class_counts = {cls: total[cls] for cls in INSTRUCTION_CLASSES if total[cls]}
        m.events = dict(sorted(events.items()))
        m.cycles = max(0, math.ceil(self.now - _EPS_CYCLES))
        logger.debug("dpu %d %s: %d instr, %d cycles, ipc %.3f",
                     self.dpu.id, self.name, m.instructions, m.cycles, m.ipc)
        return m


# ---------------------------------------------------------------------------
# Kernel registry and launches
# ---------------------------------------------------------------------------

KERNELS = {}


def register_kernel(cls):
    """Class decorator: make a kernel launchable by name."""
    KERNELS[cls.name] = cls
    return cls


class Kernel:
    """
    Base class for DPU kernels.

    The constructor runs once per DPU before the tasklets start and
    allocates scratchpad; program() is the per-tasklet step generator;
    result() is collected after all tasklets finish.
    """

    name = 'kernel'

    def __init__(self, dpu: DpuState, tasklets: int, **kwargs):
        self.dpu = dpu
        self.tasklets = tasklets

    def program(self, tl: TaskletState):
        raise NotImplementedError

    def result(self):
        return None


def wram_alloc(dpu: DpuState, nbytes: int, align: int = 8) -> int:
    return dpu.wram_alloc(nbytes, align)


def charge(tasklet: TaskletState, cls: str, n: int = 1) -> None:
    tasklet.charge(cls, n)


def run_kernel(dpus, kernel, tasklets: int, args=None) -> LaunchResult:
    """
    Launch a kernel on each DPU of a set.

    Args:
        dpus: iterable of DpuState
        kernel: Kernel subclass or registered kernel name
        tasklets: tasklets per DPU
        args: dict of kernel arguments shared by all DPUs, or a list with
              one dict per DPU

    Returns:
        LaunchResult with one KernelMetrics and one output per DPU
    """
    if isinstance(kernel, str):
        try:
            kernel = KERNELS[kernel]
        except KeyError:
            raise ConfigError(f"unknown kernel {kernel!r}")
    dpus = list(dpus)
    per_dpu = args if isinstance(args, list) else [args or {}] * len(dpus)
    metrics, outputs = [], []
    for dpu, kwargs in zip(dpus, per_dpu):
        dpu.begin_launch(tasklets)
        instance = kernel(dpu, tasklets, **kwargs)
        metrics.append(dpu.execute(instance.program, kernel.name))
        outputs.append(instance.result())
    return LaunchResult(kernel.name, metrics, outputs)
