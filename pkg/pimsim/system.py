"""
A set of simulated DPUs driven by one host.

PimSystem ties the DPUs to a HostRuntime and records what the operators
do: kernel steps become per-rank kernel events (a rank is busy until its
slowest DPU finishes), host <-> DPU copies go through the runtime's
transfer accounting.

Transfer modes:

  naive      parallel transfers padded to the largest DPU, OS-style host
             allocations, redistribution through a host reorder
  optimized  scatter/gather transfers of exact sizes, pooled host
             allocations, direct redistribution
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from pimsim.config import KernelConfig, MachineConfig
from pimsim.errors import CapacityError, ConfigError
from pimsim.host import Fragment, HostRuntime, TransferDescriptor
from pimsim.machine import DpuState, KernelMetrics
from pimsim.tiling import chunk_bounds

logger = logging.getLogger(__name__)

TRANSFER_MODES = ('naive', 'optimized')


@dataclass
class StepRecord:
    """One operator step: a kernel sequence run on every DPU of the set."""

    label: str
    metrics: List[KernelMetrics]
    seconds: float


class PimSystem:
    def __init__(self, machine: Optional[MachineConfig] = None, kernel: Optional[KernelConfig] = None,
                 dpus: Optional[int] = None, transfer_mode: str = 'optimized', tasklets: Optional[int] = None):
        if transfer_mode not in TRANSFER_MODES:
            raise ConfigError(f"unknown transfer mode {transfer_mode!r}")
        self.machine = machine or MachineConfig.desk()
        self.kernel = kernel or KernelConfig()
        count = self.machine.dpu_count if dpus is None else dpus
        if not 1 <= count <= self.machine.dpu_count:
            raise ConfigError(f"{count} DPUs requested, machine has {self.machine.dpu_count}")
        self.dpus = [DpuState(i, self.machine) for i in range(count)]
        self.host = HostRuntime(self.machine, self.dpus)
        self.transfer_mode = transfer_mode
        self.tasklets = tasklets or self.kernel.tasklets
        self.steps: List[StepRecord] = []
        self.op_counts = Counter()

    def __repr__(self):
        return f"<PimSystem {len(self.dpus)} DPUs, {self.transfer_mode}>"

    @property
    def dpu_count(self) -> int:
        return len(self.dpus)

    @property
    def pooled(self) -> bool:
        return self.transfer_mode == 'optimized'

    @property
    def metrics(self) -> List[KernelMetrics]:
        return [m for step in self.steps for m in step.metrics]

    @property
    def timeline(self):
        return self.host.events

    def kernel_seconds(self) -> float:
        return sum(step.seconds for step in self.steps)

    # -- kernels ---------------------------------------------------------------

    def launch(self, label: str, fn: Callable, dpus=None) -> list:
        """
        Run fn(dpu) on every DPU and record one kernel event per rank.

        fn returns (metrics, output) where metrics is a KernelMetrics or a
        list of them (kernels the DPU runs back to back).

        Returns:
            list: fn outputs in DPU order
        """
        dpus = self.dpus if dpus is None else dpus
        outputs, metrics = [], []
        rank_seconds: Dict[int, float] = {}
        for dpu in dpus:
            m, out = fn(dpu)
            m = m if isinstance(m, list) else [m]
            metrics.extend(m)
            outputs.append(out)
            rank = self.machine.rank_of(dpu.id)
            rank_seconds[rank] = max(rank_seconds.get(rank, 0.0), sum(x.seconds for x in m))
        self.host.kernel(rank_seconds, label)
        seconds = max(rank_seconds.values(), default=0.0)
        self.steps.append(StepRecord(label, metrics, seconds))
        logger.debug("%s: %d DPUs, %.6f s", label, len(dpus), seconds)
        return outputs

    # -- memory ----------------------------------------------------------------

    def alloc(self, sizes: Dict[int, int]) -> Dict[int, int]:
        """
        Allocate one MRAM region per DPU at an address common to all of them.

        In naive mode every region takes the largest size so a single
        parallel transfer can cover them.
        """
        if not sizes:
            return {}
        if not self.pooled:
            span = max(sizes.values())
            sizes = {d: span for d in sizes}
        for d, nbytes in sizes.items():
            if nbytes > self.dpus[d].mram_available:
                raise CapacityError(
                    f"DPU {d} needs {nbytes} bytes of MRAM, {self.dpus[d].mram_available} available")
        addr = max(self.dpus[d].mram_top for d in sizes)
        if addr + max(sizes.values()) > self.machine.mram_bytes:
            raise CapacityError(f"no common MRAM address for {max(sizes.values())} bytes above {addr}")
        return {d: self.dpus[d].mram_alloc(nbytes, at=addr) for d, nbytes in sizes.items()}

    def free(self, regions: Dict[int, int]) -> None:
        for d, addr in regions.items():
            self.dpus[d].mram_free(addr)

    # -- transfers ---------------------------------------------------------------

    def scatter(self, arrays: Dict[int, np.ndarray], label: str = 'h2p') -> Dict[int, int]:
        """Copy one array to each DPU; returns the MRAM address per DPU."""
        raw = {d: np.ascontiguousarray(a).view(np.uint8).reshape(-1) for d, a in arrays.items()}
        sizes = {d: max(8, -(-len(r) // 8) * 8) for d, r in raw.items()}
        regions = self.alloc(sizes)
        total = sum(len(r) for r in raw.values())
        if total:
            self.host.alloc_host(total, self.pooled)
        if self.pooled:
            fragments = {d: [(regions[d], sizes[d])] for d, r in raw.items() if len(r)}
            payload = {d: [raw[d]] for d in fragments}
            kind = 'scatter_gather'
        else:
            span = max(sizes.values())
            fragments = {d: [(regions[d], span)] for d in raw}
            payload = {d: [raw[d]] for d in raw}
            kind = 'parallel'
        if fragments and total:
            self.host.transfer(TransferDescriptor(kind, 'h2p', fragments), payload, label=label)
        return regions

    def gather(self, regions: Dict[int, tuple], label: str = 'p2h') -> Dict[int, np.ndarray]:
        """
        Copy typed regions back to the host.

        regions: dpu id -> (address, count, dtype)
        """
        out = {d: self.dpus[d].mram_get(addr, count, dtype) for d, (addr, count, dtype) in regions.items()}
        self.charge_gather({d: a.nbytes for d, a in out.items()}, label)
        return out

    def charge_gather(self, sizes: Dict[int, int], label: str = 'p2h') -> None:
        """Account p2h copies of results a kernel entry point already read back."""
        total = sum(sizes.values())
        if not total:
            return
        self.host.alloc_host(total, self.pooled)
        self.host.charge_transfer('p2h', sizes, 'scatter_gather' if self.pooled else 'parallel', label)

    def redistribute(self, fragments: List[Fragment], label: str = 'redistribute'):
        mode = 'scatter_pooled' if self.pooled else 'naive'
        return self.host.redistribute(fragments, mode, label)

    def host_reorder(self, nbytes: int, label: str = 'reorder') -> None:
        if nbytes:
            self.host.reorder(nbytes, label)

    # -- tables ----------------------------------------------------------------

    def load_columns(self, columns: Dict[str, np.ndarray], label: str = 'load',
                     rowids: Optional[np.ndarray] = None) -> 'DistributedTable':
        """
        Split int64 columns evenly over the DPUs (contiguous row chunks).

        Rows get ids base + i unless explicit rowids are given, which then
        travel as the `_rowid` column.
        """
        columns = {name: np.asarray(v, dtype=np.int64) for name, v in columns.items()}
        if rowids is not None:
            columns['_rowid'] = np.asarray(rowids, dtype=np.int64)
        lengths = {len(v) for v in columns.values()}
        if len(lengths) > 1:
            raise ConfigError(f"columns of unequal length {sorted(lengths)}")
        n = lengths.pop() if lengths else 0
        P = self.dpu_count
        bounds = [chunk_bounds(n, P, i) for i in range(P)]
        per_dpu = 8 * len(columns) * max(hi - lo for lo, hi in bounds) if n else 0
        if per_dpu > self.dpus[0].mram_available:
            raise CapacityError(
                f"{label}: {n} rows x {len(columns)} columns need {per_dpu} bytes per DPU, "
                f"{self.dpus[0].mram_available} available")
        parts = [Part(d, hi - lo, {}, None if rowids is not None else lo) for d, (lo, hi) in enumerate(bounds)]
        for name, values in columns.items():
            regions = self.scatter({d: values[lo:hi] for d, (lo, hi) in enumerate(bounds)}, f"{label}:{name}")
            for part in parts:
                part.columns[name] = regions[part.dpu]
        logger.debug("%s: %d rows x %d columns over %d DPUs", label, n, len(columns), P)
        return DistributedTable(self, parts)


@dataclass
class Part:
    """One DPU's share of a distributed table."""

    dpu: int
    count: int
    columns: Dict[str, int] = field(default_factory=dict)
    rowid_base: Optional[int] = None
    """First row id of a contiguous chunk; None when ids travel as `_rowid`."""


class DistributedTable:
    """int64 columns resident in MRAM, one Part per DPU."""

    def __init__(self, system: PimSystem, parts: List[Part]):
        self.system = system
        self.parts = parts

    @property
    def rows(self) -> int:
        return sum(p.count for p in self.parts)

    @property
    def columns(self) -> List[str]:
        return sorted(self.parts[0].columns) if self.parts else []

    def counts(self) -> List[int]:
        return [p.count for p in self.parts]

    def free(self, keep=()) -> None:
        for part in self.parts:
            for name, addr in list(part.columns.items()):
                if name not in keep:
                    self.system.dpus[part.dpu].mram_free(addr)
                    del part.columns[name]

    def rowids(self, part: Part) -> np.ndarray:
        if part.rowid_base is not None:
            return np.arange(part.rowid_base, part.rowid_base + part.count, dtype=np.int64)
        return self.system.dpus[part.dpu].mram_get(part.columns['_rowid'], part.count, '<i8')

    def to_host(self, names=None, label: str = 'p2h') -> Dict[str, np.ndarray]:
        """Concatenate columns (plus `_rowid`) over the DPUs, charging the copy."""
        names = [n for n in (names or self.columns) if n != '_rowid']
        out = {name: [] for name in names}
        out['_rowid'] = []
        sizes = {}
        for part in self.parts:
            dpu = self.system.dpus[part.dpu]
            for name in names:
                out[name].append(dpu.mram_get(part.columns[name], part.count, '<i8'))
            out['_rowid'].append(self.rowids(part))
            sizes[part.dpu] = 8 * part.count * (len(names) + (part.rowid_base is None))
        self.system.charge_gather(sizes, label)
        return {name: np.concatenate(v) if v else np.zeros(0, np.int64) for name, v in out.items()}


class DistributedArray:
    """Records of one dtype resident in MRAM: dpu id -> (address, count)."""

    def __init__(self, system: PimSystem, regions: Dict[int, tuple], dtype):
        self.system = system
        self.regions = dict(regions)
        self.dtype = np.dtype(dtype)

    @property
    def rows(self) -> int:
        return sum(count for _, count in self.regions.values())

    def counts(self) -> List[int]:
        return [self.regions.get(d, (0, 0))[1] for d in range(self.system.dpu_count)]

    def to_host(self, label: str = 'p2h') -> np.ndarray:
        parts = self.system.gather({d: (addr, count, self.dtype)
                                    for d, (addr, count) in sorted(self.regions.items())}, label)
        if not parts:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([parts[d] for d in sorted(parts)])

    def free(self) -> None:
        for d, (addr, _) in self.regions.items():
            self.system.dpus[d].mram_free(addr)
        self.regions = {}
