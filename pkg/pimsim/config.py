"""
Simulator configuration.

Three dataclasses describe the simulated system:

  MachineConfig  - DPU shape, memory sizes, dispatch rule, DMA cost and the
                   instruction-cost table, plus the host cost model.
  HostCostModel  - host<->rank bandwidth, host memcpy, allocator costs.
  KernelConfig   - tile size, default tasklets, radix and hash-table knobs.

Persistent configuration lives in an INI file (instance/pimsim.conf) with
[machine], [host] and [kernel] sections, read with RawConfigParser and
per-key fallbacks so any subset of keys may be given.
"""

import configparser
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict

from pimsim.errors import ConfigError

KiB = 1024
MiB = 1024 * KiB

# Instruction classes accepted by charge(). shift/xor/sub are single-cycle
# 32-bit ALU work and are charged as add32.
INSTRUCTION_CLASSES = (
    'add32', 'add64', 'mul32', 'div32', 'cmp',
    'wram_load8', 'wram_store8', 'branch', 'sync', 'dma',
)

DEFAULT_INSTR_COST = {
    'add32': 1,
    'add64': 2,
    'mul32': 32,
    'div32': 64,
    'cmp': 1,
    'wram_load8': 1,
    'wram_store8': 1,
    'branch': 1,
    'sync': 1,
    'dma': 1,
}


@dataclass
class HostCostModel:
    """Host side of the system: transfers, reordering and allocation."""

    host_rank_bw: float = 1.0e9
    """Bytes/second for host<->PIM copies on one rank."""

    host_memcpy_bw: float = 5.0e9
    """Bytes/second for reordering data in host memory."""

    alloc_base: float = 20e-6
    """Seconds of fixed cost per naive (OS/malloc) allocation."""

    alloc_per_byte: float = 0.5e-9
    """Seconds per byte for naive allocation (page faults, zeroing)."""

    pooled_alloc_base: float = 1e-6
    """Seconds of fixed cost per pooled allocation."""

    pooled_per_byte: float = 0.02e-9
    """Seconds per byte for pooled allocation."""

    host_threads: int = 4
    """Host threads serving rank transfers; rank r uses thread r % host_threads."""

    fragment_overhead: float = 200e-9
    """Seconds added per scatter/gather fragment."""

    def __post_init__(self):
        positive = ('host_rank_bw', 'host_memcpy_bw', 'alloc_base', 'alloc_per_byte',
                    'pooled_alloc_base', 'pooled_per_byte', 'fragment_overhead')
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"host.{name} must be positive")
        if self.host_threads < 1:
            raise ConfigError("host.host_threads must be at least 1")
        if self.pooled_alloc_base >= self.alloc_base or self.pooled_per_byte >= self.alloc_per_byte:
            raise ConfigError("pooled allocation costs must be below naive costs")

    def alloc_seconds(self, nbytes: int, pooled: bool) -> float:
        if pooled:
            return self.pooled_alloc_base + nbytes * self.pooled_per_byte
        return self.alloc_base + nbytes * self.alloc_per_byte


@dataclass
class MachineConfig:
    """
    Simulated PIM system.

    Defaults follow the full-size machine (2048 DPUs in ranks of 64 at
    350 MHz, 64 MiB MRAM and 64 KiB WRAM per DPU). Use desk() for the
    scaled-down machine the harness runs by default.
    """

    dpu_count: int = 2048
    """Number of DPUs; a multiple of dpus_per_rank."""

    dpus_per_rank: int = 64
    """DPUs per rank, the granularity of host transfers."""

    clock_hz: float = 350e6
    """DPU clock frequency."""

    mram_bytes: int = 64 * MiB
    """Bank memory per DPU."""

    wram_bytes: int = 64 * KiB
    """Scratchpad per DPU."""

    dispatch_gap: int = 11
    """Minimum cycles between two dispatches of the same tasklet."""

    dma_alpha: float = 0.5
    """DMA cycles per byte."""

    dma_beta: int = 61
    """Fixed DMA cycles per job."""

    dma_max_bytes: int = 2048
    """Largest single DMA job; kernels split bigger copies."""

    stack_reserve: int = 2 * KiB
    """WRAM bytes reserved per tasklet for its stack."""

    max_tasklets: int = 24
    """Upper bound on tasklets per launch."""

    instr_cost: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_INSTR_COST))
    """Instructions issued per charged operation, by class."""

    host: HostCostModel = field(default_factory=HostCostModel)
    """Host cost model."""

    def __post_init__(self):
        if self.dpus_per_rank < 1 or self.dpu_count < 1:
            raise ConfigError("dpu_count and dpus_per_rank must be positive")
        if self.dpu_count % self.dpus_per_rank:
            raise ConfigError(
                f"dpu_count {self.dpu_count} is not a multiple of dpus_per_rank {self.dpus_per_rank}")
        if self.mram_bytes % 8 or self.wram_bytes % 8 or self.mram_bytes <= 0 or self.wram_bytes <= 0:
            raise ConfigError("mram_bytes and wram_bytes must be positive multiples of 8")
        if self.dispatch_gap < 1:
            raise ConfigError("dispatch_gap must be at least 1")
        if self.dma_alpha <= 0 or self.dma_beta < 0:
            raise ConfigError("dma_alpha must be > 0 and dma_beta >= 0")
        if self.dma_max_bytes % 8 or self.dma_max_bytes <= 0:
            raise ConfigError("dma_max_bytes must be a positive multiple of 8")
        if self.stack_reserve % 8 or self.stack_reserve < 0:
            raise ConfigError("stack_reserve must be a non-negative multiple of 8")
        if not 1 <= self.max_tasklets:
            raise ConfigError("max_tasklets must be at least 1")
        unknown = set(self.instr_cost) - set(INSTRUCTION_CLASSES)
        if unknown:
            raise ConfigError(f"unknown instruction classes: {', '.join(sorted(unknown))}")
        merged = dict(DEFAULT_INSTR_COST)
        merged.update(self.instr_cost)
        if any(v < 0 for v in merged.values()):
            raise ConfigError("instruction costs must be non-negative")
        self.instr_cost = merged

    @classmethod
    def desk(cls, **overrides) -> 'MachineConfig':
        """The desk-scale machine: 32 DPUs in four ranks of eight."""
        params = dict(dpu_count=32, dpus_per_rank=8)
        params.update(overrides)
        return cls(**params)

    @property
    def rank_count(self) -> int:
        return self.dpu_count // self.dpus_per_rank

    def rank_of(self, dpu_id: int) -> int:
        return dpu_id // self.dpus_per_rank

    def dma_cycles(self, nbytes: int) -> int:
        """Duration of one DMA job."""
        return self.dma_beta + math.ceil(self.dma_alpha * nbytes)

    def dma_bandwidth(self, nbytes: int) -> float:
        """Effective bytes/second of back-to-back DMA jobs of nbytes each."""
        return nbytes * self.clock_hz / self.dma_cycles(nbytes)

    def wram_bandwidth(self) -> float:
        """Bytes/second of 8-byte scratchpad accesses at full pipeline occupancy."""
        return 8 * self.clock_hz / self.instr_cost['wram_load8']


@dataclass
class KernelConfig:
    """Per-kernel tiling and data-structure knobs."""

    buffer_elems: int = 256
    """Records per scratchpad buffer (upper bound; see tile sizing)."""

    tasklets: int = 16
    """Default tasklets per launch."""

    radix_buckets: int = 32
    """Buckets per radix pass; a power of two."""

    ht_fill_max: float = 0.5
    """Largest load factor of a scratchpad hash table."""

    ht_stripes: int = 8
    """Independently locked sub-tables of the shared aggregation table."""

    def __post_init__(self):
        if self.buffer_elems < 8 or self.buffer_elems % 8:
            raise ConfigError("buffer_elems must be a multiple of 8, at least 8")
        if self.tasklets < 1:
            raise ConfigError("tasklets must be at least 1")
        if self.radix_buckets < 2 or self.radix_buckets & (self.radix_buckets - 1):
            raise ConfigError("radix_buckets must be a power of two >= 2")
        if not 0 < self.ht_fill_max <= 1:
            raise ConfigError("ht_fill_max must be in (0, 1]")
        if self.ht_stripes < 1 or self.ht_stripes & (self.ht_stripes - 1):
            raise ConfigError("ht_stripes must be a power of two")

    @property
    def radix_bits(self) -> int:
        return self.radix_buckets.bit_length() - 1


def calibrated_alpha(target_bw: float, clock_hz: float, beta: int, nbytes: int = 2048) -> float:
    """DMA alpha that makes nbytes-sized jobs reach target_bw bytes/second."""
    cycles = nbytes * clock_hz / target_bw
    alpha = (cycles - beta) / nbytes
    if alpha <= 0:
        raise ConfigError(f"dma_beta {beta} leaves no room for {target_bw:.0f} B/s at {nbytes} B")
    return alpha


# ---------------------------------------------------------------------------
# INI persistence
# ---------------------------------------------------------------------------

def _read_section(config, section, cls, skip=()):
    values = {}
    for f in fields(cls):
        if f.name in skip or not config.has_option(section, f.name):
            continue
        raw = config.get(section, f.name)
        default = getattr(cls(), f.name) if f.name not in ('instr_cost', 'host') else None
        try:
            if isinstance(default, bool):
                values[f.name] = config.getboolean(section, f.name)
            elif isinstance(default, int):
                values[f.name] = int(float(raw))
            else:
                values[f.name] = float(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {f.name}: cannot parse {raw!r}")
    return values


def load_config(path=None, config=None):
    """
    Read machine and kernel configuration.

    Args:
        path: INI file; missing files give the defaults
        config: an already-read RawConfigParser (takes precedence)

    Returns:
        tuple: (MachineConfig, KernelConfig)
    """
    if config is None:
        config = configparser.RawConfigParser()
        if path and os.path.exists(path):
            config.read(path)
        elif path:
            raise ConfigError(f"config file not found: {path}")

    host = HostCostModel(**_read_section(config, 'host', HostCostModel))

    machine_values = _read_section(config, 'machine', MachineConfig, skip=('instr_cost', 'host'))
    costs = {}
    if config.has_section('machine'):
        for key, raw in config.items('machine'):
            if key.startswith('cost.'):
                try:
                    costs[key[len('cost.'):]] = int(raw)
                except ValueError:
                    raise ConfigError(f"[machine] {key}: cannot parse {raw!r}")
    base = MachineConfig.desk() if config.getboolean('machine', 'desk', fallback=True) else MachineConfig()
    machine = replace(base, host=host, instr_cost={**base.instr_cost, **costs}, **machine_values)

    kernel = KernelConfig(**_read_section(config, 'kernel', KernelConfig))
    return machine, kernel


def write_config(path, machine: MachineConfig, kernel: KernelConfig, config=None):
    """Write machine/host/kernel sections, keeping any other sections of config."""
    if config is None:
        config = configparser.RawConfigParser()
        if os.path.exists(path):
            config.read(path)

    for section in ('machine', 'host', 'kernel'):
        if config.has_section(section):
            config.remove_section(section)
        config.add_section(section)

    config.set('machine', 'desk', 'false')
    for f in fields(MachineConfig):
        if f.name in ('instr_cost', 'host'):
            continue
        config.set('machine', f.name, repr(getattr(machine, f.name)))
    for name, cost in sorted(machine.instr_cost.items()):
        config.set('machine', f'cost.{name}', str(cost))
    for f in fields(HostCostModel):
        config.set('host', f.name, repr(getattr(machine.host, f.name)))
    for f in fields(KernelConfig):
        config.set('kernel', f.name, repr(getattr(kernel, f.name)))

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as configfile:
        config.write(configfile)
    return config
