"""
Bandwidth microbenchmarks.

  mram_stream   every tasklet issues back-to-back DMA jobs of a fixed size
                between its scratchpad buffer and its own MRAM slot
  wram_stream   every tasklet sums its scratchpad buffer with unrolled
                8-byte loads

measure_bandwidth() launches one of them on a fresh DPU and turns the
simulated cycle count into bytes per second.
"""

import logging

import numpy as np

from pimsim.config import MachineConfig
from pimsim.errors import ConfigError
from pimsim.machine import DpuState, Kernel, register_kernel, run_kernel

logger = logging.getLogger(__name__)

STREAM_OPS = ('mram_read', 'mram_write', 'wram')
WRAM_UNROLL = 1024


@register_kernel
class MramStreamKernel(Kernel):
    """`jobs` DMA jobs of `nbytes` per tasklet, reads or writes."""

    name = 'mram_stream'

    def __init__(self, dpu, tasklets, slots, nbytes, jobs, direction='read'):
        super().__init__(dpu, tasklets)
        if direction not in ('read', 'write'):
            raise ConfigError(f"unknown stream direction {direction!r}")
        self.slots = slots
        self.nbytes = nbytes
        self.jobs = jobs
        self.direction = direction
        self.buf_addr = [dpu.wram_alloc(nbytes) for _ in range(tasklets)]

    def program(self, tl):
        mram = self.slots + tl.id * self.nbytes
        wram = self.buf_addr[tl.id]
        issue = tl.dma_read if self.direction == 'read' else tl.dma_write
        for _ in range(self.jobs):
            tl.charge('branch')
            yield issue(mram, wram, self.nbytes)

    def result(self):
        return self.tasklets * self.jobs * self.nbytes


@register_kernel
class WramStreamKernel(Kernel):
    """Sum `words` int64 scratchpad words per tasklet, `passes` times."""

    name = 'wram_stream'

    def __init__(self, dpu, tasklets, words, passes=1):
        super().__init__(dpu, tasklets)
        self.words = words
        self.passes = passes
        self.bufs = [dpu.wram_array(dpu.wram_alloc(8 * words), words, '<i8') for _ in range(tasklets)]
        self.sums = [0] * tasklets

    def program(self, tl):
        buf = self.bufs[tl.id]
        buf[:] = np.arange(self.words)
        for _ in range(self.passes):
            for start in range(0, self.words, WRAM_UNROLL):
                n = min(WRAM_UNROLL, self.words - start)
                self.sums[tl.id] += int(buf[start:start + n].sum())
                tl.charge('wram_load8', n)
                tl.charge('branch')
        return
        yield

    def result(self):
        return self.tasklets * self.passes * self.words * 8


def measure_bandwidth(machine: MachineConfig, op: str, nbytes: int = 2048, tasklets: int = 16,
                      jobs: int = 16) -> dict:
    """
    Stream through one memory on a fresh DPU.

    mram_read/mram_write move tasklets x jobs jobs of nbytes; wram makes
    `jobs` passes over an nbytes buffer per tasklet.

    Returns:
        dict: bytes, cycles and bandwidth (bytes/second)
    """
    if op not in STREAM_OPS:
        raise ConfigError(f"unknown stream {op!r}; choose from {', '.join(STREAM_OPS)}")
    dpu = DpuState(0, machine)
    if op == 'wram':
        launch = run_kernel([dpu], WramStreamKernel, tasklets, {'words': nbytes // 8, 'passes': jobs})
    else:
        slots = dpu.mram_alloc(tasklets * nbytes)
        launch = run_kernel([dpu], MramStreamKernel, tasklets, {
            'slots': slots, 'nbytes': nbytes, 'jobs': jobs, 'direction': op.split('_')[1],
        })
    metrics = launch.metrics[0]
    moved = launch.outputs[0]
    bandwidth = moved * machine.clock_hz / metrics.cycles
    logger.debug("%s: %d B in %d cycles, %.1f MB/s", op, moved, metrics.cycles, bandwidth / 1e6)
    return {'bytes': moved, 'cycles': metrics.cycles, 'bandwidth': bandwidth}
