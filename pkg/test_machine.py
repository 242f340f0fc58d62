"""
Machine model tests: memories, DMA engine, dispatch rule, synchronization
devices and configuration files.
"""

import configparser
import math

import numpy as np
import pytest

from pimsim.config import KernelConfig, MachineConfig, calibrated_alpha, load_config, write_config
from pimsim.errors import (ConfigError, DeadlockError, InvalidSizeError, OutOfBoundsError,
                           ScratchpadExhaustedError, SyncError, UnalignedAccessError)
from pimsim.machine import KERNELS, DpuState, Kernel, MemoryImage, register_kernel, run_kernel


class Spin(Kernel):
    """Every tasklet issues `work` add32 instructions."""

    name = 'test-spin'

    def __init__(self, dpu, tasklets, work=1100):
        super().__init__(dpu, tasklets)
        self.work = work

    def program(self, tl):
        tl.charge('add32', self.work)
        return
        yield


class Fetch(Kernel):
    """Every tasklet reads `nbytes` of MRAM into its own buffer."""

    name = 'test-fetch'

    def __init__(self, dpu, tasklets, nbytes=2048):
        super().__init__(dpu, tasklets)
        self.nbytes = nbytes
        self.bufs = [dpu.wram_alloc(nbytes) for _ in range(tasklets)]

    def program(self, tl):
        yield tl.dma_read(tl.id * self.nbytes, self.bufs[tl.id], self.nbytes)

    def result(self):
        return [self.dpu.wram_array(b, self.nbytes // 8, '<i8').copy() for b in self.bufs]


class Scripted(Kernel):
    """Runs script(kernel, tasklet) as the tasklet program."""

    name = 'test-scripted'

    def __init__(self, dpu, tasklets, script=None):
        super().__init__(dpu, tasklets)
        self.script = script
        self.log = []

    def program(self, tl):
        return self.script(self, tl)

    def result(self):
        return self.log


def _run(dpu, kernel, tasklets, **args):
    launch = run_kernel([dpu], kernel, tasklets, args)
    return launch.metrics[0], launch.outputs[0]


# ---------------------------------------------------------------------------
# Memories
# ---------------------------------------------------------------------------

def test_memory_image_grows_on_demand():
    image = MemoryImage('bank', 1 << 20)
    assert image.resident_bytes == 4096
    image.write(100_000, np.arange(4, dtype='<i8'))
    assert image.resident_bytes >= 100_032
    assert list(image.typed(100_000, 4, '<i8')) == [0, 1, 2, 3]
    with pytest.raises(OutOfBoundsError):
        image.read((1 << 20) - 4, 8)


def test_mram_first_fit_and_coalescing(dpu):
    a = dpu.mram_alloc(10)
    b = dpu.mram_alloc(8)
    assert (a, b) == (0, 16)
    assert dpu.mram_top == 24

    dpu.mram_free(a)
    c = dpu.mram_alloc(8)
    assert c == 0
    assert dpu.mram_used == 16

    dpu.mram_free(b)
    assert dpu.mram_top == 8
    with pytest.raises(OutOfBoundsError):
        dpu.mram_free(b)


def test_mram_claim_at_address(dpu):
    assert dpu.mram_alloc(16, at=64) == 64
    assert dpu.mram_top == 80
    assert dpu.mram_alloc(32) == 0
    with pytest.raises(OutOfBoundsError):
        dpu.mram_alloc(16, at=64)
    with pytest.raises(UnalignedAccessError):
        dpu.mram_alloc(8, at=84)


def test_mram_exhaustion():
    small = DpuState(0, MachineConfig.desk(mram_bytes=1024))
    small.mram_alloc(1000)
    with pytest.raises(OutOfBoundsError):
        small.mram_alloc(64)


def test_wram_budget_shrinks_with_tasklets(dpu, machine):
    dpu.begin_launch(4)
    assert dpu.wram_budget == machine.wram_bytes - 4 * machine.stack_reserve
    dpu.wram_alloc(dpu.wram_budget - 8)
    with pytest.raises(ScratchpadExhaustedError):
        dpu.wram_alloc(16)
    with pytest.raises(ScratchpadExhaustedError):
        dpu.reset_wram(40)


def test_wram_access_must_hit_an_allocation(dpu):
    dpu.begin_launch(1)
    addr = dpu.wram_alloc(64)
    dpu.check_wram_access(addr, 64)
    with pytest.raises(OutOfBoundsError):
        dpu.check_wram_access(addr + 32, 64)


def test_tasklet_count_is_bounded(dpu):
    with pytest.raises(ConfigError):
        dpu.begin_launch(0)
    with pytest.raises(ConfigError):
        dpu.begin_launch(25)


# ---------------------------------------------------------------------------
# Dispatch rule
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('tasklets', [1, 4, 11, 16, 24])
def test_ipc_follows_dispatch_rule(dpu, tasklets):
    metrics, _ = _run(dpu, Spin, tasklets, work=1100)
    assert metrics.instructions == 1100 * tasklets
    assert metrics.cycles == 1100 * max(tasklets, 11)
    assert metrics.ipc == pytest.approx(min(1.0, tasklets / 11))


def test_single_tasklet_runs_at_one_eleventh(dpu):
    metrics, _ = _run(dpu, Spin, 1, work=10)
    assert metrics.cycles == 110
    assert metrics.seconds == pytest.approx(110 / 350e6)


def test_instruction_classes_are_weighted(dpu):
    def script(k, tl):
        tl.charge('add32', 10)
        tl.charge('mul32', 2)
        tl.note('hash', 3)
        return
        yield

    metrics, _ = _run(dpu, Scripted, 1, script=script)
    assert metrics.class_counts == {'add32': 10, 'mul32': 64}
    assert metrics.instructions == 74
    assert metrics.events == {'hash': 3}


# ---------------------------------------------------------------------------
# DMA engine
# ---------------------------------------------------------------------------

def test_dma_cost(machine):
    assert machine.dma_cycles(2048) == 61 + 1024
    assert machine.dma_cycles(8) == 65
    assert machine.dma_bandwidth(2048) == pytest.approx(2048 * 350e6 / 1085)


def test_dma_read_copies_and_takes_its_time(dpu):
    dpu.mram_put(0, np.arange(256, dtype='<i8'))
    metrics, (buf,) = _run(dpu, Fetch, 1, nbytes=2048)
    assert list(buf) == list(range(256))
    # one dispatched dma instruction (11 cycles), then the job
    assert metrics.cycles == 11 + 1085
    assert metrics.dma_read_bytes == 2048
    assert metrics.dma_jobs == 1


def test_dma_engine_serves_jobs_in_order(dpu):
    metrics, _ = _run(dpu, Fetch, 2, nbytes=2048)
    assert metrics.cycles == 11 + 2 * 1085
    assert metrics.dma_read_bytes == 4096


@pytest.mark.parametrize('mram, size, error', [
    (4, 64, UnalignedAccessError),
    (0, 12, UnalignedAccessError),
    (0, 0, InvalidSizeError),
    (0, 4096, InvalidSizeError),
])
def test_dma_request_validation(dpu, mram, size, error):
    def script(k, tl):
        buf = k.dpu.wram_alloc(4096) if tl.id == 0 else None
        yield tl.dma_read(mram, buf, size)

    with pytest.raises(error):
        _run(dpu, Scripted, 1, script=script)


def test_dma_outside_scratchpad_allocation(dpu):
    def script(k, tl):
        yield tl.dma_read(0, 0, 64)

    with pytest.raises(OutOfBoundsError):
        _run(dpu, Scripted, 1, script=script)


# ---------------------------------------------------------------------------
# Synchronization
# ---------------------------------------------------------------------------

def test_handshake_chain_orders_tasklets(dpu):
    T = 6

    def script(k, tl):
        if tl.id > 0:
            yield tl.wait_for(tl.id - 1)
        k.log.append(tl.id)
        if tl.id < T - 1:
            yield tl.notify(tl.id + 1)

    _, log = _run(dpu, Scripted, T, script=script)
    assert log == list(range(T))


@pytest.mark.parametrize('busy', [0, 1])
def test_handshake_resumes_one_cycle_after_rendezvous(dpu, busy):
    # 111 instructions on one side (1221 cycles at one per 11), one sync on the other
    def script(k, tl):
        if tl.id == busy:
            tl.charge('add32', 110)
        if tl.id == 0:
            yield tl.notify(1)
        else:
            yield tl.wait_for(0)

    metrics, _ = _run(dpu, Scripted, 2, script=script)
    assert [t.finish_cycle for t in metrics.per_tasklet] == [1222, 1222]
    assert metrics.cycles == 1222


def test_circular_wait_deadlocks(dpu):
    def script(k, tl):
        yield tl.wait_for(1 - tl.id)

    with pytest.raises(DeadlockError):
        _run(dpu, Scripted, 2, script=script)


def test_handshake_with_itself_is_rejected(dpu):
    def script(k, tl):
        yield tl.notify(tl.id)

    with pytest.raises(SyncError):
        _run(dpu, Scripted, 2, script=script)


def test_barrier_holds_every_tasklet(dpu):
    def script(k, tl):
        tl.charge('add32', 10 * (tl.id + 1))
        k.log.append(('before', tl.id))
        yield tl.barrier()
        k.log.append(('after', tl.id))

    _, log = _run(dpu, Scripted, 5, script=script)
    phases = [phase for phase, _ in log]
    assert phases == ['before'] * 5 + ['after'] * 5


def test_mutex_serializes_critical_sections(dpu):
    def script(k, tl):
        buf = k.dpu.wram_alloc(8)
        yield tl.lock(0)
        k.log.append(('enter', tl.id))
        yield tl.dma_read(0, buf, 8)
        k.log.append(('leave', tl.id))
        yield tl.unlock(0)

    _, log = _run(dpu, Scripted, 4, script=script)
    for i in range(0, len(log), 2):
        assert log[i][0] == 'enter' and log[i + 1] == ('leave', log[i][1])


def test_unlock_without_holding(dpu):
    def script(k, tl):
        yield tl.unlock(3)

    with pytest.raises(SyncError):
        _run(dpu, Scripted, 1, script=script)


def test_unknown_step_is_rejected(dpu):
    def script(k, tl):
        yield 'not a step'

    with pytest.raises(TypeError):
        _run(dpu, Scripted, 1, script=script)


# ---------------------------------------------------------------------------
# Launches
# ---------------------------------------------------------------------------

def test_launch_over_several_dpus(machine):
    dpus = [DpuState(i, machine) for i in range(3)]
    launch = run_kernel(dpus, Spin, 2, [{'work': 100}, {'work': 200}, {'work': 300}])
    assert launch.kernel == 'test-spin'
    assert launch.cycles == 300 * 11
    assert launch.instructions == 2 * (100 + 200 + 300)
    assert launch.class_count('add32') == launch.instructions


def test_registered_kernel_by_name(dpu):
    @register_kernel
    class Named(Spin):
        name = 'test-named-spin'

    assert KERNELS['test-named-spin'] is Named
    launch = run_kernel([dpu], 'test-named-spin', 1, {'work': 5})
    assert launch.metrics[0].instructions == 5
    with pytest.raises(ConfigError):
        run_kernel([dpu], 'no-such-kernel', 1)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_desk_machine_shape(machine):
    assert machine.dpu_count == 32
    assert machine.rank_count == 4
    assert machine.rank_of(17) == 2
    assert KernelConfig().radix_bits == 5


@pytest.mark.parametrize('kwargs', [
    {'dpu_count': 30},
    {'dma_max_bytes': 100},
    {'instr_cost': {'fma': 3}},
    {'dispatch_gap': 0},
])
def test_invalid_machine(kwargs):
    with pytest.raises(ConfigError):
        MachineConfig.desk(**kwargs)


def test_invalid_kernel_config():
    with pytest.raises(ConfigError):
        KernelConfig(radix_buckets=24)
    with pytest.raises(ConfigError):
        KernelConfig(ht_fill_max=0)


def test_calibrated_alpha_hits_target():
    alpha = calibrated_alpha(630e6, 350e6, 61)
    fitted = MachineConfig.desk(dma_alpha=alpha)
    assert fitted.dma_bandwidth(2048) == pytest.approx(630e6, rel=0.005)
    with pytest.raises(ConfigError):
        calibrated_alpha(1e12, 350e6, 61)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'absent.conf'))


def test_config_round_trip_keeps_other_sections(tmp_path):
    path = str(tmp_path / 'pimsim.conf')
    config = configparser.RawConfigParser()
    config.add_section('database')
    config.set('database', 'connection_string', 'sqlite:///runs.db')
    machine = MachineConfig.desk(dma_alpha=0.525, instr_cost={'mul32': 40})
    write_config(path, machine, KernelConfig(tasklets=12), config)

    loaded, kernel = load_config(path)
    assert loaded.dma_alpha == 0.525
    assert loaded.dpu_count == 32
    assert loaded.instr_cost['mul32'] == 40
    assert kernel.tasklets == 12

    reread = configparser.RawConfigParser()
    reread.read(path)
    assert reread.get('database', 'connection_string') == 'sqlite:///runs.db'


def test_partial_config_uses_desk_defaults(tmp_path):
    path = tmp_path / 'pimsim.conf'
    path.write_text("[machine]\ncost.div32 = 80\n\n[host]\nhost_threads = 2\n")
    machine, kernel = load_config(str(path))
    assert machine.dpu_count == 32
    assert machine.instr_cost['div32'] == 80
    assert machine.host.host_threads == 2
    assert kernel == KernelConfig()


def test_unparsable_config_value(tmp_path):
    path = tmp_path / 'pimsim.conf'
    path.write_text("[kernel]\ntasklets = many\n")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_wram_bandwidth(machine):
    assert machine.wram_bandwidth() == pytest.approx(8 * 350e6)
    assert math.isclose(machine.wram_bandwidth() / 2818e6, 1.0, rel_tol=0.1)
