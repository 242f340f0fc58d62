"""Host runtime: transfers, redistribution, pipelines and the transfer experiments."""

from dataclasses import replace

import numpy as np
import pytest

from pimsim.config import MachineConfig
from pimsim.errors import (ConfigError, DependencyCycleError, DestinationOverflowError, InvalidSizeError,
                           KernelActiveError, OutOfBoundsError, UnalignedAccessError)
from pimsim.experiments import TIMELINE_MODES, calibrate, pipeline_gain, timeline_records, transfer_timeline
from pimsim.host import Fragment, HostRuntime, Stage, TimelineEvent, TransferDescriptor, check_timeline
from pimsim.machine import DpuState
from pimsim.streaming import measure_bandwidth


@pytest.fixture
def host(machine):
    dpus = [DpuState(i, machine) for i in range(16)]
    for dpu in dpus:
        dpu.mram_alloc(1 << 16)
    return HostRuntime(machine, dpus)


# ---------------------------------------------------------------------------
# Transfers
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('kind, direction, fragments, error', [
    ('dma', 'h2p', {0: [(0, 8)]}, ConfigError),
    ('serial', 'sideways', {0: [(0, 8)]}, ConfigError),
    ('broadcast', 'p2h', {0: [(0, 8)], 1: [(0, 8)]}, ConfigError),
    ('serial', 'h2p', {0: [(0, 8)], 1: [(0, 8)]}, ConfigError),
    ('serial', 'h2p', {0: [(0, 8), (8, 8)]}, ConfigError),
    ('parallel', 'h2p', {0: [(0, 8)], 1: [(0, 16)]}, ConfigError),
    ('scatter_gather', 'h2p', {0: [(4, 8)]}, UnalignedAccessError),
    ('scatter_gather', 'h2p', {0: [(0, 12)]}, UnalignedAccessError),
    ('scatter_gather', 'h2p', {0: [(0, 0)]}, InvalidSizeError),
    ('scatter_gather', 'h2p', {}, InvalidSizeError),
])
def test_descriptor_validation(kind, direction, fragments, error):
    with pytest.raises(error):
        TransferDescriptor(kind, direction, fragments)


def test_scatter_gather_round_trip(host):
    first = np.arange(4, dtype=np.int64)
    second = np.arange(100, 110, dtype=np.int64)
    desc = TransferDescriptor('scatter_gather', 'h2p', {0: [(0, 32)], 9: [(64, 80)]})
    events, data = host.transfer(desc, {0: [first], 9: [second]})

    assert data is None
    assert [(e.kind, e.rank, e.bytes) for e in events] == [('h2p', 0, 32), ('h2p', 1, 80)]
    assert events[0].duration == pytest.approx(32 / 1e9 + 200e-9)

    _, data = host.transfer(TransferDescriptor('scatter_gather', 'p2h', {0: [(0, 32)], 9: [(64, 80)]}))
    np.testing.assert_array_equal(data[0][0].view('<i8'), first)
    np.testing.assert_array_equal(data[9][0].view('<i8'), second)


def test_broadcast_writes_every_dpu(host):
    values = np.array([7, 8], dtype=np.int64)
    events, _ = host.transfer(TransferDescriptor('broadcast', 'h2p', {d: [(128, 16)] for d in range(16)}), values)

    assert len(events) == 2
    assert all(e.bytes == 16 for e in events)
    for d in range(16):
        np.testing.assert_array_equal(host.dpus[d].mram_get(128, 2, '<i8'), values)


def test_reorder_adds_a_host_event(host):
    desc = TransferDescriptor('parallel', 'h2p', {0: [(0, 1000 * 8)], 1: [(0, 1000 * 8)]}, reorder=True)
    events, _ = host.transfer(desc, {0: [np.zeros(1000, np.int64)], 1: [np.ones(1000, np.int64)]})

    assert [e.kind for e in events] == ['host_reorder', 'h2p']
    assert events[0].duration == pytest.approx(16000 / 5e9)
    assert events[1].start >= events[0].end


def test_oversized_payload(host):
    with pytest.raises(InvalidSizeError):
        host.transfer(TransferDescriptor('serial', 'h2p', {0: [(0, 8)]}), {0: [np.arange(2, dtype=np.int64)]})


def test_transfer_needs_allocated_mram(machine):
    dpu = DpuState(0, machine)
    host = HostRuntime(machine, [dpu])
    payload = {0: [np.arange(4, dtype=np.int64)]}
    with pytest.raises(OutOfBoundsError):
        host.transfer(TransferDescriptor('serial', 'h2p', {0: [(0, 32)]}), payload)
    with pytest.raises(OutOfBoundsError):
        host.transfer(TransferDescriptor('serial', 'p2h', {0: [(0, 32)]}))

    addr = dpu.mram_alloc(24)
    with pytest.raises(OutOfBoundsError):
        host.transfer(TransferDescriptor('serial', 'h2p', {0: [(addr, 32)]}), payload)
    assert host.events == []

    host.transfer(TransferDescriptor('serial', 'h2p', {0: [(addr, 24)]}), {0: [np.arange(3, dtype=np.int64)]})
    assert dpu.mram_get(addr, 3, '<i8').tolist() == [0, 1, 2]


def test_transfer_during_kernel(host):
    host.kernel({0: 1e-3})
    desc = TransferDescriptor('serial', 'h2p', {0: [(0, 8)]})
    payload = {0: [np.zeros(1, np.int64)]}
    with pytest.raises(KernelActiveError):
        host.transfer(desc, payload, at=0.5e-3)

    # another rank is free, and rank 0 is free once its kernel ends
    host.transfer(TransferDescriptor('serial', 'h2p', {8: [(0, 8)]}), {8: [np.zeros(1, np.int64)]}, at=0.5e-3)
    events, _ = host.transfer(desc, payload, at=1e-3)
    assert events[0].start == pytest.approx(1e-3)


def test_rank_serves_one_transfer_at_a_time(host):
    desc = TransferDescriptor('serial', 'h2p', {0: [(0, 8000)]})
    payload = {0: [np.zeros(1000, np.int64)]}
    first, _ = host.transfer(desc, payload, at=0.0)
    second, _ = host.transfer(desc, payload, at=0.0)
    assert second[0].start == pytest.approx(first[0].end)


def test_check_timeline():
    kernel = TimelineEvent('kernel', 0, 0.0, 1.0)
    check_timeline([kernel, TimelineEvent('h2p', 0, 1.0, 2.0), TimelineEvent('p2h', 1, 0.5, 1.5)])
    with pytest.raises(KernelActiveError):
        check_timeline([kernel, TimelineEvent('h2p', 0, 0.5, 1.5)])


def test_timeline_record_schema():
    event = TimelineEvent('p2h', 2, 1.5e-6, 2.25e-6, 64, 'gather')
    assert event.as_record() == {'kind': 'p2h', 'rank': 2, 'start_ns': 1500, 'end_ns': 2250, 'bytes': 64}
    assert timeline_records([event, TimelineEvent('kernel', 0, 0.0, 1e-6)])[0]['kind'] == 'kernel'


def test_pooled_allocation_is_cheaper(host):
    buf, naive = host.alloc_host(1 << 20, pooled=False)
    _, pooled = host.alloc_host(1 << 20, pooled=True)

    assert len(buf) == 1 << 20
    assert naive.duration == pytest.approx(20e-6 + (1 << 20) * 0.5e-9)
    assert pooled.duration < naive.duration
    assert pooled.start == pytest.approx(naive.end)
    with pytest.raises(InvalidSizeError):
        host.alloc_host(0)


def test_charge_transfer_padding(host):
    parallel = host.charge_transfer('p2h', {0: 800, 1: 8000}, 'parallel')
    exact = host.charge_transfer('p2h', {0: 800, 1: 8000}, 'scatter_gather')

    assert [e.bytes for e in parallel] == [16000]
    assert [e.bytes for e in exact] == [8800]
    assert exact[0].duration == pytest.approx(8800 / 1e9 + 2 * 200e-9)
    assert host.charge_transfer('h2p', {0: 0}) == []
    with pytest.raises(ConfigError):
        host.charge_transfer('h2p', {0: 8}, 'broadcast')


# ---------------------------------------------------------------------------
# Redistribution
# ---------------------------------------------------------------------------

def _put(dpu, values):
    values = np.asarray(values, dtype=np.int64)
    addr = dpu.mram_alloc(values.nbytes)
    dpu.mram_put(addr, values)
    return addr


@pytest.mark.parametrize('mode', ['naive', 'scatter', 'scatter_pooled'])
def test_redistribute_places_fragments(host, mode):
    a = _put(host.dpus[0], [1, 2, 3])
    b = _put(host.dpus[9], [40, 50])
    moved = host.redistribute([
        Fragment(9, b, 16, 2),
        Fragment(0, a, 16, 2),
        Fragment(0, a + 16, 8, 1),
    ], mode)

    addr, nbytes = moved.placement[2]
    assert nbytes == 32
    assert host.dpus[2].mram_get(addr, 4, '<i8').tolist() == [1, 2, 40, 50]
    addr, nbytes = moved.placement[1]
    assert host.dpus[1].mram_get(addr, 1, '<i8').tolist() == [3]
    assert moved.seconds > 0

    kinds = {e.kind for e in moved.events}
    assert ('host_reorder' in kinds) == (mode == 'naive')
    assert {'host_alloc', 'p2h', 'h2p'} <= kinds


def test_redistribution_modes_order(host):
    def seconds(mode):
        runtime = HostRuntime(host.machine, [DpuState(i, host.machine) for i in range(16)])
        fragments = []
        for src in range(16):
            addr = runtime.dpus[src].mram_alloc(16 * 1024)
            fragments.extend(Fragment(src, addr + 1024 * dst, 1024, dst) for dst in range(16))
        return runtime.redistribute(fragments, mode).seconds

    naive, scatter, pooled = seconds('naive'), seconds('scatter'), seconds('scatter_pooled')
    assert naive > scatter > pooled


def test_redistribute_errors(host):
    host.dpus[1].mram_alloc(8)
    with pytest.raises(DestinationOverflowError):
        host.redistribute([Fragment(0, 0, host.machine.mram_bytes, 1)])
    with pytest.raises(UnalignedAccessError):
        host.redistribute([Fragment(0, 4, 8, 1)])
    with pytest.raises(ConfigError):
        host.redistribute([], 'bulk')


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------

def _stages():
    return [
        Stage('h2p:0', 0, 'h2p', nbytes=3_000_000),
        Stage('run:0', 0, 'kernel', seconds=1e-3),
        Stage('p2h:0', 0, 'p2h', nbytes=1_000_000),
        Stage('h2p:1', 1, 'h2p', nbytes=1_000_000),
        Stage('run:1', 1, 'kernel', seconds=3e-3),
        Stage('p2h:1', 1, 'p2h', nbytes=1_000_000),
    ]


def test_sync_pipeline_waits_for_each_wave(machine):
    result = HostRuntime(machine).run_pipeline(_stages(), 'sync')
    start = {e.label: e.start for e in result.events}

    assert result.makespan == pytest.approx(7e-3)
    assert start['run:1'] == pytest.approx(3e-3)
    assert start['p2h:0'] == pytest.approx(6e-3)


def test_async_pipeline_overlaps_ranks(machine):
    result = HostRuntime(machine).run_pipeline(_stages(), 'async')
    start = {e.label: e.start for e in result.events}

    assert result.makespan == pytest.approx(5e-3)
    assert start['run:1'] == pytest.approx(1e-3)
    check_timeline(result.events)


def test_pipeline_thread_limit(machine):
    single = replace(machine, host=replace(machine.host, host_threads=1))
    stages = [Stage(f'h2p:{r}', r, 'h2p', nbytes=1_000_000) for r in range(4)]
    assert HostRuntime(single).run_pipeline(stages, 'async').makespan == pytest.approx(4e-3)
    assert HostRuntime(machine).run_pipeline(stages, 'async').makespan == pytest.approx(1e-3)


def test_async_pipeline_keeps_waves_when_greedy_is_worse(machine):
    two = replace(machine, host=replace(machine.host, host_threads=2))
    stages = [
        Stage('h2p:0', 0, 'h2p', seconds=9.0),
        Stage('run:0', 0, 'kernel', seconds=9.0),
        Stage('p2h:0', 0, 'p2h', seconds=19.0),
        Stage('run:1', 1, 'kernel', seconds=18.0),
        Stage('p2h:1', 1, 'p2h', seconds=14.0),
        Stage('h2p:2', 2, 'h2p', seconds=3.0),
        Stage('run:2', 2, 'kernel', seconds=13.0),
        Stage('p2h:2', 2, 'p2h', seconds=17.0),
        Stage('run:3', 3, 'kernel', seconds=10.0),
        Stage('p2h:3', 3, 'p2h', seconds=14.0),
    ]
    sync = HostRuntime(two).run_pipeline(stages, 'sync')
    overlapped = HostRuntime(two).run_pipeline(stages, 'async')

    assert sync.makespan == pytest.approx(51.0)
    assert overlapped.makespan == pytest.approx(51.0)
    check_timeline(overlapped.events)


def test_async_pipeline_never_slower_than_sync(machine, rng):
    for _ in range(300):
        threads = int(rng.integers(1, 5))
        config = replace(machine, host=replace(machine.host, host_threads=threads))
        stages = []
        for rank in range(int(rng.integers(1, machine.rank_count + 1))):
            for kind in ('h2p', 'kernel', 'p2h'):
                if rng.random() < 0.8:
                    stages.append(Stage(f'{kind}:{rank}', rank, kind, seconds=float(rng.integers(1, 21))))
        sync = HostRuntime(config).run_pipeline(stages, 'sync')
        runtime = HostRuntime(config)
        overlapped = runtime.run_pipeline(stages, 'async')

        assert overlapped.makespan <= sync.makespan + 1e-12
        assert runtime.now == pytest.approx(overlapped.makespan)
        assert len(runtime.events) == len(stages)


def test_pipeline_errors(machine):
    runtime = HostRuntime(machine)
    with pytest.raises(DependencyCycleError):
        runtime.run_pipeline([Stage('a', 0, 'h2p', 8, after=('b',)), Stage('b', 0, 'kernel', after=('a',))])
    with pytest.raises(ConfigError):
        runtime.run_pipeline([Stage('a', 0, 'h2p', 8, after=('missing',))])
    with pytest.raises(ConfigError):
        runtime.run_pipeline([Stage('a', 0, 'h2p', 8), Stage('a', 1, 'h2p', 8)])
    with pytest.raises(ConfigError):
        runtime.run_pipeline([Stage('a', 9, 'h2p', 8)])
    with pytest.raises(ConfigError):
        runtime.run_pipeline([], 'eager')
    with pytest.raises(ConfigError):
        Stage('a', 0, 'dma')


# ---------------------------------------------------------------------------
# Transfer experiments
# ---------------------------------------------------------------------------

def test_transfer_optimizations_shorten_the_timeline(machine):
    makespans = {}
    for mode in TIMELINE_MODES:
        events, record = transfer_timeline(mode, rows_per_dpu=512, dpus=16, machine=machine)
        if mode != 'async':
            check_timeline(events)
        assert record['variant'] == mode
        assert record['rows'] == 512 * 16
        makespans[mode] = record['makespan']

    assert makespans['naive'] > makespans['scatter'] > makespans['scatter_pooled']
    assert makespans['async'] <= makespans['scatter_pooled'] + 1e-12


def test_transfer_timeline_unknown_mode():
    with pytest.raises(ConfigError):
        transfer_timeline('zero-copy')


@pytest.mark.parametrize('shape', ['order', 'aggregation'])
def test_pipeline_gain(machine, shape):
    sync, overlapped = pipeline_gain(shape, rows_per_dpu=256, machine=machine)

    assert (sync['variant'], overlapped['variant']) == ('sync', 'async')
    assert overlapped['makespan'] <= sync['makespan'] + 1e-12
    assert sync['param'] == overlapped['param'] >= 0


@pytest.mark.slow
def test_async_gain_depends_on_the_pipeline_shape(machine):
    ordered = pipeline_gain('order', host_threads=1, machine=machine)
    aggregated = pipeline_gain('aggregation', machine=machine)

    assert ordered[0]['param'] >= 0.05
    assert aggregated[0]['param'] < 0.01


def test_calibration_streams_through_the_kernels(machine):
    fitted, records = calibrate(machine)

    assert [r['op'] for r in records] == ['mram_read', 'mram_write', 'wram']
    for record in records:
        assert record['cycles'] > 0
        assert abs(record['efficiency'] - 1.0) <= 0.10
    assert records[0]['efficiency'] == pytest.approx(1.0, abs=0.01)
    assert records[1]['efficiency'] == pytest.approx(1.0, abs=0.01)
    assert records[0]['dma_bytes'] == 16 * 16 * 2048
    assert fitted.dpu_count == machine.dpu_count


def test_streaming_bandwidth_follows_simulated_cycles(machine):
    # 256 queued 2 KiB jobs behind one 32-cycle issue round
    read = measure_bandwidth(machine, 'mram_read')
    assert read['cycles'] == 32 + 256 * machine.dma_cycles(2048)
    assert read['bandwidth'] == pytest.approx(machine.dma_bandwidth(2048), rel=1e-3)

    # 256 loads and one branch per pass at full occupancy
    wram = measure_bandwidth(machine, 'wram')
    assert wram['cycles'] == 16 * 16 * 257
    assert wram['bandwidth'] == pytest.approx(2048 * machine.clock_hz / 257)

    slow = MachineConfig.desk(dma_alpha=1.0)
    assert measure_bandwidth(slow, 'mram_write')['bandwidth'] < read['bandwidth']
    with pytest.raises(ConfigError):
        measure_bandwidth(machine, 'cache')
