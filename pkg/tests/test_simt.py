import numpy as np
import pytest

from simtcnn.errors import (
    BarrierDivergenceError,
    ConfigurationError,
    DataRaceError,
    LaunchError,
)
from simtcnn.simt import (
    CONCURRENT,
    DETERMINISTIC,
    Dim,
    LaunchConfig,
    SimtRuntime,
    barrier_sync,
    launch_kernel,
    schedule_warps,
    shared_alloc,
    warp_partition,
)


@pytest.fixture(params=[1, 4])
def runtime(request):
    with SimtRuntime(workers=request.param, seed=7) as rt:
        yield rt


# -- kernels used below -------------------------------------------------------------


def write_seven(ctx, out):
    out[0] = 7


def write_global_id(ctx, out):
    tpb = ctx.block_dim.x * ctx.block_dim.y
    block = ctx.block_id.x * ctx.grid_dim.y + ctx.block_id.y
    out[block * tpb + ctx.linear_id] = block * tpb + ctx.linear_id


def barrier_sum(ctx, out):
    n = ctx.block_dim.x * ctx.block_dim.y
    buf = shared_alloc(ctx, n)
    buf[ctx.linear_id] = ctx.linear_id
    yield barrier_sync(ctx)
    if ctx.linear_id == 0:
        out[ctx.block_id.x] = sum(buf[i] for i in range(n))


def thread0_skips_barrier(ctx, out):
    if ctx.linear_id == 0:
        return
    yield ctx.syncthreads()


def alloc_after_barrier(ctx, out):
    yield ctx.syncthreads()
    ctx.shared_alloc(4)


def mismatched_alloc(ctx, out):
    ctx.shared_alloc(4 if ctx.linear_id == 0 else 5)
    yield ctx.syncthreads()


def racy_write(ctx, out):
    out[0] = ctx.linear_id


def peeks_without_barrier(ctx, out):
    buf = ctx.shared_alloc(2)
    buf[ctx.linear_id] = 1.0
    out[ctx.linear_id] = buf[1 - ctx.linear_id]
    yield ctx.syncthreads()


def faulty(ctx, out):
    if ctx.thread_id == (1, 2):
        raise ZeroDivisionError("boom")
    out[ctx.linear_id] = 1


# -- launch semantics ---------------------------------------------------------------


def test_single_thread_writes_constant(runtime):
    out = np.zeros(1, np.float32)
    rep = launch_kernel(LaunchConfig((1, 1), (1, 1)), write_seven, out=out, runtime=runtime)
    assert out.tolist() == [7.0] and rep.threads_executed == 1


def test_c2_geometry_executes_1014_threads(runtime):
    cfg = LaunchConfig((6, 1), (13, 13))
    out = np.full(1014, -1.0)
    rep = runtime.launch(cfg, write_global_id, out)
    assert rep.threads_executed == 1014 == cfg.total_threads
    assert np.array_equal(out, np.arange(1014))


@pytest.mark.parametrize("grid,block", [((3, 2), (4, 5)), ((1, 1), (33, 1)), ((2, 1), (1, 7))])
@pytest.mark.parametrize("mode", [DETERMINISTIC, CONCURRENT])
def test_thread_count_and_unique_ids(runtime, grid, block, mode):
    cfg = LaunchConfig(grid, block)
    out = np.full(cfg.total_threads, -1.0)
    rep = runtime.launch(cfg, write_global_id, out, mode=mode, checked=True)
    assert rep.threads_executed == grid[0] * grid[1] * block[0] * block[1]
    assert np.array_equal(out, np.arange(cfg.total_threads))


def test_linear_thread_convention():
    cfg = LaunchConfig((1, 1), (13, 13))
    assert cfg.linear_thread((2, 3)) == 29
    assert cfg.thread_ids()[29] == Dim(2, 3)


@pytest.mark.parametrize("block", [(1, 1), (5, 5), (13, 13), (33, 1)])
def test_barrier_makes_shared_writes_visible(runtime, block):
    cfg = LaunchConfig((3, 1), block)
    n = block[0] * block[1]
    out = np.zeros(3, np.float64)
    rep = runtime.launch(cfg, barrier_sum, out, checked=True)
    assert out.tolist() == [n * (n - 1) / 2] * 3
    assert rep.threads_executed == 3 * n


@pytest.mark.parametrize("checked", [False, True])
def test_barrier_divergence_detected(runtime, checked):
    with pytest.raises(BarrierDivergenceError) as info:
        runtime.launch(LaunchConfig((2, 1), (4, 4)), thread0_skips_barrier, np.zeros(1),
                       checked=checked)
    assert info.value.thread_id == (0, 0)
    assert "block" in str(info.value)


def test_shared_alloc_contract():
    rt = SimtRuntime(workers=1)
    with pytest.raises(ConfigurationError):
        rt.launch(LaunchConfig((1, 1), (2, 2)), alloc_after_barrier, np.zeros(1), checked=True)
    with pytest.raises(ConfigurationError):
        rt.launch(LaunchConfig((1, 1), (2, 2)), mismatched_alloc, np.zeros(1))


def test_shared_alloc_zero_initialised():
    def read_cell(ctx, out):
        buf = ctx.shared_alloc(1)
        out[ctx.linear_id] = buf[0]

    out = np.full(4, 9.0)
    SimtRuntime(workers=1).launch(LaunchConfig((1, 1), (2, 2)), read_cell, out)
    assert out.tolist() == [0.0] * 4


def test_shared_cells_single_precision_by_default():
    seen = []

    def probe(ctx, out):
        seen.append(ctx.shared_alloc(1).dtype)

    SimtRuntime(workers=1).launch(LaunchConfig(1, 1), probe, np.zeros(1))
    SimtRuntime(workers=1, shared_double=True).launch(LaunchConfig(1, 1), probe, np.zeros(1))
    assert seen == [np.float32, np.float64]


def test_checked_mode_reports_output_race():
    with pytest.raises(DataRaceError):
        SimtRuntime(workers=1).launch(LaunchConfig((1, 1), (2, 1)), racy_write, np.zeros(1),
                                      checked=True)


def test_checked_mode_rejects_implicit_warp_sync():
    with pytest.raises(DataRaceError):
        SimtRuntime(workers=1).launch(LaunchConfig((1, 1), (2, 1)), peeks_without_barrier,
                                      np.zeros(2), checked=True)


def test_kernel_fault_carries_ids(runtime):
    with pytest.raises(LaunchError) as info:
        runtime.launch(LaunchConfig((2, 1), (3, 3)), faulty, np.zeros(9))
    assert info.value.thread_id == (1, 2)
    assert isinstance(info.value.__cause__, ZeroDivisionError)


def test_yielding_anything_but_barrier_fails():
    def bad(ctx, out):
        yield 5

    with pytest.raises(LaunchError):
        SimtRuntime(workers=1).launch(LaunchConfig(1, 1), bad, np.zeros(1))


def test_launch_config_validation():
    with pytest.raises(ConfigurationError):
        LaunchConfig((0, 1), (1, 1))
    with pytest.raises(ConfigurationError):
        LaunchConfig((1, 1, 1), (1, 1))
    with pytest.raises(ConfigurationError):
        SimtRuntime(mode="eventual")
    with pytest.raises(ConfigurationError):
        SimtRuntime(workers=1).launch(LaunchConfig(1, 1), write_seven, np.zeros(1),
                                      engine="lanes")


# -- warps and scheduling -----------------------------------------------------------


def test_warp_partition_sizes():
    assert [len(w) for w in warp_partition(33)] == [32, 1]
    assert [len(w) for w in warp_partition(169)] == [32] * 5 + [9]
    assert sum(len(w) for w in warp_partition(1250)) == 1250


def test_schedule_warps_trace_shapes():
    tr = schedule_warps(LaunchConfig((1, 1), (13, 13)))
    assert tr.warp_sizes() == [32] * 5 + [9]
    # two barrier segments, warps round-robin in ascending order within each
    assert [(e.segment, e.warp) for e in tr.events] == [(0, w) for w in range(6)] + [
        (1, w) for w in range(6)]
    assert tr.dump().splitlines()[0] == "warp=0 block=(0,0) seg=0"


def test_deterministic_traces_repeat():
    cfg = LaunchConfig((3, 1), (9, 9))
    assert schedule_warps(cfg).dump() == schedule_warps(cfg).dump()


def test_concurrent_trace_reorders_warps():
    cfg = LaunchConfig((2, 1), (16, 16))
    tr = schedule_warps(cfg, CONCURRENT, seed=3)
    per_block = {}
    for e in tr.events:
        per_block.setdefault((e.block, e.segment), []).append(e.warp)
    orders = list(per_block.values())
    assert all(sorted(o) == list(range(8)) for o in orders)
    assert any(o != sorted(o) for o in orders)


def test_concurrent_and_deterministic_outputs_agree(runtime):
    cfg = LaunchConfig((4, 2), (6, 7))
    a = np.zeros(4 * 2, np.float64)
    b = np.zeros_like(a)

    def kernel(ctx, out):
        yield from barrier_sum(ctx, out)

    cfg2 = LaunchConfig((8, 1), (6, 7))
    runtime.launch(cfg2, kernel, a, mode=DETERMINISTIC)
    runtime.launch(cfg2, kernel, b, mode=CONCURRENT)
    assert a.tobytes() == b.tobytes()


# -- block isolation -----------------------------------------------------------------


def canary_kernel(ctx, out, width):
    # every block fills its shared buffer with a block-specific pattern, then
    # checks that nothing but its own pattern is visible after the barrier
    n = ctx.block_dim.x * ctx.block_dim.y
    buf = ctx.shared_alloc(n * width)
    block = ctx.block_id.x * ctx.grid_dim.y + ctx.block_id.y
    fresh = all(buf[ctx.linear_id * width + k] == 0 for k in range(width))
    for k in range(width):
        buf[ctx.linear_id * width + k] = 1000 * (block + 1) + k
    yield ctx.syncthreads()
    want = [1000 * (block + 1) + k for k in range(width)]
    ok = fresh and all(buf[t * width + k] == want[k] for t in range(n) for k in range(width))
    out[block * n + ctx.linear_id] = 1 if ok else -1


def run_canaries(launches, seed):
    rng = np.random.default_rng(seed)
    bad = 0
    with SimtRuntime(workers=4, seed=seed) as rt:
        for _ in range(launches):
            grid = (int(rng.integers(1, 5)), int(rng.integers(1, 3)))
            block = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
            cfg = LaunchConfig(grid, block)
            out = np.zeros(cfg.total_threads)
            mode = DETERMINISTIC if rng.random() < 0.5 else CONCURRENT
            rt.launch(cfg, canary_kernel, out, (int(rng.integers(1, 3)),), mode=mode)
            bad += int(np.sum(out != 1))
    return bad


def test_block_isolation_canaries_small():
    assert run_canaries(100, seed=11) == 0
