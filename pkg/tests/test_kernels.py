import numpy as np
import pytest

from conftest import random_image, random_network
from simtcnn.errors import ConfigurationError
from simtcnn.kernels import (
    THREAD_SETTINGS,
    KernelPlan,
    classification_kernel,
    collect_data,
    convolution_kernel,
    forward_parallel,
    kernel_classify,
    kernel_convolution,
    thread_settings,
)
from simtcnn.network import activation_phi, forward_serial
from simtcnn.simt import CONCURRENT, DETERMINISTIC, LaunchConfig, SimtRuntime
from simtcnn.tensors import LayerWeights, N1, Network

ENGINES = ["threads", "lanes"]


@pytest.fixture(scope="module")
def runtime():
    with SimtRuntime(workers=3, seed=5) as rt:
        yield rt


def test_thread_settings_match_table():
    assert thread_settings("C2") == LaunchConfig((6, 1), (13, 13))
    assert thread_settings("C3") == LaunchConfig((50, 1), (5, 5))
    assert thread_settings("N1") == LaunchConfig((100, 1), (1, 1))
    n2 = thread_settings("N2")
    assert (n2.grid_dim, n2.block_dim, n2.total_threads) == ((10, 1), (1, 1), 10)
    assert KernelPlan.default().thread_totals() == {"C2": 1014, "C3": 1250, "N1": 100, "N2": 10}
    with pytest.raises(ConfigurationError):
        thread_settings("S4")


def collect_ids(ctx, out, pitch):
    buf = ctx.shared_alloc(ctx.block_dim.x * ctx.block_dim.y)
    yield from collect_data(ctx, ctx.linear_id, pitch, buf)
    slot = ctx.thread_id.x * pitch + ctx.thread_id.y
    out[slot] = buf[slot]


def test_collect_data_slots():
    out = np.full(169, -1.0)
    SimtRuntime(workers=1).launch(LaunchConfig(1, (13, 13)), collect_ids, out, (13,),
                                  checked=True)
    assert out.tolist() == list(range(169))
    assert out[29] == 29  # thread (2, 3)
    single = np.full(1, -1.0)
    SimtRuntime(workers=1).launch(LaunchConfig(1, (1, 1)), collect_ids, single, (1,))
    assert single.tolist() == [0.0]


def test_collect_data_out_of_range():
    def bad(ctx, out):
        buf = ctx.shared_alloc(4)
        yield from collect_data(ctx, 1.0, 5, buf)

    with pytest.raises(Exception) as info:
        SimtRuntime(workers=1).launch(LaunchConfig(1, (2, 2)), bad, np.zeros(1))
    assert isinstance(info.value.__cause__, IndexError)


@pytest.mark.parametrize("engine", ENGINES)
def test_zero_c2(runtime, engine):
    out = kernel_convolution("C2", np.ones((29, 29)), Network.zeros().c2, runtime, engine=engine)
    assert out.shape == (1014,) and not out.any()


def test_bias_only_n1(runtime, rng):
    params = np.zeros((100, 1251), np.float32)
    params[:, -1] = rng.standard_normal(100).astype(np.float32)
    w = LayerWeights(N1, params)
    for engine in ENGINES:
        out = kernel_classify("N1", rng.random(1250), w, runtime, engine=engine)
        assert np.array_equal(out, np.array([activation_phi(b) for b in params[:, -1]],
                                            np.float32))


@pytest.mark.parametrize("engine", ENGINES)
@pytest.mark.parametrize("mode", [DETERMINISTIC, CONCURRENT])
def test_layers_equal_serial_activations(runtime, engine, mode, rng):
    net, img = random_network(rng), random_image(rng)
    ref = forward_serial(net, img, keep_activations=True).activations
    c2 = kernel_convolution("C2", img, net.c2, runtime, mode, engine=engine)
    c3 = kernel_convolution("C3", c2, net.c3, runtime, mode, engine=engine)
    n1 = kernel_classify("N1", c3, net.n1, runtime, mode, engine=engine)
    n2 = kernel_classify("N2", n1, net.n2, runtime, mode, engine=engine)
    for name, got in (("C2", c2), ("C3", c3), ("N1", n1), ("N2", n2)):
        assert got.tobytes() == ref[name].tobytes(), name


def test_launch_thread_counts(runtime, rng):
    for engine in ENGINES:
        res = forward_parallel(random_network(rng), random_image(rng), runtime, engine=engine)
        assert [r.threads_executed for r in res.launches] == [1014, 1250, 100, 10]
        assert [(r.config.grid_dim, r.config.block_dim) for r in res.launches] == [
            ((6, 1), (13, 13)), ((50, 1), (5, 5)), ((100, 1), (1, 1)), ((10, 1), (1, 1))]
        assert all(r.engine == engine for r in res.launches)


@pytest.mark.parametrize("accum", ["separate", "fused", "tree"])
@pytest.mark.parametrize("mode", [DETERMINISTIC, CONCURRENT])
def test_forward_parallel_bitwise_serial(runtime, accum, mode, rng):
    for _ in range(3):
        net, img = random_network(rng), random_image(rng)
        ref = forward_serial(net, img, accum=accum)
        for engine in ENGINES:
            res = forward_parallel(net, img, runtime, mode, accum=accum, engine=engine)
            assert res.similarities == ref.similarities
            assert res.digit == ref.digit


def test_checked_concurrent_kernels_race_free(rng):
    net, img = random_network(rng), random_image(rng)
    with SimtRuntime(workers=4, mode=CONCURRENT, checked=True, seed=1) as rt:
        res = forward_parallel(net, img, rt)
    assert res.similarities == forward_serial(net, img).similarities
    assert all(r.engine == "threads" for r in res.launches)


def test_each_output_written_exactly_once(rng):
    # checked mode forbids a second writer; every cell must also be covered
    net, img = random_network(rng), random_image(rng)
    with SimtRuntime(workers=2, checked=True) as rt:
        out = np.full(1014, np.nan, np.float32)
        rt.launch(THREAD_SETTINGS["C2"], convolution_kernel, out,
                  (img[None], net.c2.grouped, 13, 0, 2))
        assert not np.isnan(out).any()
        ext = np.append(np.ones(100, np.float32), np.float32(1))
        out = np.full(10, np.nan, np.float32)
        rt.launch(THREAD_SETTINGS["N2"], classification_kernel, out,
                  (ext, net.n2.grouped, True, 0))
        assert not np.isnan(out).any()


def test_zero_network_zero_image(runtime):
    res = forward_parallel(Network.zeros(), np.zeros((29, 29)), runtime)
    assert res.digit == 0 and not res.similarities.u.any()


def test_traced_forward(rng):
    with SimtRuntime(workers=1, trace=True) as rt:
        res = forward_parallel(random_network(rng), random_image(rng), rt)
    c2 = res.launches[0].trace
    assert c2.warp_sizes() == [32] * 5 + [9]
    # three segments per C2 block (two barriers), six warps each, six blocks
    assert len(c2.events) == 6 * 3 * 6


def test_wrong_layer_kinds(runtime):
    with pytest.raises(ConfigurationError):
        kernel_convolution("N1", np.zeros(1250), Network.zeros().n1, runtime)
    with pytest.raises(ConfigurationError):
        kernel_classify("C2", np.zeros((29, 29)), Network.zeros().c2, runtime)
    with pytest.raises(ConfigurationError):
        kernel_classify("N1", np.zeros(1000), Network.zeros().n1, runtime)
