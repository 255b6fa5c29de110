import os

import numpy as np
import pytest

from simtcnn import core
from simtcnn.mnist import default_data_dir
from simtcnn.tensors import LAYERS, TRAINABLE, Network

IMPLS = core.implementations()


@pytest.fixture(params=sorted(IMPLS))
def impl(request):
    """Each importable kernel implementation (compiled and/or python)."""
    return IMPLS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_network(rng, scale=0.3, output_phi=False) -> Network:
    # weights large enough that every layer operates well away from zero
    params = {}
    for name in TRAINABLE:
        spec = LAYERS[name]
        bound = scale * 6.0 / np.sqrt(spec.group_size)
        params[name] = rng.uniform(-bound, bound, spec.param_count).astype(np.float32)
    return Network.from_params(params, output_phi=output_phi)


def random_image(rng):
    return rng.random((29, 29), dtype=np.float32)


@pytest.fixture(scope="session")
def mnist_dir():
    d = default_data_dir()
    if d is None or not os.path.exists(os.path.join(d, "t10k-images-idx3-ubyte")):
        pytest.skip("MNIST files not available (set SIMTCNN_MNIST_DIR)")
    return d
