"""Feature maps, flattened layouts and per-layer weight sets.

Layer ``i`` of the network holds ``j`` feature maps of ``M x M`` neurons.
On the device every map is stored as a flat row-major array and the maps
of one layer are concatenated, so neuron ``(j, r, c)`` lives at
``j*M*M + r*M + c``. Weights use one canonical order everywhere (memory,
weight file, accumulation): for each output map, for each input map, the
25 kernel weights row-major followed by that pair's bias; fully connected
layers store each neuron's fan-in weights followed by its bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DimensionError

KERNEL_SIDE = 5
KERNEL_SIZE = KERNEL_SIDE * KERNEL_SIDE
STRIDE = 2
INPUT_SIDE = 29


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "fc"
    n_in: int  # input maps (conv) or fan-in (fc)
    n_out: int  # output maps (conv) or neurons (fc)
    in_side: int = 0
    out_side: int = 0

    @property
    def group_size(self) -> int:
        """Parameters feeding one output neuron, bias(es) included."""
        if self.kind == "conv":
            return self.n_in * (KERNEL_SIZE + 1)
        return self.n_in + 1

    @property
    def param_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.n_out, self.n_in, KERNEL_SIZE + 1)
        return (self.n_out, self.n_in + 1)

    @property
    def param_count(self) -> int:
        return int(np.prod(self.param_shape))

    @property
    def neurons(self) -> int:
        if self.kind == "conv":
            return self.n_out * self.out_side * self.out_side
        return self.n_out


C2 = LayerSpec("C2", "conv", 1, 6, in_side=29, out_side=13)
C3 = LayerSpec("C3", "conv", 6, 50, in_side=13, out_side=5)
N1 = LayerSpec("N1", "fc", 1250, 100)
N2 = LayerSpec("N2", "fc", 100, 10)

LAYERS = {spec.name: spec for spec in (C2, C3, N1, N2)}
TRAINABLE = ("C2", "C3", "N1", "N2")


def layer_spec(layer) -> LayerSpec:
    if isinstance(layer, LayerSpec):
        return layer
    try:
        return LAYERS[str(layer).upper()]
    except KeyError:
        raise ConfigurationError(f"unknown layer {layer!r}; expected one of {TRAINABLE}") from None


def conv_output_side(in_side: int, kernel: int = KERNEL_SIDE, stride: int = STRIDE) -> int:
    return (in_side - kernel) // stride + 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def flatten_feature_map(rows) -> np.ndarray:
    """Row-major flattening of a square map: ``flat[i*M + j] == rows[i][j]``."""
    a = np.asarray(rows, dtype=np.float32)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"feature map must be square, got shape {a.shape}")
    return a.reshape(-1).copy()


def unflatten_feature_map(flat) -> np.ndarray:
    a = np.asarray(flat, dtype=np.float32)
    side = math.isqrt(a.size)
    if a.ndim != 1 or side * side != a.size:
        raise DimensionError(f"length {a.size} is not a square number")
    return a.reshape(side, side).copy()


def index_map_g(idx: int, idy: int, pitch: int) -> int:
    """Linear slot of thread ``(idx, idy)`` in a row of length ``pitch``."""
    if idx < 0 or idy < 0:
        raise IndexError(f"negative thread coordinate ({idx}, {idy})")
    if idy >= pitch:
        raise IndexError(f"column {idy} outside pitch {pitch}")
    return idx * pitch + idy


@dataclass(frozen=True)
class AcceptanceDomain:
    """The N x N window one convolution neuron samples from the layer below."""

    pixels: np.ndarray
    side: int = KERNEL_SIDE

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float32)
        if px.shape != (self.side, self.side):
            raise DimensionError(f"acceptance domain must be {self.side}x{self.side}, got {px.shape}")
        object.__setattr__(self, "pixels", _frozen(px))

    @classmethod
    def sample(cls, plane, row: int, col: int, stride: int = STRIDE) -> AcceptanceDomain:
        """Window feeding output neuron ``(row, col)`` of a stride-``stride`` layer."""
        plane = np.asarray(plane)
        r0, c0 = row * stride, col * stride
        if r0 + KERNEL_SIDE > plane.shape[0] or c0 + KERNEL_SIDE > plane.shape[1]:
            raise DimensionError(f"window at ({row}, {col}) leaves the {plane.shape} plane")
        return cls(plane[r0:r0 + KERNEL_SIDE, c0:c0 + KERNEL_SIDE])

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class FeatureMap:
    side: int
    values: np.ndarray
    layer_index: int
    map_index: int

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float32).reshape(-1)
        if vals.size != self.side * self.side:
            raise DimensionError(f"{vals.size} values for a {self.side}x{self.side} map")
        expected = {2: C2.out_side, 3: C3.out_side}.get(self.layer_index)
        if expected is not None and self.side != expected:
            raise DimensionError(f"layer {self.layer_index} maps are {expected}x{expected}")
        object.__setattr__(self, "values", _frozen(vals))

    def as_matrix(self) -> np.ndarray:
        return self.values.reshape(self.side, self.side)


def split_feature_maps(layer, flat) -> list[FeatureMap]:
    """Cut a layer's concatenated 1-D activations into its feature maps."""
    spec = layer_spec(layer)
    if spec.kind != "conv":
        raise ConfigurationError(f"{spec.name} has no feature maps")
    flat = np.asarray(flat, dtype=np.float32).reshape(-1)
    if flat.size != spec.neurons:
        raise DimensionError(f"{spec.name} has {spec.neurons} neurons, got {flat.size}")
    m = spec.out_side * spec.out_side
    index = int(spec.name[1])
    return [FeatureMap(spec.out_side, flat[j * m:(j + 1) * m], index, j) for j in range(spec.n_out)]


@dataclass(frozen=True, eq=False)
class LayerWeights:
    """Read-only parameters of one trainable layer in canonical order."""

    spec: LayerSpec
    params: np.ndarray

    def __post_init__(self):
        flat = np.array(self.params, dtype=np.float32).reshape(-1)
        if flat.size != self.spec.param_count:
            raise DimensionError(
                f"{self.spec.name} needs {self.spec.param_count} parameters, got {flat.size}")
        object.__setattr__(self, "params", _frozen(flat))

    @property
    def grouped(self) -> np.ndarray:
        """(maps_out, maps_in, 26) for conv layers, (neurons, fan_in + 1) for fc."""
        return self.params.reshape(self.spec.param_shape)

    @property
    def kernels(self) -> np.ndarray:
        return self.grouped[..., :-1]

    @property
    def biases(self) -> np.ndarray:
        """Per-(output, input) pair biases for conv layers, per-neuron for fc."""
        return self.grouped[..., -1]

    @property
    def effective_bias(self) -> np.ndarray:
        b = self.biases.astype(np.float64)
        return b.sum(axis=1) if self.spec.kind == "conv" else b

    @cached_property
    def transposed(self) -> np.ndarray:
        """(fan_in + 1, neurons) copy of a fully connected layer, for lockstep lanes."""
        t = np.ascontiguousarray(self.grouped.T)
        return _frozen(t)

    def same_as(self, other: LayerWeights) -> bool:
        return self.spec is other.spec and self.params.tobytes() == other.params.tobytes()

    def replace(self, params) -> LayerWeights:
        return LayerWeights(self.spec, params)


def make_weight_set(layer) -> LayerWeights:
    """Zero-initialised parameters for ``layer`` (C2, C3, N1 or N2)."""
    spec = layer_spec(layer)
    return LayerWeights(spec, np.zeros(spec.param_count, dtype=np.float32))


@dataclass(frozen=True, eq=False)
class Network:
    """The five-layer network: 29x29 input, C2, C3, N1, N2.

    ``output_phi`` applies the tanh activation at N2 as well; by default the
    output layer is linear.
    """

    c2: LayerWeights = field(default_factory=lambda: make_weight_set(C2))
    c3: LayerWeights = field(default_factory=lambda: make_weight_set(C3))
    n1: LayerWeights = field(default_factory=lambda: make_weight_set(N1))
    n2: LayerWeights = field(default_factory=lambda: make_weight_set(N2))
    output_phi: bool = False

    stride = STRIDE
    input_side = INPUT_SIDE

    def __post_init__(self):
        for name in TRAINABLE:
            w = getattr(self, name.lower())
            if w.spec is not LAYERS[name]:
                raise ConfigurationError(f"slot {name} holds {w.spec.name} weights")

    @classmethod
    def zeros(cls, output_phi: bool = False) -> Network:
        return cls(output_phi=output_phi)

    @classmethod
    def from_params(cls, params: dict, output_phi: bool = False) -> Network:
        return cls(*(LayerWeights(LAYERS[n], params[n]) for n in TRAINABLE), output_phi=output_phi)

    @classmethod
    def from_flat(cls, flat, output_phi: bool = False) -> Network:
        flat = np.asarray(flat, dtype=np.float32).reshape(-1)
        if flat.size != PARAMETER_TOTAL:
            raise DimensionError(f"network needs {PARAMETER_TOTAL} parameters, got {flat.size}")
        params, at = {}, 0
        for name in TRAINABLE:
            n = LAYERS[name].param_count
            params[name] = flat[at:at + n]
            at += n
        return cls.from_params(params, output_phi)

    def layer(self, name) -> LayerWeights:
        return getattr(self, layer_spec(name).name.lower())

    def weights(self) -> tuple[LayerWeights, ...]:
        return (self.c2, self.c3, self.n1, self.n2)

    def same_as(self, other: Network) -> bool:
        """Bitwise parameter equality."""
        return (self.output_phi == other.output_phi
                and all(a.same_as(b) for a, b in zip(self.weights(), other.weights())))

    def flat(self) -> np.ndarray:
        return np.concatenate([w.params for w in self.weights()])

    @property
    def parameter_count(self) -> int:
        return sum(w.params.size for w in self.weights())


NEURONS = {"C1": INPUT_SIDE * INPUT_SIDE, **{n: LAYERS[n].neurons for n in TRAINABLE}}
PARAMETER_TOTAL = sum(LAYERS[n].param_count for n in TRAINABLE)
