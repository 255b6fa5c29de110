"""The five-layer recognition network and its serial forward pass.

The serial pass is the reference every parallel execution is compared
against: float32 arithmetic, each neuron accumulating its terms in
canonical parameter order (kernel weights row-major, then the pair bias,
map by map; fully connected fan-in then bias).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .errors import ClassificationError, DimensionError, NumericDomainError
from .tensors import (
    C2,
    C3,
    INPUT_SIDE,
    KERNEL_SIZE,
    N1,
    N2,
    NEURONS,
    TRAINABLE,
    Network,
)

PHI_AMPLITUDE = 1.7159
N_CLASSES = 10


def activation_phi(x, checked: bool = False) -> float:
    """Scaled tanh, ``1.7159 * tanh(6x/9)``, rounded to single precision."""
    if checked and not math.isfinite(x):
        raise NumericDomainError(f"activation of non-finite value {x!r}")
    return core.phi(x)


def activation_phi_array(values) -> np.ndarray:
    return core.phi_array(np.ascontiguousarray(values, dtype=np.float32).reshape(-1))


def conv_neuron(weights, biases, patches, mode="separate") -> float:
    """One convolution neuron over one or more input maps.

    ``weights`` and ``patches`` hold 25 values per contributing input map
    (shape ``(maps, 25)``, ``(maps, 5, 5)`` or a single map's 25), ``biases``
    one bias per map pair. Terms are summed map by map, each map's 25
    products followed by its bias.
    """
    w = np.asarray(weights, dtype=np.float32).reshape(-1)
    x = np.asarray(patches, dtype=np.float32).reshape(-1)
    b = np.atleast_1d(np.asarray(biases, dtype=np.float32)).reshape(-1)
    if w.size != x.size or w.size != b.size * KERNEL_SIZE:
        raise DimensionError(
            f"{w.size} weights, {x.size} pixels and {b.size} biases do not line up")
    ws = np.concatenate([w.reshape(b.size, KERNEL_SIZE), b[:, None]], axis=1).reshape(-1)
    xs = np.concatenate([x.reshape(b.size, KERNEL_SIZE),
                         np.ones((b.size, 1), np.float32)], axis=1).reshape(-1)
    return activation_phi(core.ordered_sum(ws, xs, core.mode_code(mode)))


def fc_neuron(weights, bias, inputs, output: bool = False, mode="separate") -> float:
    """Fully connected neuron; ``output=True`` gives the linear N2 stage."""
    w = np.asarray(weights, dtype=np.float32).reshape(-1)
    u = np.asarray(inputs, dtype=np.float32).reshape(-1)
    if w.size != u.size:
        raise DimensionError(f"{w.size} weights for {u.size} inputs")
    ws = np.append(w, np.float32(bias))
    xs = np.append(u, np.float32(1.0))
    s = core.ordered_sum(ws, xs, core.mode_code(mode))
    return float(np.float32(s)) if output else activation_phi(s)


@dataclass(frozen=True)
class SimilarityVector:
    """Similarity of the input to each digit 0..9."""

    u: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float32).reshape(-1)
        if u.size != N_CLASSES:
            raise DimensionError(f"similarity vector needs {N_CLASSES} values, got {u.size}")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    def __len__(self):
        return N_CLASSES

    def __getitem__(self, i):
        return self.u[i]

    def __array__(self, dtype=None, copy=None):
        return self.u if dtype is None else self.u.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, SimilarityVector):
            return NotImplemented
        return self.u.tobytes() == other.u.tobytes()

    def __hash__(self):
        return hash(self.u.tobytes())


@dataclass(frozen=True)
class ForwardResult:
    similarities: SimilarityVector
    digit: int
    activations: dict | None = field(default=None, compare=False)
    launches: tuple = field(default=(), compare=False)


def classify_argmax(u) -> int:
    """Index of the largest similarity; ties go to the lowest digit."""
    arr = np.asarray(u.u if isinstance(u, SimilarityVector) else u, dtype=np.float64).reshape(-1)
    if arr.size != N_CLASSES:
        raise DimensionError(f"similarity vector needs {N_CLASSES} values, got {arr.size}")
    if np.isnan(arr).any():
        raise ClassificationError("similarity vector contains NaN")
    return int(np.argmax(arr))


def check_image(image) -> np.ndarray:
    img = np.ascontiguousarray(image, dtype=np.float32)
    if img.shape != (INPUT_SIDE, INPUT_SIDE):
        raise DimensionError(f"input image must be {INPUT_SIDE}x{INPUT_SIDE}, got {img.shape}")
    return img


def forward_serial(net: Network, image, accum="separate", keep_activations: bool = False
                   ) -> ForwardResult:
    """Neuron-by-neuron forward pass on the host."""
    img, n2, acts = _layers_serial(net, image, accum, keep_activations)
    return ForwardResult(SimilarityVector(n2), classify_argmax(n2), acts)


def similarities_serial(net: Network, image, accum="separate") -> np.ndarray:
    """The ten output values of the serial pass, NaN included, without classifying."""
    return _layers_serial(net, image, accum, False)[1]


def _layers_serial(net, image, accum, keep_activations):
    img = check_image(image)
    mode = core.mode_code(accum)
    c2 = np.empty((C2.n_out, C2.out_side ** 2), dtype=np.float32)
    core.conv_layer(img[None], net.c2.grouped, net.stride, c2, mode=mode)
    c3 = np.empty((C3.n_out, C3.out_side ** 2), dtype=np.float32)
    core.conv_layer(c2.reshape(C2.n_out, C2.out_side, C2.out_side), net.c3.grouped,
                    net.stride, c3, mode=mode)
    n1 = np.empty(N1.n_out, dtype=np.float32)
    core.fc_layer(c3.reshape(-1), net.n1.grouped, n1, mode=mode)
    n2 = np.empty(N2.n_out, dtype=np.float32)
    core.fc_layer(n1, net.n2.grouped, n2, mode=mode, activate=net.output_phi)
    acts = None
    if keep_activations:
        acts = {"C1": img.reshape(-1).copy(), "C2": c2.reshape(-1), "C3": c3.reshape(-1),
                "N1": n1, "N2": n2.copy()}
    return img, n2, acts


# counts as printed for the architecture; the C2->C3 connection figure does
# not follow from the C3 weight count and is reported alongside the implied one
PUBLISHED = {
    "neurons": {"C1": 841, "C2": 1014, "C3": 1250, "N1": 100, "N2": 10},
    "weights": {"C2": 156, "C3": 7800, "N1": 125100, "N2": 1010},
    "connections": {"C1C2": 26364, "C2C3": 32500, "C3N1": 125100, "N1N2": 1010},
}


@dataclass
class AuditReport:
    neurons: dict
    weights: dict
    connections: dict
    implied_connections: dict
    flags: dict

    @property
    def total_weights(self) -> int:
        return sum(self.weights.values())

    def matches_published(self) -> bool:
        return (self.neurons == PUBLISHED["neurons"] and self.weights == PUBLISHED["weights"]
                and self.connections == PUBLISHED["connections"])

    def lines(self) -> list[str]:
        out = [f"{k}.neurons={v}" for k, v in self.neurons.items()]
        out += [f"{k}.weights={v}" for k, v in self.weights.items()]
        out.append(f"total.weights={self.total_weights}")
        for k, v in self.connections.items():
            flag = self.flags.get(k)
            out.append(f"{k}.connections={v}" + (f" (flag: {flag})" if flag else ""))
            if k in self.implied_connections and flag:
                out.append(f"{k}.connections_implied={self.implied_connections[k]}")
        return out

    def render(self) -> str:
        return "\n".join(self.lines())


def audit_counts(net: Network | None = None) -> AuditReport:
    """Neuron, weight and connection counts of ``net`` (zero network by default)."""
    net = net or Network.zeros()
    neurons = dict(NEURONS)
    weights = {name: net.layer(name).params.size for name in TRAINABLE}
    # each neuron connects to its window/fan-in plus one bias per contributing map
    c1c2 = C2.neurons * (KERNEL_SIZE + 1)
    c2c3_printed = C3.neurons * (KERNEL_SIZE + 1)
    c2c3_implied = C3.neurons * C3.group_size
    c3n1 = N1.neurons * N1.group_size
    n1n2 = N2.neurons * N2.group_size
    connections = {"C1C2": c1c2, "C2C3": c2c3_printed, "C3N1": c3n1, "N1N2": n1n2}
    flags = {}
    if c2c3_printed != c2c3_implied:
        flags["C2C3"] = "inconsistent"
    return AuditReport(neurons, weights, connections, {"C2C3": c2c3_implied}, flags)
