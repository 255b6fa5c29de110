"""Per-sample SGD backpropagation for the five-layer network.

Training runs in double precision on numpy arrays shaped like the canonical
parameter groups; the finished network is rounded to single precision for
recognition. Every (output map, input map) pair of a convolution layer has
its own bias, so each pair bias receives the full bias gradient of its
output map.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, TrainingError
from .kernels import forward_parallel
from .network import N_CLASSES, PHI_AMPLITUDE, forward_serial
from .simt import DETERMINISTIC, SimtRuntime
from .tensors import C2, C3, INPUT_SIDE, KERNEL_SIDE, LAYERS, N1, N2, STRIDE, TRAINABLE, Network

log = logging.getLogger(__name__)

PHI_SLOPE = 2.0 / 3.0
TARGET_SCALE = 0.85


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    epochs: int = 10
    seed: int = 0
    target_scale: float = TARGET_SCALE
    shuffle: bool = True
    momentum: float = 0.0
    lr_decay: float = 1.0  # multiplier applied after every epoch
    init_scale: float = 2.4

    def __post_init__(self):
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.lr_decay > 0:
            raise ConfigurationError(f"lr_decay must be positive, got {self.lr_decay}")
        if not 0 < self.target_scale < 1:
            raise ConfigurationError(f"target_scale must be in (0, 1), got {self.target_scale}")


def _phi(x):
    return PHI_AMPLITUDE * np.tanh(PHI_SLOPE * x)


def _phi_prime_from_output(y):
    # phi'(x) = A * s * (1 - tanh^2(s x)) with tanh(s x) = y / A
    t = y / PHI_AMPLITUDE
    return PHI_AMPLITUDE * PHI_SLOPE * (1.0 - t * t)


def params64(net: Network) -> dict:
    """Grouped float64 copies of the network parameters."""
    return {n: net.layer(n).grouped.astype(np.float64) for n in TRAINABLE}


def to_network(p: dict, output_phi: bool = False) -> Network:
    return Network.from_params({n: p[n].reshape(-1) for n in TRAINABLE}, output_phi=output_phi)


def init_params(seed: int = 0, scale: float = 2.4) -> dict:
    """Uniform in +-scale/fan_in per layer, fan_in counting the bias terms."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in TRAINABLE:
        spec = LAYERS[name]
        bound = scale / spec.group_size
        out[name] = rng.uniform(-bound, bound, size=spec.param_shape)
    return out


def init_network(seed: int = 0, scale: float = 2.4) -> Network:
    return to_network(init_params(seed, scale))


def _windows(maps, side_out):
    # (maps, H, H) -> (side_out*side_out, maps*25) rows of stride-2 windows
    win = sliding_window_view(maps, (KERNEL_SIDE, KERNEL_SIDE), axis=(1, 2))
    win = win[:, ::STRIDE, ::STRIDE][:, :side_out, :side_out]
    return win.transpose(1, 2, 0, 3, 4).reshape(side_out * side_out, -1)


def _forward(p, image, output_phi=False):
    x = np.asarray(image, dtype=np.float64).reshape(1, INPUT_SIDE, INPUT_SIDE)
    k2 = p["C2"][:, :, :-1].reshape(C2.n_out, -1)
    b2 = p["C2"][:, :, -1].sum(axis=1)
    p1 = _windows(x, C2.out_side)                       # (169, 25)
    a2 = _phi(p1 @ k2.T + b2)                            # (169, 6)
    m2 = a2.T.reshape(C2.n_out, C2.out_side, C2.out_side)
    k3 = p["C3"][:, :, :-1].reshape(C3.n_out, -1)        # (50, 150)
    b3 = p["C3"][:, :, -1].sum(axis=1)
    p2 = _windows(m2, C3.out_side)                       # (25, 150)
    a3 = _phi(p2 @ k3.T + b3)                            # (25, 50)
    f3 = a3.T.reshape(-1)                                # map-major, 1250
    w1 = p["N1"]
    a4 = _phi(w1[:, :-1] @ f3 + w1[:, -1])
    w2 = p["N2"]
    z5 = w2[:, :-1] @ a4 + w2[:, -1]
    a5 = _phi(z5) if output_phi else z5
    return {"p1": p1, "a2": a2, "p2": p2, "a3": a3, "f3": f3, "a4": a4, "a5": a5}


def forward_double(net_or_params, image, output_phi: bool | None = None) -> np.ndarray:
    """Double-precision similarity vector (no rounding to single)."""
    if isinstance(net_or_params, Network):
        p = params64(net_or_params)
        output_phi = net_or_params.output_phi if output_phi is None else output_phi
    else:
        p = net_or_params
    return _forward(p, image, bool(output_phi))["a5"]


def targets(label: int, scale: float = TARGET_SCALE) -> np.ndarray:
    t = np.full(N_CLASSES, -scale * PHI_AMPLITUDE)
    t[label] = scale * PHI_AMPLITUDE
    return t


def loss_and_grads(p, image, label, scale: float = TARGET_SCALE, output_phi=False):
    """Squared-error loss ``0.5*sum((y - t)^2)`` and its exact gradients."""
    f = _forward(p, image, output_phi)
    y = f["a5"]
    t = targets(label, scale)
    err = y - t
    loss = 0.5 * float(err @ err)
    d5 = err * _phi_prime_from_output(y) if output_phi else err
    g = {}
    a4 = f["a4"]
    g["N2"] = np.concatenate([np.outer(d5, a4), d5[:, None]], axis=1)
    d4 = (p["N2"][:, :-1].T @ d5) * _phi_prime_from_output(a4)
    g["N1"] = np.concatenate([np.outer(d4, f["f3"]), d4[:, None]], axis=1)
    df3 = p["N1"][:, :-1].T @ d4
    d3 = df3.reshape(C3.n_out, -1).T * _phi_prime_from_output(f["a3"])   # (25, 50)
    gk3 = (d3.T @ f["p2"]).reshape(C3.n_out, C3.n_in, -1)
    gb3 = d3.sum(axis=0)
    g["C3"] = np.concatenate(
        [gk3, np.broadcast_to(gb3[:, None, None], (C3.n_out, C3.n_in, 1))], axis=2)
    k3 = p["C3"][:, :, :-1].reshape(C3.n_out, -1)
    dp2 = (d3 @ k3).reshape(C3.out_side, C3.out_side, C3.n_in, KERNEL_SIDE, KERNEL_SIDE)
    dm2 = np.zeros((C2.n_out, C2.out_side, C2.out_side))
    for r in range(C3.out_side):
        for c in range(C3.out_side):
            dm2[:, 2 * r:2 * r + KERNEL_SIDE, 2 * c:2 * c + KERNEL_SIDE] += dp2[r, c]
    d2 = dm2.reshape(C2.n_out, -1).T * _phi_prime_from_output(f["a2"])   # (169, 6)
    gk2 = (d2.T @ f["p1"]).reshape(C2.n_out, C2.n_in, -1)
    gb2 = d2.sum(axis=0)
    g["C2"] = np.concatenate([gk2, gb2[:, None, None]], axis=2)
    return loss, g, int(np.argmax(y))


def loss_only(p, image, label, scale: float = TARGET_SCALE, output_phi=False) -> float:
    err = _forward(p, image, output_phi)["a5"] - targets(label, scale)
    return 0.5 * float(err @ err)


def gradient_check(p, image, label, per_layer: int = 20, eps: float = 1e-6, seed: int = 0,
                   output_phi: bool = False) -> dict:
    """Relative error of analytic vs central-difference gradients.

    Returns ``{layer: [(flat_index, analytic, numeric, rel_err), ...]}``.
    Relative error is ``|a - n| / max(|a|, |n|, 1e-10)``.
    """
    rng = np.random.default_rng(seed)
    _, grads, _ = loss_and_grads(p, image, label, output_phi=output_phi)
    out = {}
    for name in TRAINABLE:
        flat = p[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        rows = []
        for i in rng.choice(flat.size, size=min(per_layer, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            lp = loss_only(p, image, label, output_phi=output_phi)
            flat[i] = old - eps
            lm = loss_only(p, image, label, output_phi=output_phi)
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            ana = float(gflat[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-10)
            rows.append((int(i), ana, num, rel))
        out[name] = rows
    return out


@dataclass
class EpochLog:
    epoch: int
    loss: float
    acc: float

    def line(self) -> str:
        return f"epoch={self.epoch} loss={self.loss:.6f} acc={self.acc:.4f}"


@dataclass
class TrainResult:
    network: Network
    history: list = field(default_factory=list)


def train(net: Network | None, images, labels, cfg: TrainConfig = TrainConfig(),
          callback=None) -> TrainResult:
    """Per-sample SGD over ``images``; ``net=None`` starts from a seeded init.

    ``loss`` in the log is the mean per-sample loss over the epoch and
    ``acc`` the running training accuracy, both measured before each update.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if images.ndim == 2:
        images = images[None]
    if len(images) == 0:
        raise ConfigurationError("training set is empty")
    if len(images) != len(labels):
        raise ConfigurationError(f"{len(images)} images but {len(labels)} labels")
    if images.shape[1:] != (INPUT_SIDE, INPUT_SIDE):
        raise ConfigurationError(f"images must be 29x29, got {images.shape[1:]}")
    if labels.min() < 0 or labels.max() >= N_CLASSES:
        raise ConfigurationError("labels must be 0..9")
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        p = init_params(int(rng.integers(2 ** 63)), cfg.init_scale)
        output_phi = False
    else:
        p = params64(net)
        output_phi = net.output_phi
    velocity = {n: np.zeros_like(p[n]) for n in TRAINABLE}
    lr = cfg.lr
    history = []
    for epoch in range(1, int(cfg.epochs) + 1):
        order = rng.permutation(len(images)) if cfg.shuffle else np.arange(len(images))
        total, correct = 0.0, 0
        for k, i in enumerate(order):
            loss, g, guess = loss_and_grads(p, images[i], labels[i], cfg.target_scale,
                                            output_phi)
            if not math.isfinite(loss):
                raise TrainingError("loss is not finite", epoch=epoch, sample=int(k))
            total += loss
            correct += guess == labels[i]
            for n in TRAINABLE:
                if cfg.momentum:
                    velocity[n] *= cfg.momentum
                    velocity[n] -= lr * g[n]
                    p[n] += velocity[n]
                else:
                    p[n] -= lr * g[n]
        entry = EpochLog(epoch, total / len(images), correct / len(images))
        history.append(entry)
        log.info(entry.line())
        if callback is not None:
            callback(entry)
        lr *= cfg.lr_decay
    return TrainResult(to_network(p, output_phi), history)


@dataclass
class EvalReport:
    correct: int
    total: int
    confusion: np.ndarray  # [label, predicted]
    predictions: np.ndarray = field(repr=False, default=None)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def per_digit_accuracy(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.confusion) / np.maximum(rows, 1), np.nan)

    def lines(self) -> list[str]:
        out = [f"correct={self.correct} total={self.total} accuracy={self.accuracy:.4f}"]
        for d in range(N_CLASSES):
            out.append(f"confusion[{d}]=" + ",".join(str(int(v)) for v in self.confusion[d]))
        return out


def evaluate(net: Network, images, labels, backend: str = "serial", workers: int = 1,
             accum="separate") -> EvalReport:
    """Accuracy and confusion counts of ``net`` on a labelled set.

    ``backend="parallel"`` (alias ``"simt"``) recognizes through the kernel
    launches in deterministic mode; images are split across ``workers``.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if images.ndim == 2:
        images = images[None]
    if len(images) != len(labels):
        raise ConfigurationError(f"{len(images)} images but {len(labels)} labels")
    if backend not in ("serial", "parallel", "simt"):
        raise ConfigurationError(f"unknown backend {backend!r}")
    preds = np.empty(len(images), dtype=np.int64)

    def work(idx):
        if backend == "serial":
            for i in idx:
                preds[i] = forward_serial(net, images[i], accum=accum).digit
            return
        with SimtRuntime(workers=1, mode=DETERMINISTIC) as rt:
            for i in idx:
                preds[i] = forward_parallel(net, images[i], rt, accum=accum).digit

    chunks = [c for c in np.array_split(np.arange(len(images)), max(1, workers)) if len(c)]
    if len(chunks) <= 1:
        work(np.arange(len(images)))
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            for f in [pool.submit(work, c) for c in chunks]:
                f.result()
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    return EvalReport(int(np.trace(confusion)), len(images), confusion, preds)
