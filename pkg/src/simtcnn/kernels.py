"""Data-parallel recognition: convolution, data collection and classification kernels.

Launch geometry per layer (grid, block -> threads)::

    C2  (6, 1)   (13, 13)  1014    one block per feature map,
    C3  (50, 1)  (5, 5)    1250    one thread per output pixel
    N1  (100, 1) (1, 1)     100    one block per neuron,
    N2  (10, 1)  (1, 1)      10    one thread each

A convolution thread samples its stride-2 window from every input map,
accumulates the weighted pixels and pair biases in canonical order, parks
the sum in its block's shared buffer, activates it and copies it to global
memory after a barrier. Each kernel also has a lockstep implementation
(``.lanes``) that the runtime may substitute; both give identical bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .errors import ConfigurationError
from .network import (
    ForwardResult,
    SimilarityVector,
    check_image,
    classify_argmax,
)
from .simt import DETERMINISTIC, LaunchConfig, SimtRuntime, default_runtime
from .tensors import C2, C3, KERNEL_SIDE, N1, N2, Network, index_map_g, layer_spec

THREAD_SETTINGS = {
    "C2": LaunchConfig((6, 1), (13, 13)),
    "C3": LaunchConfig((50, 1), (5, 5)),
    "N1": LaunchConfig((100, 1), (1, 1)),
    "N2": LaunchConfig((10, 1), (1, 1)),
}


def thread_settings(layer) -> LaunchConfig:
    name = str(getattr(layer, "name", layer)).upper()
    try:
        return THREAD_SETTINGS[name]
    except KeyError:
        raise ConfigurationError(f"no launch settings for layer {layer!r}") from None


@dataclass(frozen=True)
class KernelPlan:
    configs: dict

    @classmethod
    def default(cls) -> KernelPlan:
        return cls(dict(THREAD_SETTINGS))

    def thread_totals(self) -> dict:
        return {k: c.total_threads for k, c in self.configs.items()}


def collect_data(ctx, value, pitch, dest):
    """Store this thread's result at slot ``g(idx, idy)`` of ``dest``, then sync.

    Use as ``yield from collect_data(ctx, value, pitch, dest)``.
    """
    idx, idy = ctx.thread_id
    slot = index_map_g(idx, idy, pitch)
    if slot >= len(dest):
        raise IndexError(f"slot {slot} outside a {len(dest)}-cell buffer")
    dest[slot] = value
    yield ctx.syncthreads()


def convolution_kernel(ctx, out, inp, grouped, side, mode, stride):
    """One output pixel of feature map ``blockIdx.x``.

    ``inp`` is (maps_in, H, H), ``grouped`` the layer's (maps_out, maps_in, 26)
    parameters and ``out`` the layer's concatenated maps.
    """
    r = ctx.shared_alloc(side * side)
    fmap = ctx.block_id.x
    idx, idy = ctx.thread_id
    r0, c0 = idx * stride, idy * stride
    window = inp[:, r0:r0 + KERNEL_SIDE, c0:c0 + KERNEL_SIDE]
    terms = np.ones((inp.shape[0], KERNEL_SIDE * KERNEL_SIDE + 1), dtype=np.float32)
    terms[:, :-1] = window.reshape(inp.shape[0], -1)
    pre = core.ordered_sum(grouped[fmap].reshape(-1), terms.reshape(-1), mode)
    yield from collect_data(ctx, pre, side, r)
    slot = index_map_g(idx, idy, side)
    r[slot] = core.phi(r[slot])
    yield ctx.syncthreads()
    out[fmap * side * side + slot] = r[slot]


def _conv_lanes(config, blocks, out, inp, grouped, side, mode, stride):
    maps = out.reshape(grouped.shape[0], side * side)
    core.conv_layer(inp, grouped, stride, maps, blocks.start, blocks.stop, mode, True, True)


convolution_kernel.lanes = _conv_lanes


def classification_kernel(ctx, out, inputs, grouped, linear, mode, transposed=None):
    """Neuron ``blockIdx.x`` of a fully connected layer.

    ``inputs`` is the previous layer's activations with a trailing 1.0 for
    the bias term; ``linear`` skips the activation (output layer).
    ``transposed`` is a column-major weight copy used only by the lanes path.
    """
    cr = ctx.shared_alloc(1)
    neuron = ctx.block_id.x
    pre = core.ordered_sum(grouped[neuron], inputs, mode)
    yield from collect_data(ctx, pre, 1, cr)
    value = cr[0]
    out[neuron] = np.float32(value) if linear else core.phi(value)


def _fc_lanes(config, blocks, out, inputs, grouped, linear, mode, transposed=None):
    if transposed is None:
        transposed = np.ascontiguousarray(grouped.T)
    x = np.ascontiguousarray(inputs[:-1])
    core.fc_layer_lanes(x, transposed, out, blocks.start, blocks.stop, mode, not linear)


classification_kernel.lanes = _fc_lanes


def _launch(runtime, config, kernel, out, args, mode, engine, reports):
    rep = runtime.launch(config, kernel, out, args, mode=mode, engine=engine)
    if reports is not None:
        reports.append(rep)
    return rep


def kernel_convolution(layer, inputs, weights, runtime: SimtRuntime | None = None,
                       mode: str | None = None, accum="separate", engine="auto",
                       reports: list | None = None, stride: int = 2) -> np.ndarray:
    """Launch the convolution kernel for C2 or C3; returns the layer's flat activations.

    ``inputs`` is the 29x29 image for C2 or the 1014 C2 activations for C3.
    """
    spec = layer_spec(layer)
    if spec.kind != "conv":
        raise ConfigurationError(f"{spec.name} is not a convolution layer")
    rt = runtime or default_runtime()
    inp = np.ascontiguousarray(inputs, dtype=np.float32).reshape(
        spec.n_in, spec.in_side, spec.in_side)
    out = np.zeros(spec.neurons, dtype=np.float32)
    _launch(rt, thread_settings(spec), convolution_kernel, out,
            (inp, weights.grouped, spec.out_side, core.mode_code(accum), stride),
            mode, engine, reports)
    return out


def kernel_classify(layer, inputs, weights, runtime: SimtRuntime | None = None,
                    mode: str | None = None, accum="separate", linear: bool | None = None,
                    engine="auto", reports: list | None = None) -> np.ndarray:
    """Launch the classification kernel for N1 or N2; returns the layer's outputs."""
    spec = layer_spec(layer)
    if spec.kind != "fc":
        raise ConfigurationError(f"{spec.name} is not a fully connected layer")
    rt = runtime or default_runtime()
    x = np.asarray(inputs, dtype=np.float32).reshape(-1)
    if x.size != spec.n_in:
        raise ConfigurationError(f"{spec.name} expects {spec.n_in} inputs, got {x.size}")
    ext = np.append(x, np.float32(1.0))
    if linear is None:
        linear = spec is N2
    out = np.zeros(spec.n_out, dtype=np.float32)
    _launch(rt, thread_settings(spec), classification_kernel, out,
            (ext, weights.grouped, linear, core.mode_code(accum), weights.transposed),
            mode, engine, reports)
    return out


def forward_parallel(net: Network, image, runtime: SimtRuntime | None = None,
                     mode: str | None = None, accum="separate", engine="auto",
                     keep_activations: bool = False) -> ForwardResult:
    """Four kernel launches (C2, C3, N1, N2) followed by the argmax."""
    img = check_image(image)
    rt = runtime or default_runtime()
    reports = []
    kw = dict(runtime=rt, mode=mode, accum=accum, engine=engine, reports=reports)
    c2 = kernel_convolution(C2, img, net.c2, stride=net.stride, **kw)
    c3 = kernel_convolution(C3, c2, net.c3, stride=net.stride, **kw)
    n1 = kernel_classify(N1, c3, net.n1, **kw)
    n2 = kernel_classify(N2, n1, net.n2, linear=not net.output_phi, **kw)
    acts = None
    if keep_activations:
        acts = {"C1": img.reshape(-1).copy(), "C2": c2, "C3": c3, "N1": n1, "N2": n2.copy()}
    return ForwardResult(SimilarityVector(n2), classify_argmax(n2), acts, tuple(reports))


__all__ = [
    "DETERMINISTIC",
    "KernelPlan",
    "THREAD_SETTINGS",
    "classification_kernel",
    "collect_data",
    "convolution_kernel",
    "forward_parallel",
    "kernel_classify",
    "kernel_convolution",
    "thread_settings",
]
