"""Pure numpy versions of the compiled kernels in ``_core.pyx``.

The arithmetic is vectorised across neurons but each neuron still sees its
terms in ascending order with float32 rounding after every step, so results
match the compiled module bit for bit.
"""

import math

import numpy as np

SEPARATE, FUSED, TREE = 0, 1, 2

IMPLEMENTATION = "python"

_F32 = np.float32


def fma32(acc, w, x):
    """Single-rounding ``acc + w*x`` for float32 operands (broadcasting).

    The product of two float32 values is exact in double. The double sum is
    exact up to the TwoSum error ``err``; rounding it to float32 is only
    wrong when it lands exactly on a float32 midpoint and ``err`` would have
    broken the tie, so that case is nudged one double ulp toward ``err``.
    """
    a = np.asarray(acc, dtype=np.float64)
    p = np.asarray(w, dtype=np.float64) * np.asarray(x, dtype=np.float64)
    s = a + p
    bb = s - a
    err = (a - (s - bb)) + (p - bb)
    r = s.astype(_F32)
    with np.errstate(over="ignore"):
        up = np.nextafter(s, np.inf).astype(_F32)
        down = np.nextafter(s, -np.inf).astype(_F32)
    tie = up != down
    if np.any(tie & (err != 0)):
        r = np.where(tie & (err > 0), up, np.where(tie & (err < 0), down, r))
    return r.astype(_F32)


def _step(acc, w, x, mode):
    if mode == FUSED:
        return fma32(acc, w, x)
    return acc + w * x


def _tree_rows(terms):
    # terms: (rows, n) float32; level-wise pairing, odd tail carried up
    while terms.shape[1] > 1:
        n = terms.shape[1]
        half = n // 2
        paired = terms[:, 0:2 * half:2] + terms[:, 1:2 * half:2]
        if n % 2:
            paired = np.concatenate([paired, terms[:, n - 1:n]], axis=1)
        terms = paired
    return terms[:, 0]


def _rows_sum(w, x, mode):
    """Row-wise ordered sums of ``w * x`` for 2-D float32 arrays."""
    rows, n = np.broadcast_shapes(w.shape, x.shape)
    if n == 0:
        return np.zeros(rows, dtype=_F32)
    if mode == TREE:
        return _tree_rows((w * x).astype(_F32, copy=False))
    acc = np.zeros(rows, dtype=_F32)
    for t in range(n):
        acc = _step(acc, w[:, t], x[:, t], mode)
    return acc


def ordered_sum(w, x, mode=SEPARATE):
    """Accumulate ``sum(w[j] * x[j])`` in single precision, ascending j."""
    w = np.ascontiguousarray(w, dtype=_F32)
    x = np.ascontiguousarray(x, dtype=_F32)
    if w.shape[0] != x.shape[0]:
        raise ValueError(f"length mismatch: {w.shape[0]} weights vs {x.shape[0]} inputs")
    return float(_rows_sum(w[None, :], x[None, :], mode)[0])


def phi(v):
    return float(_F32(1.7159 * math.tanh(6.0 * float(_F32(v)) / 9.0)))


def phi_array(a):
    # math.tanh is libm's tanh, the same routine the compiled module calls
    return np.array([1.7159 * math.tanh(6.0 * v / 9.0) for v in np.asarray(a, _F32).tolist()],
                    dtype=np.float64).astype(_F32)


def _patches(inp, stride, side):
    """(side*side, maps*26) rows: each map's 5x5 window row-major, then 1.0."""
    nin, h, _ = inp.shape
    view = np.lib.stride_tricks.sliding_window_view(inp, (5, 5), axis=(1, 2))
    win = view[:, ::stride, ::stride][:, :side, :side]          # (nin, side, side, 5, 5)
    win = win.reshape(nin, side * side, 25).transpose(1, 0, 2)  # (npix, nin, 25)
    out = np.ones((side * side, nin, 26), dtype=_F32)
    out[:, :, :25] = win
    return out.reshape(side * side, nin * 26)


def conv_layer(inp, w, stride, out, lo=0, hi=-1, mode=SEPARATE, lanes=False, activate=True):
    nout = w.shape[0]
    npix = out.shape[1]
    side = math.isqrt(npix)
    if hi < 0:
        hi = nout
    if (side * side != npix or w.shape[1] != inp.shape[0] or w.shape[2] != 26
            or out.shape[0] != nout):
        raise ValueError("conv_layer: inconsistent shapes")
    if (side - 1) * stride + 5 > inp.shape[1] or inp.shape[1] != inp.shape[2]:
        raise ValueError("conv_layer: window exceeds input")
    if not 0 <= lo <= hi <= nout:
        raise ValueError("conv_layer: bad map range")
    if hi == lo:
        return
    x = _patches(np.asarray(inp, _F32), stride, side)           # (npix, group)
    wm = np.asarray(w, _F32).reshape(nout, -1)[lo:hi]           # (maps, group)
    # every (map, pixel) pair is an independent accumulation lane
    wl = np.repeat(wm, npix, axis=0)
    xl = np.tile(x, (hi - lo, 1))
    acc = _rows_sum(wl, xl, mode).reshape(hi - lo, npix)
    out[lo:hi] = phi_array(acc.ravel()).reshape(acc.shape) if activate else acc


def fc_layer(inp, w, out, lo=0, hi=-1, mode=SEPARATE, activate=True):
    inp = np.asarray(inp, _F32)
    w = np.asarray(w, _F32)
    nout, row = w.shape
    if hi < 0:
        hi = nout
    if row != inp.shape[0] + 1 or out.shape[0] != nout or not 0 <= lo <= hi <= nout:
        raise ValueError("fc_layer: inconsistent shapes")
    if hi == lo:
        return
    x = np.append(inp, _F32(1.0))[None, :]
    acc = _rows_sum(w[lo:hi], x, mode)
    out[lo:hi] = phi_array(acc) if activate else acc


def fc_layer_lanes(inp, wt, out, lo=0, hi=-1, mode=SEPARATE, activate=True):
    fc_layer(inp, np.asarray(wt).T, out, lo, hi, mode, activate)
