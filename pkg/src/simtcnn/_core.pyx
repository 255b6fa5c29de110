# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled accumulation kernels.

Every routine here must stay bit-for-bit interchangeable with
``simtcnn._fallback``: same term order, same rounding points. The extension
is built with ``-ffp-contract=off`` so ``a + b*c`` never becomes an FMA
behind our back; the fused mode calls ``fmaf`` explicitly.
"""

import numpy as np

from libc.math cimport tanh, fmaf
from libc.stdlib cimport malloc, free

cdef enum:
    SEPARATE = 0
    FUSED = 1
    TREE = 2

IMPLEMENTATION = "compiled"


cdef inline float _step(float acc, float w, float x, int mode) noexcept nogil:
    cdef float p
    if mode == FUSED:
        return fmaf(w, x, acc)
    p = w * x
    return acc + p


cdef inline float _phi(float v) noexcept nogil:
    cdef double t = tanh(6.0 * <double>v / 9.0)
    return <float>(1.7159 * t)


cdef float _tree(float* terms, Py_ssize_t n) noexcept nogil:
    # level-wise pairing, odd tail carried to the next level
    cdef Py_ssize_t half, i
    if n == 0:
        return 0.0
    while n > 1:
        half = n // 2
        for i in range(half):
            terms[i] = terms[2 * i] + terms[2 * i + 1]
        if n % 2:
            terms[half] = terms[n - 1]
            n = half + 1
        else:
            n = half
    return terms[0]


cdef float _sum_strided(const float* w, const float* x, Py_ssize_t n, int mode,
                        float* scratch) noexcept nogil:
    cdef Py_ssize_t j
    cdef float acc = 0.0
    if mode == TREE:
        for j in range(n):
            scratch[j] = w[j] * x[j]
        return _tree(scratch, n)
    for j in range(n):
        acc = _step(acc, w[j], x[j], mode)
    return acc


def ordered_sum(const float[::1] w, const float[::1] x, int mode=SEPARATE):
    """Accumulate ``sum(w[j] * x[j])`` in single precision, ascending j."""
    cdef Py_ssize_t n = w.shape[0]
    cdef float* scratch
    cdef float r
    if x.shape[0] != n:
        raise ValueError(f"length mismatch: {n} weights vs {x.shape[0]} inputs")
    if n == 0:
        return 0.0
    scratch = <float*>malloc(n * sizeof(float))
    with nogil:
        r = _sum_strided(&w[0], &x[0], n, mode, scratch)
    free(scratch)
    return float(r)


def phi(float v):
    return float(_phi(v))


def phi_array(const float[::1] a):
    cdef Py_ssize_t i, n = a.shape[0]
    out = np.empty(n, dtype=np.float32)
    cdef float[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _phi(a[i])
    return out


cdef void _gather(const float[:, :, ::1] inp, Py_ssize_t r0, Py_ssize_t c0,
                  float* dst, Py_ssize_t step) noexcept nogil:
    # per input map: 25 window pixels row-major, then 1.0 as the bias input
    cdef Py_ssize_t k, i, j, n = 0
    for k in range(inp.shape[0]):
        for i in range(5):
            for j in range(5):
                dst[n * step] = inp[k, r0 + i, c0 + j]
                n += 1
        dst[n * step] = 1.0
        n += 1


def conv_layer(const float[:, :, ::1] inp, const float[:, :, ::1] w, int stride,
               float[:, ::1] out, Py_ssize_t lo=0, Py_ssize_t hi=-1, int mode=SEPARATE,
               bint lanes=False, bint activate=True):
    """Stride-``stride`` 5x5 convolution for output maps ``lo..hi-1``.

    ``out`` is (maps, side*side). With ``lanes`` the pixels of one map advance
    together through the term sequence (warp lockstep); otherwise each pixel
    is finished before the next starts. Results are identical either way.
    """
    cdef Py_ssize_t nin = inp.shape[0], nout = w.shape[0]
    cdef Py_ssize_t group = w.shape[1] * w.shape[2]
    cdef Py_ssize_t npix = out.shape[1]
    cdef Py_ssize_t side = 0
    cdef Py_ssize_t m, p, t
    cdef bint lockstep = lanes and mode != TREE
    cdef float* xs
    cdef float* xt
    cdef float* acc
    cdef float* scratch
    cdef const float* wm
    cdef float wt
    if hi < 0:
        hi = nout
    while side * side < npix:
        side += 1
    if side * side != npix or w.shape[1] != nin or w.shape[2] != 26 or out.shape[0] != nout:
        raise ValueError("conv_layer: inconsistent shapes")
    if (side - 1) * stride + 5 > inp.shape[1] or inp.shape[1] != inp.shape[2]:
        raise ValueError("conv_layer: window exceeds input")
    if not 0 <= lo <= hi <= nout:
        raise ValueError("conv_layer: bad map range")
    xs = <float*>malloc(npix * group * sizeof(float))
    acc = <float*>malloc(npix * sizeof(float))
    scratch = <float*>malloc(group * sizeof(float))
    with nogil:
        for p in range(npix):
            if lockstep:
                _gather(inp, (p // side) * stride, (p % side) * stride, xs + p, npix)
            else:
                _gather(inp, (p // side) * stride, (p % side) * stride, xs + p * group, 1)
        for m in range(lo, hi):
            wm = &w[m, 0, 0]
            if lockstep:
                for p in range(npix):
                    acc[p] = 0.0
                # loops split by mode so each vectorises cleanly
                if mode == FUSED:
                    for t in range(group):
                        wt = wm[t]
                        xt = xs + t * npix
                        for p in range(npix):
                            acc[p] = fmaf(wt, xt[p], acc[p])
                else:
                    for t in range(group):
                        wt = wm[t]
                        xt = xs + t * npix
                        for p in range(npix):
                            acc[p] = acc[p] + wt * xt[p]
            else:
                for p in range(npix):
                    acc[p] = _sum_strided(wm, xs + p * group, group, mode, scratch)
            for p in range(npix):
                out[m, p] = _phi(acc[p]) if activate else acc[p]
    free(xs)
    free(acc)
    free(scratch)


def fc_layer(const float[::1] inp, const float[:, ::1] w, float[::1] out,
             Py_ssize_t lo=0, Py_ssize_t hi=-1, int mode=SEPARATE,
             bint activate=True):
    """Fully connected neurons ``lo..hi-1``, one at a time; bias is the last column."""
    cdef Py_ssize_t fan = inp.shape[0], nout = w.shape[0], row = w.shape[1]
    cdef Py_ssize_t n, t
    cdef float* xs
    cdef float* scratch
    cdef float a
    if hi < 0:
        hi = nout
    if row != fan + 1 or out.shape[0] != nout or not 0 <= lo <= hi <= nout:
        raise ValueError("fc_layer: inconsistent shapes")
    xs = <float*>malloc(row * sizeof(float))
    scratch = <float*>malloc(row * sizeof(float))
    with nogil:
        for t in range(fan):
            xs[t] = inp[t]
        xs[fan] = 1.0
        for n in range(lo, hi):
            a = _sum_strided(&w[n, 0], xs, row, mode, scratch)
            out[n] = _phi(a) if activate else a
    free(xs)
    free(scratch)


def fc_layer_lanes(const float[::1] inp, const float[:, ::1] wt, float[::1] out,
                   Py_ssize_t lo=0, Py_ssize_t hi=-1, int mode=SEPARATE,
                   bint activate=True):
    """Neurons ``lo..hi-1`` advanced together; ``wt`` is the (fan+1, neurons) transpose."""
    cdef Py_ssize_t fan = inp.shape[0], row = wt.shape[0], nout = wt.shape[1]
    cdef Py_ssize_t n, t
    cdef float* acc
    cdef float x
    cdef const float* wrow
    if hi < 0:
        hi = nout
    if row != fan + 1 or out.shape[0] != nout or not 0 <= lo <= hi <= nout:
        raise ValueError("fc_layer_lanes: inconsistent shapes")
    if mode == TREE:
        fc_layer(inp, np.ascontiguousarray(np.asarray(wt).T), out, lo, hi, mode, activate)
        return
    acc = <float*>malloc(nout * sizeof(float))
    with nogil:
        for n in range(lo, hi):
            acc[n] = 0.0
        for t in range(row):
            x = inp[t] if t < fan else 1.0
            wrow = &wt[t, 0]
            if mode == FUSED:
                for n in range(lo, hi):
                    acc[n] = fmaf(wrow[n], x, acc[n])
            else:
                for n in range(lo, hi):
                    acc[n] = acc[n] + wrow[n] * x
        for n in range(lo, hi):
            out[n] = _phi(acc[n]) if activate else acc[n]
    free(acc)
