"""Accumulation-mode deviation analysis and throughput measurement.

Three accumulation orders are compared: ``fused`` (one rounding per
multiply-add), ``separate`` (product rounded, then sum rounded) and
``tree`` (rounded products summed pairwise, level by level). The
recognition comparison runs two pipelines that differ only in this choice
and reports the spread of their output differences digit by digit.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import core
from .errors import ConfigurationError
from .kernels import forward_parallel
from .network import N_CLASSES, audit_counts, forward_serial, similarities_serial
from .simt import DETERMINISTIC, SimtRuntime
from .tensors import C3, KERNEL_SIZE, Network

TAGS = ("fused", "separate", "tree")
PRECISIONS = ("single", "double")

# the bit pattern a NaN output is reported with
CANONICAL_NAN = 0x7FFFFFFF


@dataclass(frozen=True)
class AccumMode:
    tag: str = "separate"
    precision: str = "single"

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ConfigurationError(f"accumulation tag must be one of {TAGS}, got {self.tag!r}")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(
                f"precision must be one of {PRECISIONS}, got {self.precision!r}")

    @classmethod
    def parse(cls, text) -> AccumMode:
        """``"fused"``, ``"tree:double"`` or an existing AccumMode."""
        if isinstance(text, AccumMode):
            return text
        tag, _, prec = str(text).partition(":")
        return cls(tag, prec or "single")

    def __str__(self):
        return self.tag if self.precision == "single" else f"{self.tag}:{self.precision}"


def _fma_double(acc: float, w: float, x: float) -> float:
    # Fraction -> float rounds to nearest even, so this is a true fused step
    if not (math.isfinite(acc) and math.isfinite(w) and math.isfinite(x)):
        return acc + w * x
    return float(Fraction(acc) + Fraction(w) * Fraction(x))


def _tree_double(terms: list[float]) -> float:
    while len(terms) > 1:
        paired = [terms[i] + terms[i + 1] for i in range(0, len(terms) - 1, 2)]
        if len(terms) % 2:
            paired.append(terms[-1])
        terms = paired
    return terms[0]


def accumulate(pairs, mode=AccumMode()) -> float:
    """Sum ``w*x`` over ``pairs`` in order under ``mode``.

    Single precision defers to the kernel core so the result is exactly what
    a neuron would compute; double precision uses the same orders at double
    width.
    """
    mode = AccumMode.parse(mode)
    pairs = list(pairs)
    if not pairs:
        return 0.0
    if mode.precision == "single":
        w = np.array([p[0] for p in pairs], dtype=np.float32)
        x = np.array([p[1] for p in pairs], dtype=np.float32)
        return core.ordered_sum(w, x, core.mode_code(mode.tag))
    ws = [float(p[0]) for p in pairs]
    xs = [float(p[1]) for p in pairs]
    if mode.tag == "tree":
        return _tree_double([a * b for a, b in zip(ws, xs)])
    acc = 0.0
    if mode.tag == "fused":
        for a, b in zip(ws, xs):
            acc = _fma_double(acc, a, b)
    else:
        for a, b in zip(ws, xs):
            acc = acc + a * b
    return acc


def exact_sum(pairs) -> Fraction:
    """Exact rational value of ``sum(w*x)`` for reference comparisons."""
    return sum((Fraction(float(w)) * Fraction(float(x)) for w, x in pairs), Fraction(0))


def _pipeline(net: Network, mode: AccumMode):
    if mode.precision == "double":
        from .trainer import forward_double  # float64 reference forward pass

        def run(image):
            return np.asarray(forward_double(net, image), dtype=np.float64)
        return run

    def run(image):
        return similarities_serial(net, image, accum=mode.tag).astype(np.float64)
    return run


@dataclass
class DivergenceReport:
    mode_a: str
    mode_b: str
    stddev: np.ndarray  # per digit, over the n recognitions
    max_abs_diff: float
    n: int
    argmax_agreement: float
    nan_detected: bool = False
    nan_bits: int | None = None
    differences: np.ndarray | None = field(default=None, repr=False)

    @property
    def max_stddev(self) -> float:
        return float(np.max(self.stddev))

    def across_digit_stddev(self) -> np.ndarray:
        """The alternative reading: spread over the 10 digits, per recognition."""
        if self.differences is None:
            raise ConfigurationError("report was built without keeping differences")
        return self.differences.std(axis=1)

    def lines(self) -> list[str]:
        out = [f"compare a={self.mode_a} b={self.mode_b} n={self.n}"]
        out += [f"stddev[{d}]={s:.3e}" for d, s in enumerate(self.stddev)]
        out.append(f"max_stddev={self.max_stddev:.3e}")
        out.append(f"max_abs_diff={self.max_abs_diff:.3e}")
        out.append(f"argmax_agreement={self.argmax_agreement:.6f}")
        if self.nan_detected:
            out.append(f"nan_detected=1 bits=0x{self.nan_bits:08X}")
        return out

    def records(self) -> list[Record]:
        recs = [Record(f"stddev_digit{d}", float(s), "similarity")
                for d, s in enumerate(self.stddev)]
        recs += [Record("max_stddev", self.max_stddev, "similarity"),
                 Record("max_abs_diff", self.max_abs_diff, "similarity"),
                 Record("argmax_agreement", self.argmax_agreement, "fraction"),
                 Record("runs", float(self.n), "count"),
                 Record("nan_detected", float(self.nan_detected), "flag")]
        return recs


def recognition_stddev(mode_a, mode_b, net: Network, images, n: int | None = None,
                       keep_differences: bool = False) -> DivergenceReport:
    """Spread of ``u_a - u_b`` per digit over ``n`` recognitions.

    Images are taken in order and cycled when ``n`` exceeds their number.
    Both pipelines share ``net``; a NaN in either output is flagged (and
    those runs left out of the statistics) instead of raising.
    """
    a, b = AccumMode.parse(mode_a), AccumMode.parse(mode_b)
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 2:
        images = images[None]
    if len(images) == 0:
        raise ConfigurationError("need at least one image")
    n = len(images) if n is None else n
    if n < 1:
        raise ConfigurationError(f"run count must be >= 1, got {n}")
    run_a, run_b = _pipeline(net, a), _pipeline(net, b)
    diffs = np.empty((n, N_CLASSES), dtype=np.float64)
    agree = 0
    nan_rows = np.zeros(n, dtype=bool)
    for i in range(n):
        img = images[i % len(images)]
        ua = run_a(img)
        ub = run_b(img)
        if np.isnan(ua).any() or np.isnan(ub).any():
            nan_rows[i] = True
            diffs[i] = np.nan
            continue
        diffs[i] = ua - ub
        agree += int(np.argmax(ua) == np.argmax(ub))
    good = diffs[~nan_rows]
    if len(good):
        std = good.std(axis=0)
        max_abs = float(np.max(np.abs(good)))
        agreement = agree / len(good)
    else:
        std = np.zeros(N_CLASSES)
        max_abs, agreement = 0.0, 0.0
    nan = bool(nan_rows.any())
    return DivergenceReport(str(a), str(b), std, max_abs, n, agreement, nan,
                            CANONICAL_NAN if nan else None,
                            diffs if keep_differences else None)


def is_canonical_nan(value) -> bool:
    bits = int(np.float32(value).view(np.uint32))
    return (bits & 0x7FFFFFFF) > 0x7F800000


def flops_per_recognition() -> int:
    """Two operations per multiply-add over every weighted connection.

    C3 counts its 25 kernel weights per (output, input) pair; its pair biases
    are folded as the audit's printed figure does not separate them.
    """
    rep = audit_counts()
    c3_effective = C3.n_in * KERNEL_SIZE * rep.neurons["C3"]
    return 2 * (rep.connections["C1C2"] + c3_effective
                + rep.connections["C3N1"] + rep.connections["N1N2"])


# -- throughput ------------------------------------------------------------------


BACKENDS = ("serial", "parallel")


def _run_serial(net, images, accum):
    for img in images:
        forward_serial(net, img, accum=accum)


def _run_parallel(net, images, accum, runtimes, pool):
    # every worker owns a single-lane runtime and a contiguous share of the images
    chunks = [c for c in np.array_split(np.arange(len(images)), len(runtimes)) if len(c)]

    def work(rt, idx):
        for i in idx:
            forward_parallel(net, images[i], rt, accum=accum, engine="lanes")

    if len(chunks) == 1:
        work(runtimes[0], chunks[0])
        return
    for f in [pool.submit(work, rt, c) for rt, c in zip(runtimes, chunks)]:
        f.result()


class _Bench:
    """Timing harness owning the worker pool and per-worker runtimes."""

    def __init__(self, net, images, workers, accum):
        self.net, self.images, self.accum = net, images, accum
        self.workers = workers
        self.runtimes = [SimtRuntime(workers=1, mode=DETERMINISTIC) for _ in range(workers)]
        self.pool = ThreadPoolExecutor(workers, thread_name_prefix="bench")
        # warm the pool and per-layer caches outside any timed region
        _run_parallel(net, images[:workers], accum, self.runtimes, self.pool)

    def close(self):
        self.pool.shutdown()

    def time(self, backend, n) -> float:
        batch = self.images[np.arange(n) % len(self.images)]
        t0 = time.perf_counter()
        if backend == "serial":
            _run_serial(self.net, batch, self.accum)
        else:
            _run_parallel(self.net, batch, self.accum, self.runtimes, self.pool)
        return time.perf_counter() - t0


def _check_bench_args(backend, workers, repeat):
    if backend not in BACKENDS:
        raise ConfigurationError(f"backend must be one of {BACKENDS}, got {backend!r}")
    if repeat < 1:
        raise ConfigurationError(f"repeat must be >= 1, got {repeat}")
    if workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {workers}")


def _as_batch(images):
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 2:
        images = images[None]
    if len(images) == 0:
        raise ConfigurationError("need at least one image")
    return images


def measure_rate(net: Network, images, backend: str = "serial", workers: int = 1,
                 n: int | None = None, accum="separate", repeat: int = 1) -> float:
    """Best-of-``repeat`` recognitions per second over ``n`` images."""
    _check_bench_args(backend, workers, repeat)
    images = _as_batch(images)
    n = len(images) if n is None else n
    bench = _Bench(net, images, workers, accum)
    try:
        return n / min(bench.time(backend, n) for _ in range(repeat))
    finally:
        bench.close()


@dataclass
class ThroughputReport:
    serial_rate: float
    parallel_rate: float
    backend: str
    workers: int
    n: int
    flops_per_recognition: int
    rates_by_n: dict = field(default_factory=dict)

    @property
    def speedup(self) -> float:
        return self.parallel_rate / self.serial_rate

    @property
    def flatness(self) -> float:
        """Relative rate drift between the smallest and largest ``n`` measured."""
        if len(self.rates_by_n) < 2:
            return 0.0
        lo, hi = min(self.rates_by_n), max(self.rates_by_n)
        return abs(self.rates_by_n[hi] - self.rates_by_n[lo]) / self.rates_by_n[lo]

    def gflops(self, rate: float) -> float:
        return rate * self.flops_per_recognition / 1e9

    def lines(self) -> list[str]:
        out = [f"bench backend={self.backend} workers={self.workers} n={self.n}",
               f"serial_rate={self.serial_rate:.1f} rec/s "
               f"({self.gflops(self.serial_rate):.3f} GFLOP/s)",
               f"speedup={self.speedup:.3f}",
               f"flops_per_recognition={self.flops_per_recognition}"]
        if self.backend != "serial":
            out.insert(2, f"{self.backend}_rate={self.parallel_rate:.1f} rec/s "
                          f"({self.gflops(self.parallel_rate):.3f} GFLOP/s)")
        for k in sorted(self.rates_by_n):
            out.append(f"rate[n={k}]={self.rates_by_n[k]:.1f} rec/s")
        if len(self.rates_by_n) >= 2:
            out.append(f"flatness={self.flatness:.3f}")
        return out

    def records(self) -> list[Record]:
        recs = [Record("serial_rate", self.serial_rate, "rec/s")]
        if self.backend != "serial":
            recs.append(Record(f"{self.backend}_rate", self.parallel_rate, "rec/s"))
        recs += [Record("speedup", self.speedup, "ratio"),
                Record("workers", float(self.workers), "count"),
                Record("flops_per_recognition", float(self.flops_per_recognition), "flop")]
        for k in sorted(self.rates_by_n):
            recs.append(Record(f"rate_n{k}", self.rates_by_n[k], "rec/s"))
        if len(self.rates_by_n) >= 2:
            recs.append(Record("flatness", self.flatness, "fraction"))
        return recs


def throughput_bench(net: Network, images, backend: str = "parallel", workers: int = 4,
                     repeat: int = 1, n: int | None = None, sizes=(), accum="separate"
                     ) -> ThroughputReport:
    """Rate of ``backend`` against the serial simulator on the same ``n`` images.

    Each of the ``repeat`` rounds times serial, ``backend`` and ``backend`` at
    every extra size in ``sizes`` back to back, and the best time of each is
    kept, so all rates see the same machine conditions. With
    ``backend="serial"`` the serial measurement is reused for both sides and
    the speedup is exactly 1.
    """
    _check_bench_args(backend, workers, repeat)
    images = _as_batch(images)
    n = len(images) if n is None else n
    if backend == "serial":
        workers = 1
    extra = [k for k in dict.fromkeys(sizes) if k != n]
    best = {"serial": math.inf, n: math.inf, **{k: math.inf for k in extra}}
    bench = _Bench(net, images, workers, accum)
    try:
        for _ in range(repeat):
            best["serial"] = min(best["serial"], bench.time("serial", n))
            if backend != "serial":
                best[n] = min(best[n], bench.time(backend, n))
            for k in extra:
                best[k] = min(best[k], bench.time(backend, k))
    finally:
        bench.close()
    serial = n / best["serial"]
    other = serial if backend == "serial" else n / best[n]
    rates = {n: other, **{k: k / best[k] for k in extra}}
    return ThroughputReport(serial, other, backend, workers, n, flops_per_recognition(), rates)


# -- records file -----------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    name: str
    value: float
    unit: str

    def format(self) -> str:
        return f"name={self.name} value={float(self.value)!r} unit={self.unit}"

    @classmethod
    def parse(cls, line: str) -> Record:
        fields = {}
        for tok in line.split():
            key, sep, val = tok.partition("=")
            if not sep:
                raise ValueError(f"malformed record token {tok!r}")
            fields[key] = val
        try:
            return cls(fields["name"], float(fields["value"]), fields["unit"])
        except KeyError as exc:
            raise ValueError(f"record line lacks {exc.args[0]!r}: {line!r}") from None


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.format() + "\n")


def read_records(path) -> list[Record]:
    with open(path) as fh:
        return [Record.parse(line) for line in fh if line.strip() and not line.startswith("#")]
