"""A small SIMT runtime: grids of blocks of threads on host workers.

A kernel is a per-thread procedure ``kernel(ctx, out, *args)``. Kernels that
need a barrier are generator functions and write ``yield ctx.syncthreads()``;
the runtime resumes every thread of the block only after all of them have
arrived. Threads of a block run cooperatively on one host worker, switching
only at barriers, so within a barrier segment warps execute one after
another and lanes of a warp in ascending thread order. Blocks never share
state and are spread over a pool of host workers.

Kernels may also carry a ``lanes`` attribute, ``lanes(config, blocks, out,
*args)``, which executes a contiguous ``range`` of linear block ids with
all threads of a block advancing in lockstep. The runtime uses it when
neither checking nor tracing needs per-thread control.

Thread ids are 2-D ``(x, y)``; the linear id is ``x * block_dim.y + y`` so
that thread ``(idx, idy)`` of a ``(pitch, pitch)`` block is thread number
``idx * pitch + idy``. Warps are consecutive runs of 32 linear ids. Block
ids linearise the same way.
"""

from __future__ import annotations

import inspect
import itertools
import os
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import (
    BarrierDivergenceError,
    ConfigurationError,
    DataRaceError,
    LaunchError,
)

WARP_SIZE = 32
DETERMINISTIC = "deterministic"
CONCURRENT = "concurrent"
_MODES = (DETERMINISTIC, CONCURRENT)


class Dim(NamedTuple):
    x: int
    y: int = 1


def _dim(value) -> Dim:
    if isinstance(value, int):
        return Dim(value, 1)
    if len(value) > 2:
        raise ConfigurationError("3-D grids and blocks are not supported")
    return Dim(*value)


@dataclass(frozen=True)
class LaunchConfig:
    grid_dim: Dim
    block_dim: Dim

    def __post_init__(self):
        grid, block = _dim(self.grid_dim), _dim(self.block_dim)
        if min(grid) < 1 or min(block) < 1:
            raise ConfigurationError(f"grid {tuple(grid)} / block {tuple(block)} must be >= 1")
        object.__setattr__(self, "grid_dim", grid)
        object.__setattr__(self, "block_dim", block)

    @property
    def threads_per_block(self) -> int:
        return self.block_dim.x * self.block_dim.y

    @property
    def num_blocks(self) -> int:
        return self.grid_dim.x * self.grid_dim.y

    @property
    def total_threads(self) -> int:
        return self.num_blocks * self.threads_per_block

    def block_ids(self) -> list[Dim]:
        return list(self._block_ids)

    def thread_ids(self) -> list[Dim]:
        return list(self._thread_ids)

    @cached_property
    def _block_ids(self) -> tuple[Dim, ...]:
        gy = self.grid_dim.y
        return tuple(Dim(i // gy, i % gy) for i in range(self.num_blocks))

    @cached_property
    def _thread_ids(self) -> tuple[Dim, ...]:
        by = self.block_dim.y
        return tuple(Dim(i // by, i % by) for i in range(self.threads_per_block))

    def block_id(self, linear: int) -> Dim:
        return self._block_ids[linear]

    def linear_thread(self, tid) -> int:
        return tid[0] * self.block_dim.y + tid[1]

    def linear_block(self, bid) -> int:
        return bid[0] * self.grid_dim.y + bid[1]

    def __str__(self):
        return f"<<<({self.grid_dim.x},{self.grid_dim.y}), ({self.block_dim.x},{self.block_dim.y})>>>"


def warp_partition(threads: int, warp_size: int = WARP_SIZE) -> list[range]:
    """Linear thread ids of each warp; the last warp may be partial."""
    return [range(s, min(s + warp_size, threads)) for s in range(0, threads, warp_size)]


class _Barrier:
    __slots__ = ()

    def __repr__(self):
        return "BARRIER"


BARRIER = _Barrier()


class TraceEvent(NamedTuple):
    warp: int
    block: Dim
    segment: int


@dataclass
class ExecutionTrace:
    """Warp scheduling events in the order they were executed."""

    warp_size: int = WARP_SIZE
    events: list[TraceEvent] = field(default_factory=list)
    warps: list[range] = field(default_factory=list)

    def dump(self) -> str:
        return "\n".join(f"warp={e.warp} block=({e.block.x},{e.block.y}) seg={e.segment}"
                         for e in self.events)

    def warp_sizes(self) -> list[int]:
        return [len(w) for w in self.warps]


@dataclass
class LaunchReport:
    config: LaunchConfig
    threads_executed: int
    blocks_executed: int
    engine: str
    mode: str
    trace: ExecutionTrace | None = None


def _cells(array, key):
    """Flat indices addressed by ``array[key]``."""
    if isinstance(key, (int, np.integer)) and array.ndim == 1:
        k = int(key)
        return np.array([k + array.size if k < 0 else k])
    return np.arange(array.size).reshape(array.shape)[key].ravel()


class _SharedRaceError(DataRaceError):
    pass


class _CheckedShared:
    """Shared buffer that flags cross-thread reads/writes inside one segment.

    Reading a cell another thread wrote since the last barrier means the
    kernel relies on implicit warp synchrony, which the runtime rejects.
    """

    def __init__(self, data, block):
        self._data = data
        self._block = block
        self._writer = np.full(data.size, -1, dtype=np.int64)
        self._seg = np.full(data.size, -1, dtype=np.int64)

    def _cells(self, key):
        return _cells(self._data, key)

    def _check(self, cells, writing):
        me, seg = self._block.current, self._block.segment
        mine = self._writer[cells]
        clash = (self._seg[cells] == seg) & (mine != me) & (mine >= 0)
        if np.any(clash):
            other = int(mine[clash][0])
            what = "write" if writing else "read"
            raise _SharedRaceError(
                f"shared-memory {what} of a cell written by thread {other} without an "
                f"intervening barrier", self._block.block_id, self._block.tids[me])
        if writing:
            self._writer[cells] = me
            self._seg[cells] = seg

    def __getitem__(self, key):
        self._check(self._cells(key), False)
        return self._data[key]

    def __setitem__(self, key, value):
        self._check(self._cells(key), True)
        self._data[key] = value

    def __len__(self):
        return len(self._data)

    def __array__(self, dtype=None, copy=None):
        self._check(np.arange(self._data.size), False)
        return np.asarray(self._data, dtype=dtype)

    @property
    def shape(self):
        return self._data.shape


class _RaceLedger:
    """Owner of every output cell during a checked launch."""

    def __init__(self, out):
        self.owner = np.full(np.asarray(out).size, -1, dtype=np.int64)
        self.lock = threading.Lock()


class _CheckedOut:
    def __init__(self, out, ledger, writer, block_id, thread_id):
        self._out = out
        self._ledger = ledger
        self._writer = writer
        self._ids = (block_id, thread_id)

    def __setitem__(self, key, value):
        cells = _cells(self._out, key)
        with self._ledger.lock:
            prev = self._ledger.owner[cells]
            clash = (prev >= 0) & (prev != self._writer)
            if np.any(clash):
                raise DataRaceError(
                    f"output cell {int(cells[clash][0])} written by two threads", *self._ids)
            self._ledger.owner[cells] = self._writer
        self._out[key] = value

    def __getitem__(self, key):
        return self._out[key]

    @property
    def shape(self):
        return self._out.shape

    def __len__(self):
        return len(self._out)


class _BlockState:
    def __init__(self, config, block_id, checked, shared_dtype):
        self.config = config
        self.block_id = block_id
        self.checked = checked
        self.shared_dtype = shared_dtype
        self.buffers = []  # (count, array or checked proxy)
        self.segment = 0
        self.current = 0
        self.tids = config.thread_ids()


class BlockContext:
    """What one thread sees: its ids, its block's shared memory and barrier."""

    __slots__ = ("block_id", "thread_id", "linear_id", "_state", "_allocs")

    def __init__(self, state: _BlockState, thread_id: Dim, linear_id: int):
        self.block_id = state.block_id
        self.thread_id = thread_id
        self.linear_id = linear_id
        self._state = state
        self._allocs = 0

    @property
    def block_dim(self) -> Dim:
        return self._state.config.block_dim

    @property
    def grid_dim(self) -> Dim:
        return self._state.config.grid_dim

    @property
    def warp_id(self) -> int:
        return self.linear_id // WARP_SIZE

    def shared_alloc(self, count: int):
        """Zero-initialised shared cells; every thread of the block gets the same buffer.

        The k-th call in each thread maps to the block's k-th buffer, so all
        threads must request the same counts in the same order.
        """
        st = self._state
        if count < 1:
            raise ConfigurationError(f"shared allocation of {count} cells")
        if st.checked and st.segment > 0:
            raise ConfigurationError(
                f"shared_alloc after a barrier in block {tuple(self.block_id)}")
        k = self._allocs
        self._allocs += 1
        if k < len(st.buffers):
            have, buf = st.buffers[k]
            if have != count:
                raise ConfigurationError(
                    f"shared buffer {k} of block {tuple(self.block_id)} requested with "
                    f"{count} cells by thread {tuple(self.thread_id)}, {have} by others")
            return buf
        data = np.zeros(count, dtype=st.shared_dtype)
        buf = _CheckedShared(data, st) if st.checked else data
        st.buffers.append((count, buf))
        return buf

    def syncthreads(self) -> _Barrier:
        """Barrier token; use as ``yield ctx.syncthreads()``."""
        return BARRIER


def barrier_sync(ctx: BlockContext) -> _Barrier:
    return ctx.syncthreads()


def shared_alloc(ctx: BlockContext, count: int):
    return ctx.shared_alloc(count)


class SimtRuntime:
    """Launches kernels over grids; owns the host worker pool.

    ``mode`` is ``"deterministic"`` (warps round-robin in ascending id per
    barrier segment, blocks in ascending order) or ``"concurrent"`` (warp
    and block order chosen at run time, blocks spread over ``workers``).
    ``checked`` turns on race, divergence and allocation checks.
    """

    def __init__(self, workers: int | None = None, mode: str = DETERMINISTIC,
                 checked: bool = False, trace: bool = False, shared_double: bool = False,
                 seed: int | None = None):
        if mode not in _MODES:
            raise ConfigurationError(f"mode must be one of {_MODES}, got {mode!r}")
        self.workers = max(1, workers or os.cpu_count() or 1)
        self.mode = mode
        self.checked = checked
        self.trace = trace
        self.shared_dtype = np.float64 if shared_double else np.float32
        self._seed = seed
        self._seq = itertools.count()
        self._pool = None
        self._pool_lock = threading.Lock()

    # pool management -------------------------------------------------------

    def _executor(self):
        with self._pool_lock:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(self.workers, thread_name_prefix="simt-block")
            return self._pool

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _rng(self, salt=0):
        if self._seed is None:
            return random.Random()
        return random.Random(f"{self._seed}:{salt}")

    # launching --------------------------------------------------------------

    def launch(self, config, kernel, out, args=(), *, mode=None, checked=None, trace=None,
               engine="auto") -> LaunchReport:
        """Run ``kernel`` once per (block, thread) of ``config`` and wait for it."""
        if not isinstance(config, LaunchConfig):
            config = LaunchConfig(*config)
        mode = mode or self.mode
        if mode not in _MODES:
            raise ConfigurationError(f"mode must be one of {_MODES}, got {mode!r}")
        checked = self.checked if checked is None else checked
        trace = self.trace if trace is None else trace
        lanes = getattr(kernel, "lanes", None)
        if engine not in ("auto", "threads", "lanes"):
            raise ConfigurationError(f"unknown engine {engine!r}")
        if engine == "lanes" and lanes is None:
            raise ConfigurationError(f"{kernel!r} has no lockstep implementation")
        use_lanes = lanes is not None and engine != "threads" and not checked and not trace
        if use_lanes:
            return self._launch_lanes(config, lanes, out, args, mode)
        blocks = config.block_ids()
        if mode == CONCURRENT:
            self._rng("blocks").shuffle(blocks)
        return self._launch_threads(config, kernel, out, args, blocks, mode, checked, trace)

    def _launch_lanes(self, config, lanes, out, args, mode):
        n = config.num_blocks
        parts = min(self.workers, n)
        size = -(-n // parts)
        chunks = [range(lo, min(lo + size, n)) for lo in range(0, n, size)]
        if mode == CONCURRENT:
            self._rng("chunks").shuffle(chunks)
        if len(chunks) == 1:
            lanes(config, chunks[0], out, *args)
        else:
            futures = [self._executor().submit(lanes, config, c, out, *args) for c in chunks]
            for f in futures:
                f.result()
        return LaunchReport(config, n * config.threads_per_block, n, "lanes", mode)

    def _launch_threads(self, config, kernel, out, args, blocks, mode, checked, trace):
        ledger = _RaceLedger(out) if checked else None
        run = self._block_runner(config, kernel, out, args, mode, checked, trace, ledger)
        if len(blocks) == 1 or self.workers == 1:
            results = [run(b) for b in blocks]
        else:
            results = list(self._executor().map(run, blocks))
        report = LaunchReport(config, sum(r[0] for r in results), len(results), "threads", mode)
        if trace:
            events = [e for r in results for e in r[1]]
            if mode == DETERMINISTIC:
                events.sort(key=lambda e: (config.linear_block(e[1].block), e[0]))
            else:
                events.sort(key=lambda e: e[0])
            report.trace = ExecutionTrace(
                events=[e[1] for e in events],
                warps=warp_partition(config.threads_per_block))
        return report

    def _block_runner(self, config, kernel, out, args, mode, checked, trace, ledger):
        tids = config.thread_ids()
        warps = warp_partition(len(tids))
        shuffle = mode == CONCURRENT
        seq = self._seq
        shared_dtype = self.shared_dtype
        is_gen = inspect.isgeneratorfunction(kernel) or inspect.isgeneratorfunction(
            getattr(kernel, "__call__", None))

        def run(block):
            state = _BlockState(config, block, checked, shared_dtype)
            rng = self._rng(("warps", block)) if shuffle else None
            events = []
            threads = []
            for lin, tid in enumerate(tids):
                ctx = BlockContext(state, tid, lin)
                target = out
                if checked:
                    writer = config.linear_block(block) * len(tids) + lin
                    target = _CheckedOut(out, ledger, writer, block, tid)
                threads.append((ctx, target))

            def fault(exc, lin):
                # contract violations keep their own type; anything else is a fault
                if isinstance(exc, (LaunchError, ConfigurationError)):
                    return exc
                err = LaunchError(f"kernel fault: {exc!r}", block, tids[lin])
                err.__cause__ = exc
                return err

            if not is_gen:
                # straight-line kernel: no barriers, one segment
                order = list(range(len(warps)))
                if rng:
                    rng.shuffle(order)
                for w in order:
                    if trace:
                        events.append((next(seq), TraceEvent(w, block, 0)))
                    for lin in warps[w]:
                        state.current = lin
                        ctx, target = threads[lin]
                        try:
                            result = kernel(ctx, target, *args)
                        except Exception as exc:
                            raise fault(exc, lin)
                        if inspect.isgenerator(result):
                            raise LaunchError("kernel returned a generator; declare it as a "
                                              "generator function", block, tids[lin])
                return len(tids), events

            gens = {}
            for lin, (ctx, target) in enumerate(threads):
                gens[lin] = kernel(ctx, target, *args)
            alive = set(gens)
            while alive:
                order = list(range(len(warps)))
                if rng:
                    rng.shuffle(order)
                arrived, finished = [], []
                for w in order:
                    lanes = [lin for lin in warps[w] if lin in alive]
                    if not lanes:
                        continue
                    if trace:
                        events.append((next(seq), TraceEvent(w, block, state.segment)))
                    for lin in lanes:
                        state.current = lin
                        try:
                            token = next(gens[lin])
                        except StopIteration:
                            finished.append(lin)
                            continue
                        except Exception as exc:
                            raise fault(exc, lin)
                        if token is not BARRIER:
                            raise LaunchError(f"kernel yielded {token!r}; only "
                                              f"ctx.syncthreads() may be yielded",
                                              block, tids[lin])
                        arrived.append(lin)
                if arrived and finished:
                    gone = ", ".join(str(tuple(tids[i])) for i in sorted(finished)[:4])
                    raise BarrierDivergenceError(
                        f"barrier divergence in block {tuple(block)}: thread(s) {gone} exited "
                        f"while {len(arrived)} thread(s) wait at barrier {state.segment}",
                        block, tids[sorted(finished)[0]])
                alive = set(arrived)
                state.segment += 1
            return len(tids), events

        return run


_default_runtime = None


def default_runtime() -> SimtRuntime:
    global _default_runtime
    if _default_runtime is None:
        _default_runtime = SimtRuntime()
    return _default_runtime


def launch_kernel(config, kernel, args=(), out=None, runtime: SimtRuntime | None = None,
                  **options) -> LaunchReport:
    """Module-level launch: ``kernel<<<grid, block>>>(out, *args)``."""
    return (runtime or default_runtime()).launch(config, kernel, out, args, **options)


def schedule_warps(config, mode: str = DETERMINISTIC, kernel=None, seed=None) -> ExecutionTrace:
    """Trace of warp scheduling events for ``config``.

    Without a kernel, a two-segment kernel (one barrier) is traced.
    """
    def probe(ctx, out):
        yield ctx.syncthreads()

    rt = SimtRuntime(workers=1, mode=mode, trace=True, seed=seed)
    out = np.zeros(1, dtype=np.float32)
    return rt.launch(config, kernel or probe, out, mode=mode, trace=True, engine="threads").trace
