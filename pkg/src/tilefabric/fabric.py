"""Multi-rank world: symmetric heap, one-sided load/store, signal counters and
a global barrier.

Each rank is a thread, so every worker is schedulable at all times. Remote
stores carry no ordering of their own; a consumer that observes a signal
(``wait_signal``) is guaranteed to see every store the producer issued before
raising it (``atomic_signal``). Increments happen under the owning rank's
condition lock and a waiter re-reads the counter under that same lock before
returning, which gives the release/acquire pairing.
"""
from __future__ import annotations

import dataclasses
import gc
import logging
import os
import threading
import time
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

from .taxmeter import EventKind, TaskEvent, _sleep_ns, charge_launch

logger = logging.getLogger(__name__)

ELEM = np.float32
ELEM_BYTES = np.dtype(ELEM).itemsize
MAX_WORLD = 64
WATCHDOG_ENV = "TILEFABRIC_WATCHDOG_SECS"
DEFAULT_WATCHDOG = 10.0
YIELD_QUANTUM = 0.05


class FabricError(RuntimeError):
    pass


class ConfigError(FabricError, ValueError):
    pass


class BoundsError(FabricError, IndexError):
    pass


class DeadlockError(FabricError):
    """A wait exceeded the watchdog. ``slot`` names what was being awaited."""

    def __init__(self, rank, slot, expected=None, observed=None, detail=""):
        self.rank = rank
        self.slot = slot
        self.expected = expected
        self.observed = observed
        msg = f"rank {rank}: watchdog expired waiting on {slot}"
        if expected is not None:
            msg += f" (expected >= {expected}, observed {observed})"
        if detail:
            msg += f"; {detail}"
        super().__init__(msg)


class WorkerError(FabricError):
    """A rank's program raised; the whole world is torn down."""

    def __init__(self, rank, cause):
        self.rank = rank
        self.cause = cause
        super().__init__(f"rank {rank} failed: {type(cause).__name__}: {cause}")


class WorldAborted(FabricError):
    """Raised inside surviving workers once another worker has failed."""


def default_watchdog() -> float:
    raw = os.environ.get(WATCHDOG_ENV)
    if raw:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{WATCHDOG_ENV}={raw!r} is not a number") from None
    return DEFAULT_WATCHDOG


@dataclasses.dataclass(frozen=True)
class WorldConfig:
    """Shape and timing knobs of one simulated world.

    ``launch_cost`` and ``skew`` values are seconds. ``watchdog`` defaults to
    the ``TILEFABRIC_WATCHDOG_SECS`` environment variable, else 10 s.
    """

    world_size: int
    launch_cost: float = 20e-6
    skew: Mapping[int, float] = dataclasses.field(default_factory=dict)
    seed: int = 0
    spin_yield_every: int = 64
    watchdog: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.world_size, (int, np.integer)) or not 1 <= self.world_size <= MAX_WORLD:
            raise ConfigError(f"world_size must be an integer in [1, {MAX_WORLD}], got {self.world_size!r}")
        if self.launch_cost < 0:
            raise ConfigError("launch_cost must be >= 0")
        for rank, delay in self.skew.items():
            if not 0 <= rank < self.world_size:
                raise ConfigError(f"skew names rank {rank} outside world of size {self.world_size}")
            if delay < 0:
                raise ConfigError(f"skew delay for rank {rank} must be >= 0")
        if self.spin_yield_every < 1:
            raise ConfigError("spin_yield_every must be >= 1")
        if self.watchdog is None:
            object.__setattr__(self, "watchdog", default_watchdog())
        if self.watchdog <= 0:
            raise ConfigError("watchdog must be > 0")

    @property
    def launch_cost_ns(self) -> int:
        return int(round(self.launch_cost * 1e9))

    def skew_ns(self, rank: int) -> int:
        return int(round(self.skew.get(rank, 0.0) * 1e9))


def _normalize_index(shape: tuple, index) -> tuple:
    """Validate a basic index (ints and unit-step slices) against ``shape``.

    numpy silently clamps out-of-range slices, which would hide protocol
    bugs, so bounds are checked here explicitly.
    """
    if index is None or index is Ellipsis:
        return tuple(slice(0, n) for n in shape)
    if not isinstance(index, tuple):
        index = (index,)
    if len(index) > len(shape):
        raise BoundsError(f"index {index} has more dimensions than shape {shape}")
    out = []
    for dim, (ix, n) in enumerate(zip(index, shape)):
        if isinstance(ix, slice):
            if ix.step not in (None, 1):
                raise BoundsError("only unit-step slices are supported")
            start = 0 if ix.start is None else ix.start
            stop = n if ix.stop is None else ix.stop
            if not 0 <= start <= stop <= n:
                raise BoundsError(f"slice [{start}:{stop}] outside dimension {dim} of size {n}")
            out.append(slice(start, stop))
        elif isinstance(ix, (int, np.integer)):
            if not 0 <= ix < n:
                raise BoundsError(f"index {ix} outside dimension {dim} of size {n}")
            out.append(int(ix))
        else:
            raise BoundsError(f"unsupported index component {ix!r}")
    out.extend(slice(0, n) for n in shape[len(out):])
    return tuple(out)


class SymmetricTensor:
    """A named float32 tensor with one identically shaped region per rank."""

    def __init__(self, name: str, shape: Sequence[int], world_size: int, staging: bool = False):
        self.name = name
        self.shape = tuple(int(s) for s in shape)
        self.staging = staging
        self.regions = [np.zeros(self.shape, dtype=ELEM) for _ in range(world_size)]

    @property
    def nbytes(self) -> int:
        return self.regions[0].nbytes

    def region(self, rank: int) -> np.ndarray:
        return self.regions[rank]

    def __repr__(self):
        return f"SymmetricTensor({self.name!r}, shape={self.shape}, ranks={len(self.regions)})"


class SignalBoard:
    """Monotonic counters; each rank owns a grid indexed ``(src_rank, *slot)``."""

    def __init__(self, name: str, world_size: int, slots: Sequence[int]):
        self.name = name
        self.slots = tuple(int(s) for s in slots)
        self.grid_shape = (world_size,) + self.slots
        self.counters = np.zeros((world_size,) + self.grid_shape, dtype=np.int64)
        # one condition per owning rank: a signal only wakes that rank's waiters
        self.conds = [threading.Condition() for _ in range(world_size)]
        # (dst_rank, slot, new_value, t_ns) for every increment
        self.history: list = []

    def value(self, rank: int, slot) -> int:
        return int(self.counters[(rank,) + tuple(slot)])

    def _check_slot(self, slot) -> tuple:
        slot = tuple(map(int, slot))
        if len(slot) != len(self.grid_shape):
            raise BoundsError(f"slot {slot} outside board {self.name!r} of shape {self.grid_shape}")
        for s, n in zip(slot, self.grid_shape):
            if not 0 <= s < n:
                raise BoundsError(f"slot {slot} outside board {self.name!r} of shape {self.grid_shape}")
        return slot

    def reset(self) -> None:
        """Zero all counters. Only valid between runs."""
        for cond in self.conds:
            cond.acquire()
        try:
            self.counters[...] = 0
            self.history.clear()
        finally:
            for cond in self.conds:
                cond.release()


class World:
    """Shared state for one :func:`launch_world` invocation."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        self.tensors: dict = {}
        self.boards: dict = {}
        self._alloc_calls: dict = {}
        self._lock = threading.Lock()
        self.barrier = threading.Barrier(cfg.world_size)
        self.aborted = threading.Event()
        self.t0 = time.perf_counter_ns()

    def abort(self):
        self.aborted.set()
        self.barrier.abort()
        for board in list(self.boards.values()):
            for cond in board.conds:
                with cond:
                    cond.notify_all()

    def preload(self, name, per_rank):
        if len(per_rank) != self.cfg.world_size:
            raise ConfigError(f"preload {name!r} needs one array per rank")
        shape = tuple(np.shape(per_rank[0]))
        if any(tuple(np.shape(x)) != shape for x in per_rank):
            raise ConfigError(f"preload {name!r} has ranks with differing shapes")
        t = SymmetricTensor(name, shape, self.cfg.world_size)
        for region, data in zip(t.regions, per_rank):
            region[...] = data
        self.tensors[name] = t
        self._alloc_calls[("tensor", name)] = {"key": (shape, False)}

    def _register(self, registry, kind, rank, name, key, factory):
        with self._lock:
            calls = self._alloc_calls.setdefault((kind, name), {})
            if rank in calls:
                raise ConfigError(f"{kind} {name!r} already allocated by rank {rank}")
            existing = registry.get(name)
            if existing is None:
                existing = factory()
                registry[name] = existing
                calls["key"] = key
            elif calls["key"] != key:
                raise ConfigError(
                    f"rank {rank} allocates {kind} {name!r} with {key}, other ranks used {calls['key']}"
                )
            calls[rank] = True
            return existing


class RankCtx:
    """Handle given to each rank's program; all fabric operations hang off it."""

    def __init__(self, rank: int, world: World, sink: list):
        self.rank = rank
        self._world = world
        self._sink = sink
        self._local = threading.local()
        self._skew_pending = world.cfg.skew_ns(rank) > 0
        self._barrier_count = 0

    @property
    def world(self) -> WorldConfig:
        return self._world.cfg

    @property
    def world_size(self) -> int:
        return self._world.cfg.world_size

    # -- events ---------------------------------------------------------

    @property
    def task_label(self) -> str:
        return getattr(self._local, "label", "main")

    def record(self, kind, label, t_start, t_end, *, nbytes=None, slot=None, staged=False):
        # raw tuples on the hot path; launch_world builds the TaskEvents
        self._sink.append((self.rank, kind, label, t_start, t_end, nbytes, slot, staged))

    def task(self, label: str):
        """Context manager for one logical task: charges a launch, then tags
        every event recorded inside it with ``label``."""
        return _Task(self, label)

    def compute(self, slot=None):
        """Context manager timing a Compute stage of the current task."""
        return _Compute(self, slot)

    def run_concurrent(self, *programs: Callable[[], Any]) -> list:
        """Run cooperating tasks of this rank concurrently and join them."""
        results = [None] * len(programs)
        errors = []

        def body(i, fn):
            try:
                results[i] = fn()
            except BaseException as exc:  # noqa: BLE001 - re-raised below
                errors.append(exc)
                self._world.abort()

        # the last task runs on the rank's own thread
        threads = [
            threading.Thread(target=body, args=(i, fn), name=f"rank{self.rank}-task{i}", daemon=True)
            for i, fn in enumerate(programs[:-1])
        ]
        for t in threads:
            t.start()
        if programs:
            body(len(programs) - 1, programs[-1])
        for t in threads:
            t.join()
        if errors:
            real = [e for e in errors if not isinstance(e, WorldAborted)]
            raise (real or errors)[0]
        return results

    def _check_alive(self):
        if self._world.aborted.is_set():
            raise WorldAborted(f"rank {self.rank}: world aborted")

    # -- heap -----------------------------------------------------------

    def alloc_symmetric(self, name: str, shape, staging: bool = False) -> SymmetricTensor:
        """Collective allocation; every rank must call with the same name and shape."""
        shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
        if not shape or any(s <= 0 for s in shape):
            raise ConfigError(f"symmetric tensor {name!r} must have a nonempty shape, got {shape}")
        return self._world._register(
            self._world.tensors, "tensor", self.rank, name, (shape, staging),
            lambda: SymmetricTensor(name, shape, self.world_size, staging),
        )

    def alloc_board(self, name: str, slots) -> SignalBoard:
        """Collective allocation of a signal board with ``(W, *slots)`` counters per rank."""
        slots = tuple(int(s) for s in (slots if isinstance(slots, (tuple, list)) else (slots,)))
        if any(s <= 0 for s in slots):
            raise ConfigError(f"board {name!r} needs positive slot dimensions, got {slots}")
        return self._world._register(
            self._world.boards, "board", self.rank, name, slots,
            lambda: SignalBoard(name, self.world_size, slots),
        )

    def _check_rank(self, rank):
        if not 0 <= rank < self.world_size:
            raise BoundsError(f"rank {rank} outside world of size {self.world_size}")

    def remote_load(self, t: SymmetricTensor, src_rank: int, index=None, *, tag=None) -> np.ndarray:
        """Copy ``index`` of ``src_rank``'s region. Blocking, tile granularity."""
        self._check_alive()
        self._check_rank(src_rank)
        idx = _normalize_index(t.shape, index)
        t_start = time.perf_counter_ns()
        out = np.array(t.regions[src_rank][idx], dtype=ELEM, copy=True)
        self.record(EventKind.REMOTE_COPY, self.task_label, t_start, time.perf_counter_ns(),
                    nbytes=out.nbytes, slot=tag)
        return out

    def remote_store(self, t: SymmetricTensor, dst_rank: int, index, values, *, tag=None) -> None:
        """Write ``values`` into ``index`` of ``dst_rank``'s region. No ordering
        is implied until a signal or barrier follows."""
        self._check_alive()
        self._check_rank(dst_rank)
        idx = _normalize_index(t.shape, index)
        view = t.regions[dst_rank][idx]
        values = np.asarray(values, dtype=ELEM)
        if values.size != np.size(view):
            raise BoundsError(
                f"store of {values.size} elements into a range of {np.size(view)} in {t.name!r}"
            )
        t_start = time.perf_counter_ns()
        t.regions[dst_rank][idx] = values.reshape(np.shape(view))
        self.record(EventKind.REMOTE_COPY, self.task_label, t_start, time.perf_counter_ns(),
                    nbytes=values.nbytes, slot=tag, staged=t.staging)

    # -- signals --------------------------------------------------------

    def atomic_signal(self, board: SignalBoard, dst_rank: int, slot) -> int:
        """Increment ``dst_rank``'s counter at ``slot``; returns the new value."""
        self._check_alive()
        self._check_rank(dst_rank)
        slot = board._check_slot(slot)
        cond = board.conds[dst_rank]
        with cond:
            key = (dst_rank,) + slot
            board.counters[key] += 1
            value = int(board.counters[key])
            board.history.append((dst_rank, slot, value, time.perf_counter_ns()))
            cond.notify_all()
        return value

    def wait_signal(self, board: SignalBoard, slot, expected: int = 1) -> int:
        """Block until this rank's counter at ``slot`` reaches ``expected``.

        Spins, yielding to the scheduler every ``spin_yield_every`` polls.
        Raises :class:`DeadlockError` when the watchdog expires.
        """
        if expected < 1:
            raise ValueError("expected must be >= 1")
        slot = board._check_slot(slot)
        key = (self.rank,) + slot
        counters = board.counters
        cond = board.conds[self.rank]
        cfg = self._world.cfg
        t_start = time.perf_counter_ns()
        deadline = None
        while True:
            # plain polls; the lock below is only taken to yield or to acquire
            for _ in range(cfg.spin_yield_every):
                if counters[key] >= expected:
                    break
            with cond:
                observed = int(counters[key])
                if observed >= expected:
                    break
                self._check_alive()
                now = time.perf_counter_ns()
                if deadline is None:
                    deadline = t_start + int(cfg.watchdog * 1e9)
                elif now > deadline:
                    raise DeadlockError(self.rank, f"{board.name}{slot}", expected, observed)
                cond.wait(YIELD_QUANTUM)
        self._sink.append((self.rank, EventKind.SIGNAL_WAIT, self.task_label, t_start,
                           time.perf_counter_ns(), None, slot, False))
        return observed

    def wait_any_signal(self, board: SignalBoard, slots, expected: int = 1) -> tuple:
        """Block until any of ``slots`` reaches ``expected``; returns the
        first such slot in the order given."""
        if expected < 1:
            raise ValueError("expected must be >= 1")
        slots = [board._check_slot(s) for s in slots]
        if not slots:
            raise ValueError("no slots to wait on")
        keys = [(self.rank,) + s for s in slots]
        counters = board.counters
        cond = board.conds[self.rank]
        cfg = self._world.cfg
        t_start = time.perf_counter_ns()
        deadline = t_start + int(cfg.watchdog * 1e9)
        with cond:
            while True:
                ready = next((i for i, k in enumerate(keys) if counters[k] >= expected), None)
                if ready is not None:
                    break
                self._check_alive()
                if time.perf_counter_ns() > deadline:
                    observed = [int(counters[k]) for k in keys]
                    raise DeadlockError(self.rank, f"{board.name}{slots}", expected, observed)
                cond.wait(YIELD_QUANTUM)
        slot = slots[ready]
        self._sink.append((self.rank, EventKind.SIGNAL_WAIT, self.task_label, t_start,
                           time.perf_counter_ns(), None, slot, False))
        return slot

    def test_signal(self, board: SignalBoard, slot, expected: int = 1) -> bool:
        """Non-blocking probe of this rank's counter at ``slot``."""
        slot = board._check_slot(slot)
        with board.conds[self.rank]:
            return int(board.counters[(self.rank,) + slot]) >= expected

    # -- barrier --------------------------------------------------------

    def barrier(self) -> None:
        """Global barrier over all W ranks; records a BarrierWait event."""
        self._check_alive()
        self._barrier_count += 1
        t_start = time.perf_counter_ns()
        if self.world_size > 1:
            try:
                self._world.barrier.wait(timeout=self.world.watchdog)
            except threading.BrokenBarrierError:
                if self._world.aborted.is_set() and time.perf_counter_ns() - t_start < self.world.watchdog * 1e9:
                    raise WorldAborted(f"rank {self.rank}: world aborted") from None
                waiting = self._world.barrier.n_waiting
                raise DeadlockError(
                    self.rank, f"barrier #{self._barrier_count}",
                    detail=f"{waiting} of {self.world_size} ranks arrived",
                ) from None
        self.record(EventKind.BARRIER_WAIT, self.task_label, t_start, time.perf_counter_ns())


class _Task:
    def __init__(self, ctx: RankCtx, label: str):
        self.ctx = ctx
        self.label = label

    def __enter__(self):
        self.prev = getattr(self.ctx._local, "label", None)
        self.ctx._local.label = self.label
        charge_launch(self.ctx, self.label)
        return self.ctx

    def __exit__(self, *exc):
        if self.prev is None:
            del self.ctx._local.label
        else:
            self.ctx._local.label = self.prev
        return False


class _Compute:
    def __init__(self, ctx: RankCtx, slot):
        self.ctx = ctx
        self.slot = slot

    def __enter__(self):
        self.t_start = time.perf_counter_ns()
        ctx = self.ctx
        if ctx._skew_pending:
            ctx._skew_pending = False
            _sleep_ns(ctx.world.skew_ns(ctx.rank))
        return ctx

    def __exit__(self, *exc):
        self.ctx.record(EventKind.COMPUTE, self.ctx.task_label, self.t_start,
                        time.perf_counter_ns(), slot=self.slot)
        return False


@dataclasses.dataclass
class WorldResult:
    results: list
    events: list
    t_start: int
    t_end: int
    boards: dict
    tensors: dict

    @property
    def wall_ns(self) -> int:
        return self.t_end - self.t_start


def launch_world(cfg: WorldConfig, program: Callable[[RankCtx], Any],
                 preload: Optional[Mapping[str, Sequence[np.ndarray]]] = None) -> WorldResult:
    """Run ``program(ctx)`` on W concurrently scheduled ranks.

    ``preload`` maps a tensor name to one array per rank; those tensors exist
    with that content before any rank starts (input placement). Ranks still
    call ``alloc_symmetric`` on them, with the matching shape.

    Returns the per-rank results (indexed by rank) and the merged event log.
    A failing rank aborts the world; a :class:`DeadlockError` propagates
    as-is, any other failure is wrapped in :class:`WorkerError`.
    """
    world = World(cfg)
    for name, per_rank in (preload or {}).items():
        world.preload(name, per_rank)
    sinks = [[] for _ in range(cfg.world_size)]
    results = [None] * cfg.world_size
    failures = []

    def body(rank):
        ctx = RankCtx(rank, world, sinks[rank])
        try:
            results[rank] = program(ctx)
        except BaseException as exc:  # noqa: BLE001 - reported via failures
            failures.append((time.perf_counter_ns(), rank, exc))
            world.abort()

    threads = [
        threading.Thread(target=body, args=(r,), name=f"rank{r}", daemon=True)
        for r in range(cfg.world_size)
    ]
    # like timeit: a cyclic GC pass mid-run would land on some rank's timeline
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        world.t0 = time.perf_counter_ns()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        t_end = time.perf_counter_ns()
    finally:
        if gc_was_enabled:
            gc.enable()

    if failures:
        primary = [f for f in failures if not isinstance(f[2], WorldAborted)] or failures
        primary.sort(key=lambda f: f[0])
        _, rank, exc = primary[0]
        logger.debug("world failed on rank %d: %r", rank, exc)
        if isinstance(exc, DeadlockError):
            raise exc
        raise WorkerError(rank, exc) from exc

    events = [TaskEvent(*e) for sink in sinks for e in sink]
    events.sort(key=lambda e: (e.t_start, e.rank))
    return WorldResult(results, events, world.t0, t_end, dict(world.boards), dict(world.tensors))


def unsignaled_reads(events, board: SignalBoard, labels) -> list:
    """RemoteCopy events from tasks in ``labels`` whose ``slot`` tag names a
    board slot that had not been signalled on that rank when the copy began."""
    first_raise = {}
    for dst, slot, value, t in board.history:
        first_raise.setdefault((dst, slot), t)
    bad = []
    for e in events:
        if e.kind is EventKind.REMOTE_COPY and e.label in labels and e.slot is not None:
            t = first_raise.get((e.rank, tuple(e.slot)))
            if t is None or e.t_start < t:
                bad.append(e)
    return bad
