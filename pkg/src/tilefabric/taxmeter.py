"""Event timeline records and tax accounting.

Every rank appends :class:`TaskEvent` records while a pattern runs; after the
world joins, :func:`report` folds the merged log into a :class:`TaxReport`.
All timestamps and durations are integer nanoseconds from
``time.perf_counter_ns`` so sums are exact.

The inter-kernel tax is proxied by ``staged_bytes``: bytes materialized into
intermediate staging or inbox tensors between logical tasks. It says nothing
about real cache behaviour.
"""
from __future__ import annotations

import dataclasses
import enum
import time
from collections import defaultdict
from typing import Iterable, Optional


class EventKind(str, enum.Enum):
    LAUNCH = "Launch"
    COMPUTE = "Compute"
    BARRIER_WAIT = "BarrierWait"
    SIGNAL_WAIT = "SignalWait"
    REMOTE_COPY = "RemoteCopy"


class MalformedLogError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TaskEvent:
    """One interval on a rank's timeline.

    ``label`` is the name of the task that recorded the event. ``slot`` is an
    optional tag (signal slot, tile or source rank) used by ordering checks.
    ``staged`` marks copies that materialized data into a staging/inbox tensor.
    """

    rank: int
    kind: EventKind
    label: str
    t_start: int
    t_end: int
    bytes: Optional[int] = None
    slot: Optional[tuple] = None
    staged: bool = False

    def __post_init__(self):
        if self.t_end < self.t_start:
            raise MalformedLogError(f"event ends before it starts: {self}")

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start


@dataclasses.dataclass(frozen=True)
class TaxReport:
    world_size: int
    launch_cost_ns: int
    launch_count: dict
    launch_tax_ns: dict
    bulk_sync_tax_ns: int
    bulk_sync_by_rank: dict
    wait_idle_ns: int
    wait_idle_by_rank: dict
    staged_bytes: int
    staged_bytes_by_rank: dict
    makespan_ns: int

    @property
    def total_launches(self) -> int:
        return sum(self.launch_count.values())

    @property
    def total_launch_tax_ns(self) -> int:
        return sum(self.launch_tax_ns.values())

    def as_dict(self) -> dict:
        return {
            "world_size": self.world_size,
            "launch_cost_ns": self.launch_cost_ns,
            "launch_count": {str(r): c for r, c in sorted(self.launch_count.items())},
            "launch_tax_ns": {str(r): c for r, c in sorted(self.launch_tax_ns.items())},
            "total_launch_tax_ns": self.total_launch_tax_ns,
            "bulk_sync_tax_ns": self.bulk_sync_tax_ns,
            "bulk_sync_by_rank": {str(r): v for r, v in sorted(self.bulk_sync_by_rank.items())},
            "wait_idle_ns": self.wait_idle_ns,
            "wait_idle_by_rank": {str(r): v for r, v in sorted(self.wait_idle_by_rank.items())},
            "staged_bytes": self.staged_bytes,
            "staged_bytes_by_rank": {str(r): v for r, v in sorted(self.staged_bytes_by_rank.items())},
            "makespan_ns": self.makespan_ns,
            "staged_bytes_is_proxy": True,
        }


def report(events: Iterable[TaskEvent], cfg=None, t0: Optional[int] = None) -> TaxReport:
    """Aggregate an event log into a :class:`TaxReport`.

    ``cfg`` supplies the world size and launch cost (a WorldConfig or None for
    an empty world). ``t0`` is the world start timestamp; when omitted the
    earliest event start is used for the makespan.
    """
    events = list(events)
    world_size = cfg.world_size if cfg is not None else 0
    cost_ns = cfg.launch_cost_ns if cfg is not None else 0

    _check_compute_overlap(events)

    ranks = set(range(world_size)) | {e.rank for e in events}
    launches = {r: 0 for r in ranks}
    bulk = {r: 0 for r in ranks}
    idle = {r: 0 for r in ranks}
    staged = {r: 0 for r in ranks}
    for e in events:
        if e.kind is EventKind.LAUNCH:
            launches[e.rank] += 1
        elif e.kind is EventKind.BARRIER_WAIT:
            bulk[e.rank] += e.duration
        elif e.kind is EventKind.SIGNAL_WAIT:
            idle[e.rank] += e.duration
        elif e.kind is EventKind.REMOTE_COPY and e.staged:
            staged[e.rank] += e.bytes or 0

    if events:
        start = t0 if t0 is not None else min(e.t_start for e in events)
        makespan = max(e.t_end for e in events) - start
    else:
        makespan = 0

    return TaxReport(
        world_size=world_size,
        launch_cost_ns=cost_ns,
        launch_count=launches,
        launch_tax_ns={r: c * cost_ns for r, c in launches.items()},
        bulk_sync_tax_ns=sum(bulk.values()),
        bulk_sync_by_rank=bulk,
        wait_idle_ns=sum(idle.values()),
        wait_idle_by_rank=idle,
        staged_bytes=sum(staged.values()),
        staged_bytes_by_rank=staged,
        makespan_ns=max(makespan, 0),
    )


def _check_compute_overlap(events):
    # Compute intervals must not overlap within one task lane (rank, label).
    lanes = defaultdict(list)
    for e in events:
        if e.kind is EventKind.COMPUTE:
            lanes[(e.rank, e.label)].append(e)
    for (rank, label), evs in lanes.items():
        evs.sort(key=lambda e: (e.t_start, e.t_end))
        for prev, cur in zip(evs, evs[1:]):
            if cur.t_start < prev.t_end:
                raise MalformedLogError(
                    f"overlapping Compute events on rank {rank} task {label!r}: "
                    f"[{prev.t_start}, {prev.t_end}) and [{cur.t_start}, {cur.t_end})"
                )


def charge_launch(ctx, label: str) -> None:
    """Charge one synthetic task launch on ``ctx``'s rank and record it."""
    t0 = time.perf_counter_ns()
    cost = ctx.world.launch_cost_ns
    if cost > 0:
        _sleep_ns(cost)
    ctx.record(EventKind.LAUNCH, label, t0, time.perf_counter_ns())


def inject_skew(cfg, rank: int, delay: float):
    """Return a copy of ``cfg`` whose ``rank`` has its first compute stage
    extended by ``delay`` seconds."""
    if not 0 <= rank < cfg.world_size:
        raise ValueError(f"skew rank {rank} outside world of size {cfg.world_size}")
    if delay < 0:
        raise ValueError("skew delay must be >= 0")
    skew = dict(cfg.skew)
    skew[rank] = delay
    return dataclasses.replace(cfg, skew=skew)


_SPIN_MARGIN_NS = 1_000_000


def _sleep_ns(ns: int) -> None:
    deadline = time.perf_counter_ns() + ns
    # time.sleep overshoots by up to a few ms under load; spin out the last stretch.
    if ns > _SPIN_MARGIN_NS:
        time.sleep((ns - _SPIN_MARGIN_NS) / 1e9)
    while time.perf_counter_ns() < deadline:
        pass


_granularity_cache: Optional[int] = None


def timer_granularity_ns(samples: int = 2000) -> int:
    """Smallest positive step observed on the monotonic clock (cached)."""
    global _granularity_cache
    if _granularity_cache is None:
        best = None
        clock = time.perf_counter_ns
        for _ in range(samples):
            a = clock()
            b = clock()
            while b == a:
                b = clock()
            d = b - a
            if best is None or d < best:
                best = d
        _granularity_cache = best
    return _granularity_cache


def launch_events(events, rank=None):
    return [e for e in events if e.kind is EventKind.LAUNCH and (rank is None or e.rank == rank)]


def barrier_events(events, rank=None):
    return [e for e in events if e.kind is EventKind.BARRIER_WAIT and (rank is None or e.rank == rank)]
