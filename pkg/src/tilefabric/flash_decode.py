"""Distributed flash decode in four steps of decreasing synchronization.

Every rank computes an online-softmax partial over its KV shard, the partials
are exchanged, and every rank folds all W of them (ascending source rank) and
normalizes. The variants differ only in how the exchange is scheduled:

=============== ======== ======== =============================================
variant         launches barriers exchange
=============== ======== ======== =============================================
bsp             3        2        bulk loads into a staging buffer
independent_ag  3        2        own push all-gather task, waits for all flags
fine_waits      3        1        push task next to a combine task that waits
                                  per source flag
fused           2        0        attention task pushes its partial directly;
                                  reduce task waits per source flag
=============== ======== ======== =============================================

A partial travels as one ``(H, d + 2)`` block laid out ``[m | l | o]``.
"""
from __future__ import annotations

import dataclasses
import enum
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _validation
from .fabric import RankCtx, WorldConfig, WorldResult, launch_world, unsignaled_reads
from .taxmeter import TaxReport, report
from .tilemath import AttnPartial, DecodeProblem, attention_partial, combine_partials, finalize


class FdVariant(str, enum.Enum):
    BSP = "bsp"
    INDEPENDENT_AG = "independent_ag"
    FINE_WAITS = "fine_waits"
    FUSED = "fused"


FOLD_ORDERS = ("rank", "arrival")

# labels of tasks that read partials out of the inbox
_CONSUMER_LABELS = ("combine", "reduce")


@dataclasses.dataclass
class FdRun:
    variant: FdVariant
    outputs: list
    world: WorldResult
    report: TaxReport

    @property
    def events(self):
        return self.world.events


def _alloc(ctx: RankCtx, prob: DecodeProblem):
    w, h, d = prob.world_size, prob.heads, prob.head_dim
    q = ctx.alloc_symmetric("Q", (h, d))
    k = ctx.alloc_symmetric("K_shard", (h, prob.shard_len, d))
    v = ctx.alloc_symmetric("V_shard", (h, prob.shard_len, d))
    return q.region(ctx.rank), k.region(ctx.rank), v.region(ctx.rank), (w, h, d + 2)


def _local_partial(ctx, prob, q, k, v) -> AttnPartial:
    with ctx.compute(slot=("attention",)):
        return attention_partial(q, k, v, prob.scale)


def _fold_staged(ctx, rows) -> np.ndarray:
    with ctx.compute(slot=("combine",)):
        acc = AttnPartial.neutral(rows.shape[1], rows.shape[2] - 2)
        for s in range(rows.shape[0]):
            acc = combine_partials(acc, AttnPartial.from_wire(rows[s]))
        return finalize(acc)


def _fold_flagged(ctx, inbox, flags, world_size, heads, head_dim, fold_order) -> np.ndarray:
    """Fold partials out of this rank's inbox as their flags go up."""
    acc = AttnPartial.neutral(heads, head_dim)
    pending = list(range(world_size))
    while pending:
        if fold_order == "arrival":
            (s,) = ctx.wait_any_signal(flags, [(p,) for p in pending], 1)
        else:
            s = pending[0]
            ctx.wait_signal(flags, (s,), 1)
        pending.remove(s)
        wire = ctx.remote_load(inbox, ctx.rank, (s,), tag=(s,))
        with ctx.compute(slot=(s,)):
            acc = combine_partials(acc, AttnPartial.from_wire(wire))
    with ctx.compute(slot=("finalize",)):
        return finalize(acc)


def _push_partial(ctx, inbox, flags, wire):
    for dst in range(ctx.world_size):
        ctx.remote_store(inbox, dst, (ctx.rank,), wire, tag=(ctx.rank,))
        ctx.atomic_signal(flags, dst, (ctx.rank,))


def bsp_program(prob: DecodeProblem, fold_order="rank"):
    def program(ctx: RankCtx):
        q, k, v, wire_shape = _alloc(ctx, prob)
        partial = ctx.alloc_symmetric("partial", wire_shape[1:], staging=True)
        gathered = ctx.alloc_symmetric("gathered", wire_shape, staging=True)
        with ctx.task("attention"):
            part = _local_partial(ctx, prob, q, k, v)
            ctx.remote_store(partial, ctx.rank, None, part.to_wire())
        ctx.barrier()
        with ctx.task("all_gather"):
            for s in range(ctx.world_size):
                block = ctx.remote_load(partial, s, tag=(s,))
                ctx.remote_store(gathered, ctx.rank, (s,), block, tag=(s,))
        ctx.barrier()
        with ctx.task("combine"):
            return _fold_staged(ctx, gathered.region(ctx.rank))
    return program


def independent_ag_program(prob: DecodeProblem, fold_order="rank"):
    def program(ctx: RankCtx):
        q, k, v, wire_shape = _alloc(ctx, prob)
        partial = ctx.alloc_symmetric("partial", wire_shape[1:], staging=True)
        inbox = ctx.alloc_symmetric("inbox", wire_shape, staging=True)
        flags = ctx.alloc_board("flags", ())
        with ctx.task("attention"):
            part = _local_partial(ctx, prob, q, k, v)
            ctx.remote_store(partial, ctx.rank, None, part.to_wire())
        ctx.barrier()
        with ctx.task("all_gather"):
            _push_partial(ctx, inbox, flags, ctx.remote_load(partial, ctx.rank))
            for s in range(ctx.world_size):
                ctx.wait_signal(flags, (s,), 1)
        ctx.barrier()
        with ctx.task("combine"):
            return _fold_staged(ctx, inbox.region(ctx.rank))
    return program


def fine_waits_program(prob: DecodeProblem, fold_order="rank"):
    def program(ctx: RankCtx):
        q, k, v, wire_shape = _alloc(ctx, prob)
        partial = ctx.alloc_symmetric("partial", wire_shape[1:], staging=True)
        inbox = ctx.alloc_symmetric("inbox", wire_shape, staging=True)
        flags = ctx.alloc_board("flags", ())
        with ctx.task("attention"):
            part = _local_partial(ctx, prob, q, k, v)
            ctx.remote_store(partial, ctx.rank, None, part.to_wire())
        ctx.barrier()

        def all_gather():
            with ctx.task("all_gather"):
                _push_partial(ctx, inbox, flags, ctx.remote_load(partial, ctx.rank))

        def combine():
            with ctx.task("combine"):
                return _fold_flagged(ctx, inbox, flags, ctx.world_size, prob.heads,
                                     prob.head_dim, fold_order)

        return ctx.run_concurrent(all_gather, combine)[1]
    return program


def fused_program(prob: DecodeProblem, fold_order="rank"):
    def program(ctx: RankCtx):
        q, k, v, wire_shape = _alloc(ctx, prob)
        inbox = ctx.alloc_symmetric("inbox", wire_shape, staging=True)
        flags = ctx.alloc_board("flags", ())

        def attention_push():
            with ctx.task("attention_push"):
                part = _local_partial(ctx, prob, q, k, v)
                _push_partial(ctx, inbox, flags, part.to_wire())

        def reduce():
            with ctx.task("reduce"):
                return _fold_flagged(ctx, inbox, flags, ctx.world_size, prob.heads,
                                     prob.head_dim, fold_order)

        return ctx.run_concurrent(attention_push, reduce)[1]
    return program


_PROGRAMS = {
    FdVariant.BSP: bsp_program,
    FdVariant.INDEPENDENT_AG: independent_ag_program,
    FdVariant.FINE_WAITS: fine_waits_program,
    FdVariant.FUSED: fused_program,
}


def run_fd(prob: DecodeProblem, variant, cfg: Optional[WorldConfig] = None,
           fold_order: str = "rank") -> FdRun:
    """Run one flash-decode variant; every rank returns the (H, d) output.

    ``fold_order="arrival"`` lets the flag-driven variants fold partials in
    the order they land instead of by source rank. Outputs then agree only
    to rounding, not bitwise.
    """
    variant = FdVariant(variant)
    _validation.check_choice(fold_order, FOLD_ORDERS, "fold_order")
    cfg = cfg or WorldConfig(prob.world_size)
    if cfg.world_size != prob.world_size:
        raise ValueError(f"world config has {cfg.world_size} ranks, problem has {prob.world_size}")
    w = prob.world_size
    shards = [prob.shard(r) for r in range(w)]
    preload = {
        "Q": [prob.q] * w,
        "K_shard": [k for k, _ in shards],
        "V_shard": [v for _, v in shards],
    }
    world = launch_world(cfg, _PROGRAMS[variant](prob, fold_order), preload=preload)
    return FdRun(variant, world.results, world, report(world.events, cfg, world.t_start))


def fd_bsp(prob, cfg=None) -> FdRun:
    return run_fd(prob, FdVariant.BSP, cfg)


def fd_independent_ag(prob, cfg=None) -> FdRun:
    return run_fd(prob, FdVariant.INDEPENDENT_AG, cfg)


def fd_fine_waits(prob, cfg=None, fold_order="rank") -> FdRun:
    return run_fd(prob, FdVariant.FINE_WAITS, cfg, fold_order)


def fd_fused(prob, cfg=None, fold_order="rank") -> FdRun:
    return run_fd(prob, FdVariant.FUSED, cfg, fold_order)


def unsignaled_inbox_reads(run: FdRun) -> list:
    flags = run.world.boards.get("flags")
    if flags is None:
        return []
    return unsignaled_reads(run.events, flags, _CONSUMER_LABELS)


class FlashDecoder(TransformerMixin, BaseEstimator):
    """Decode attention over a KV cache sharded across a simulated world.

    ``fit(keys, values)`` stores the cache, shaped (H, L, d); ``transform``
    takes one query per head, (H, d), and returns rank 0's (H, d) output.
    The last run (per-rank outputs, event log, tax report) is kept in
    ``last_run_``.
    """

    def __init__(self, world_size=1, variant="fused", launch_cost=20e-6, skew=None,
                 fold_order="rank"):
        self.world_size = world_size
        self.variant = variant
        self.launch_cost = launch_cost
        self.skew = skew
        self.fold_order = fold_order

    def fit(self, X, y=None):
        FdVariant(self.variant)
        _validation.check_choice(self.fold_order, FOLD_ORDERS, "fold_order")
        keys = _validation.as_kv(X, "X")
        if y is None:
            raise ValueError("FlashDecoder.fit needs the value cache as y")
        values = _validation.as_kv(y, "y")
        if keys.shape != values.shape:
            raise ValueError(f"keys {keys.shape} and values {values.shape} differ in shape")
        _validation.check_divisible(keys.shape[1], self.world_size, "kv_len")
        self.keys_ = keys
        self.values_ = values
        self.n_features_in_ = keys.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "keys_")
        q = _validation.as_matrix(X, "X")
        if q.shape != (self.keys_.shape[0], self.n_features_in_):
            raise ValueError(f"queries must be {(self.keys_.shape[0], self.n_features_in_)}, got {q.shape}")
        prob = DecodeProblem(q, self.keys_, self.values_, self.world_size)
        cfg = WorldConfig(self.world_size, launch_cost=self.launch_cost, skew=dict(self.skew or {}))
        self.last_run_ = run_fd(prob, self.variant, cfg, self.fold_order)
        return self.last_run_.outputs[0]
