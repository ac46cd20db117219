"""All-Gather + GEMM with ``A`` sharded over K.

Three executions of ``C = A @ B`` on every rank:

* ``baseline``: sync, gather all shards into a staging copy of A, sync, GEMM.
* ``pull``: one fused task that loads remote A tiles straight into the
  k-loop of each output tile.
* ``push``: a push task that stores each local A block into every rank's
  inbox and raises a per-(source, block) flag, running next to a GEMM task
  that waits on each flag before reading that block from its own inbox.

All three walk k in ascending global order, so their outputs are bitwise
identical.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _validation
from .fabric import RankCtx, WorldConfig, WorldResult, launch_world, unsignaled_reads
from .taxmeter import TaxReport, report
from .tilemath import ELEM, TileSpec, blocks, gemm_acc

VARIANTS = ("baseline", "pull", "push")


@dataclasses.dataclass(frozen=True)
class AgGemmProblem:
    """Logical ``a`` (M, K) split column-wise over ``world_size`` ranks and a
    replicated ``b`` (K, N)."""

    a: np.ndarray
    b: np.ndarray
    world_size: int
    tiles: TileSpec = TileSpec()

    def __post_init__(self):
        a = np.asarray(self.a, dtype=ELEM)
        b = np.asarray(self.b, dtype=ELEM)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"a {a.shape} and b {b.shape} do not conform")
        if min(a.shape + b.shape) < 1:
            raise ValueError("M, N and K must be positive")
        _validation.check_divisible(a.shape[1], self.world_size, "K")

    @property
    def M(self) -> int:
        return self.a.shape[0]

    @property
    def K(self) -> int:
        return self.a.shape[1]

    @property
    def N(self) -> int:
        return self.b.shape[1]

    @property
    def shard_k(self) -> int:
        return self.K // self.world_size

    def shard(self, rank: int) -> np.ndarray:
        return self.a[:, rank * self.shard_k:(rank + 1) * self.shard_k]

    @property
    def k_blocks(self) -> int:
        return math.ceil(self.shard_k / self.tiles.bk)

    @classmethod
    def random(cls, m, n, k, world_size, tiles=TileSpec(), seed=0):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-1, 1, (m, k)).astype(ELEM)
        b = rng.uniform(-1, 1, (k, n)).astype(ELEM)
        return cls(a, b, world_size, tiles)


@dataclasses.dataclass
class AgGemmRun:
    variant: str
    c: list
    world: WorldResult
    report: TaxReport

    @property
    def events(self):
        return self.world.events


def _setup(ctx: RankCtx, prob: AgGemmProblem):
    shard = ctx.alloc_symmetric("A_shard", (prob.M, prob.shard_k))
    c = ctx.alloc_symmetric("C", (prob.M, prob.N))
    return shard, c


def _tiled_gemm(ctx, prob, load_a, c):
    """Tiled GEMM into this rank's ``c`` region.

    ``load_a(rows, s, kb, ks)`` returns the A tile for ``rows`` from shard
    ``s``, in-shard block number ``kb`` covering in-shard columns ``ks``.
    """
    t = prob.tiles
    out = c.region(ctx.rank)
    for ti, rows in enumerate(blocks(0, prob.M, t.bm)):
        for tj, cols in enumerate(blocks(0, prob.N, t.bn)):
            with ctx.compute(slot=(ti, tj)):
                acc = np.zeros((rows.stop - rows.start, cols.stop - cols.start), dtype=ELEM)
                for s in range(prob.world_size):
                    base = s * prob.shard_k
                    for kb, ks in enumerate(blocks(0, prob.shard_k, t.bk)):
                        a_tile = load_a(rows, s, kb, ks)
                        b_tile = prob.b[base + ks.start:base + ks.stop, cols]
                        acc = gemm_acc(a_tile, b_tile, acc)
                out[rows, cols] = acc


def baseline_program(prob: AgGemmProblem):
    def program(ctx: RankCtx):
        shard, c = _setup(ctx, prob)
        staging = ctx.alloc_symmetric("A_gathered", (prob.M, prob.K), staging=True)
        with ctx.task("ag_sync"):
            ctx.barrier()
        with ctx.task("all_gather"):
            for s in range(prob.world_size):
                block = ctx.remote_load(shard, s, tag=(s,))
                cols = slice(s * prob.shard_k, (s + 1) * prob.shard_k)
                ctx.remote_store(staging, ctx.rank, (slice(None), cols), block, tag=(s,))
            ctx.barrier()
        gathered = staging.region(ctx.rank)
        with ctx.task("gemm"):
            def load_a(rows, s, kb, ks):
                base = s * prob.shard_k
                return gathered[rows, base + ks.start:base + ks.stop]
            _tiled_gemm(ctx, prob, load_a, c)
        return c.region(ctx.rank).copy()
    return program


def pull_program(prob: AgGemmProblem):
    def program(ctx: RankCtx):
        shard, c = _setup(ctx, prob)
        with ctx.task("ag_gemm_pull"):
            def load_a(rows, s, kb, ks):
                return ctx.remote_load(shard, s, (rows, ks), tag=(s, kb))
            _tiled_gemm(ctx, prob, load_a, c)
        return c.region(ctx.rank).copy()
    return program


def push_program(prob: AgGemmProblem):
    def program(ctx: RankCtx):
        shard, c = _setup(ctx, prob)
        inbox = ctx.alloc_symmetric("A_inbox", (prob.M, prob.K), staging=True)
        flags = ctx.alloc_board("A_flags", (prob.k_blocks,))
        r = ctx.rank
        local = shard.region(r)

        def push():
            with ctx.task("push"):
                base = r * prob.shard_k
                for d in range(prob.world_size):
                    for kb, ks in enumerate(blocks(0, prob.shard_k, prob.tiles.bk)):
                        tile = local[:, ks]
                        dst = (slice(None), slice(base + ks.start, base + ks.stop))
                        ctx.remote_store(inbox, d, dst, tile, tag=(r, kb))
                        ctx.atomic_signal(flags, d, (r, kb))

        def compute():
            with ctx.task("gemm"):
                def load_a(rows, s, kb, ks):
                    ctx.wait_signal(flags, (s, kb), 1)
                    base = s * prob.shard_k
                    return ctx.remote_load(inbox, r, (rows, slice(base + ks.start, base + ks.stop)),
                                           tag=(s, kb))
                _tiled_gemm(ctx, prob, load_a, c)

        ctx.run_concurrent(push, compute)
        return c.region(r).copy()
    return program


_PROGRAMS = {"baseline": baseline_program, "pull": pull_program, "push": push_program}


def run_ag_gemm(prob: AgGemmProblem, variant: str, cfg: Optional[WorldConfig] = None) -> AgGemmRun:
    _validation.check_choice(variant, _PROGRAMS, "variant")
    cfg = cfg or WorldConfig(prob.world_size)
    if cfg.world_size != prob.world_size:
        raise ValueError(f"world config has {cfg.world_size} ranks, problem has {prob.world_size}")
    shards = [prob.shard(r) for r in range(prob.world_size)]
    world = launch_world(cfg, _PROGRAMS[variant](prob), preload={"A_shard": shards})
    return AgGemmRun(variant, world.results, world, report(world.events, cfg, world.t_start))


def run_baseline(prob, cfg=None) -> AgGemmRun:
    return run_ag_gemm(prob, "baseline", cfg)


def run_pull(prob, cfg=None) -> AgGemmRun:
    return run_ag_gemm(prob, "pull", cfg)


def run_push(prob, cfg=None) -> AgGemmRun:
    return run_ag_gemm(prob, "push", cfg)


def unsignaled_inbox_reads(run: AgGemmRun) -> list:
    """Inbox reads by the push variant's GEMM task that started before their
    flag was raised. Empty for a correct run (and for other variants)."""
    flags = run.world.boards.get("A_flags")
    if flags is None:
        return []
    return unsignaled_reads(run.events, flags, ("gemm",))


class AllGatherGemm(TransformerMixin, BaseEstimator):
    """``X @ weight`` with ``X`` sharded column-wise over a simulated world.

    ``fit`` stores the replicated right-hand matrix (K, N); ``transform``
    splits its input (M, K) over ``world_size`` ranks, runs the chosen
    all-gather + GEMM variant and returns rank 0's copy of the product.
    The last run is kept in ``last_run_``.

    Parameters
    ----------
    world_size : int
    variant : {"baseline", "pull", "push"}
    tile_m, tile_n, tile_k : int
        GEMM tile block sizes.
    launch_cost : float
        Synthetic seconds charged per task launch.
    skew : dict or None
        ``{rank: seconds}`` added to that rank's first compute stage.
    """

    def __init__(self, world_size=2, variant="pull", tile_m=16, tile_n=16, tile_k=16,
                 launch_cost=20e-6, skew=None):
        self.world_size = world_size
        self.variant = variant
        self.tile_m = tile_m
        self.tile_n = tile_n
        self.tile_k = tile_k
        self.launch_cost = launch_cost
        self.skew = skew

    def fit(self, X, y=None):
        _validation.check_choice(self.variant, VARIANTS, "variant")
        weight = _validation.as_matrix(X, "X")
        _validation.check_divisible(weight.shape[0], self.world_size, "K")
        self.weight_ = weight
        self.n_features_in_ = weight.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "weight_")
        a = _validation.as_matrix(X, "X")
        if a.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {a.shape[1]} features, fitted weight expects {self.n_features_in_}")
        prob = AgGemmProblem(a, self.weight_, self.world_size,
                             TileSpec(self.tile_m, self.tile_n, self.tile_k))
        cfg = WorldConfig(self.world_size, launch_cost=self.launch_cost, skew=dict(self.skew or {}))
        self.last_run_ = run_ag_gemm(prob, self.variant, cfg)
        return self.last_run_.c[0]

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "weight_")
        return np.asarray([f"c{j}" for j in range(self.weight_.shape[1])], dtype=object)
