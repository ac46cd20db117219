"""Sequential kernels shared by every pattern.

``gemm_acc`` accumulates over k one rank-1 update at a time in float32, so a
tiled product matches a naive ``i, j, k`` loop bit for bit no matter how k is
split into blocks. Attention partials hold the online-softmax triple
``(m, l, o)`` with ``o`` left unnormalized; ``combine_partials`` merges two
of them by rescaling both to the larger running max.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Iterable, Iterator

import numpy as np

ELEM = np.float32


class EmptyAttentionError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TileSpec:
    bm: int = 16
    bn: int = 16
    bk: int = 16

    def __post_init__(self):
        for name in ("bm", "bn", "bk"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"tile size {name} must be a positive integer, got {v!r}")

    @classmethod
    def parse(cls, text: str) -> "TileSpec":
        parts = [int(p) for p in text.replace("x", ",").split(",") if p.strip()]
        if len(parts) == 1:
            parts = parts * 3
        if len(parts) != 3:
            raise ValueError(f"tile spec {text!r} must be 'bm,bn,bk' or a single size")
        return cls(*parts)


def blocks(start: int, stop: int, size: int) -> Iterator[slice]:
    """Consecutive slices of at most ``size`` covering ``[start, stop)``; the
    last one is clamped."""
    for lo in range(start, stop, size):
        yield slice(lo, min(lo + size, stop))


def gemm_acc(a_tile: np.ndarray, b_tile: np.ndarray, acc: np.ndarray) -> np.ndarray:
    """Return ``acc + a_tile @ b_tile`` accumulated over k in ascending order."""
    a_tile = np.asarray(a_tile, dtype=ELEM)
    b_tile = np.asarray(b_tile, dtype=ELEM)
    if a_tile.ndim != 2 or b_tile.ndim != 2:
        raise ValueError("gemm_acc expects 2-D tiles")
    bm, bk = a_tile.shape
    bk2, bn = b_tile.shape
    if bk != bk2 or np.shape(acc) != (bm, bn):
        raise ValueError(
            f"shape mismatch: a {a_tile.shape}, b {b_tile.shape}, acc {np.shape(acc)}"
        )
    out = np.array(acc, dtype=ELEM, copy=True)
    for k in range(bk):
        # one float32 multiply and one float32 add per element, no fusion
        out += np.multiply.outer(a_tile[:, k], b_tile[k, :])
    return out


@dataclasses.dataclass(frozen=True)
class AttnPartial:
    """Online-softmax state for H heads: running max ``m`` (H,), normalizer
    ``l`` (H,) and unnormalized output ``o`` (H, d)."""

    m: np.ndarray
    l: np.ndarray
    o: np.ndarray

    @property
    def heads(self) -> int:
        return self.m.shape[0]

    @property
    def head_dim(self) -> int:
        return self.o.shape[1]

    @classmethod
    def neutral(cls, heads: int, head_dim: int) -> "AttnPartial":
        return cls(
            np.full(heads, -np.inf, dtype=ELEM),
            np.zeros(heads, dtype=ELEM),
            np.zeros((heads, head_dim), dtype=ELEM),
        )

    def is_neutral(self) -> np.ndarray:
        return self.l == 0

    def to_wire(self) -> np.ndarray:
        """Pack as ``(H, d + 2)`` float32 rows laid out ``[m | l | o]``."""
        wire = np.empty((self.heads, self.head_dim + 2), dtype=ELEM)
        wire[:, 0] = self.m
        wire[:, 1] = self.l
        wire[:, 2:] = self.o
        return wire

    @classmethod
    def from_wire(cls, wire: np.ndarray) -> "AttnPartial":
        wire = np.asarray(wire, dtype=ELEM)
        if wire.ndim != 2 or wire.shape[1] < 3:
            raise ValueError(f"wire block must be (H, d + 2) with d >= 1, got {wire.shape}")
        return cls(wire[:, 0].copy(), wire[:, 1].copy(), wire[:, 2:].copy())


@dataclasses.dataclass(frozen=True)
class DecodeProblem:
    """Single-token decode attention with the KV cache split evenly over ranks.

    ``q`` is (H, d); ``k`` and ``v`` are the global caches, (H, kv_len, d).
    Rank r owns positions ``[r * kv_len / W, (r + 1) * kv_len / W)``.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    world_size: int = 1

    def __post_init__(self):
        q, k, v = (np.asarray(x, dtype=ELEM) for x in (self.q, self.k, self.v))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)
        if q.ndim != 2 or k.ndim != 3 or v.shape != k.shape:
            raise ValueError(f"expected q (H, d) and k, v (H, L, d); got {q.shape}, {k.shape}, {v.shape}")
        if k.shape[0] != q.shape[0] or k.shape[2] != q.shape[1]:
            raise ValueError(f"q {q.shape} does not match kv {k.shape}")
        if q.shape[1] < 1 or k.shape[1] < 1:
            raise ValueError("head_dim and kv_len must be >= 1")
        if self.world_size < 1 or k.shape[1] % self.world_size:
            raise ValueError(f"kv_len {k.shape[1]} is not divisible by world size {self.world_size}")

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q.shape[1]

    @property
    def kv_len(self) -> int:
        return self.k.shape[1]

    @property
    def shard_len(self) -> int:
        return self.kv_len // self.world_size

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    def shard(self, rank: int):
        lo = rank * self.shard_len
        sl = slice(lo, lo + self.shard_len)
        return self.k[:, sl], self.v[:, sl]

    @classmethod
    def random(cls, heads, head_dim, kv_len, world_size=1, seed=0):
        rng = np.random.default_rng(seed)
        q = rng.uniform(-1, 1, (heads, head_dim)).astype(ELEM)
        k = rng.uniform(-1, 1, (heads, kv_len, head_dim)).astype(ELEM)
        v = rng.uniform(-1, 1, (heads, kv_len, head_dim)).astype(ELEM)
        return cls(q, k, v, world_size)


def partial_from_scores(scores: np.ndarray, values: np.ndarray) -> AttnPartial:
    """Online-softmax partial from precomputed scores (H, n) and values (H, n, d)."""
    s = np.asarray(scores, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if s.shape[1] == 0:
        raise ValueError("empty shard")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(vals))):
        raise ValueError("non-finite attention input")
    m = s.max(axis=1)
    p = np.exp(s - m[:, None])
    l = p.sum(axis=1)
    o = np.einsum("hn,hnd->hd", p, vals)
    return AttnPartial(m.astype(ELEM), l.astype(ELEM), o.astype(ELEM))


def attention_partial(q: np.ndarray, k_shard: np.ndarray, v_shard: np.ndarray, scale: float) -> AttnPartial:
    """Partial attention of ``q`` (H, d) against one KV shard (H, n, d)."""
    q = np.asarray(q, dtype=np.float64)
    k_shard = np.asarray(k_shard, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k_shard))):
        raise ValueError("non-finite attention input")
    scores = scale * np.einsum("hd,hnd->hn", q, k_shard)
    return partial_from_scores(scores, v_shard)


def combine_partials(p: AttnPartial, q: AttnPartial) -> AttnPartial:
    """Merge two partials over disjoint key sets."""
    pm, pl, po = (np.asarray(x, dtype=np.float64) for x in (p.m, p.l, p.o))
    qm, ql, qo = (np.asarray(x, dtype=np.float64) for x in (q.m, q.l, q.o))
    if pm.shape != qm.shape or po.shape != qo.shape:
        raise ValueError(f"partials disagree in shape: {po.shape} vs {qo.shape}")
    m = np.maximum(pm, qm)
    with np.errstate(invalid="ignore"):
        # a neutral side contributes nothing; also avoids -inf - -inf
        sp = np.where(pl > 0, np.exp(pm - m), 0.0)
        sq = np.where(ql > 0, np.exp(qm - m), 0.0)
    l = pl * sp + ql * sq
    o = po * sp[:, None] + qo * sq[:, None]
    m = np.where(l > 0, m, -np.inf)
    return AttnPartial(m.astype(ELEM), l.astype(ELEM), o.astype(ELEM))


def fold_partials(partials: Iterable[AttnPartial]) -> AttnPartial:
    acc = None
    for part in partials:
        acc = part if acc is None else combine_partials(acc, part)
    if acc is None:
        raise ValueError("nothing to fold")
    return acc


def finalize(p: AttnPartial) -> np.ndarray:
    """Normalized attention output, (H, d)."""
    if np.any(p.l <= 0):
        raise EmptyAttentionError("cannot finalize a partial with zero normalizer")
    out = np.asarray(p.o, dtype=np.float64) / np.asarray(p.l, dtype=np.float64)[:, None]
    return out.astype(ELEM)
