"""Brute-force references used by ``--verify`` and the test suite.

Neither function touches tiling, sharding or the online-softmax merge.
"""
from __future__ import annotations

import numpy as np


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """float32 ``a @ b`` with every output element summed over k = 0, 1, ...

    Each k step rounds the product and the running sum to float32, which is
    exactly what a scalar ``for i: for j: for k:`` loop does. The i, j loops
    are vectorized; the k order is not.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    c = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for k in range(a.shape[1]):
        prod = a[:, k:k + 1] * b[k:k + 1, :]
        c = c + prod
    return c


def softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Full-sequence decode attention in float64: ``softmax(scale * K q) V``
    per head. ``q`` is (H, d), ``k`` and ``v`` are (H, L, d)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    out = np.empty(q.shape, dtype=np.float64)
    for h in range(q.shape[0]):
        scores = scale * (k[h] @ q[h])
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        out[h] = weights @ v[h]
    return out


def max_rel_error(x: np.ndarray, ref: np.ndarray) -> float:
    """Normwise relative error ``max|x - ref| / max|ref|``."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = np.max(np.abs(ref)) if ref.size else 0.0
    diff = np.max(np.abs(x - ref)) if ref.size else 0.0
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)
