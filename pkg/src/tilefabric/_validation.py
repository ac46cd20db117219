"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def as_matrix(x, name: str, *, min_rows: int = 1) -> np.ndarray:
    return check_array(
        x, dtype=np.float32, ensure_2d=True, ensure_min_samples=min_rows,
        ensure_all_finite=True, input_name=name,
    )


def as_kv(x, name: str) -> np.ndarray:
    """A (H, L, d) cache; a 2-D (L, d) input is treated as one head."""
    arr = check_array(
        x, dtype=np.float32, ensure_2d=False, allow_nd=True,
        ensure_all_finite=True, input_name=name,
    )
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (heads, kv_len, head_dim), got {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} must be nonempty, got {arr.shape}")
    return arr


def check_divisible(total: int, parts: int, what: str) -> int:
    if parts < 1:
        raise ValueError(f"world size must be >= 1, got {parts}")
    if total % parts:
        raise ValueError(f"{what}={total} is not divisible by world size {parts}")
    return total // parts


def check_choice(value, choices, name: str):
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value
