"""Small input-validation helpers shared across modules.

These mirror the checks sklearn's ``check_array`` style utilities perform,
scoped to the shapes this package actually moves around.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


def require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def check_clip_array(
    x,
    name: str,
    channels: Optional[int] = None,
    dtype=np.float64,
    finite: bool = True,
) -> np.ndarray:
    """Validate and coerce a [T,H,W,C] clip array."""
    arr = np.asarray(x, dtype=dtype)
    require(arr.ndim == 4, f"{name}: expected a [T,H,W,C] array, got ndim={arr.ndim}")
    if channels is not None:
        require(arr.shape[3] == channels, f"{name}: expected {channels} channels, got {arr.shape[3]}")
    if finite:
        require(bool(np.isfinite(arr).all()), f"{name}: non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, name: str) -> None:
    require(a.shape == b.shape, f"{name}: shape mismatch {a.shape} vs {b.shape}")


def check_probability(p: float, name: str) -> float:
    p = float(p)
    require(0.0 <= p <= 1.0, f"{name}: probability must lie in [0,1], got {p}")
    return p


def check_positive_int(n, name: str, minimum: int = 1) -> int:
    require(int(n) == n and int(n) >= minimum, f"{name}: expected integer >= {minimum}, got {n!r}")
    return int(n)


def check_subset(items: Sequence[str], universe: Sequence[str], name: str) -> None:
    extra = [m for m in items if m not in universe]
    require(not extra, f"{name}: unknown entries {extra}")
