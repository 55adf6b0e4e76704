"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from sklearn.utils import check_array

from .domain import get_route
from .errors import CountMismatch, DimMismatch, EmptyDataset, NonFinite


def check_slices(X, size: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce a stack of square slices to float64 ``(n, size, size)``.

    Accepts ``(n, H, W)`` or a single ``(H, W)`` slice. Values must be finite.

    Raises
    ------
    EmptyDataset
        For an empty stack.
    DimMismatch
        For non-square slices or a side length other than ``size``.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimMismatch(f"{name} must be (n, H, W), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptyDataset(f"{name} holds no slices")
    if arr.shape[1] != arr.shape[2]:
        raise DimMismatch(f"{name} slices must be square, got {arr.shape[1:]}")
    if size is not None and arr.shape[1] != size:
        raise DimMismatch(f"{name} slices are {arr.shape[1]}px, expected {size}px")
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains non-finite values")
    return arr


def check_features(X, n_features: int, name: str = "X") -> np.ndarray:
    """2-D finite float64 matrix with exactly ``n_features`` columns."""
    arr = check_array(X, dtype=np.float64, ensure_2d=True)
    if arr.shape[1] != n_features:
        raise DimMismatch(f"{name} has {arr.shape[1]} features, expected {n_features}")
    return arr


def check_routes(routes, n: int) -> list[str]:
    """Route ids, one per sample or one broadcast to all ``n`` samples."""
    if isinstance(routes, str):
        routes = [routes] * n
    routes = [str(r) for r in routes]
    if len(routes) != n:
        raise CountMismatch(f"got {len(routes)} route ids for {n} samples")
    for rid in set(routes):
        get_route(rid)
    return routes


def check_paired(X: np.ndarray, y: np.ndarray) -> None:
    if X.shape != y.shape:
        raise DimMismatch(f"source {X.shape} and target {y.shape} stacks differ")


def check_nonempty(items: Sequence, name: str) -> None:
    if len(items) == 0:
        raise EmptyDataset(f"no {name}")
