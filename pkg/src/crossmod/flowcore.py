"""Linear-interpolant flow matching in 64-bit floats.

Time runs from data (``t = 0``) to noise (``t = 1``): ``z_t = (1 - t) z0 + t z1``
and the regression target is ``z1 - z0``. Sampling therefore integrates
``dz/dt = v`` backwards from ``t = 1``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .errors import DataError, DimMismatch, EmptyDataset, NonFinite, TOutOfRange

VelocityFn = Callable[[np.ndarray, float, object], np.ndarray]

TNS_MAGIC = b"TNS1"
TNS_F64 = 1


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFinite("tensor contains non-finite values")
    return arr


def _same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimMismatch(f"shapes differ: {a.shape} vs {b.shape}")


def interpolate(z0, z1, t) -> np.ndarray:
    """``(1 - t) * z0 + t * z1``; ``t`` may be a scalar or broadcast per row."""
    z0, z1 = as_tensor(z0), as_tensor(z1)
    _same(z0, z1)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise TOutOfRange("t must lie in [0, 1]")
    if t_arr.ndim == 0:
        t = float(t_arr)
        if t == 0.0:
            return z0.copy()
        if t == 1.0:
            return z1.copy()
        return (1.0 - t) * z0 + t * z1
    t_arr = t_arr.reshape(t_arr.shape + (1,) * (z0.ndim - t_arr.ndim))
    return (1.0 - t_arr) * z0 + t_arr * z1


def fm_target(z0, z1) -> np.ndarray:
    z0, z1 = as_tensor(z0), as_tensor(z1)
    _same(z0, z1)
    return z1 - z0


def fm_loss(v_pred, z0, z1) -> float:
    """Per-element mean squared error between ``v_pred`` and ``z1 - z0``."""
    v_pred = as_tensor(v_pred)
    target = fm_target(z0, z1)
    _same(v_pred, target)
    return float(np.mean((v_pred - target) ** 2))


def fm_loss_grad(v_pred, z0, z1) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to ``v_pred``."""
    diff = as_tensor(v_pred) - fm_target(z0, z1)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def oracle_weights(data, z, t: float) -> np.ndarray:
    """Posterior weights over data points given ``z`` at time ``t``.

    ``data`` is ``(M, d)``; ``z`` is ``(d,)`` or ``(B, d)``. Returns ``(M,)``
    or ``(B, M)``.
    """
    data = as_tensor(data)
    if data.ndim != 2 or len(data) == 0:
        raise EmptyDataset("oracle needs a non-empty (M, d) dataset")
    if not 0.0 < t <= 1.0:
        raise TOutOfRange(f"t must lie in (0, 1], got {t}")
    z = as_tensor(z)
    if z.shape[-1] != data.shape[1]:
        raise DimMismatch(f"point dim {z.shape[-1]} != data dim {data.shape[1]}")
    zb = np.atleast_2d(z)
    mean = (1.0 - t) * data
    sq = np.sum((zb[:, None, :] - mean[None, :, :]) ** 2, axis=-1)
    logits = -sq / (2.0 * t * t)
    w = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    return w[0] if z.ndim == 1 else w


def oracle_velocity(data, z, t: float) -> np.ndarray:
    """Marginal velocity of the empirical data distribution with Gaussian noise.

    ``v*(z, t) = sum_i w_i (z - z0_i) / t`` with weights from
    :func:`oracle_weights`; this is the pointwise minimiser of the
    flow-matching loss for a uniform prior over ``data``.
    """
    data = as_tensor(data)
    w = oracle_weights(data, z, t)
    return (as_tensor(z) - w @ data) / t


def time_grid(steps: int, t_end: float) -> np.ndarray:
    return np.linspace(1.0, t_end, steps + 1)


def sample(
    v_fn: VelocityFn,
    z_start,
    cond=None,
    steps: int = 50,
    t_end: float = 1e-3,
    method: str = "euler",
) -> np.ndarray:
    """Integrate ``dz/dt = v(z, t, cond)`` from ``t = 1`` down to ``t_end``.

    Velocities are only queried at ``t > 0`` (midpoint evaluates at the
    half step), so ``t_end = 0`` is allowed as the limiting case.
    """
    if steps < 1:
        raise DataError("steps must be >= 1")
    if not 0.0 <= t_end < 1.0:
        raise TOutOfRange(f"t_end must lie in [0, 1), got {t_end}")
    if method not in ("euler", "midpoint"):
        raise DataError(f"unknown sampler {method!r}")
    z = as_tensor(z_start).copy()
    grid = time_grid(steps, t_end)
    for i in range(steps):
        t = float(grid[i])
        dt = t - float(grid[i + 1])
        v = np.asarray(v_fn(z, t, cond), dtype=np.float64)
        if method == "midpoint":
            z_mid = z - 0.5 * dt * v
            v = np.asarray(v_fn(z_mid, t - 0.5 * dt, cond), dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NonFinite("velocity became non-finite", step=i)
        z = z - dt * v
        if not np.all(np.isfinite(z)):
            raise NonFinite("state became non-finite", step=i)
    return z


# ---------------------------------------------------------------- .tns files


def tns_bytes(x) -> bytes:
    arr = np.ascontiguousarray(np.asarray(x, dtype="<f8"))
    head = TNS_MAGIC + struct.pack("<II", TNS_F64, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def tns_parse(buf: bytes) -> np.ndarray:
    if buf[:4] != TNS_MAGIC:
        raise DataError("not a TNS1 tensor file")
    if len(buf) < 12:
        raise DataError("truncated tensor header")
    dtype, rank = struct.unpack_from("<II", buf, 4)
    if dtype != TNS_F64:
        raise DataError(f"unsupported tensor dtype code {dtype}")
    off = 12 + 4 * rank
    if len(buf) < off:
        raise DataError("truncated tensor header")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    n = int(np.prod(dims)) if rank else 1
    if len(buf) - off != 8 * n:
        raise DataError(f"tensor payload has {len(buf) - off} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)


def save_tns(path, x) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(tns_bytes(x))


def load_tns(path) -> np.ndarray:
    return tns_parse(Path(path).read_bytes())
