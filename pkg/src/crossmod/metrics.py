"""SSIM, PSNR and MAE on normalised slices, plus per-route aggregation.

``ssim`` uses a separable Gaussian filter over valid (fully interior) window
placements; ``ssim_reference`` evaluates every window placement explicitly
and exists to check it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CountMismatch, DataError, DimMismatch, TooSmall

#: PSNR of two identical images; serialised as the string ``"inf"``.
IDENTICAL = math.inf
MSE_FLOOR = 1e-12


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise DataError(f"SSIM window must be odd and >= 3, got {self.window}")
        if self.sigma <= 0:
            raise DataError("SSIM sigma must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps centred on the middle sample."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _check_size(a: np.ndarray, p: SsimParams) -> None:
    if a.ndim != 2 or min(a.shape) < p.window:
        raise TooSmall(f"image {a.shape} smaller than {p.window}x{p.window} window")


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    w = len(taps)
    h_out = img.shape[0] - w + 1
    w_out = img.shape[1] - w + 1
    rows = sum(taps[i] * img[i : i + h_out, :] for i in range(w))
    return sum(taps[j] * rows[:, j : j + w_out] for j in range(w))


def _ssim_map(mu_a, mu_b, var_a, var_b, cov, p: SsimParams) -> np.ndarray:
    c1, c2 = p.c1, p.c2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim_map(a, b, p: SsimParams | None = None) -> np.ndarray:
    p = p or SsimParams()
    a, b = _pair(a, b)
    _check_size(a, p)
    taps = gaussian_window(p.window, p.sigma)
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    return _ssim_map(mu_a, mu_b, var_a, var_b, cov, p)


def ssim(a, b, p: SsimParams | None = None) -> float:
    """Mean structural similarity over valid Gaussian-window placements."""
    return float(np.mean(ssim_map(a, b, p)))


def ssim_reference(a, b, p: SsimParams | None = None) -> float:
    """Window-by-window SSIM with centred moments; slow, used as an oracle."""
    p = p or SsimParams()
    a, b = _pair(a, b)
    _check_size(a, p)
    g = gaussian_window(p.window, p.sigma)
    w2 = np.outer(g, g)
    w2 = w2 / w2.sum()
    n = p.window
    total = 0.0
    count = 0
    for i in range(a.shape[0] - n + 1):
        for j in range(a.shape[1] - n + 1):
            pa = a[i : i + n, j : j + n]
            pb = b[i : i + n, j : j + n]
            mu_a = float(np.sum(w2 * pa))
            mu_b = float(np.sum(w2 * pb))
            da = pa - mu_a
            db = pb - mu_b
            var_a = float(np.sum(w2 * da * da))
            var_b = float(np.sum(w2 * db * db))
            cov = float(np.sum(w2 * da * db))
            total += float(_ssim_map(mu_a, mu_b, var_a, var_b, cov, p))
            count += 1
    return total / count


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB with peak 1 on normalised images; ``IDENTICAL`` when MSE < 1e-12."""
    err = mse(a, b)
    if err < MSE_FLOOR:
        return IDENTICAL
    return 10.0 * math.log10(peak * peak / err)


def mae(a, b) -> float:
    """Mean absolute error on the 8-bit-equivalent scale (255 x mean |a - b|)."""
    a, b = _pair(a, b)
    return 255.0 * float(np.mean(np.abs(a - b)))


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float

    def to_dict(self) -> dict:
        return {"mean": _jsonable(self.mean), "std": _jsonable(self.std)}


def _jsonable(x: float):
    return "inf" if math.isinf(x) else x


def summarize(values: Sequence[float]) -> Summary:
    """Mean and population std, summed in index order."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise CountMismatch("no values to summarise")
    mean = float(np.sum(arr) / arr.size)
    std = float(np.sqrt(np.sum((arr - mean) ** 2) / arr.size))
    return Summary(mean, std)


@dataclass(frozen=True)
class RouteMetricsReport:
    """Per-route summary: SSIM x 100, PSNR in dB, MAE on the 255 scale."""

    route_id: str
    n: int
    ssim: Summary
    psnr: Summary
    mae: Summary
    n_identical: int = 0

    def to_dict(self) -> dict:
        return {
            "route_id": self.route_id,
            "n": self.n,
            "ssim_x100": self.ssim.to_dict(),
            "psnr_db": self.psnr.to_dict(),
            "mae_255": self.mae.to_dict(),
            "n_identical": self.n_identical,
            "std": "population",
        }

    CSV_HEADER = ("route_id", "n", "ssim", "ssim_std", "psnr", "psnr_std", "mae", "mae_std")

    def csv_row(self) -> list:
        def fmt(x):
            return "inf" if math.isinf(x) else f"{x:.2f}"

        return [
            self.route_id,
            self.n,
            fmt(self.ssim.mean),
            fmt(self.ssim.std),
            fmt(self.psnr.mean),
            fmt(self.psnr.std),
            fmt(self.mae.mean),
            fmt(self.mae.std),
        ]


def evaluate_route(
    pred_slices: Sequence,
    gt_slices: Sequence,
    p: SsimParams | None = None,
    route_id: str = "",
) -> RouteMetricsReport:
    """Per-slice SSIM/PSNR/MAE, then mean and population std.

    Identical slices (infinite PSNR) are excluded from the PSNR summary and
    counted in ``n_identical``; if every slice is identical the PSNR mean is
    ``inf``.
    """
    if len(pred_slices) != len(gt_slices):
        raise CountMismatch(f"{len(pred_slices)} predictions vs {len(gt_slices)} references")
    if not pred_slices:
        raise CountMismatch("no slices to evaluate")
    p = p or SsimParams()
    s_vals, p_vals, m_vals = [], [], []
    for i, (pred, gt) in enumerate(zip(pred_slices, gt_slices)):
        try:
            s_vals.append(100.0 * ssim(pred, gt, p))
            p_vals.append(psnr(pred, gt))
            m_vals.append(mae(pred, gt))
        except DataError as exc:
            raise type(exc)(f"slice {i}: {exc}") from None
    finite = [v for v in p_vals if not math.isinf(v)]
    psnr_summary = summarize(finite) if finite else Summary(IDENTICAL, 0.0)
    return RouteMetricsReport(
        route_id=route_id,
        n=len(s_vals),
        ssim=summarize(s_vals),
        psnr=psnr_summary,
        mae=summarize(m_vals),
        n_identical=len(p_vals) - len(finite),
    )
