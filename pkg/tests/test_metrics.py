import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crossmod.errors import CountMismatch, DimMismatch, TooSmall
from crossmod.metrics import (
    IDENTICAL,
    SsimParams,
    evaluate_route,
    gaussian_window,
    mae,
    psnr,
    ssim,
    ssim_map,
    ssim_reference,
)


def _rng(seed):
    return np.random.default_rng(seed)


def _naive_ssim(a, b, p):
    # raw (uncentred) second moments, a different route to the same statistics
    g = np.exp(-((np.arange(p.window) - p.window // 2) ** 2) / (2 * p.sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (p.k1 * p.dynamic_range) ** 2, (p.k2 * p.dynamic_range) ** 2
    n = p.window
    vals = []
    for i in range(a.shape[0] - n + 1):
        for j in range(a.shape[1] - n + 1):
            x, y = a[i : i + n, j : j + n], b[i : i + n, j : j + n]
            mx, my = (w * x).sum(), (w * y).sum()
            vx = (w * x * x).sum() - mx * mx
            vy = (w * y * y).sum() - my * my
            cxy = (w * x * y).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


# ---------------------------------------------------------------- SSIM


def test_ssim_identity_exact():
    x = _rng(0).random((20, 23))
    assert ssim(x, x) == 1.0


def test_ssim_zero_vs_one():
    p = SsimParams()
    expected = p.c1 / (1 + p.c1)
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(9.999e-5, rel=1e-4)


def test_ssim_matches_oracles_on_random_64():
    r = _rng(1)
    a, b = r.random((64, 64)), r.random((64, 64))
    fast = ssim(a, b)
    assert abs(fast - ssim_reference(a, b)) <= 1e-9
    assert abs(fast - _naive_ssim(a, b, SsimParams())) <= 1e-9


def test_ssim_matches_reference_on_100_pairs():
    r = _rng(2)
    for _ in range(100):
        shape = tuple(r.integers(11, 20, size=2))
        a = r.random(shape)
        b = np.clip(a + 0.2 * r.standard_normal(shape), 0, 1)
        assert abs(ssim(a, b) - ssim_reference(a, b)) <= 1e-9


img = arrays(np.float64, (12, 13), elements=st.floats(0, 1))


@given(img, img)
@settings(max_examples=40, deadline=None)
def test_ssim_symmetric_and_bounded(a, b):
    assert ssim(a, b) == ssim(b, a)
    assert ssim(a, b) <= 1.0 + 1e-12


def test_ssim_errors():
    with pytest.raises(DimMismatch):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
    with pytest.raises(TooSmall):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))
    with pytest.raises(ValueError):
        SsimParams(window=4)


def test_gaussian_window_normalised():
    g = gaussian_window(11, 1.5)
    assert g.sum() == pytest.approx(1.0) and np.argmax(g) == 5


def test_ssim_map_valid_size():
    assert ssim_map(np.zeros((20, 15)), np.zeros((20, 15))).shape == (10, 5)


# ---------------------------------------------------------------- PSNR and MAE


def test_psnr_cases():
    x = _rng(3).random((8, 8))
    assert psnr(x, x) is IDENTICAL
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0


def test_mae_cases():
    x = _rng(4).random((8, 8))
    assert mae(x, x) == 0.0
    assert mae(np.zeros((4, 4)), np.ones((4, 4))) == 255.0
    a = np.zeros((4, 4))
    b = a.copy()
    b[:2] = 0.2
    assert mae(a, b) == pytest.approx(25.5)


@given(img, img, st.floats(-0.5, 0.5))
@settings(max_examples=40, deadline=None)
def test_translation_consistency(a, b, c):
    a, b = 0.25 + 0.5 * a, 0.25 + 0.5 * b
    assert mae(a + c * 0.5, b + c * 0.5) == pytest.approx(mae(a, b), abs=1e-9)
    if psnr(a, b) != IDENTICAL:
        assert psnr(a + c * 0.5, b + c * 0.5) == pytest.approx(psnr(a, b), rel=1e-6)


# ---------------------------------------------------------------- aggregation


def test_evaluate_identical():
    xs = [_rng(i).random((16, 16)) for i in range(3)]
    rep = evaluate_route(xs, xs, route_id="r")
    assert rep.ssim.mean == 100.0 and rep.mae.mean == 0.0
    assert math.isinf(rep.psnr.mean) and rep.n_identical == 3
    assert rep.to_dict()["psnr_db"]["mean"] == "inf"


def test_evaluate_single_slice_std_zero():
    a, b = _rng(5).random((16, 16)), _rng(6).random((16, 16))
    rep = evaluate_route([a], [b])
    assert rep.ssim.std == rep.psnr.std == rep.mae.std == 0.0


def test_evaluate_mean_std_population(monkeypatch):
    vals = iter([0.8, 0.9])
    monkeypatch.setattr("crossmod.metrics.ssim", lambda a, b, p: next(vals))
    z = np.zeros((16, 16))
    rep = evaluate_route([z, z], [z + 0.1, z + 0.2])
    assert rep.ssim.mean == pytest.approx(85.0)
    assert rep.ssim.std == pytest.approx(5.0)


def test_evaluate_count_mismatch():
    with pytest.raises(CountMismatch):
        evaluate_route([np.zeros((16, 16))], [])


def test_evaluate_reports_slice_index():
    good = np.zeros((16, 16))
    with pytest.raises(DimMismatch, match="slice 1"):
        evaluate_route([good, good], [good, np.zeros((16, 17))])
