import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossmod.errors import DataError, DimMismatch, EmptyDataset, NonFinite, TOutOfRange
from crossmod.flowcore import (
    fm_loss,
    fm_loss_grad,
    fm_target,
    interpolate,
    load_tns,
    oracle_velocity,
    oracle_weights,
    sample,
    save_tns,
    tns_bytes,
    tns_parse,
)
from crossmod.rng import RngStream

# ---------------------------------------------------------------- interpolant and loss


def test_interpolate_endpoints_and_midpoint():
    z0, z1 = np.array([0.1, 0.7]), np.array([0.3, -2.0])
    assert np.array_equal(interpolate(z0, z1, 0.0), z0)
    assert np.array_equal(interpolate(z0, z1, 1.0), z1)
    assert interpolate([0, 0], [2, 4], 0.5).tolist() == [1.0, 2.0]


@given(st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_interpolate_affine_in_t(s, t):
    z0, z1 = np.array([1.0, -3.0, 2.0]), np.array([0.5, 4.0, -1.0])
    a, b = interpolate(z0, z1, s), interpolate(z0, z1, t)
    m = interpolate(z0, z1, 0.5 * (s + t))
    assert np.allclose(m, 0.5 * (a + b), atol=1e-12)


def test_interpolate_errors():
    with pytest.raises(DimMismatch):
        interpolate([0, 0], [0, 0, 0], 0.5)
    with pytest.raises(TOutOfRange):
        interpolate([0], [1], 1.5)


def test_fm_target_and_loss():
    assert fm_target([1, 2], [1, 2]).tolist() == [0, 0]
    assert fm_target([1, 2], [3, 3]).tolist() == [2, 1]
    z0, z1 = np.array([0.2, -1.0]), np.array([1.5, 0.0])
    assert fm_loss(fm_target(z0, z1), z0, z1) == 0.0
    assert fm_loss(fm_target(z0, z1) + 1.0, z0, z1) == pytest.approx(1.0, abs=1e-15)
    assert fm_loss(fm_target(z0, z1) + np.array([1.0, 3.0]), z0, z1) == pytest.approx(5.0, abs=1e-14)


def test_fm_loss_grad_matches_difference():
    r = np.random.default_rng(0)
    v, z0, z1 = r.standard_normal((3, 5))
    loss, g = fm_loss_grad(v, z0, z1)
    h = 1e-6
    fd = np.array([(fm_loss(v + h * e, z0, z1) - fm_loss(v - h * e, z0, z1)) / (2 * h) for e in np.eye(5)])
    assert loss == fm_loss(v, z0, z1)
    assert np.allclose(g, fd, atol=1e-9)


# ---------------------------------------------------------------- oracle


def test_oracle_single_point():
    assert oracle_velocity([[1.0, 2.0]], [0.0, 0.0], 1.0).tolist() == [-1.0, -2.0]


def test_oracle_symmetric_pair_averages():
    data = np.array([[1.0, 0.0], [-1.0, 0.0]])
    v = oracle_velocity(data, [0.0, 0.5], 1.0)
    per_point = [(np.array([0.0, 0.5]) - d) / 1.0 for d in data]
    assert np.allclose(v, 0.5 * (per_point[0] + per_point[1]), atol=1e-15)


def test_oracle_weights_concentrate_at_small_t():
    data = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 3.0]])
    t = 0.01
    z = (1 - t) * data[2] + t * np.array([0.3, -0.2])
    assert oracle_weights(data, z, t)[2] > 0.999


def test_oracle_errors():
    with pytest.raises(EmptyDataset):
        oracle_velocity(np.zeros((0, 2)), [0.0, 0.0], 0.5)
    with pytest.raises(TOutOfRange):
        oracle_velocity([[0.0, 0.0]], [0.0, 0.0], 0.0)


def test_oracle_is_empirical_minimiser():
    data = np.array([[1.0, 1.0], [-1.0, 0.5], [0.0, -1.5]])
    r = RngStream(0, ["oracle-min"])
    n = 20_000
    z0 = data[r.integers(3, n)]
    z1 = r.normal((n, 2))
    t = r.uniform_open_left(n) * 0.98 + 0.02
    zt = (1 - t)[:, None] * z0 + t[:, None] * z1
    v_star = np.stack([oracle_velocity(data, zt[i], t[i]) for i in range(n)])
    base = fm_loss(v_star, z0, z1)
    for shift in ([0.1, 0.0], [0.0, -0.1]):
        assert base < fm_loss(v_star + np.array(shift), z0, z1)
    for scale in (0.9, 1.1):
        assert base < fm_loss(v_star * scale, z0, z1)


# ---------------------------------------------------------------- samplers


def test_single_point_one_step_exact():
    z0 = np.array([1.0, 2.0])
    v = lambda z, t, c: oracle_velocity([z0], z, t)  # noqa: E731
    out = sample(v, np.array([-3.0, 5.5]), steps=1, t_end=0.0)
    assert np.max(np.abs(out - z0)) <= 1e-12


def test_zero_field_identity():
    start = np.array([0.3, -0.1, 2.0])
    for method in ("euler", "midpoint"):
        assert np.array_equal(sample(lambda z, t, c: np.zeros_like(z), start, method=method), start)


def test_transport_to_data_points():
    data = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 3.0]])
    starts = RngStream(1, ["transport"]).normal((1000, 2))
    out = sample(lambda z, t, c: oracle_velocity(data, z, t), starts, steps=200, t_end=1e-3)
    dist = np.min(np.linalg.norm(out[:, None, :] - data[None], axis=-1), axis=1)
    assert np.mean(dist < 0.05) >= 0.99


def test_midpoint_second_order_euler_first_order():
    # a two-point field: trajectories curve, so the integrators differ
    data = np.array([[1.0, 0.0], [-1.0, 0.5]])
    v = lambda z, t, c: oracle_velocity(data, z, t)  # noqa: E731
    start = np.array([0.2, -0.4])
    ref = sample(v, start, steps=8_000, t_end=0.5, method="midpoint")
    for method, order in (("euler", 1.0), ("midpoint", 2.0)):
        err = [np.abs(sample(v, start, steps=n, t_end=0.5, method=method) - ref).max() for n in (40, 80, 160)]
        for e_coarse, e_fine in zip(err, err[1:]):
            assert np.log2(e_coarse / e_fine) == pytest.approx(order, rel=0.3)


def test_sampler_nonfinite_reports_step():
    def v(z, t, c):
        return np.full_like(z, np.nan) if t < 0.6 else np.zeros_like(z)

    with pytest.raises(NonFinite) as exc:
        sample(v, np.zeros(2), steps=10, t_end=0.1)
    assert exc.value.step == 5


def test_sampler_argument_errors():
    with pytest.raises(DataError):
        sample(lambda z, t, c: z, np.zeros(2), steps=0)
    with pytest.raises(TOutOfRange):
        sample(lambda z, t, c: z, np.zeros(2), t_end=1.0)


# ---------------------------------------------------------------- .tns


def test_tns_layout():
    buf = tns_bytes(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"TNS1"
    assert buf[4:12] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert buf[12:20] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(buf) == 20 + 24


def test_tns_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 4, 2))
    save_tns(tmp_path / "x.tns", x)
    assert np.array_equal(load_tns(tmp_path / "x.tns"), x)
    assert tns_parse(tns_bytes(np.float64(2.5))).item() == 2.5


def test_tns_rejects_bad_input():
    with pytest.raises(DataError):
        tns_parse(b"XXXX" + bytes(8))
    with pytest.raises(DataError):
        tns_parse(tns_bytes(np.zeros(3))[:-1])
