import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osmp.latent import (
    DegenerateOriginError,
    HopfParams,
    PolarState,
    cart_to_polar,
    cart_to_polar_jacobian,
    contraction_metric_cartesian,
    contraction_metric_polar,
    contraction_rate_bound,
    contraction_residual,
    fit_decay_rate,
    hopf_cartesian,
    hopf_polar,
    omega_at,
    polar_to_cart,
    polar_to_cart_jacobian,
    transverse_lyapunov,
    wrap_angle,
)

P = HopfParams(alpha=1.0, beta=1.0, radius=1.0, omega=1.0)


def _omega_fn(unit):
    # smooth positive angular velocity on the unit circle
    return 1.0 + 0.3 * unit[..., 0] + 0.2 * unit[..., 1] ** 2


def test_params_validation():
    for bad in (dict(alpha=0), dict(beta=-1), dict(radius=0), dict(omega=0.0), dict(eps_omega=0)):
        with pytest.raises(ValueError):
            HopfParams(**bad)
    assert HopfParams(omega=_omega_fn).learned_omega


@pytest.mark.parametrize("y, expected", [
    ((1.0, 0.0), (0.0, 1.0)),
    ((0.0, 0.0), (0.0, 0.0)),
    ((2.0, 0.0, 0.5), (-6.0, 2.0, -0.5)),
])
def test_hopf_cartesian_examples(y, expected):
    np.testing.assert_allclose(hopf_cartesian(y, P), expected, atol=1e-15)


def test_learned_omega_rejects_origin():
    p = HopfParams(omega=_omega_fn)
    with pytest.raises(DegenerateOriginError):
        hopf_cartesian(np.zeros(2), p)
    assert omega_at(np.array([0.0, 2.0]), p) == pytest.approx(1.2)


def test_hopf_polar_examples():
    assert hopf_polar(PolarState(np.array(1.0), np.array(0.3), np.zeros(0)), P)[0] == 0.0
    assert hopf_polar(PolarState(np.array(2.0), np.array(0.0), np.zeros(0)), P)[0] == -6.0
    with pytest.raises(ValueError):
        hopf_polar(PolarState(np.array(-1.0), np.array(0.0), np.zeros(0)), P)


@pytest.mark.parametrize("params", [P, HopfParams(alpha=2.0, beta=0.5, radius=1.7, omega=_omega_fn)])
def test_polar_field_pushes_forward_to_cartesian(params, rng):
    worst = 0.0
    for _ in range(100):
        n = rng.integers(2, 6)
        y = rng.normal(size=n)
        if math.hypot(y[0], y[1]) < 1e-3:
            continue
        yp = cart_to_polar(y)
        pushed = polar_to_cart_jacobian(yp) @ hopf_polar(yp, params)
        ref = hopf_cartesian(y, params)
        worst = max(worst, np.linalg.norm(pushed - ref) / max(np.linalg.norm(ref), 1e-300))
    assert worst < 1e-10


def test_coordinate_maps():
    yp = cart_to_polar(np.array([0.0, 1.0]))
    assert float(yp.r) == 1.0 and float(yp.phi) == pytest.approx(math.pi / 2)
    assert float(cart_to_polar(np.array([-1.0, 0.0])).phi) == pytest.approx(-math.pi)
    y = np.array([0.3, -0.7])
    prod = cart_to_polar_jacobian(y) @ polar_to_cart_jacobian(cart_to_polar(y))
    np.testing.assert_allclose(prod, np.eye(2), atol=1e-10)
    with pytest.raises(DegenerateOriginError):
        cart_to_polar_jacobian(np.zeros(3))


def test_round_trip_random(rng):
    y = rng.normal(size=(100, 4))
    y = y[np.hypot(y[:, 0], y[:, 1]) > 1e-3]
    np.testing.assert_allclose(polar_to_cart(cart_to_polar(y)), y, atol=1e-12)


@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_angle_range(a):
    w = float(wrap_angle(a))
    assert -math.pi <= w < math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


@pytest.mark.parametrize("y, v", [((1.0, 0.0), 0.0), ((0.0, 0.0), 0.25), ((2.0, 0.0), 2.25)])
def test_lyapunov_examples(y, v):
    assert transverse_lyapunov(y, P) == pytest.approx(v, abs=1e-15)


def test_lyapunov_tail_term():
    p = HopfParams(beta=3.0)
    assert transverse_lyapunov((1.0, 0.0, 2.0), p) == pytest.approx(0.5 * 3.0 * 4.0)


def test_lyapunov_decreases_along_trajectories(rng):
    p = HopfParams(alpha=1.0, beta=1.0, radius=1.0, omega=2.0)
    dt = 1e-3
    y = rng.uniform(-2, 2, size=(20, 3))
    values = [transverse_lyapunov(y, p)]
    for _ in range(10000):
        y = y + dt * hopf_cartesian(y, p)
        values.append(transverse_lyapunov(y, p))
    values = np.array(values)
    assert np.all(np.diff(values, axis=0) <= 1e-12)
    assert np.all(values[-1] < 1e-4 * np.maximum(values[0], 1.0))


@pytest.mark.parametrize("params, r_eps, expected", [
    (HopfParams(1.0, 1.0, 1.0), 1.0, 1.5),
    (HopfParams(1.0, 1.0, 1.0), 0.5, 0.6),
])
def test_contraction_rate_bound_examples(params, r_eps, expected):
    assert contraction_rate_bound(params, r_eps) == pytest.approx(expected, rel=1e-15)


def test_contraction_rate_bound_limit():
    p = HopfParams(alpha=2.0, beta=1e-300, radius=1.0)
    assert contraction_rate_bound(p, math.inf) == pytest.approx(4.0)
    assert contraction_rate_bound(p, 1e6) == pytest.approx(4.0, rel=1e-9)
    with pytest.raises(ValueError):
        contraction_rate_bound(p, 0.0)


def test_metric_identity_on_cycle():
    yp = PolarState(np.array(1.0), np.array(0.4), np.zeros(3))
    np.testing.assert_allclose(contraction_metric_polar(yp, P), np.eye(5), atol=1e-15)


def test_metric_positive_definite_on_log_grid():
    for params in (P, HopfParams(alpha=3.0, beta=0.2, radius=2.0, omega=_omega_fn)):
        for r in np.geomspace(1e-3, 10, 60) * params.radius:
            for phi in (-2.0, 0.0, 1.3):
                m = contraction_metric_polar(PolarState(np.array(r), np.array(phi), np.zeros(1)), params)
                np.testing.assert_allclose(m, m.T)
                assert np.linalg.eigvalsh(m).min() > 0
    m = contraction_metric_polar(PolarState(np.array(0.5), np.array(0.0), np.zeros(0)), P)
    assert np.linalg.eigvalsh(m).min() > 0


def test_metric_rejects_origin():
    with pytest.raises(DegenerateOriginError):
        contraction_metric_polar(PolarState(np.array(0.0), np.array(0.0), np.zeros(0)), P)


def test_cartesian_metric_is_pullback():
    y = np.array([0.4, -0.9, 0.2])
    m = contraction_metric_cartesian(y, P)
    assert np.linalg.eigvalsh(m).min() > 0
    np.testing.assert_allclose(m, m.T, atol=1e-14)


@pytest.mark.parametrize("r", [0.2, 0.5, 1.0, 2.0, 3.0])
def test_contraction_residual_certifies_rate(r):
    p = HopfParams(1.0, 1.0, 1.0)
    rate = contraction_rate_bound(p, min(r, 1.0))
    yp = PolarState(np.array(r), np.array(0.7), np.array([0.3]))
    assert contraction_residual(yp, p, rate) <= 1e-6


@pytest.mark.parametrize("r0", [0.2, 0.5, 2.0, 3.0])
def test_radial_monotone_decay(r0):
    rate, t, dist = fit_decay_rate(r0, P)
    live = dist > 1e-10 * dist[0]  # above the rounding floor
    assert np.all(np.diff(dist[live]) < 0)
    bound = contraction_rate_bound(P, min(r0, P.radius))
    assert rate >= 0.9 * bound
    # envelope |r - R| <= |r0 - R| exp(-0.9 * bound * t)
    assert np.all(dist <= dist[0] * np.exp(-0.9 * bound * t) + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 3.0))
def test_radial_decay_property(r0):
    if abs(r0 - 1.0) < 1e-3:
        return
    rate, _, dist = fit_decay_rate(r0, P)
    live = dist > 1e-10 * dist[0]
    assert np.all(np.diff(dist[live]) < 0)
    assert rate >= 0.9 * contraction_rate_bound(P, min(r0, 1.0))
