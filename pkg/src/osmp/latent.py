r"""Supercritical Hopf dynamics in the latent space of a motion primitive.

The latent state ``y`` has ``n >= 2`` coordinates. The first two carry the
oscillation, the remaining ``n - 2`` decay exponentially:

.. math::
    \dot y_{1:2} = \omega(y) J y_{1:2} + \alpha (1 - |y_{1:2}|^2 / R^2) y_{1:2},
    \qquad \dot y_{3:n} = -\beta y_{3:n}

with ``J`` the 90 degree rotation. In polar form ``(r, phi, tail)`` the radial
and angular parts decouple, which is what the stability certificates below
exploit.

All functions accept a single state of shape ``(n,)`` or a batch ``(..., n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

#: Radius below which the polar angle (and everything built on it) is undefined.
R_MIN = 1e-9

OmegaFn = Callable[[np.ndarray], np.ndarray]


class DegenerateOriginError(ValueError):
    """Raised when an operation needs a polar angle at the latent origin."""


@dataclass(frozen=True)
class HopfParams:
    """Constants of the latent Hopf oscillator.

    ``omega`` is either a positive constant (rad/s) or a callable mapping unit
    vectors ``(cos phi, sin phi)`` of shape ``(..., 2)`` to positive angular
    velocities of shape ``(...)``.
    """

    alpha: float = 1.0
    beta: float = 1.0
    radius: float = 1.0
    omega: Union[float, OmegaFn] = 1.0
    eps_omega: float = 1e-6

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.radius > 0):
            raise ValueError("alpha, beta and radius must be positive")
        if not callable(self.omega) and not self.omega > 0:
            raise ValueError("constant omega must be positive")
        if not self.eps_omega > 0:
            raise ValueError("eps_omega must be positive")

    @property
    def learned_omega(self) -> bool:
        return callable(self.omega)


@dataclass(frozen=True)
class PolarState:
    r: np.ndarray
    phi: np.ndarray
    tail: np.ndarray


def wrap_angle(a):
    """Map angles into ``[-pi, pi)``."""
    return np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi


def _planar_radius(y: np.ndarray) -> np.ndarray:
    return np.hypot(y[..., 0], y[..., 1])


def _check_radius(r, what: str):
    if np.any(np.asarray(r) < R_MIN):
        raise DegenerateOriginError(f"{what} is undefined at the latent origin (r < {R_MIN:g})")


def omega_at_angle(phi, p: HopfParams) -> np.ndarray:
    """Angular velocity ``f_omega(phi)``."""
    phi = np.asarray(phi, dtype=float)
    if not p.learned_omega:
        return np.full(phi.shape, float(p.omega))
    unit = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    return np.asarray(p.omega(unit), dtype=float).reshape(phi.shape)


def omega_at(y, p: HopfParams) -> np.ndarray:
    """Angular velocity at a Cartesian latent state."""
    y = np.asarray(y, dtype=float)
    if not p.learned_omega:
        return np.full(y.shape[:-1], float(p.omega))
    r = _planar_radius(y)
    _check_radius(r, "a learned angular velocity")
    unit = y[..., :2] / r[..., None]
    return np.asarray(p.omega(unit), dtype=float).reshape(r.shape)


def hopf_cartesian(y, p: HopfParams, omega=None) -> np.ndarray:
    """Latent velocity in Cartesian coordinates.

    ``omega`` optionally overrides the angular velocity (already evaluated at
    ``y``); it is how shaping and phase coupling modulate the rotation.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[-1] < 2:
        raise ValueError("latent dimension must be at least 2")
    w = omega_at(y, p) if omega is None else np.asarray(omega, dtype=float)
    y1, y2 = y[..., 0], y[..., 1]
    radial = p.alpha * (1.0 - (y1 ** 2 + y2 ** 2) / p.radius ** 2)
    out = np.empty_like(y)
    out[..., 0] = -w * y2 + radial * y1
    out[..., 1] = w * y1 + radial * y2
    out[..., 2:] = -p.beta * y[..., 2:]
    return out


def hopf_polar(yp: PolarState, p: HopfParams) -> np.ndarray:
    """Latent velocity ``(r_dot, phi_dot, tail_dot)`` in polar coordinates."""
    r = np.asarray(yp.r, dtype=float)
    if np.any(r < 0):
        raise ValueError("polar radius must be nonnegative")
    tail = np.asarray(yp.tail, dtype=float)
    r_dot = p.alpha * (1.0 - r ** 2 / p.radius ** 2) * r
    phi_dot = omega_at_angle(yp.phi, p)
    return np.concatenate([r_dot[..., None], phi_dot[..., None], -p.beta * tail], axis=-1)


def cart_to_polar(y) -> PolarState:
    y = np.asarray(y, dtype=float)
    r = _planar_radius(y)
    phi = wrap_angle(np.arctan2(y[..., 1], y[..., 0]))
    return PolarState(r=r, phi=phi, tail=y[..., 2:].copy())


def polar_to_cart(yp: PolarState) -> np.ndarray:
    r = np.asarray(yp.r, dtype=float)
    phi = np.asarray(yp.phi, dtype=float)
    tail = np.asarray(yp.tail, dtype=float)
    head = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)
    return np.concatenate([head, tail], axis=-1)


def polar_to_cart_jacobian(yp: PolarState) -> np.ndarray:
    """``d y / d y_pol`` for a single polar state."""
    r, phi = float(yp.r), float(yp.phi)
    n = 2 + np.asarray(yp.tail).shape[-1]
    jac = np.eye(n)
    c, s = math.cos(phi), math.sin(phi)
    jac[:2, :2] = [[c, -r * s], [s, r * c]]
    return jac


def cart_to_polar_jacobian(y) -> np.ndarray:
    """``d y_pol / d y`` for a single Cartesian state; singular at ``r = 0``."""
    y = np.asarray(y, dtype=float)
    r = float(_planar_radius(y))
    _check_radius(r, "the Cartesian-to-polar Jacobian")
    jac = np.eye(y.shape[-1])
    y1, y2 = y[0], y[1]
    jac[:2, :2] = [[y1 / r, y2 / r], [-y2 / r ** 2, y1 / r ** 2]]
    return jac


def transverse_lyapunov(y, p: HopfParams) -> np.ndarray:
    """Transverse Lyapunov function, zero exactly on the latent limit cycle."""
    y = np.asarray(y, dtype=float)
    rho = y[..., 0] ** 2 + y[..., 1] ** 2
    tail = np.sum(y[..., 2:] ** 2, axis=-1)
    return p.alpha * p.radius ** 2 / 4.0 * (rho - p.radius ** 2) ** 2 + 0.5 * p.beta * tail


def contraction_rate_bound(p: HopfParams, r_eps: float) -> float:
    """Guaranteed transverse contraction rate in the region ``r >= r_eps``."""
    if not r_eps > 0:
        raise ValueError("r_eps must be positive")
    if math.isinf(r_eps):
        return 2.0 * p.alpha / p.radius ** 2 + p.beta
    return (2.0 * p.alpha / p.radius ** 2 + p.beta) * r_eps ** 2 / (r_eps ** 2 + 1.0)


def metric_phiphi(r: float, f_omega: float, p: HopfParams) -> float:
    # Real part of the closed-form choice plus the exact positive-definiteness
    # threshold alpha^2 (1 - r^2/R^2)^2 / f_omega^2; equals 1/R^2 on the cycle.
    gap = 1.0 - r ** 2 / p.radius ** 2
    return 1.0 / r ** 2 + (p.alpha * gap / f_omega) ** 2


def contraction_metric_polar(yp: PolarState, p: HopfParams) -> np.ndarray:
    """Transverse contraction metric for the polar latent dynamics."""
    r = float(yp.r)
    _check_radius(r, "the polar contraction metric")
    n = 2 + np.asarray(yp.tail).shape[-1]
    f_w = float(omega_at_angle(float(yp.phi), p))
    off = -p.alpha * (1.0 - r ** 2 / p.radius ** 2) / (f_w * r)
    metric = np.eye(n)
    metric[0, 0] = 1.0 / r ** 2
    metric[0, 1] = metric[1, 0] = off
    metric[1, 1] = metric_phiphi(r, f_w, p)
    return metric


def contraction_metric_cartesian(y, p: HopfParams) -> np.ndarray:
    """The polar metric pulled back to Cartesian latent coordinates."""
    y = np.asarray(y, dtype=float)
    inv = cart_to_polar_jacobian(y)
    return inv.T @ contraction_metric_polar(cart_to_polar(y), p) @ inv


def _polar_field_jacobian(yp: PolarState, p: HopfParams, h: float = 1e-6) -> np.ndarray:
    r = float(yp.r)
    n = 2 + np.asarray(yp.tail).shape[-1]
    jac = np.zeros((n, n))
    jac[0, 0] = p.alpha * (1.0 - 3.0 * r ** 2 / p.radius ** 2)
    phi = float(yp.phi)
    jac[1, 1] = (float(omega_at_angle(phi + h, p)) - float(omega_at_angle(phi - h, p))) / (2 * h)
    jac[2:, 2:] = -p.beta * np.eye(n - 2)
    return jac


def contraction_residual(yp: PolarState, p: HopfParams, rate: float, delta=None,
                         h: float = 1e-6) -> float:
    """Evaluate ``d^T (F^T M + M F + M_dot + 2 rate M) d`` for the polar dynamics.

    ``F`` is the field Jacobian and ``M_dot`` the derivative of the metric
    along the flow (central differences with step ``h``). The default
    direction is ``d = (1, 0, 1, ..., 1)``, the transverse increment used in
    the contraction argument. A nonpositive value certifies contraction at
    ``rate`` along ``d``.
    """
    n = 2 + np.asarray(yp.tail).shape[-1]
    d = np.ones(n) if delta is None else np.asarray(delta, dtype=float)
    if delta is None:
        d[1] = 0.0
    metric = contraction_metric_polar(yp, p)
    jac = _polar_field_jacobian(yp, p)
    flow = hopf_polar(yp, p)

    def shifted(sign):
        return PolarState(r=np.asarray(float(yp.r) + sign * h * flow[0]),
                          phi=np.asarray(float(yp.phi) + sign * h * flow[1]),
                          tail=np.asarray(yp.tail, dtype=float) + sign * h * flow[2:])

    metric_dot = (contraction_metric_polar(shifted(1), p)
                  - contraction_metric_polar(shifted(-1), p)) / (2 * h)
    form = jac.T @ metric + metric @ jac + metric_dot + 2.0 * rate * metric
    return float(d @ form @ d)


def fit_decay_rate(r0: float, p: HopfParams, dt: float = 1e-3, horizon=None,
                   floor: float = 1e-10):
    """Forward-Euler rollout of the radial dynamics and a log-linear decay fit.

    The fit window defaults to five time constants of the guaranteed rate for
    the region ``r >= min(r0, R)``; samples whose distance to the cycle fell
    below ``floor`` times the initial distance are dropped (rounding floor).

    Returns ``(rate, t, dist)`` with ``dist = |r(t) - R|``.
    """
    if horizon is None:
        horizon = 5.0 / contraction_rate_bound(p, min(r0, p.radius))
    steps = int(round(horizon / dt))
    r = np.empty(steps + 1)
    r[0] = r0
    for k in range(steps):
        r[k + 1] = r[k] + dt * p.alpha * (1.0 - r[k] ** 2 / p.radius ** 2) * r[k]
    t = np.arange(steps + 1) * dt
    dist = np.abs(r - p.radius)
    keep = dist > floor * dist[0]
    slope = np.polyfit(t[keep], np.log(dist[keep]), 1)[0]
    return -float(slope), t, dist
