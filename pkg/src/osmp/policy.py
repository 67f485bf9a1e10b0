"""Composed motion policy: encode, evaluate the latent Hopf field, pull back.

``velocity`` implements the shaped field

    x_dot = s_f * f_s(x') * (J(x') + eps_inv I)^{-1} f_y(Psi(x'; z)),
    x' = (x - x_o) / s_f

where the latent field uses ``alpha = hopf.alpha * k_conv * s_omega``,
``beta = hopf.beta * k_conv * s_omega`` and an angular velocity scaled by
``s_omega`` and by the Gaussian gate on the distance to the latent cycle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .encoder import DTYPE, Encoder
from .latent import R_MIN, DegenerateOriginError


class SingularJacobianError(np.linalg.LinAlgError):
    pass


def _mlp(in_dim, hidden, n_layers, gen):
    layers = []
    dim = in_dim
    for _ in range(n_layers - 1):
        lin = nn.Linear(dim, hidden, dtype=DTYPE)
        bound = 1.0 / math.sqrt(dim)
        with torch.no_grad():
            lin.weight.copy_((torch.rand(lin.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
            lin.bias.copy_((torch.rand(lin.bias.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        layers += [lin, nn.LeakyReLU()]
        dim = hidden
    head = nn.Linear(dim, 1, dtype=DTYPE)
    # zero head: the network starts at exp(0) + eps
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    layers.append(head)
    return nn.Sequential(*layers)


class PositiveNet(nn.Module):
    """``exp(MLP(u)) + eps``; strictly positive for every input."""

    def __init__(self, in_dim, hidden=128, n_layers=3, eps=1e-6, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.in_dim, self.hidden, self.n_layers, self.eps = in_dim, hidden, n_layers, eps
        self.mlp = _mlp(in_dim, hidden, n_layers, gen)

    def forward(self, u):
        return torch.exp(self.mlp(u)).squeeze(-1) + self.eps

    def spec(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": self.hidden, "n_layers": self.n_layers,
                "eps": self.eps}


@dataclass(frozen=True)
class ShapingState:
    s_f: float = 1.0
    x_o: Optional[Sequence[float]] = None
    s_omega: float = 1.0
    k_conv: float = 1.0
    gate_enabled: bool = False
    r_sm: float = 0.0
    sigma_sm: float = 0.1

    def __post_init__(self):
        if not (self.s_f > 0 and self.s_omega > 0 and self.k_conv > 0 and self.sigma_sm > 0):
            raise ValueError("s_f, s_omega, k_conv and sigma_sm must be positive")
        if self.r_sm < 0:
            raise ValueError("r_sm must be nonnegative")

    def with_(self, **kw) -> "ShapingState":
        return replace(self, **kw)


DEFAULT_SHAPING = ShapingState()


def latent_cycle_distance(y, radius):
    """Distance of latent states to the cycle, normalized by the DOF (torch or numpy)."""
    lib = torch if isinstance(y, torch.Tensor) else np
    n = y.shape[-1]
    r = lib.sqrt(y[..., 0] ** 2 + y[..., 1] ** 2)
    sq = (r - radius) ** 2 + (y[..., 2:] ** 2).sum(-1)
    return lib.sqrt(sq / (n - 1))


def angular_gate(d_lc, r_sm, sigma_sm):
    """Gaussian suppression of the rotation outside a tube of radius ``r_sm``."""
    if not sigma_sm > 0:
        raise ValueError("sigma_sm must be positive")
    if isinstance(d_lc, torch.Tensor):
        excess = torch.clamp(d_lc - r_sm, min=0.0)
        return torch.exp(-excess ** 2 / (2 * sigma_sm ** 2))
    excess = np.maximum(np.asarray(d_lc, dtype=float) - r_sm, 0.0)
    return np.exp(-excess ** 2 / (2 * sigma_sm ** 2))


def hopf_field(y, omega, alpha, beta, radius):
    """Torch version of the Cartesian latent field with per-sample ``omega``."""
    y1, y2 = y[:, 0], y[:, 1]
    radial = alpha * (1.0 - (y1 ** 2 + y2 ** 2) / radius ** 2)
    head = torch.stack([-omega * y2 + radial * y1, omega * y1 + radial * y2], dim=-1)
    return torch.cat([head, -beta * y[:, 2:]], dim=-1)


class Policy(nn.Module):
    """Orbitally stable motion primitive.

    ``omega`` is a positive float or a :class:`PositiveNet` on the unit
    cycle direction; ``speed_net`` is ``None`` (unity scaling) or a
    :class:`PositiveNet` on the state.
    """

    def __init__(self, encoder: Encoder, alpha=1.0, beta=1.0, radius=1.0, omega=1.0,
                 speed_net: Optional[PositiveNet] = None, eps_inv=1e-6, eps_omega=1e-6,
                 jacobian="exact", fd_step=5e-4):
        super().__init__()
        if not (alpha > 0 and beta > 0 and radius > 0 and eps_inv >= 0):
            raise ValueError("alpha, beta, radius must be positive and eps_inv nonnegative")
        if not isinstance(omega, nn.Module) and not float(omega) > 0:
            raise ValueError("constant omega must be positive")
        self.encoder = encoder
        self.alpha, self.beta, self.radius = float(alpha), float(beta), float(radius)
        self.omega_net = omega if isinstance(omega, nn.Module) else None
        self.omega_const = None if self.omega_net is not None else float(omega)
        self.speed_net = speed_net
        self.eps_inv = float(eps_inv)
        self.eps_omega = float(eps_omega)
        self.jacobian_method = jacobian
        self.fd_step = float(fd_step)
        self.epochs_trained = 0

    @property
    def n(self) -> int:
        return self.encoder.cfg.n

    @property
    def conditioned(self) -> bool:
        return self.encoder.cfg.conditioning

    @property
    def certified(self) -> bool:
        """Transverse contraction holds only with unity speed scaling."""
        return self.speed_net is None

    def omega(self, y):
        """Angular velocity at latent states ``y`` of shape ``(B, n)``."""
        if self.omega_net is None:
            return torch.full(y.shape[:1], self.omega_const, dtype=DTYPE)
        r = torch.sqrt(y[:, 0] ** 2 + y[:, 1] ** 2)
        if (r < R_MIN).any():
            raise DegenerateOriginError("learned angular velocity is undefined at the latent origin")
        return self.omega_net(y[:, :2] / r[:, None])

    def speed_scale(self, x):
        x = torch.as_tensor(x, dtype=DTYPE)
        single = x.dim() == 1
        xb = x[None] if single else x
        out = (torch.ones(xb.shape[0], dtype=DTYPE) if self.speed_net is None
               else self.speed_net(xb))
        return out[0] if single else out

    def _encode_jac(self, x, z, method=None):
        method = method or self.jacobian_method
        if method == "exact":
            return self.encoder.encode_with_jacobian(x, z)
        return self.encoder.encode_with_fd_jacobian(x, z, self.fd_step)

    def latent_velocity(self, y, shape: ShapingState = DEFAULT_SHAPING, omega_factor=None):
        gain = shape.k_conv * shape.s_omega
        w = self.omega(y)
        if omega_factor is not None:
            w = torch.clamp(w * omega_factor, min=self.eps_omega)
        w = w * shape.s_omega
        if shape.gate_enabled:
            w = w * angular_gate(latent_cycle_distance(y, self.radius), shape.r_sm, shape.sigma_sm)
        return hopf_field(y, w, self.alpha * gain, self.beta * gain, self.radius)

    def velocity(self, x, z=None, shape: Optional[ShapingState] = None, omega_factor=None,
                 jacobian=None, eps_inv=None):
        """Oracle-space velocity at ``x`` (shape ``(n,)`` or ``(B, n)``)."""
        shape = shape or DEFAULT_SHAPING
        x = torch.as_tensor(x, dtype=DTYPE)
        single = x.dim() == 1
        xb = x[None] if single else x
        if shape.x_o is not None:
            xb = xb - torch.as_tensor(shape.x_o, dtype=DTYPE)
        if shape.s_f != 1.0:
            xb = xb / shape.s_f
        y, jac = self._encode_jac(xb, z, jacobian)
        if omega_factor is not None:
            omega_factor = torch.as_tensor(omega_factor, dtype=DTYPE).reshape(-1)
        ydot = self.latent_velocity(y, shape, omega_factor)
        eps = self.eps_inv if eps_inv is None else eps_inv
        lhs = jac + eps * torch.eye(self.n, dtype=DTYPE)
        sol, info = torch.linalg.solve_ex(lhs, ydot[..., None])
        if (info != 0).any() or not torch.isfinite(sol).all():
            raise SingularJacobianError("regularized encoder Jacobian is singular")
        xdot = sol[..., 0] * self.speed_scale(xb)[:, None] * shape.s_f
        return xdot[0] if single else xdot

    forward = velocity

    def phase(self, x, z=None):
        """Latent polar phase in ``[-pi, pi)``."""
        y = self.encoder.encode(x, z)
        yb = y[None] if y.dim() == 1 else y
        r = torch.sqrt(yb[:, 0] ** 2 + yb[:, 1] ** 2)
        if (r < R_MIN).any():
            raise DegenerateOriginError("phase is undefined at the latent origin")
        phi = torch.remainder(torch.atan2(yb[:, 1], yb[:, 0]) + math.pi, 2 * math.pi) - math.pi
        return phi[0] if y.dim() == 1 else phi

    def cycle_points(self, n_points=500, z=None):
        """Oracle-space image of the latent limit cycle (decoded, not integrated)."""
        phi = torch.linspace(-math.pi, math.pi, n_points + 1, dtype=DTYPE)[:-1]
        y = torch.zeros(n_points, self.n, dtype=DTYPE)
        y[:, 0] = self.radius * torch.cos(phi)
        y[:, 1] = self.radius * torch.sin(phi)
        return self.encoder.decode(y, z)

    def hopf_params(self):
        """The latent constants as a :class:`osmp.latent.HopfParams`."""
        from .latent import HopfParams

        if self.omega_net is None:
            omega = self.omega_const
        else:
            net = self.omega_net

            def omega(unit):
                with torch.no_grad():
                    u = torch.as_tensor(np.asarray(unit), dtype=DTYPE).reshape(-1, 2)
                    return net(u).numpy().reshape(np.shape(unit)[:-1])
        return HopfParams(self.alpha, self.beta, self.radius, omega, self.eps_omega)

    def velocity_numpy(self, x, z=None, shape=None, **kw) -> np.ndarray:
        with torch.no_grad():
            return self.velocity(torch.as_tensor(np.asarray(x, dtype=float)), z, shape, **kw).numpy()
