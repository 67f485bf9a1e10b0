"""Conditioned bijective encoder built from affine coupling blocks.

Every block leaves one half of the state untouched and applies an
elementwise affine map to the other half, with scale and shift predicted from
the untouched half (and the conditioning embedding). Odd blocks transform the
second half, even blocks the first. Scale and shift networks are random
Fourier feature networks: a frozen random linear layer, a cosine, and a
trained linear readout. With the readouts at zero the encoder is the identity.

Everything runs in float64. The Jacobian with respect to the state is
assembled analytically block by block, so it stays differentiable with
respect to the trained weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64


class NonFiniteError(FloatingPointError):
    """Raised when the encoder produces NaN or infinite values."""


@dataclass(frozen=True)
class EncoderConfig:
    n: int = 2
    n_blocks: int = 10
    rffn_hidden: int = 100
    clamp_bound: float = 3.0
    lengthscale: float = 0.45
    conditioning: bool = False
    embed_dim: int = 0  # 0 -> n
    fourier_scale: float = 1.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("state dimension must be >= 2")
        if self.n_blocks < 1 or self.rffn_hidden < 1:
            raise ValueError("need at least one block and one feature")
        if not self.clamp_bound > 0 or not self.lengthscale > 0:
            raise ValueError("clamp_bound and lengthscale must be positive")

    @property
    def n_embed(self) -> int:
        if not self.conditioning:
            return 0
        return self.embed_dim or self.n

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform_(tensor, bound, gen):
    with torch.no_grad():
        tensor.copy_((torch.rand(tensor.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
    return tensor


class RFFN(nn.Module):
    """Random Fourier feature network ``u -> W cos(Omega u + b) + c``."""

    def __init__(self, in_dim, out_dim, hidden, lengthscale, gen):
        super().__init__()
        freq = torch.randn(hidden, in_dim, generator=gen, dtype=DTYPE) / lengthscale
        phase = torch.rand(hidden, generator=gen, dtype=DTYPE) * 2 * math.pi
        self.register_buffer("freq", freq)
        self.register_buffer("phase", phase)
        self.feature_scale = math.sqrt(2.0 / hidden)
        self.weight = nn.Parameter(torch.zeros(out_dim, hidden, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE))

    def forward(self, u):
        h = u @ self.freq.T + self.phase
        return self.feature_scale * torch.cos(h) @ self.weight.T + self.bias

    def forward_and_grad(self, u, n_state):
        """Outputs and their derivative w.r.t. the first ``n_state`` inputs."""
        h = u @ self.freq.T + self.phase
        out = self.feature_scale * torch.cos(h) @ self.weight.T + self.bias
        # d out_o / d u_p = -c sum_h sin(h) W_oh F_hp; contract W and F first (H x (o*p))
        mixed = (self.weight.T[:, :, None] * self.freq[:, None, :n_state]).reshape(len(self.phase), -1)
        grad = (-self.feature_scale * torch.sin(h)) @ mixed
        return out, grad.reshape(u.shape[0], self.weight.shape[0], n_state)


class ConditioningEmbedding(nn.Module):
    """Scalar conditioning -> Gaussian Fourier projection -> 2-layer softplus MLP."""

    def __init__(self, n_embed, fourier_scale, gen):
        super().__init__()
        self.register_buffer("fourier_freq",
                             torch.randn(2 * n_embed, generator=gen, dtype=DTYPE) * fourier_scale)
        self.hidden = nn.Linear(4 * n_embed, 8 * n_embed, dtype=DTYPE)
        self.out = nn.Linear(8 * n_embed, n_embed, dtype=DTYPE)
        for layer in (self.hidden, self.out):
            bound = 1.0 / math.sqrt(layer.in_features)
            _uniform_(layer.weight, bound, gen)
            _uniform_(layer.bias, bound, gen)

    def forward(self, z):
        proj = 2 * math.pi * z[:, None] * self.fourier_freq[None]
        feats = torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)
        return self.out(F.softplus(self.hidden(feats)))


class CouplingBlock(nn.Module):
    def __init__(self, index, cfg: EncoderConfig, gen):
        super().__init__()
        n_a = (cfg.n + 1) // 2
        first, second = list(range(n_a)), list(range(n_a, cfg.n))
        # 1-based block index: odd blocks update the second half
        if index % 2 == 1:
            passive, active = first, second
        else:
            passive, active = second, first
        self.register_buffer("passive", torch.tensor(passive, dtype=torch.long))
        self.register_buffer("active", torch.tensor(active, dtype=torch.long))
        self.clamp_bound = cfg.clamp_bound
        in_dim = len(passive) + cfg.n_embed
        self.scale = RFFN(in_dim, len(active), cfg.rffn_hidden, cfg.lengthscale, gen)
        self.shift = RFFN(in_dim, len(active), cfg.rffn_hidden, cfg.lengthscale, gen)

    def _net_input(self, x, zbar):
        u = x[:, self.passive]
        return u if zbar is None else torch.cat([u, zbar], dim=-1)

    def _log_scale(self, raw):
        return torch.clamp(raw, -self.clamp_bound, self.clamp_bound)

    def forward(self, x, zbar=None):
        u = self._net_input(x, zbar)
        s = self._log_scale(self.scale(u))
        t = self.shift(u)
        y = x.clone()
        y[:, self.active] = x[:, self.active] * torch.exp(s) + t
        return y

    def inverse(self, y, zbar=None):
        u = self._net_input(y, zbar)
        s = self._log_scale(self.scale(u))
        t = self.shift(u)
        x = y.clone()
        x[:, self.active] = (y[:, self.active] - t) * torch.exp(-s)
        return x

    def forward_with_jacobian(self, x, jac, zbar=None):
        """Apply the block and left-multiply ``jac`` by the block Jacobian."""
        u = self._net_input(x, zbar)
        n_p = len(self.passive)
        raw, d_raw = self.scale.forward_and_grad(u, n_p)
        t, d_t = self.shift.forward_and_grad(u, n_p)
        s = self._log_scale(raw)
        d_s = d_raw * (raw.abs() < self.clamp_bound).to(DTYPE)[..., None]
        e = torch.exp(s)
        x_act = x[:, self.active]
        y = x.clone()
        y[:, self.active] = x_act * e + t
        # rows of the block Jacobian for the active half, restricted to passive columns
        cross = (x_act * e)[..., None] * d_s + d_t
        new = jac.clone()
        new[:, self.active] = e[..., None] * jac[:, self.active] + cross @ jac[:, self.passive]
        return y, new


class Encoder(nn.Module):
    """Bijective map ``Psi(x; z)`` with closed-form inverse."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = int(seed)
        gen = torch.Generator().manual_seed(self.seed)
        self.embedding = (ConditioningEmbedding(cfg.n_embed, cfg.fourier_scale, gen)
                          if cfg.conditioning else None)
        self.blocks = nn.ModuleList(CouplingBlock(j + 1, cfg, gen) for j in range(cfg.n_blocks))

    # -- helpers -------------------------------------------------------------
    def _prepare(self, x, z):
        x = torch.as_tensor(x, dtype=DTYPE)
        single = x.dim() == 1
        if single:
            x = x[None]
        if x.shape[-1] != self.cfg.n:
            raise ValueError(f"expected state dimension {self.cfg.n}, got {x.shape[-1]}")
        zbar = None
        if self.embedding is not None:
            if z is None:
                raise ValueError("this encoder is conditioned; pass z")
            z = torch.as_tensor(z, dtype=DTYPE).reshape(-1)
            if z.numel() == 1:
                z = z.expand(x.shape[0])
            zbar = self.embedding(z)
        return x, zbar, single

    @staticmethod
    def _finite(out, what):
        if not torch.isfinite(out).all():
            raise NonFiniteError(f"{what} produced non-finite values")
        return out

    # -- public API ----------------------------------------------------------
    def embed_conditioning(self, z):
        if self.embedding is None:
            raise ValueError("encoder has no conditioning")
        z = torch.as_tensor(z, dtype=DTYPE).reshape(-1)
        return self.embedding(z)

    def encode(self, x, z=None):
        x, zbar, single = self._prepare(x, z)
        for block in self.blocks:
            x = block(x, zbar)
        self._finite(x, "encode")
        return x[0] if single else x

    forward = encode

    def decode(self, y, z=None):
        y, zbar, single = self._prepare(y, z)
        for block in reversed(self.blocks):
            y = block.inverse(y, zbar)
        self._finite(y, "decode")
        return y[0] if single else y

    def encode_with_jacobian(self, x, z=None):
        """Return ``(Psi(x; z), dPsi/dx)`` with the Jacobian in closed form."""
        x, zbar, single = self._prepare(x, z)
        jac = torch.eye(self.cfg.n, dtype=DTYPE).expand(x.shape[0], -1, -1)
        for block in self.blocks:
            x, jac = block.forward_with_jacobian(x, jac, zbar)
        self._finite(x, "encode")
        return (x[0], jac[0]) if single else (x, jac)

    def encode_with_fd_jacobian(self, x, z=None, step=5e-4):
        """Encoding plus a forward-difference Jacobian with absolute step ``step``."""
        if not step > 0:
            raise ValueError("finite-difference step must be positive")
        x = torch.as_tensor(x, dtype=DTYPE)
        single = x.dim() == 1
        xb = x[None] if single else x
        b, n = xb.shape
        shifted = xb[:, None, :] + step * torch.eye(n, dtype=DTYPE)[None]
        stacked = torch.cat([xb[:, None, :], shifted], dim=1).reshape(b * (n + 1), n)
        if z is not None:
            z = torch.as_tensor(z, dtype=DTYPE).reshape(-1)
            z = z.expand(b) if z.numel() == 1 else z
            z = z.repeat_interleave(n + 1)
        out = self.encode(stacked, z).reshape(b, n + 1, n)
        y = out[:, 0]
        jac = ((out[:, 1:] - y[:, None]) / step).transpose(1, 2)
        return (y[0], jac[0]) if single else (y, jac)

    def jacobian(self, x, z=None, method="exact", step=5e-4):
        if method == "exact":
            return self.encode_with_jacobian(x, z)[1]
        if method in ("fd", "finite_difference"):
            return self.encode_with_fd_jacobian(x, z, step)[1]
        raise ValueError(f"unknown Jacobian method {method!r}")

    def trained_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def init_identity(cfg: EncoderConfig, seed: int = 0) -> Encoder:
    """Fresh encoder; frozen features drawn from ``seed``, readouts zero (identity map)."""
    return Encoder(cfg, seed)
