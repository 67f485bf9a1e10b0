"""Training losses, the learning-rate schedule and the full-batch training loop."""

from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import OracleDataset
from .encoder import DTYPE, Encoder, EncoderConfig, NonFiniteError
from .latent import HopfParams
from .policy import Policy, PositiveNet

TERMS = ("vi", "lcm", "tgd", "er", "vr", "sci", "haus")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, term=None):
        where = f" in term {term}" if term else ""
        super().__init__(f"non-finite loss at epoch {epoch}{where}")
        self.epoch = epoch


@dataclass(frozen=True)
class LossWeights:
    zeta_vi: float = 1.0
    zeta_lcm: float = 0.0
    zeta_tgd: float = 0.0
    zeta_er: float = 0.0
    zeta_vr: float = 0.0
    zeta_sci: float = 0.0
    zeta_haus: float = 0.0
    beta_l1: float = 1.0
    m_tgd: float = 0.0
    m_vr: Optional[float] = None  # None: 1.5 x the largest demonstrated speed
    n_sci: int = 256
    n_haus: int = 256

    def __post_init__(self):
        for name in TERMS:
            if getattr(self, f"zeta_{name}") < 0:
                raise ValueError(f"zeta_{name} must be nonnegative")
        if not self.beta_l1 > 0:
            raise ValueError("beta_l1 must be positive")
        if self.m_tgd < 0:
            raise ValueError("m_tgd must be nonnegative")
        if self.m_vr is not None and not self.m_vr > 0:
            raise ValueError("m_vr must be positive")
        if self.n_sci < 1 or self.n_haus < 1:
            raise ValueError("sample counts must be positive")

    def active(self):
        return [t for t in TERMS if getattr(self, f"zeta_{t}") > 0]

    def weight(self, term):
        return getattr(self, f"zeta_{term}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    warmup: int = 10
    plateau: Optional[int] = None  # None: 10% of the epochs
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-10
    seed: int = 0
    box: tuple = (-0.5, 0.5)
    n_reg: Optional[int] = None  # None: dataset size
    omega: Optional[float] = None  # None: 2 pi / period
    learn_omega: bool = False
    omega_layers: int = 5
    learn_speed: bool = False
    speed_layers: int = 3
    speed_eps: float = 1e-6
    phi0: Optional[float] = None  # None: encoded angle of each demonstration's first sample
    jacobian: str = "exact"

    def __post_init__(self):
        if self.epochs < 0 or self.warmup < 0:
            raise ValueError("epochs and warmup must be nonnegative")
        if self.epochs > 0 and self.warmup >= self.epochs:
            raise ValueError("warmup must be shorter than training")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not self.box[0] < self.box[1]:
            raise ValueError("box must satisfy x_min < x_max")
        if self.omega is not None and not self.omega > 0:
            raise ValueError("omega must be positive")
        if self.jacobian not in ("exact", "fd"):
            raise ValueError("jacobian must be 'exact' or 'fd'")

    def plateau_epochs(self) -> int:
        if self.plateau is not None:
            return self.plateau
        return max(self.epochs // 10, 0)


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0, constant plateau, cosine decay to 0 at ``cfg.epochs``."""
    warm = cfg.warmup
    flat_end = min(warm + cfg.plateau_epochs(), cfg.epochs)
    if epoch < warm:
        return cfg.lr * epoch / warm
    if epoch < flat_end or cfg.epochs == flat_end:
        return cfg.lr
    frac = min((epoch - flat_end) / (cfg.epochs - flat_end), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# -- tensors ------------------------------------------------------------------

class Batch:
    """Torch view of a dataset, prepared once for training."""

    def __init__(self, ds: OracleDataset):
        self.ds = ds
        self.x = torch.as_tensor(ds.x, dtype=DTYPE)
        self.v = torch.as_tensor(ds.v, dtype=DTYPE)
        self.z = None if ds.z is None else torch.as_tensor(ds.z, dtype=DTYPE)
        self.periodic = torch.as_tensor(ds.periodic)
        self.max_speed = ds.max_speed()
        self.conditionings = None if ds.z is None else np.unique(ds.z)
        # time since the first periodic sample of each demonstration, and that sample's index
        t_rel = np.zeros(len(ds))
        anchor = np.zeros(len(ds), dtype=int)
        for idx in ds.groups():
            per = idx[ds.periodic[idx]]
            if len(per):
                t_rel[idx] = ds.t[idx] - ds.t[per[0]]
                anchor[idx] = per[0]
        self.t_rel = torch.as_tensor(t_rel, dtype=DTYPE)
        self.anchor = torch.as_tensor(anchor)

    def z_at(self, mask):
        return None if self.z is None else self.z[mask]


def _gen(seed):
    return torch.Generator().manual_seed(int(seed) % (2 ** 63))


def _box_samples(batch: Batch, n, box, seed, n_dim):
    g = _gen(seed)
    x = box[0] + (box[1] - box[0]) * torch.rand(n, n_dim, generator=g, dtype=DTYPE)
    z = None
    if batch.z is not None:
        lo, hi = float(batch.conditionings.min()), float(batch.conditionings.max())
        z = lo + (hi - lo) * torch.rand(n, generator=g, dtype=DTYPE)
    return x, z


def _wrap(a):
    return torch.remainder(a + math.pi, 2 * math.pi) - math.pi


# -- loss terms ------------------------------------------------------------------

def smooth_l1(err, beta=1.0):
    """Elementwise smooth l1, summed over coordinates and averaged over samples."""
    return F.smooth_l1_loss(err, torch.zeros_like(err), reduction="none", beta=beta).sum(-1).mean()


def loss_velocity_imitation(policy: Policy, batch: Batch, weights: LossWeights, jacobian=None):
    pred = policy.velocity(batch.x, batch.z, jacobian=jacobian)
    return smooth_l1(pred - batch.v, weights.beta_l1)


def _periodic_encoding(policy: Policy, batch: Batch):
    mask = batch.periodic
    if not bool(mask.any()):
        raise ValueError("the dataset has no periodic samples")
    return policy.encoder.encode(batch.x[mask], batch.z_at(mask)), mask


def loss_limit_cycle_matching(policy: Policy, batch: Batch):
    y, _ = _periodic_encoding(policy, batch)
    r = torch.sqrt(y[:, 0] ** 2 + y[:, 1] ** 2)
    return ((policy.radius - r) ** 2 + (y[:, 2:] ** 2).sum(-1)).mean()


def encoded_angles(policy: Policy, batch: Batch):
    y = policy.encoder.encode(batch.x, batch.z)
    return torch.atan2(y[:, 1], y[:, 0])


def default_phi0(policy: Policy, batch: Batch):
    """Per-sample anchor: encoded angle of the demonstration's first periodic sample."""
    with torch.no_grad():
        first = batch.anchor.unique()
        y = policy.encoder.encode(batch.x[first], batch.z_at(first))
        ang = torch.atan2(y[:, 1], y[:, 0])
    return ang[torch.searchsorted(first, batch.anchor)]


def loss_time_guidance(policy: Policy, batch: Batch, phi0, m_tgd: float):
    """``phi0``: scalar or per-sample tensor of anchor angles."""
    period = batch.ds.period
    if not period > 0:
        raise ValueError("time guidance needs a positive period")
    mask = batch.periodic
    y, _ = _periodic_encoding(policy, batch)
    phi = torch.atan2(y[:, 1], y[:, 0])
    phi0 = torch.as_tensor(phi0, dtype=DTYPE)
    if phi0.dim() > 0:
        phi0 = phi0[mask]
    target = phi0 + 2 * math.pi * batch.t_rel[mask] / period
    err = _wrap(target - phi).abs()
    return (torch.clamp(err - m_tgd, min=0.0) ** 2).mean()


def loss_encoder_reg(policy: Policy, batch: Batch, box, n_samples, seed):
    x, z = _box_samples(batch, n_samples, box, seed, policy.n)
    return torch.linalg.vector_norm(x - policy.encoder.encode(x, z), dim=-1).mean()


def loss_velocity_reg(policy: Policy, batch: Batch, box, n_samples, m_vr, seed, jacobian=None):
    x, z = _box_samples(batch, n_samples, box, seed + 1, policy.n)
    speed = torch.linalg.vector_norm(policy.velocity(x, z, jacobian=jacobian), dim=-1)
    return torch.clamp(speed - m_vr, min=0.0).mean()


def interpolation_anchors(z_tilde, conditionings):
    """Nearest dataset conditionings below/above each sample and the blend factor."""
    zs = np.sort(np.asarray(conditionings, dtype=float))
    zt = np.asarray(z_tilde, dtype=float)
    lo_i = np.clip(np.searchsorted(zs, zt, side="right") - 1, 0, len(zs) - 1)
    hi_i = np.clip(np.searchsorted(zs, zt, side="left"), 0, len(zs) - 1)
    lo, hi = zs[lo_i], zs[hi_i]
    gap = hi - lo
    lam = np.where(gap > 0, (zt - lo) / np.where(gap > 0, gap, 1.0), 0.0)
    return lo, hi, lam


def loss_smooth_conditioning_interpolation(policy: Policy, batch: Batch, n_sci, seed):
    if batch.conditionings is None or len(batch.conditionings) < 2:
        raise ValueError("interpolation loss needs at least two distinct conditionings")
    g = _gen(seed + 2)
    zmin, zmax = float(batch.conditionings.min()), float(batch.conditionings.max())
    z_t = zmin + (zmax - zmin) * torch.rand(n_sci, generator=g, dtype=DTYPE)
    phi = -math.pi + 2 * math.pi * torch.rand(n_sci, generator=g, dtype=DTYPE)
    y = torch.zeros(n_sci, policy.n, dtype=DTYPE)
    y[:, 0] = policy.radius * torch.cos(phi)
    y[:, 1] = policy.radius * torch.sin(phi)
    lo, hi, lam = interpolation_anchors(z_t.numpy(), batch.conditionings)
    lam = torch.as_tensor(lam, dtype=DTYPE)[:, None]
    dec = policy.encoder.decode
    x_t = dec(y, z_t)
    x_lo = dec(y, torch.as_tensor(lo, dtype=DTYPE))
    x_hi = dec(y, torch.as_tensor(hi, dtype=DTYPE))
    target = x_lo + lam * (x_hi - x_lo)
    return ((target - x_t) ** 2).sum(-1).mean()


def loss_hausdorff_latent(policy: Policy, batch: Batch, n_cycle=256):
    y, _ = _periodic_encoding(policy, batch)
    phi = torch.arange(n_cycle, dtype=DTYPE) * (2 * math.pi / n_cycle)
    ring = torch.zeros(n_cycle, policy.n, dtype=DTYPE)
    ring[:, 0] = policy.radius * torch.cos(phi)
    ring[:, 1] = policy.radius * torch.sin(phi)
    d = torch.cdist(y, ring, compute_mode="donot_use_mm_for_euclid_dist")
    return torch.maximum(d.min(dim=1).values.max(), d.min(dim=0).values.max())


@dataclass
class LossContext:
    """Per-evaluation inputs that are not parameters: sample seed and phase anchor."""

    seed: int = 0
    phi0: object = None
    box: tuple = (-0.5, 0.5)
    n_reg: Optional[int] = None
    jacobian: Optional[str] = None


def total_loss(policy: Policy, batch, weights: LossWeights, ctx: Optional[LossContext] = None):
    """Weighted sum of enabled terms and a dict of unweighted term values."""
    if isinstance(batch, OracleDataset):
        batch = Batch(batch)
    ctx = ctx or LossContext()
    n_reg = ctx.n_reg or len(batch.ds)
    parts = {}
    active = weights.active()
    if "vi" in active:
        parts["vi"] = loss_velocity_imitation(policy, batch, weights, ctx.jacobian)
    if "lcm" in active:
        parts["lcm"] = loss_limit_cycle_matching(policy, batch)
    if "tgd" in active:
        phi0 = default_phi0(policy, batch) if ctx.phi0 is None else ctx.phi0
        parts["tgd"] = loss_time_guidance(policy, batch, phi0, weights.m_tgd)
    if "er" in active:
        parts["er"] = loss_encoder_reg(policy, batch, ctx.box, n_reg, ctx.seed)
    if "vr" in active:
        m_vr = weights.m_vr if weights.m_vr is not None else 1.5 * batch.max_speed
        parts["vr"] = loss_velocity_reg(policy, batch, ctx.box, n_reg, m_vr, ctx.seed, ctx.jacobian)
    if "sci" in active:
        parts["sci"] = loss_smooth_conditioning_interpolation(policy, batch, weights.n_sci, ctx.seed)
    if "haus" in active:
        parts["haus"] = loss_hausdorff_latent(policy, batch, weights.n_haus)
    total = torch.zeros((), dtype=DTYPE)
    for name, value in parts.items():
        total = total + weights.weight(name) * value
    return total, parts


# -- training loop -----------------------------------------------------------------

def parameter_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    checksum: str = ""
    wall_time: float = 0.0
    terms: tuple = ()

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["total"] if self.rows else float("nan")

    def losses(self, term="total"):
        return np.array([r[term] for r in self.rows])

    def to_csv(self, path):
        cols = ["epoch", "lr", "total", *self.terms]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["lr"]), repr(r["total"])] + [repr(r[t]) for t in self.terms])


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def build_policy(ds: OracleDataset, encoder_cfg: EncoderConfig, hopf: Optional[HopfParams],
                 cfg: TrainConfig) -> Policy:
    """Fresh identity-initialized policy for ``ds``."""
    if encoder_cfg.n != ds.n:
        raise ValueError(f"encoder dimension {encoder_cfg.n} != dataset dimension {ds.n}")
    if encoder_cfg.conditioning != (ds.z is not None):
        raise ValueError("encoder conditioning must match the dataset's conditioning column")
    hopf = hopf or HopfParams()
    omega = cfg.omega if cfg.omega is not None else 2 * math.pi / ds.period
    if cfg.learn_omega:
        omega = PositiveNet(2, n_layers=cfg.omega_layers, eps=hopf.eps_omega, seed=cfg.seed + 1)
        with torch.no_grad():  # start at the demonstrated mean angular velocity
            base = cfg.omega if cfg.omega is not None else 2 * math.pi / ds.period
            omega.mlp[-1].bias.fill_(math.log(base))
    speed = (PositiveNet(ds.n, n_layers=cfg.speed_layers, eps=cfg.speed_eps, seed=cfg.seed + 2)
             if cfg.learn_speed else None)
    return Policy(Encoder(encoder_cfg, seed=cfg.seed), alpha=hopf.alpha, beta=hopf.beta,
                  radius=hopf.radius, omega=omega, speed_net=speed, eps_omega=hopf.eps_omega,
                  jacobian=cfg.jacobian)


def train(dataset: OracleDataset, encoder_cfg: Optional[EncoderConfig] = None,
          hopf: Optional[HopfParams] = None, weights: Optional[LossWeights] = None,
          cfg: Optional[TrainConfig] = None, policy: Optional[Policy] = None, log=None):
    """Full-batch AdamW training.

    Passing ``policy`` resumes it: training continues from
    ``policy.epochs_trained`` up to ``cfg.epochs`` on the same schedule.
    Optimizer moments restart from zero on resume.
    """
    cfg = cfg or TrainConfig()
    weights = weights or LossWeights()
    if policy is None:
        encoder_cfg = encoder_cfg or EncoderConfig(n=dataset.n, conditioning=dataset.z is not None)
        policy = build_policy(dataset, encoder_cfg, hopf, cfg)
    batch = Batch(dataset)
    report = TrainReport(terms=tuple(weights.active()))
    start = time.perf_counter()
    params = [p for p in policy.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    for epoch in range(policy.epochs_trained, cfg.epochs):
        lr = lr_at(epoch + 0.5, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        ctx = LossContext(seed=epoch_seed(cfg.seed, epoch), phi0=cfg.phi0, box=cfg.box,
                          n_reg=cfg.n_reg, jacobian=cfg.jacobian)
        opt.zero_grad(set_to_none=True)
        try:
            total, parts = total_loss(policy, batch, weights, ctx)
        except NonFiniteError as err:
            raise NonFiniteLossError(epoch) from err
        if not torch.isfinite(total):
            bad = next((k for k, v in parts.items() if not torch.isfinite(v)), None)
            raise NonFiniteLossError(epoch, bad)
        total.backward()
        opt.step()
        policy.epochs_trained = epoch + 1
        row = {"epoch": epoch, "lr": lr, "total": total.item()}
        row.update({k: v.item() for k, v in parts.items()})
        report.rows.append(row)
        if log is not None:
            log(row)
    report.checksum = parameter_checksum(policy)
    report.wall_time = time.perf_counter() - start
    return policy, report


def gradient_check(policy: Policy, dataset: OracleDataset, weights: LossWeights, seed: int = 0,
                   fraction: float = 0.01, delta: float = 1e-5, min_entries: int = 8,
                   atol: float = 1e-7) -> float:
    """Max relative error between autograd and central-difference parameter gradients.

    A random ``fraction`` of the trained entries (at least ``min_entries``)
    is probed; the loss samples are frozen by ``seed``.
    """
    batch = Batch(dataset)
    ctx = LossContext(seed=seed)
    if "tgd" in weights.active():
        ctx.phi0 = default_phi0(policy, batch)
    params = [p for p in policy.parameters() if p.requires_grad]
    for p in params:
        p.grad = None
    total, _ = total_loss(policy, batch, weights, ctx)
    if not torch.isfinite(total):
        raise NonFiniteLossError(-1)
    if not total.requires_grad:
        return 0.0
    grads = torch.autograd.grad(total, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = [p.numel() for p in params]
    count = max(min_entries, int(round(fraction * sum(sizes))))
    rng = np.random.default_rng(seed)
    picks = rng.choice(sum(sizes), size=min(count, sum(sizes)), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, idx = params[k], int(flat - offsets[k])
            view = p.view(-1)
            orig = view[idx].item()
            view[idx] = orig + delta
            up = float(total_loss(policy, batch, weights, ctx)[0])
            view[idx] = orig - delta
            down = float(total_loss(policy, batch, weights, ctx)[0])
            view[idx] = orig
            fd = (up - down) / (2 * delta)
            an = float(grads[k].view(-1)[idx])
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), atol))
    return worst


def config_to_dict(obj) -> dict:
    d = asdict(obj)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def from_dict(cls, d: dict):
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
    return cls(**kw)


def with_overrides(obj, **kw):
    return replace(obj, **{k: v for k, v in kw.items() if v is not None})
