"""Phase synchronization of several policies.

Each policy's angular velocity is multiplied by
``1 - k_ps * sum_j sin(dphi_ij + phi_i - phi_j)`` (clamped so the rotation
never reverses), which changes only the speed along each limit cycle.
With ``k_ps >= 1 / (n_s - 1)`` the raw factor can reach zero and the clamp
becomes active.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import OracleDataset, save_dataset
from .encoder import DTYPE
from .evaluation import DIVERGENCE_FACTOR
from .latent import wrap_angle
from .policy import Policy


def phase(policy: Policy, x, z=None) -> float:
    """Latent polar phase of ``x`` in ``[-pi, pi)``."""
    with torch.no_grad():
        return float(policy.phase(torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE), z))


def coupling_factor(i: int, phases, offsets, k_ps: float) -> float:
    phases = np.asarray(phases, dtype=float)
    return 1.0 - k_ps * float(np.sum(np.sin(offsets[i] + phases[i] - phases)))


def synchronized_omega(i: int, phases, offsets, k_ps: float, base_omega: float,
                       eps_omega: float = 1e-6) -> float:
    """Coupled angular velocity of system ``i`` (clamped below at ``eps_omega``)."""
    offsets = np.asarray(offsets, dtype=float)
    return max(base_omega * coupling_factor(i, phases, offsets, k_ps), eps_omega)


class SyncGroup:
    def __init__(self, policies: Sequence[Policy], offsets=None, k_ps: float = 0.5, zs=None):
        self.policies = list(policies)
        n_s = len(self.policies)
        if n_s < 1:
            raise ValueError("need at least one policy")
        dims = {p.n for p in self.policies}
        if len(dims) != 1:
            raise ValueError(f"policies have different state dimensions: {sorted(dims)}")
        if k_ps < 0:
            raise ValueError("k_ps must be nonnegative")
        off = np.zeros((n_s, n_s)) if offsets is None else np.array(offsets, dtype=float)
        if off.shape != (n_s, n_s):
            raise ValueError(f"offset matrix must be {n_s}x{n_s}")
        off = wrap_angle(off)
        if not np.allclose(off, off.T, atol=1e-12):
            raise ValueError("desired phase offsets must be symmetric")
        if np.any(np.diag(off) != 0):
            raise ValueError("diagonal phase offsets must be zero")
        self.offsets = off
        self.k_ps = float(k_ps)
        self.zs = [None] * n_s if zs is None else list(zs)
        if len(self.zs) != n_s:
            raise ValueError("need one conditioning value per policy")

    @property
    def size(self) -> int:
        return len(self.policies)

    @property
    def n(self) -> int:
        return self.policies[0].n

    def pairs(self):
        return [(i, j) for i in range(self.size) for j in range(i + 1, self.size)]


@dataclass
class GroupTrace:
    t: np.ndarray
    states: np.ndarray  # (steps+1, n_s, n)
    velocities: np.ndarray
    phases: np.ndarray  # (steps+1, n_s)
    errors_deg: np.ndarray  # (steps+1, n_pairs), wrapped into [-180, 180)
    pairs: list
    diverged: np.ndarray

    def max_abs_error(self, start: int = 0) -> float:
        return float(np.max(np.abs(self.errors_deg[start:]))) if self.pairs else 0.0

    def mean_abs_error(self, start: int = 0) -> float:
        return float(np.mean(np.abs(self.errors_deg[start:]))) if self.pairs else 0.0

    def export(self, out_dir, stem="sync"):
        """One dataset-format file per system plus ``<stem>_phase.csv``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for i in range(self.states.shape[1]):
            ds = OracleDataset(t=self.t, x=self.states[:, i], v=self.velocities[:, i], period=0.0,
                               periodic=np.zeros(len(self.t), dtype=bool),
                               meta={"system": i, "diverged": bool(self.diverged[i])})
            p = out_dir / f"{stem}_{i}.csv"
            save_dataset(ds, p)
            paths.append(p)
        p = out_dir / f"{stem}_phase.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *[f"phi_{i}" for i in range(self.phases.shape[1])],
                        *[f"err_{i}_{j}_deg" for i, j in self.pairs]])
            for k in range(len(self.t)):
                w.writerow([repr(float(self.t[k])), *map(repr, self.phases[k].tolist()),
                            *map(repr, self.errors_deg[k].tolist())])
        paths.append(p)
        return paths


def pair_errors(phases, offsets, pairs):
    """Wrapped ``phi_i - phi_j + dphi_ij`` in degrees for each pair."""
    phases = np.asarray(phases, dtype=float)
    if not pairs:
        return np.zeros(0)
    i, j = np.array(pairs).T
    return np.degrees(wrap_angle(phases[i] - phases[j] + offsets[i, j]))


def simulate_group(group: SyncGroup, x0s, dt: float, steps: int, diameter: Optional[float] = None,
                   couple: bool = True) -> GroupTrace:
    """Coupled forward-Euler rollout; ``couple=False`` runs the systems independently."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.array(x0s, dtype=float)
    n_s, n = group.size, group.n
    if x.shape != (n_s, n):
        raise ValueError(f"need {n_s} initial states of dimension {n}")
    limit = DIVERGENCE_FACTOR * (math.sqrt(n) if diameter is None else diameter)
    pairs = group.pairs()
    states = np.empty((steps + 1, n_s, n))
    vels = np.zeros_like(states)
    phases = np.empty((steps + 1, n_s))
    errors = np.empty((steps + 1, len(pairs)))
    diverged = np.zeros(n_s, dtype=bool)
    with torch.no_grad():
        for k in range(steps + 1):
            states[k] = x
            phi = np.array([phase(p, xi, z) if not d else np.nan
                            for p, xi, z, d in zip(group.policies, x, group.zs, diverged)])
            phases[k] = phi
            errors[k] = pair_errors(phi, group.offsets, pairs)
            for i, (pol, z) in enumerate(zip(group.policies, group.zs)):
                if diverged[i]:
                    continue
                factor = coupling_factor(i, phi, group.offsets, group.k_ps) if couple else None
                v = pol.velocity(torch.as_tensor(x[i], dtype=DTYPE), z,
                                 omega_factor=factor).numpy()
                vels[k, i] = v
                if k < steps:
                    x[i] = x[i] + dt * v
                    if not np.all(np.isfinite(x[i])) or np.linalg.norm(x[i]) > limit:
                        diverged[i] = True
    return GroupTrace(np.arange(steps + 1) * dt, states, vels, phases, errors, pairs, diverged)
