"""Rollouts and the evaluation protocol.

Rollouts use explicit forward Euler. A rollout is flagged divergent once
its state norm exceeds ``DIVERGENCE_FACTOR`` times the workspace diameter or
the policy returns a non-finite velocity; the divergent state is frozen.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import metrics
from .data import OracleDataset
from .encoder import DTYPE, NonFiniteError
from .policy import Policy, ShapingState, SingularJacobianError

DIVERGENCE_FACTOR = 10.0
MODES = {"local": 0.05, "global": 0.15}


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    diverged: bool = False
    z: Optional[float] = None

    def __post_init__(self):
        if not (len(self.t) == len(self.x) == len(self.v)):
            raise ValueError("timestamps, states and velocities must have equal length")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def to_dataset(self, period=0.0) -> OracleDataset:
        z = None if self.z is None else np.full(len(self.t), float(self.z))
        return OracleDataset(t=self.t, x=self.x, v=self.v, period=period,
                             periodic=np.zeros(len(self.t), dtype=bool) if period <= 0 else None,
                             z=z)


def rollout_batch(policy: Policy, x0, z=None, dt=1e-2, steps=100, shape=None,
                  diameter=None, omega_factor=None):
    """Integrate ``B`` initial states at once.

    Returns ``(states, velocities, diverged)`` with shapes ``(steps+1, B, n)``,
    ``(steps+1, B, n)`` and ``(B,)``. The velocity row ``k`` is the policy
    output at state ``k``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = torch.as_tensor(np.atleast_2d(np.asarray(x0, dtype=float)), dtype=DTYPE).clone()
    b, n = x.shape
    limit = DIVERGENCE_FACTOR * (math.sqrt(n) if diameter is None else diameter)
    states = np.empty((steps + 1, b, n))
    vels = np.zeros((steps + 1, b, n))
    diverged = np.zeros(b, dtype=bool)
    z_t = None if z is None else torch.as_tensor(np.broadcast_to(np.asarray(z, dtype=float), (b,)).copy(),
                                                 dtype=DTYPE)
    with torch.no_grad():
        for k in range(steps + 1):
            states[k] = x.numpy()
            alive = ~diverged
            if not alive.any():
                vels[k:] = 0.0
                states[k:] = states[k]
                break
            idx = torch.as_tensor(np.flatnonzero(alive))
            try:
                v = policy.velocity(x[idx], None if z_t is None else z_t[idx], shape,
                                    omega_factor=omega_factor)
                bad = ~torch.isfinite(v).all(dim=-1)
            except (SingularJacobianError, NonFiniteError):
                v = torch.zeros(len(idx), n, dtype=DTYPE)
                bad = torch.ones(len(idx), dtype=torch.bool)
            v[bad] = 0.0
            vels[k, idx.numpy()] = v.numpy()
            if k == steps:
                break
            x[idx] = x[idx] + dt * v
            norms = torch.linalg.vector_norm(x, dim=-1).numpy()
            newly = alive & ((norms > limit) | ~np.isfinite(norms))
            newly[idx.numpy()[bad.numpy()]] = True
            diverged |= newly
    return states, vels, diverged


def rollout(policy: Policy, x0, z=None, dt=1e-2, steps=100, shape: Optional[ShapingState] = None,
            diameter=None) -> Trajectory:
    states, vels, div = rollout_batch(policy, np.asarray(x0, dtype=float)[None], z, dt, steps,
                                      shape, diameter)
    t = np.arange(steps + 1) * dt
    return Trajectory(t, states[:, 0], vels[:, 0], bool(div[0]), None if z is None else float(z))


# -- protocol ------------------------------------------------------------------

def _demos(ds: OracleDataset):
    """(positions, velocities, conditioning) of each periodic demonstration."""
    out = []
    for idx in ds.groups():
        idx = idx[ds.periodic[idx]]
        if len(idx) < 2:
            continue
        out.append((ds.x[idx], ds.v[idx], None if ds.z is None else float(ds.z[idx[0]]),
                    float(np.median(np.diff(ds.t[idx])))))
    if not out:
        raise ValueError("dataset has no periodic demonstration")
    return out


def imitation_metrics(policy: Policy, ds: OracleDataset, diameter=None) -> dict:
    """Roll out from each demonstration's first sample for its length and compare."""
    rows = []
    for x_d, v_d, z, dt in _demos(ds):
        states, vels, div = rollout_batch(policy, x_d[:1], z, dt, len(x_d) - 1, diameter=diameter)
        if div[0]:
            rows.append(dict(traj_rmse=math.inf, norm_dtw=math.inf, vel_rmse=math.inf))
            continue
        x, v = states[:, 0], vels[:, 0]
        rows.append(dict(traj_rmse=metrics.traj_rmse(x, x_d),
                         norm_dtw=metrics.dtw_normalized(x, x_d),
                         vel_rmse=metrics.vel_rmse(v, v_d)))
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


@dataclass
class ConvergenceResult:
    hausdorff: float
    icp_med: float
    n_divergent: int
    n_total: int
    per_rollout: list = field(default_factory=list)


def convergence_protocol(policy: Policy, ds: OracleDataset, mode="local", n_inits=25, seed=0,
                         sigma=None, diameter=None) -> ConvergenceResult:
    """Perturbed-start rollouts scored by shape distance to the demonstration.

    ``local``: sigma 0.05, ``N`` rollout states. ``global``: sigma 0.15,
    ``2N`` states of which the last ``N`` are scored. Divergent rollouts are
    excluded from the means and counted.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {sorted(MODES)}")
    sigma = MODES[mode] if sigma is None else sigma
    rng = np.random.default_rng(seed)
    scores = []
    divergent = 0
    total = 0
    for x_d, _, z, dt in _demos(ds):
        n_pts = len(x_d)
        picks = rng.integers(0, n_pts, size=n_inits)
        x0 = x_d[picks] + sigma * rng.standard_normal((n_inits, x_d.shape[1]))
        length = n_pts if mode == "local" else 2 * n_pts
        states, _, div = rollout_batch(policy, x0, z, dt, length - 1, diameter=diameter)
        kept = states[-n_pts:]
        for j in range(n_inits):
            total += 1
            if div[j]:
                divergent += 1
                scores.append((math.inf, math.inf))
                continue
            path = kept[:, j]
            scores.append((metrics.directed_hausdorff(path, x_d), metrics.icp_med(path, x_d)))
    finite = [s for s in scores if math.isfinite(s[0])]
    if finite:
        haus = float(np.mean([s[0] for s in finite]))
        med = float(np.mean([s[1] for s in finite]))
    else:
        haus = med = math.inf
    return ConvergenceResult(haus, med, divergent, total, scores)


COLUMNS = ("traj_rmse", "norm_dtw", "vel_rmse", "local_hausdorff", "local_icp_med",
           "global_hausdorff", "global_icp_med")


@dataclass
class EvalReport:
    seeds: list
    per_seed: list  # one dict per seed with COLUMNS keys
    divergent: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([r[name] for r in self.per_seed], dtype=float)

    def mean(self, name) -> float:
        vals = self.column(name)
        finite = vals[np.isfinite(vals)]
        return float(finite.mean()) if len(finite) else math.inf

    def std(self, name) -> float:
        vals = self.column(name)
        finite = vals[np.isfinite(vals)]
        return float(finite.std()) if len(finite) else math.inf

    @property
    def flagged(self) -> bool:
        return any(self.divergent.values()) or any(
            not math.isfinite(r[c]) for r in self.per_seed for c in COLUMNS)

    def summary(self) -> dict:
        return {c: (self.mean(c), self.std(c)) for c in COLUMNS}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", *COLUMNS, "local_divergent", "global_divergent"])
            for s, r in zip(self.seeds, self.per_seed):
                w.writerow([s, *[_fmt(r[c]) for c in COLUMNS], r["local_divergent"],
                            r["global_divergent"]])
            w.writerow(["mean", *[_fmt(self.mean(c)) for c in COLUMNS], "", ""])
            w.writerow(["std", *[_fmt(self.std(c)) for c in COLUMNS], "", ""])

    def table(self) -> str:
        lines = [f"{c:>18s}  {_fmt(self.mean(c))} +- {_fmt(self.std(c))}" for c in COLUMNS]
        flags = [f"{k}: {v} divergent rollouts excluded" for k, v in self.divergent.items() if v]
        return "\n".join(lines + flags)


def _fmt(v) -> str:
    return "inf" if not math.isfinite(v) else f"{v:.6g}"


def evaluate(policy: Policy, ds: OracleDataset, seeds: Sequence[int] = (0,), n_inits=25,
             diameter=None) -> EvalReport:
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    imit = imitation_metrics(policy, ds, diameter)
    rows = []
    divergent = {"local": 0, "global": 0}
    for s in seeds:
        row = dict(imit)
        for mode in ("local", "global"):
            res = convergence_protocol(policy, ds, mode, n_inits, s, diameter=diameter)
            row[f"{mode}_hausdorff"] = res.hausdorff
            row[f"{mode}_icp_med"] = res.icp_med
            row[f"{mode}_divergent"] = res.n_divergent
            divergent[mode] += res.n_divergent
        rows.append(row)
    return EvalReport(seeds, rows, divergent)
