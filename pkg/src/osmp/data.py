"""Demonstration datasets: file format, normalization, smoothing, oracles.

A dataset file is a comma-separated table with header
``t,x_1..x_n[,v_1..v_n][,z]`` and a JSON sidecar (``<stem>.meta.json``)
carrying the period, the periodic index ranges and the normalization.
Floats are written with 17 significant digits so files round-trip exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    """``x_norm = (x - offset) * scale``; velocities scale by ``scale`` alone."""

    scale: float
    offset: tuple

    def apply(self, x):
        return (np.asarray(x) - np.asarray(self.offset)) * self.scale

    def invert(self, x_norm):
        return np.asarray(x_norm) / self.scale + np.asarray(self.offset)

    def to_dict(self):
        return {"scale": self.scale, "offset": list(self.offset)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["scale"]), tuple(float(v) for v in d["offset"]))


@dataclass
class OracleDataset:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    period: float
    periodic: np.ndarray = None  # bool mask
    z: Optional[np.ndarray] = None
    normalization: Optional[Normalization] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        if self.periodic is None:
            self.periodic = np.ones(len(self.t), dtype=bool)
        self.periodic = np.asarray(self.periodic, dtype=bool)
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=float)
        self.validate()

    @property
    def n(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return len(self.t)

    def validate(self):
        m = len(self.t)
        if self.x.shape[0] != m or self.v.shape[0] != m or len(self.periodic) != m:
            raise DatasetError("timestamps, positions, velocities and mask must have equal length")
        if self.z is not None and len(self.z) != m:
            raise DatasetError("conditioning must have one value per sample")
        if self.v.shape != self.x.shape:
            raise DatasetError("velocity and position dimensions differ")
        for idx in self.groups():
            if np.any(np.diff(self.t[idx]) <= 0):
                raise DatasetError("timestamps must be strictly increasing within a demonstration")
        if self.periodic.any() and not self.period > 0:
            raise DatasetError("period must be positive when periodic samples exist")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v))):
            raise DatasetError("non-finite positions or velocities")

    def groups(self):
        """Index arrays of the demonstrations (runs of equal conditioning)."""
        if self.z is None or len(self.z) == 0:
            return [np.arange(len(self.t))]
        cuts = np.flatnonzero(np.diff(self.z) != 0) + 1
        return np.split(np.arange(len(self.t)), cuts)

    def conditionings(self):
        return None if self.z is None else np.unique(self.z)

    def max_speed(self) -> float:
        return float(np.max(np.linalg.norm(self.v, axis=1)))

    def subset(self, idx) -> "OracleDataset":
        return replace(self, t=self.t[idx], x=self.x[idx], v=self.v[idx],
                       periodic=self.periodic[idx],
                       z=None if self.z is None else self.z[idx])

    @property
    def dt(self) -> float:
        return float(np.median(np.diff(self.t[self.groups()[0]])))


# -- smoothing & differentiation ----------------------------------------------

def _sg_row(offsets, order, at=0.0):
    """Least-squares weights reproducing a degree-``order`` fit evaluated at ``at``."""
    deg = min(order, len(offsets) - 1)
    vander = np.vander(np.asarray(offsets, dtype=float) - at, deg + 1, increasing=True)
    return np.linalg.pinv(vander)[0]


def savgol_coeffs(window: int, order: int):
    """Interior weights; for even windows the sample sits just right of center."""
    left = window // 2
    return _sg_row(np.arange(-left, window - left), order)


def savitzky_golay(series, order: int = 3, window: int = 8):
    """Local least-squares polynomial smoothing along axis 0.

    Each output sample is the value at that sample of a degree-``order``
    polynomial fitted to ``window`` neighbours; near the ends the window is
    truncated to the available samples.
    """
    y = np.asarray(series, dtype=float)
    m = y.shape[0]
    if not (order < window <= m) or order < 0:
        raise ValueError("need 0 <= order < window <= len(series)")
    left = window // 2
    right = window - left - 1
    out = np.empty_like(y)
    interior = savgol_coeffs(window, order)
    for i in range(m):
        lo, hi = i - left, i + right
        if lo >= 0 and hi < m:
            w = interior
        else:
            lo, hi = max(lo, 0), min(hi, m - 1)
            w = _sg_row(np.arange(lo, hi + 1) - i, order)
        out[i] = np.tensordot(w, y[lo:hi + 1], axes=1)
    return out


def finite_difference_velocities(positions, timestamps, periodic=False):
    """Central differences inside, one-sided at the ends.

    With ``periodic=True`` differences wrap around; a duplicated closing
    sample (first == last) is recognized and gets the first sample's velocity.
    """
    x = np.asarray(positions, dtype=float)
    t = np.asarray(timestamps, dtype=float)
    if len(t) < 3:
        raise ValueError("need at least 3 samples")
    if not periodic:
        return np.gradient(x, t, axis=0)
    closed = np.allclose(x[0], x[-1], rtol=0, atol=1e-12)
    xs, ts = (x[:-1], t[:-1]) if closed else (x, t)
    span = t[-1] - t[0] if closed else (t[-1] - t[0]) + (t[1] - t[0])
    nxt = np.roll(xs, -1, axis=0)
    prv = np.roll(xs, 1, axis=0)
    t_nxt = np.roll(ts, -1)
    t_prv = np.roll(ts, 1)
    t_nxt[-1] += span
    t_prv[0] -= span
    v = (nxt - prv) / (t_nxt - t_prv)[:, None]
    return np.vstack([v, v[:1]]) if closed else v


# -- normalization --------------------------------------------------------------

def normalize(ds: OracleDataset, transform: Optional[Normalization] = None):
    """Zero-mean, isotropically scaled so the largest coordinate magnitude is 0.5."""
    if len(ds) == 0:
        raise DatasetError("cannot normalize an empty dataset")
    if transform is None:
        offset = ds.x.mean(axis=0)
        centered = ds.x - offset
        if np.any(np.ptp(ds.x, axis=0) == 0):
            raise DatasetError("a coordinate has zero range")
        transform = Normalization(0.5 / float(np.max(np.abs(centered))), tuple(offset.tolist()))
    out = replace(ds, x=transform.apply(ds.x), v=ds.v * transform.scale,
                  normalization=transform)
    return out, transform


def denormalize(ds: OracleDataset) -> OracleDataset:
    tr = ds.normalization
    if tr is None:
        return ds
    return replace(ds, x=tr.invert(ds.x), v=ds.v / tr.scale, normalization=None)


def resample_cubic(ds: OracleDataset, factor: int) -> OracleDataset:
    """Upsample every demonstration by ``factor`` with cubic splines."""
    from scipy.interpolate import CubicSpline

    parts = []
    for idx in ds.groups():
        t = ds.t[idx]
        tt = np.linspace(t[0], t[-1], (len(t) - 1) * factor + 1)
        cs = CubicSpline(t, ds.x[idx], axis=0)
        z = None if ds.z is None else np.full(len(tt), ds.z[idx][0])
        parts.append((tt, cs(tt), cs(tt, 1), z))
    return replace(ds, t=np.concatenate([p[0] for p in parts]),
                   x=np.vstack([p[1] for p in parts]), v=np.vstack([p[2] for p in parts]),
                   periodic=np.ones(sum(len(p[0]) for p in parts), dtype=bool),
                   z=None if ds.z is None else np.concatenate([p[3] for p in parts]))


def concatenate(datasets, conditionings) -> OracleDataset:
    """Stack several single-demonstration datasets, tagging each with a conditioning."""
    periods = {d.period for d in datasets}
    if len(periods) != 1:
        raise DatasetError("conditioned demonstrations must share one period")
    return OracleDataset(
        t=np.concatenate([d.t for d in datasets]),
        x=np.vstack([d.x for d in datasets]),
        v=np.vstack([d.v for d in datasets]),
        period=periods.pop(),
        periodic=np.concatenate([d.periodic for d in datasets]),
        z=np.concatenate([np.full(len(d), float(c)) for d, c in zip(datasets, conditionings)]),
    )


# -- file format ----------------------------------------------------------------

def _ranges(mask):
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return []
    cuts = np.flatnonzero(np.diff(idx) != 1) + 1
    return [[int(r[0]), int(r[-1]) + 1] for r in np.split(idx, cuts)]


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_dataset(ds: OracleDataset, path, write_velocity=True):
    path = Path(path)
    n = ds.n
    cols = ["t"] + [f"x_{i + 1}" for i in range(n)]
    blocks = [ds.t[:, None], ds.x]
    if write_velocity:
        cols += [f"v_{i + 1}" for i in range(n)]
        blocks.append(ds.v)
    if ds.z is not None:
        cols.append("z")
        blocks.append(ds.z[:, None])
    np.savetxt(path, np.hstack(blocks), delimiter=",", header=",".join(cols), comments="",
               fmt="%.17g")
    meta = {
        "format_version": FORMAT_VERSION,
        "n": n,
        "period": ds.period,
        "periodic_ranges": _ranges(ds.periodic),
        "units": ds.meta.get("units", {"t": "s", "x": "normalized" if ds.normalization else "m"}),
        "normalization": None if ds.normalization is None else ds.normalization.to_dict(),
    }
    extra = {k: v for k, v in ds.meta.items() if k not in meta}
    meta.update(extra)
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path, require_normalized=False) -> OracleDataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such dataset file: {path}")
    mp = meta_path(path)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    with open(path) as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"cannot parse {path}: {exc}") from exc
    if table.shape[1] != len(header):
        raise DatasetError("row width does not match header")
    col = {name: i for i, name in enumerate(header)}
    if "t" not in col or "x_1" not in col:
        raise DatasetError("dataset needs columns t and x_1..x_n")
    n = sum(1 for h in header if h.startswith("x_"))
    if n < 2 or any(f"x_{i + 1}" not in col for i in range(n)):
        raise DatasetError("position columns must be x_1..x_n with n >= 2")
    if "n" in meta and meta["n"] != n:
        raise DatasetError(f"manifest says n={meta['n']} but file has {n} position columns")
    n_v = sum(1 for h in header if h.startswith("v_"))
    if n_v not in (0, n):
        raise DatasetError("velocity columns must match the position dimension")
    t = table[:, col["t"]]
    x = table[:, [col[f"x_{i + 1}"] for i in range(n)]]
    z = table[:, col["z"]] if "z" in col else None
    mask = np.zeros(len(t), dtype=bool)
    ranges = meta.get("periodic_ranges")
    if ranges is None:
        mask[:] = True
    for a, b in ranges or []:
        mask[a:b] = True
    period = meta.get("period")
    if period is None:
        period = float(t[mask][-1] - t[mask][0]) if mask.any() else 0.0
    if n_v:
        v = table[:, [col[f"v_{i + 1}"] for i in range(n)]]
    else:
        probe = OracleDataset(t=t, x=x, v=np.zeros_like(x), period=period, periodic=mask, z=z)
        v = np.vstack([finite_difference_velocities(x[idx], t[idx], periodic=bool(mask[idx].all()))
                       for idx in probe.groups()])
    norm = meta.get("normalization")
    known = {"format_version", "n", "period", "periodic_ranges", "normalization"}
    ds = OracleDataset(t=t, x=x, v=v, period=float(period), periodic=mask, z=z,
                       normalization=None if norm is None else Normalization.from_dict(norm),
                       meta={k: v for k, v in meta.items() if k not in known})
    if require_normalized:
        check_normalized(ds)
    return ds


def check_normalized(ds: OracleDataset, tol=1e-9):
    if np.max(np.abs(ds.x)) > 0.5 + tol:
        raise DatasetError("positions exceed [-0.5, 0.5]")
    if np.max(np.abs(ds.x.mean(axis=0))) > tol:
        raise DatasetError("positions are not zero-mean")


# -- synthetic oracles -----------------------------------------------------------

def _polygon_oracle(vertices, t, period, modulation):
    """Closed polygon traversed once per period.

    Time per edge is proportional to its length; ``modulation`` in [0, 1)
    slows the motion near vertices (speed factor ``1 - m cos(2 pi u)`` along
    each edge). A sample landing exactly on a vertex gets the mean of the two
    adjacent edge velocities.
    """
    verts = np.asarray(vertices, dtype=float)
    nxt = np.roll(verts, -1, axis=0)
    lengths = np.linalg.norm(nxt - verts, axis=1)
    bounds = np.concatenate([[0.0], np.cumsum(lengths) / lengths.sum()]) * period
    durations = np.diff(bounds)
    m = modulation

    def edge_state(k, tau):
        u = (tau - bounds[k]) / durations[k]
        ease = u - m * np.sin(2 * np.pi * u) / (2 * np.pi)
        rate = (1 - m * np.cos(2 * np.pi * u)) / durations[k]
        d = nxt[k] - verts[k]
        return verts[k] + ease * d, rate * d

    x = np.empty((len(t), verts.shape[1]))
    v = np.empty_like(x)
    for i, ti in enumerate(t):
        tau = np.mod(ti, period)
        k = min(int(np.searchsorted(bounds, tau, side="right") - 1), len(verts) - 1)
        x[i], v[i] = edge_state(k, tau)
        at_vertex = math.isclose(tau, bounds[k], abs_tol=1e-12 * period)
        if at_vertex:
            _, v_prev = edge_state(k - 1, bounds[k])
            v[i] = 0.5 * (v[i] + v_prev)
            x[i] = verts[k]
    return x, v


SWIM_DEFAULTS = {
    "amplitudes": (0.6, 0.4, 0.3),
    "phases": (0.0, np.pi / 2, np.pi),
    "harmonic": 0.25,
}


def synth_oracle(kind: str, params=None, samples: int = 500, period=None, seed: int = 0):
    """Analytic demonstration of one period (first and last sample coincide).

    Kinds: ``ellipse`` (a, b, center), ``square`` (side, modulation),
    ``star`` (points, r_outer, r_inner, modulation), ``swim`` (3-D sinusoidal
    joint template; amplitudes, phases, harmonic, noise). ``seed`` drives the
    optional measurement noise (``noise`` param, default 0).
    """
    params = dict(params or {})
    if samples < 8:
        raise ValueError("need at least 8 samples")
    rng = np.random.default_rng(seed)
    if period is None:
        period = 4.0 if kind == "swim" else 20.0
    t = np.linspace(0.0, period, samples)
    w = 2 * np.pi / period
    if kind == "ellipse":
        a, b = params.get("a", 2.0), params.get("b", 1.0)
        c = np.asarray(params.get("center", (0.0, 0.0)), dtype=float)
        x = np.stack([a * np.cos(w * t), b * np.sin(w * t)], axis=1) + c
        v = np.stack([-a * w * np.sin(w * t), b * w * np.cos(w * t)], axis=1)
    elif kind == "square":
        s = params.get("side", 2.0) / 2
        verts = [(s, 0.0), (s, s), (-s, s), (-s, -s), (s, -s)]
        x, v = _polygon_oracle(verts, t, period, params.get("modulation", 0.0))
    elif kind == "star":
        k = int(params.get("points", 5))
        ro, ri = params.get("r_outer", 1.0), params.get("r_inner", 0.45)
        ang = np.arange(2 * k) * np.pi / k
        rad = np.where(np.arange(2 * k) % 2 == 0, ro, ri)
        verts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        x, v = _polygon_oracle(verts, t, period, params.get("modulation", 0.0))
    elif kind == "swim":
        amp = np.asarray(params.get("amplitudes", SWIM_DEFAULTS["amplitudes"]), dtype=float)
        ph = np.asarray(params.get("phases", SWIM_DEFAULTS["phases"]), dtype=float)
        h = float(params.get("harmonic", SWIM_DEFAULTS["harmonic"]))
        arg = w * t[:, None] + ph[None]
        x = amp * (np.sin(arg) + h * np.sin(2 * arg))
        v = amp * w * (np.cos(arg) + 2 * h * np.cos(2 * arg))
    else:
        raise ValueError(f"unknown oracle kind {kind!r}")
    noise = float(params.get("noise", 0.0))
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    meta = {"kind": kind, "params": {k: (list(v) if isinstance(v, (tuple, np.ndarray)) else v)
                                     for k, v in params.items()}, "seed": seed}
    return OracleDataset(t=t, x=x, v=v, period=float(period), meta=meta)
