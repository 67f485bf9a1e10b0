"""Imitation and shape metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist


def _pair(a, b, same_length=True):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if same_length and a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    return a, b


def traj_rmse(actual, desired) -> float:
    a, b = _pair(actual, desired)
    return float(np.sqrt(np.mean((a - b) ** 2)))


vel_rmse = traj_rmse


def dtw_path(a, b):
    """Minimal-cost alignment with steps (1,0), (0,1), (1,1) and pinned endpoints.

    Returns ``(cost, path)`` where ``path`` is a list of index pairs.
    """
    a, b = _pair(a, b, same_length=False)
    d = cdist(a, b)
    na, nb = d.shape
    acc = np.full((na + 1, nb + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, na + 1):
        row, prev = acc[i], acc[i - 1]
        di = d[i - 1]
        for j in range(1, nb + 1):
            row[j] = di[j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    path = [(na - 1, nb - 1)]
    i, j = na, nb
    while (i, j) != (1, 1):
        moves = [(acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j),
                 (acc[i, j - 1], i, j - 1)]
        _, i, j = min(moves, key=lambda m: m[0])
        path.append((i - 1, j - 1))
    return float(acc[na, nb]), path[::-1]


def dtw_normalized(a, b) -> float:
    """DTW cost divided by the length of ``a``."""
    cost, _ = dtw_path(a, b)
    return cost / len(np.asarray(a))


def directed_hausdorff(a, b) -> float:
    """``max_{p in a} min_{q in b} |p - q|``."""
    a, b = _pair(a, b, same_length=False)
    dist, _ = cKDTree(b).query(a)
    return float(np.max(dist))


def hausdorff(a, b) -> float:
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def kabsch(src, dst):
    """Rotation ``R`` and translation ``t`` minimizing ``sum |R src_i + t - dst_i|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    flip = np.ones(len(mu_s))
    if np.linalg.det(vt.T @ u.T) < 0:
        flip[-1] = -1.0
    rot = vt.T @ np.diag(flip) @ u.T
    return rot, mu_d - rot @ mu_s


@dataclass(frozen=True)
class ICPResult:
    med: float
    rotation: np.ndarray
    translation: np.ndarray
    iterations: int
    converged: bool


def _plane_rotation(basis, theta):
    """Rotation by ``theta`` in the plane spanned by the two rows of ``basis``."""
    u, w = basis
    c, s = np.cos(theta), np.sin(theta)
    return (np.eye(len(u)) + (c - 1.0) * (np.outer(u, u) + np.outer(w, w))
            + s * (np.outer(w, u) - np.outer(u, w)))


def rotation_search(src, dst, tree=None, coarse=360, fine=41, candidates=4, max_points=200):
    """Best in-plane starting rotation on a coarse-to-fine angle grid.

    Rotations act in the plane of ``dst``'s two leading principal axes (all
    of SO(2) for planar data) about the centroids. The deepest few local
    minima of the coarse grid are each refined twice, since the true basin
    can be narrower than the coarse spacing. The coarse grid scores at most
    ``max_points`` evenly strided source points; refinement uses all of them.
    """
    tree = tree or cKDTree(dst)
    _, _, vt = np.linalg.svd(dst - dst.mean(axis=0), full_matrices=False)
    basis = vt[:2]

    centered = src - src.mean(axis=0)
    sparse = centered[::max(1, -(-len(src) // max_points))]
    target = dst.mean(axis=0)

    def meds(grid, pts=centered):
        rots = np.stack([_plane_rotation(basis, th) for th in grid])
        moved = np.einsum("pj,gij->gpi", pts, rots) + target
        return tree.query(moved.reshape(-1, moved.shape[-1]))[0].reshape(len(grid), -1).mean(axis=1)

    step = 2 * np.pi / coarse
    grid = np.arange(coarse) * step
    values = meds(grid, sparse)
    local = np.flatnonzero((values <= np.roll(values, 1)) & (values <= np.roll(values, -1)))
    starts = grid[local[np.argsort(values[local])[:candidates]]]
    best = (np.inf, 0.0)
    for center in starts:
        width = step
        for _ in range(2):
            ring = center + np.linspace(-width, width, fine)
            values = meds(ring)
            center = ring[int(np.argmin(values))]
            width = 2 * width / (fine - 1)
        best = min(best, (float(values.min()), center))
    return _plane_rotation(basis, best[1])


def _icp_from(src, dst, tree, rot, max_iter, tol):
    trans = dst.mean(axis=0) - src.mean(axis=0) @ rot.T
    best = (np.inf, rot, trans)
    prev = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        moved = src @ rot.T + trans
        dist, idx = tree.query(moved)
        med = float(dist.mean())
        if med < best[0]:
            best = (med, rot, trans)
        if med == 0.0 or (np.isfinite(prev) and (prev - med) <= tol * prev):
            converged = True
            break
        prev = med
        rot, trans = kabsch(src, dst[idx])
    return ICPResult(best[0], best[1], best[2], it, converged)


def icp(actual, desired, max_iter=200, tol=1e-8, search=True) -> ICPResult:
    """Rigidly align ``actual`` onto ``desired`` by iterative closest point.

    Point-to-point ICP started from centroid alignment. With ``search`` a
    second run starts from :func:`rotation_search`, since plain ICP locks
    onto neighbouring-sample correspondences once the misalignment exceeds
    about one sample spacing; the better result is returned.
    """
    src, dst = _pair(actual, desired)
    n = src.shape[1]
    if len(src) < n:
        raise ValueError("need at least n points")
    tree = cKDTree(dst)
    res = _icp_from(src, dst, tree, np.eye(n), max_iter, tol)
    if search and res.med > 0.0:
        alt = _icp_from(src, dst, tree, rotation_search(src, dst, tree), max_iter, tol)
        if alt.med < res.med:
            res = alt
    return res


def icp_med(actual, desired, max_iter=200, tol=1e-8, search=True) -> float:
    return icp(actual, desired, max_iter, tol, search).med
