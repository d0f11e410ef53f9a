"""Space-filling indicators for a cloud of scaled extended input/state points.

Three indicators are provided: the mean over a uniform reference grid of the
distance to the nearest cloud point (``psi_p``), the convex hull volume
(``chv``) and a KDE-based divergence from the uniform grid distribution
(``kld_uniform``).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import _kernels

BANDWIDTH_FLOOR = 1e-3


@dataclass(frozen=True)
class UniformGrid:
    d: int
    m: int
    points: np.ndarray

    @property
    def n_g(self):
        return self.points.shape[0]


@lru_cache(maxsize=32)
def _grid_nodes(d, m):
    axis = np.linspace(0.0, 1.0, m)
    nodes = np.array(list(itertools.product(axis, repeat=d)), dtype=float)
    nodes.setflags(write=False)
    return nodes


def make_grid(d, m=5):
    """Cartesian grid of ``m`` equally spaced values per axis on [0, 1]^d."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if m < 2:
        raise ValueError("need at least two points per axis")
    return UniformGrid(d, m, _grid_nodes(d, m))


def _cloud(points):
    Z = np.ascontiguousarray(points, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ValueError("cloud must be a non-empty (N, d) array")
    if not np.all(np.isfinite(Z)):
        raise ValueError("cloud contains non-finite coordinates")
    return Z


def psi_p_detail(points, grid):
    """Return ``(psi, nearest_index, distance)``; ties pick the lowest index."""
    Z = _cloud(points)
    if Z.shape[1] != grid.d:
        raise ValueError(f"cloud dimension {Z.shape[1]} != grid dimension {grid.d}")
    idx, dist = _kernels.nearest(Z, grid.points)
    psi = 0.0
    for v in dist:  # fixed summation order
        psi += v
    return psi / grid.n_g, idx, dist


def psi_p(points, grid):
    """Mean over grid nodes of the Euclidean distance to the nearest point."""
    return psi_p_detail(points, grid)[0]


def psi_p_gradient(points, grid):
    """Gradient of ``psi_p`` with respect to every cloud coordinate.

    Uses the lowest-index nearest neighbour where it is not unique; nodes
    that coincide with a point contribute zero.
    """
    Z = _cloud(points)
    psi, idx, dist = psi_p_detail(Z, grid)
    grad = np.zeros_like(Z)
    for j in range(grid.n_g):
        if dist[j] > 0.0:
            k = idx[j]
            grad[k] += (Z[k] - grid.points[j]) / dist[j]
    return psi, grad / grid.n_g


# -- convex hull ------------------------------------------------------------

@dataclass(frozen=True)
class Hull:
    vertices: np.ndarray
    facets: np.ndarray
    volume: float
    degenerate: bool = False
    rank: int = None


def quickhull(points, tol=1e-12):
    """Convex hull of the cloud via Qhull (quickhull).

    Rank-deficient clouds are not an error: the result is flagged
    ``degenerate`` with zero volume and the affine rank recorded.
    """
    Z = _cloud(points)
    n, d = Z.shape
    centered = Z - Z.mean(axis=0)
    scale = max(float(np.abs(centered).max()), 1e-300)
    rank = int(np.linalg.matrix_rank(centered / scale, tol=tol)) if n > 1 else 0
    if n < d + 1 or rank < d:
        return Hull(np.arange(0), np.empty((0, d), dtype=int), 0.0, True, rank)
    if d == 1:
        lo, hi = int(np.argmin(Z[:, 0])), int(np.argmax(Z[:, 0]))
        return Hull(np.array(sorted({lo, hi})), np.array([[lo], [hi]]),
                    float(Z[hi, 0] - Z[lo, 0]), False, 1)
    try:
        hull = ConvexHull(Z)
    except QhullError:
        return Hull(np.arange(0), np.empty((0, d), dtype=int), 0.0, True, rank)
    facets = hull.simplices
    apex = Z[hull.vertices].mean(axis=0)
    vol = 0.0
    fact = math.factorial(d)
    for f in facets:
        E = Z[f] - apex
        vol += abs(np.linalg.det(E)) / fact
    return Hull(np.sort(hull.vertices), facets, float(vol), False, d)


def chv(points):
    """Convex hull volume; zero for degenerate clouds."""
    return quickhull(points).volume


# -- KDE / KLD --------------------------------------------------------------

@dataclass(frozen=True)
class KdeEstimate:
    source: np.ndarray
    bandwidth: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.bandwidth, dtype=float)
        if np.any(h <= 0):
            raise ValueError("bandwidth must be positive")
        object.__setattr__(self, "bandwidth", h)
        object.__setattr__(self, "source", _cloud(self.source))


def scott_bandwidth(points, floor=BANDWIDTH_FLOOR):
    Z = _cloud(points)
    n, d = Z.shape
    return np.maximum(Z.std(axis=0) * n ** (-1.0 / (d + 4)), floor)


def fit_kde(points, bandwidth=None):
    Z = _cloud(points)
    h = scott_bandwidth(Z) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, dtype=float), (Z.shape[1],)).copy()
    return KdeEstimate(Z, h)


def kde_log_density(est, queries):
    Q = np.ascontiguousarray(np.atleast_2d(queries), dtype=float)
    return _kernels.kde_logpdf(Q, est.source, est.bandwidth)


def kde_density(est, queries):
    """Product-Gaussian kernel density at ``queries`` (may underflow to 0 far
    from the data; use :func:`kde_log_density` there)."""
    return np.exp(kde_log_density(est, queries))


def kld_uniform(points, grid, bandwidth=None, as_printed=False):
    """Divergence of the cloud's KDE from the uniform grid distribution.

    Default: ``-mean_j log P(g_j)`` over grid nodes. With ``as_printed`` the
    log-density is summed over the cloud points and divided by ``n_g``.
    """
    est = fit_kde(points, bandwidth)
    if est.source.shape[1] != grid.d:
        raise ValueError("cloud and grid dimension differ")
    if as_printed:
        logp = kde_log_density(est, est.source)
    else:
        logp = kde_log_density(est, grid.points)
    total = 0.0
    for v in logp:
        total += v
    return -total / grid.n_g


def indicators(points, grid, bandwidth=None):
    """All three indicators as a dict."""
    return {
        "psi_p": psi_p(points, grid),
        "kld": kld_uniform(points, grid, bandwidth),
        "chv": chv(points),
    }
