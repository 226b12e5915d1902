"""Client-side manifold machinery: exact kNN graph with per-point bandwidths,
the fuzzy cross-entropy embedding loss, pair sampling for the relation
markers, and the small MLP encoder.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit
from scipy.spatial.distance import cdist

from . import autodiff as ad

Q_CLAMP = 1e-7  # latent probabilities are clamped to [Q_CLAMP, 1 - Q_CLAMP]
AB_FALLBACK = (1.577, 0.895)


class GeometryError(ValueError):
    pass


@dataclass
class NeighborGraph:
    """Directed kNN structure plus the symmetrized weighted edge list."""

    indices: np.ndarray  # (n, k) neighbor ids per point
    distances: np.ndarray  # (n, k) matching input-space distances
    rho: np.ndarray  # (n,) distance to the nearest neighbor
    sigma: np.ndarray  # (n,) per-point bandwidth
    edge_i: np.ndarray  # (E,) symmetrized edges, i < j
    edge_j: np.ndarray
    edge_p: np.ndarray  # (E,) membership strengths in [0, 1]
    degenerate: bool = False  # duplicates collapsed all neighbor distances
    _neg_pool: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_points(self) -> int:
        return self.indices.shape[0]

    def negative_pool(self) -> tuple:
        """All non-edge unordered pairs, enumerated once and cached."""
        if self._neg_pool is None:
            n = self.n_points
            ii, jj = np.triu_indices(n, k=1)
            adj = np.zeros((n, n), dtype=bool)
            adj[self.edge_i, self.edge_j] = True
            keep = ~adj[ii, jj]
            self._neg_pool = (ii[keep], jj[keep])
        return self._neg_pool


@dataclass
class PairBatch:
    """Unordered index pairs with relation labels u = 1[y_i == y_j]."""

    i: np.ndarray
    j: np.ndarray
    u: np.ndarray
    single_class: bool = False

    def __len__(self) -> int:
        return len(self.i)

    @property
    def n_same(self) -> int:
        return int(self.u.sum())


def _affinity_sums(distances: np.ndarray, rho: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    gap = np.maximum(distances - rho[:, None], 0.0)
    return np.exp(-gap / sigma[:, None]).sum(axis=1)


def _solve_bandwidths(distances: np.ndarray, rho: np.ndarray, target: float, n_iter=64, tol=1e-6) -> np.ndarray:
    """Bisection for sigma_i with sum_j exp(-max(0, d_ij - rho_i)/sigma_i) = target."""
    n = distances.shape[0]
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    mid = np.ones(n)
    for _ in range(n_iter):
        psum = _affinity_sums(distances, rho, mid)
        if np.all(np.abs(psum - target) < tol):
            break
        too_high = psum > target
        hi = np.where(too_high, mid, hi)
        lo = np.where(too_high, lo, mid)
        mid = np.where(np.isinf(hi), lo * 2.0, 0.5 * (lo + hi))
        mid = np.maximum(mid, 1e-12)
    return mid


def build_knn_graph(points: np.ndarray, n_neighbors: int) -> NeighborGraph:
    """Exact brute-force kNN graph with smooth local bandwidths.

    Directed strengths are p_{j|i} = exp(-max(0, d_ij - rho_i)/sigma_i) with
    sigma_i solved so each row sums to log2(n_neighbors); symmetrization is
    the probabilistic union p + p' - p p'.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not np.all(np.isfinite(points)):
        raise GeometryError("points must be finite")
    if n_neighbors >= n:
        raise GeometryError(f"n_neighbors={n_neighbors} must be < number of points {n}")

    full = cdist(points, points)
    order = np.argsort(full, axis=1, kind="stable")
    indices = order[:, 1 : n_neighbors + 1]  # drop self at rank 0
    distances = np.take_along_axis(full, indices, axis=1)

    degenerate = bool(np.all(distances < 1e-12)) and n > 1
    rho = distances[:, 0].copy()
    if degenerate:
        warnings.warn("all neighbor distances are zero (duplicate points); using sigma = 1", stacklevel=2)
        sigma = np.ones(n)
    else:
        sigma = _solve_bandwidths(distances, rho, target=float(np.log2(n_neighbors)))

    directed = np.exp(-np.maximum(distances - rho[:, None], 0.0) / sigma[:, None])
    p = {}
    for i in range(n):
        for j, pij in zip(indices[i], directed[i]):
            key = (i, int(j)) if i < j else (int(j), i)
            if key[0] == key[1]:
                continue
            other = p.get(key, 0.0)
            p[key] = other + pij - other * pij
    keys = sorted(p)
    edge_i = np.array([k[0] for k in keys], dtype=np.intp)
    edge_j = np.array([k[1] for k in keys], dtype=np.intp)
    edge_p = np.array([p[k] for k in keys])
    return NeighborGraph(indices, distances, rho, sigma, edge_i, edge_j, edge_p, degenerate)


def sample_negative_pairs(graph: NeighborGraph, rate: int, rng: np.random.Generator):
    """Uniform non-neighbor pairs, ``rate`` per positive edge, no duplicates."""
    pool_i, pool_j = graph.negative_pool()
    budget = min(rate * len(graph.edge_i), len(pool_i))
    if budget == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    take = rng.choice(len(pool_i), size=budget, replace=False)
    return pool_i[take], pool_j[take]


def latent_probabilities(z, edge_i, edge_j, a: float, b: float):
    """q_ij = (1 + a * ||z_i - z_j||^(2b))^-1, clamped away from {0, 1}."""
    zi = ad.gather_rows(z, edge_i)
    zj = ad.gather_rows(z, edge_j)
    d2 = ad.vsum(ad.power(zi - zj, 2.0), axis=1)
    q = 1.0 / (1.0 + a * ad.power(d2, b))
    return ad.clip(q, Q_CLAMP, 1.0 - Q_CLAMP)


def umap_loss(graph: NeighborGraph, z, a: float, b: float, neg_pairs=None):
    """Fuzzy cross-entropy between input affinities and latent probabilities.

    Positive edges carry both terms; optional sampled non-neighbor pairs
    contribute the repulsive (1-p) log(1-q) term with p = 0.
    """
    if not np.all(np.isfinite(ad.value_of(z))):
        raise GeometryError("embeddings must be finite")
    q = latent_probabilities(z, graph.edge_i, graph.edge_j, a, b)
    p = graph.edge_p
    loss = -ad.vsum(p * ad.log(q) + (1.0 - p) * ad.log(1.0 - q))
    if neg_pairs is not None and len(neg_pairs[0]):
        qn = latent_probabilities(z, neg_pairs[0], neg_pairs[1], a, b)
        loss = loss - ad.vsum(ad.log(1.0 - qn))
    return loss


def pair_distances(z, batch: PairBatch, eps: float = 1e-12):
    """Euclidean latent distances s_ij for a pair batch (differentiable)."""
    zi = ad.gather_rows(z, batch.i)
    zj = ad.gather_rows(z, batch.j)
    return ad.sqrt(ad.vsum(ad.power(zi - zj, 2.0), axis=1) + eps)


def sample_pairs(labels: np.ndarray, budget: int, balance_ratio: float, rng: np.random.Generator) -> PairBatch:
    """Exactly ``budget`` distinct unordered pairs, same-class fraction close
    to ``balance_ratio`` where feasible."""
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise GeometryError("need at least 2 points to sample pairs")
    total = n * (n - 1) // 2
    if budget < 1 or budget > total:
        raise GeometryError(f"budget must be in [1, {total}], got {budget}")

    ii, jj = np.triu_indices(n, k=1)
    same_mask = labels[ii] == labels[jj]
    same_pool = np.flatnonzero(same_mask)
    diff_pool = np.flatnonzero(~same_mask)

    n_same = min(int(round(budget * balance_ratio)), len(same_pool))
    n_diff = min(budget - n_same, len(diff_pool))
    n_same = budget - n_diff  # re-balance if the diff pool ran short
    take_same = rng.choice(same_pool, size=n_same, replace=False) if n_same else np.empty(0, dtype=np.intp)
    take_diff = rng.choice(diff_pool, size=n_diff, replace=False) if n_diff else np.empty(0, dtype=np.intp)
    take = np.concatenate([take_same, take_diff])
    return PairBatch(
        i=ii[take].astype(np.intp),
        j=jj[take].astype(np.intp),
        u=same_mask[take].astype(np.float64),
        single_class=bool(len(np.unique(labels)) == 1),
    )


def fit_curve_params(min_dist: float, spread: float = 1.0):
    """Least-squares (a, b) for q(x) = 1/(1 + a x^(2b)) against the target
    curve: 1 below min_dist, exp(-(x - min_dist)/spread) beyond, on [0, 3]."""
    if not 0.0 < min_dist < 1.0:
        raise GeometryError("min_dist must lie in (0, 1)")
    xv = np.linspace(0.0, spread * 3.0, 300)
    yv = np.where(xv < min_dist, 1.0, np.exp(-(xv - min_dist) / spread))

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2.0 * b))

    try:
        with np.errstate(over="ignore", invalid="ignore"):
            params, _ = curve_fit(curve, xv, yv, p0=(1.0, 1.0), maxfev=5000)
        a, b = float(params[0]), float(params[1])
        if not (np.isfinite(a) and np.isfinite(b) and a > 0 and b > 0):
            raise RuntimeError("degenerate fit")
        return a, b
    except RuntimeError:
        warnings.warn(f"curve fit failed for min_dist={min_dist}; using fallback {AB_FALLBACK}", stacklevel=2)
        return AB_FALLBACK


# ---------------------------------------------------------------------------
# encoder


def init_mlp_params(rng: np.random.Generator, dims, prefix: str = "enc") -> dict:
    """Xavier-initialized weights for an MLP with tanh hidden layers."""
    params = {}
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        scale = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}.W{layer}"] = rng.uniform(-scale, scale, size=(fan_in, fan_out))
        params[f"{prefix}.b{layer}"] = np.zeros(fan_out)
    return params


def mlp_forward(params: dict, x: np.ndarray, prefix: str = "enc"):
    """Forward pass; tanh on hidden layers, linear output head.

    ``params`` values may be numpy arrays or tape Vars.
    """
    n_layers = sum(1 for k in params if k.startswith(f"{prefix}.W"))
    h = x
    for layer in range(n_layers):
        h = ad.matmul(h, params[f"{prefix}.W{layer}"]) + params[f"{prefix}.b{layer}"]
        if layer < n_layers - 1:
            h = ad.tanh(h)
    return h
