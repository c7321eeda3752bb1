"""Local deviation kernel built from the data's own trajectory pieces.

A perturbed trajectory is assembled run by run: at the first location of
each run a replacement piece is drawn from a Gaussian-weighted neighborhood
of data pieces at that location, and the data trajectory it came from
supplies the fragment for the rest of the run. Gaussian residual noise tops
the per-coordinate variance up to ``sigma**2`` and the result is projected
back onto the admissible set (coordinate clipping, optional fixed endpoints).

All arrays handled here are in normalized coordinates unless noted.
"""
from dataclasses import dataclass
import math

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 0.0125
    run_length: int = 3
    dense_cutoff: int = None
    k_dec_floor: int = 1
    coordinate_bounds: tuple = None  # (lo, hi) in family units
    preserve_endpoints: bool = False
    random_phase: bool = False
    variance_draws: int = 256

    def __post_init__(self):
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        if self.run_length < 1:
            raise ValueError("run_length must be >= 1")
        if self.dense_cutoff is not None and self.dense_cutoff < 1:
            raise ValueError("dense_cutoff must be positive")
        if self.k_dec_floor < 1:
            raise ValueError("k_dec_floor must be >= 1")
        if self.variance_draws < 2:
            raise ValueError("variance_draws must be >= 2")


class PieceIndex:
    """Per-location collections of data pieces.

    For one-dimensional states each location keeps its pieces sorted so radius
    queries are two binary searches; higher-dimensional states use a k-d tree
    per location.
    """

    def __init__(self, data, normalization=None):
        data = np.ascontiguousarray(data, dtype=float)
        if data.ndim != 3 or data.shape[0] < 1:
            raise ValueError("need a non-empty (N, H, d) array of pieces")
        if not np.all(np.isfinite(data)):
            raise ValueError("pieces must be finite")
        self.data = data
        self.normalization = normalization
        N, H, d = data.shape
        self._counts = {}
        if d == 1:
            self.order = np.argsort(data[:, :, 0].T, axis=1, kind="stable")
            self.sorted = np.take_along_axis(data[:, :, 0].T, self.order, axis=1)
            self.unique = []
            self.unique_start = []
            for u in range(H):
                vals, start = np.unique(self.sorted[u], return_index=True)
                self.unique.append(vals)
                self.unique_start.append(np.append(start, N))
            self.trees = None
        else:
            self.trees = [cKDTree(data[:, u, :]) for u in range(H)]

    @property
    def size(self):
        return self.data.shape[0]

    @property
    def horizon(self):
        return self.data.shape[1]

    @property
    def dim(self):
        return self.data.shape[2]

    def pieces(self, u):
        """Pieces at location ``u``, sorted ascending for 1D states."""
        if self.dim == 1:
            return self.sorted[u][:, None]
        return self.data[:, u, :]

    def radius_range(self, u, q, radius):
        """Sorted-position range ``[lo, hi)`` of 1D pieces within ``radius`` of ``q``."""
        s = self.sorted[u]
        return (np.searchsorted(s, q - radius, side="left"),
                np.searchsorted(s, q + radius, side="right"))

    def count_within(self, u, q, radius):
        """Number of pieces within ``radius`` of each query at location ``u``."""
        q = np.asarray(q, dtype=float)
        if self.dim == 1:
            lo, hi = self.radius_range(u, q.reshape(-1), radius)
            return hi - lo
        if not math.isfinite(radius):
            return np.full(q.reshape(-1, self.dim).shape[0], self.size)
        return self.trees[u].query_ball_point(q.reshape(-1, self.dim), radius, return_length=True)

    def one_scale_counts(self, sigma):
        """One-scale neighbor count of every data piece, shape ``(N, H)`` (cached per sigma)."""
        key = float(sigma)
        if key not in self._counts:
            out = np.empty((self.size, self.horizon), dtype=np.int64)
            for u in range(self.horizon):
                out[:, u] = self.count_within(u, self.data[:, u, :], sigma)
            out.setflags(write=False)
            self._counts[key] = out
        return self._counts[key]

    def median_count(self, sigma):
        return float(np.median(self.one_scale_counts(sigma)))

    def typical_count(self, sigma, floor=1):
        """Neighborhood size used by the k-nearest draw for multi-dimensional pieces."""
        k = int(math.ceil(self.one_scale_counts(sigma).mean()))
        return int(min(self.size, max(k, floor)))

    def auto_cutoff(self, sigma):
        return dense_cutoff([self.median_count(sigma)])


def build_piece_index(dataset):
    """Index the normalized pieces of a dataset by sequence location."""
    if len(dataset) < 1:
        raise ValueError("dataset is empty")
    return PieceIndex(dataset.normalized(), dataset.normalization)


def dense_cutoff(medians):
    """Largest power of two not exceeding the median of per-system median counts."""
    m = float(np.median(np.asarray(medians, dtype=float)))
    if m < 1:
        return 1
    return 1 << int(math.floor(math.log2(m)))


def local_neighborhood(index, x, u, config, cutoff=None):
    """Candidate pieces at location ``u`` and their Gaussian weights.

    Parameters
    ----------
    x : (H, d) array
        Normalized trajectory.

    Returns
    -------
    pieces : (k, d) array
    weights : (k,) array
        Unnormalized ``exp(-|z - x_u|^2 / (2 sigma^2))``.
    """
    q = np.asarray(x, dtype=float)[u]
    sigma = config.sigma
    if sigma == 0:
        return q[None, :].copy(), np.ones(1)
    if index.dim == 1:
        cutoff = cutoff or config.dense_cutoff or index.auto_cutoff(sigma)
        n1 = int(index.count_within(u, q[0], sigma)[0])
        alpha = 3.0 if n1 >= cutoff else 1.0
        lo, hi = index.radius_range(u, q[0], alpha * sigma)
        lo, hi = int(lo), int(hi)
        if hi - lo < config.k_dec_floor:
            pos = _nearest_position(index, u, np.array([q[0]]))[0]
            pieces = index.sorted[u][pos:pos + 1, None]
        else:
            pieces = index.sorted[u][lo:hi, None]
    else:
        k = index.typical_count(sigma, config.k_dec_floor)
        _, idx = index.trees[u].query(q, k=k)
        pieces = index.data[np.atleast_1d(idx), u, :]
    d2 = ((pieces - q[None, :]) ** 2).sum(axis=1)
    return pieces, np.exp(-d2 / (2 * sigma**2))


def _nearest_position(index, u, q):
    s = index.sorted[u]
    j = np.clip(np.searchsorted(s, q), 1, s.size - 1) if s.size > 1 else np.zeros(q.size, int)
    if s.size == 1:
        return j
    left = s[j - 1]
    right = s[j]
    return np.where(np.abs(q - left) <= np.abs(right - q), j - 1, j)


def _truncated_normal(rng, n, scale, bound):
    """Gaussian draws with standard deviation ``scale`` truncated to ``[-bound, bound]``."""
    out = rng.normal(0.0, scale, size=n)
    bad = np.flatnonzero(np.abs(out) > bound)
    while bad.size:
        out[bad] = rng.normal(0.0, scale, size=bad.size)
        bad = bad[np.abs(out[bad]) > bound]
    return out


def _draw_sources_1d(index, u, q, sigma, cutoff, floor, rng):
    """Source trajectory ids for replacement pieces drawn around queries ``q`` at ``u``."""
    n = q.size
    order = index.order[u]
    lo1, hi1 = index.radius_range(u, q, sigma)
    c1 = hi1 - lo1
    pos = np.empty(n, dtype=np.int64)

    dense = c1 >= cutoff
    di = np.flatnonzero(dense)
    if di.size:
        target = q[di] + _truncated_normal(rng, di.size, sigma, 3.0 * sigma)
        uniq = index.unique[u]
        start = index.unique_start[u]
        j = np.clip(np.searchsorted(uniq, target), 0, uniq.size - 1)
        jl = np.maximum(j - 1, 0)
        j = np.where(np.abs(target - uniq[jl]) <= np.abs(uniq[j] - target), jl, j)
        span = start[j + 1] - start[j]
        pos[di] = start[j] + np.minimum((rng.random(di.size) * span).astype(np.int64), span - 1)

    sparse = ~dense
    fallback = np.flatnonzero(sparse & (c1 < floor))
    if fallback.size:
        pos[fallback] = _nearest_position(index, u, q[fallback])
    pending = np.flatnonzero(sparse & (c1 >= floor))
    s = index.sorted[u]
    inv = -0.5 / sigma**2
    while pending.size:
        span = c1[pending]
        cand = lo1[pending] + np.minimum((rng.random(pending.size) * span).astype(np.int64), span - 1)
        accept = rng.random(pending.size) < np.exp(inv * (s[cand] - q[pending]) ** 2)
        pos[pending[accept]] = cand[accept]
        pending = pending[~accept]
    return order[pos]


def _draw_sources_nd(index, u, q, sigma, floor, rng):
    k = index.typical_count(sigma, floor)
    dist, idx = index.trees[u].query(q, k=k)
    dist = dist.reshape(q.shape[0], k)
    idx = idx.reshape(q.shape[0], k)
    w = np.exp(-(dist**2) / (2 * sigma**2))
    w[:, 0] = np.maximum(w[:, 0], 1e-300)
    cum = np.cumsum(w, axis=1)
    pick = (cum < rng.random(q.shape[0])[:, None] * cum[:, -1:]).sum(axis=1)
    return idx[np.arange(q.shape[0]), np.minimum(pick, k - 1)]


def _run_starts(H, L, phase):
    starts = list(range(phase - L if phase else 0, H, L))
    return [(max(s, 0), min(s + L, H)) for s in starts if s + L > 0]


def _assemble(index, X, config, cutoff, rng):
    """Recombined pieces ``Z`` and the source id used at every location."""
    n, H, _ = X.shape
    L = config.run_length
    sigma = config.sigma
    Z = np.empty_like(X)
    sources = np.empty((n, H), dtype=np.int64)
    if config.random_phase:
        phases = rng.integers(0, L, size=n)
    else:
        phases = np.zeros(n, dtype=np.int64)
    for phase in np.unique(phases):
        rows = np.flatnonzero(phases == phase)
        for a, b in _run_starts(H, L, int(phase)):
            if index.dim == 1:
                ids = _draw_sources_1d(index, a, X[rows, a, 0], sigma, cutoff,
                                       config.k_dec_floor, rng)
            else:
                ids = _draw_sources_nd(index, a, X[rows, a, :], sigma, config.k_dec_floor, rng)
            Z[rows, a:b] = index.data[ids, a:b]
            sources[rows, a:b] = ids[:, None]
    return Z, sources


def _bounds_normalized(index, config):
    if config.coordinate_bounds is None:
        return None
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (index.dim,)) for b in config.coordinate_bounds)
    if index.normalization is not None:
        lo, hi = index.normalization.normalize(lo), index.normalization.normalize(hi)
    return lo, hi


def project(X, X_ref, bounds, preserve_endpoints):
    """Admissibility projection: clip to bounds and optionally restore endpoints."""
    if bounds is not None:
        np.clip(X, bounds[0], bounds[1], out=X)
    if preserve_endpoints:
        X[:, 0] = X_ref[:, 0]
        X[:, -1] = X_ref[:, -1]
    return X


def perturb_batch(index, X, config, rng, cutoff=None, return_sources=False):
    """Draw one kernel perturbation for each normalized trajectory in ``X``.

    The residual variance is estimated per location from a pre-pass of
    ``config.variance_draws`` recombination draws over the batch.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 3 or X.shape[1:] != (index.horizon, index.dim):
        raise ValueError(f"batch shape {X.shape} does not match index "
                         f"(*, {index.horizon}, {index.dim})")
    if config.sigma == 0:
        out = X.copy()
        if return_sources:
            return out, None
        return out
    if index.dim == 1:
        cutoff = cutoff or config.dense_cutoff or index.auto_cutoff(config.sigma)
    sel = np.arange(config.variance_draws) % X.shape[0]
    Zp, _ = _assemble(index, X[sel], config, cutoff, rng)
    v = np.var(Zp - X[sel], axis=0)
    resid = np.sqrt(np.maximum(config.sigma**2 - v, 0.0))

    Z, sources = _assemble(index, X, config, cutoff, rng)
    out = Z + rng.normal(size=X.shape) * resid[None]
    project(out, X, _bounds_normalized(index, config), config.preserve_endpoints)
    if return_sources:
        return out, sources
    return out


def perturb_trajectory(index, x, config, rng):
    """Perturb one trajectory given in family units; returns a Trajectory."""
    from .systems import Trajectory

    values = x.values if hasattr(x, "values") else np.asarray(x, dtype=float)
    if config.sigma == 0:
        out = values.copy()
    else:
        norm = index.normalization
        xn = values if norm is None else norm.normalize(values)
        pn = perturb_batch(index, xn[None], config, rng)[0]
        out = pn if norm is None else norm.denormalize(pn)
        bounds = config.coordinate_bounds
        if bounds is not None:
            bounds = tuple(np.broadcast_to(np.asarray(b, dtype=float), (index.dim,)) for b in bounds)
        project(out[None], values[None], bounds, config.preserve_endpoints)
    family = getattr(x, "family", None)
    return Trajectory(out, family, getattr(x, "quantity_true", None))
