"""Measuring the quantity behind a trajectory.

The synthetic families use a grid posterior: every observed trajectory is
compared with references rolled out on a dense grid of quantity values and
scored with an adaptive Gaussian bandwidth. The pendulum uses a finite
difference energy estimate and position trajectories use their path length.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DegeneratePosteriorError, IncompatibleBinsError
from .systems import Normalization, default_normalization, pendulum_energy, rollout_batch

SIGMA_MIN_SQ = 1e-6
DEFAULT_RESOLUTION = 2**14

# exp(-700) ~ 1e-304; clipping the exponent avoids slow denormal arithmetic
_EXP_FLOOR = -700.0


@dataclass(frozen=True)
class BinnedMarginal:
    edges: np.ndarray
    mass: np.ndarray
    out_of_range: int = 0

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        mass = np.asarray(self.mass, dtype=float)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("edges must be strictly increasing")
        if mass.shape != (edges.size - 1,):
            raise ValueError("need one mass entry per bin")
        if np.any(mass < 0) or abs(mass.sum() - 1.0) > 1e-10:
            raise ValueError("mass must be non-negative and sum to 1")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "mass", mass)

    @property
    def bins(self):
        return self.mass.size

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @classmethod
    def from_prior(cls, prior):
        return cls(prior.edges, np.array(prior.density))


def check_same_bins(a, b):
    if a.edges.shape != b.edges.shape or not np.allclose(a.edges, b.edges, rtol=0, atol=1e-12):
        raise IncompatibleBinsError("marginals are defined on different bin edges")


@dataclass(frozen=True)
class ReferenceGrid:
    """Dense quantity grid with the trajectory the family rule generates at each point."""

    quantities: np.ndarray  # (J,)
    references: np.ndarray  # (J, H, d), family units
    normalization: Normalization
    sigma_min_sq: float = SIGMA_MIN_SQ

    def __post_init__(self):
        q = np.asarray(self.quantities, dtype=float)
        if q.size < 2 or np.any(np.diff(q) <= 0):
            raise ValueError("grid quantities must be strictly increasing with J >= 2")
        flat = self.normalization.normalize(self.references).reshape(q.size, -1)
        object.__setattr__(self, "_flat", np.ascontiguousarray(flat))
        object.__setattr__(self, "_sq", np.einsum("ij,ij->i", flat, flat))

    @property
    def size(self):
        return self.quantities.size

    @property
    def horizon(self):
        return self.references.shape[1]

    @property
    def dim(self):
        return self.references.shape[2]


def build_reference_grid(config, prior, resolution=DEFAULT_RESOLUTION,
                         sigma_min_sq=SIGMA_MIN_SQ, normalization=None):
    """Roll out ``resolution`` references evenly spaced over the prior's support."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    q = np.linspace(prior.lower, prior.upper, resolution)
    refs = rollout_batch(config, q)
    norm = normalization or default_normalization(config)
    return ReferenceGrid(q, refs, norm, sigma_min_sq)


@dataclass(frozen=True)
class Posterior:
    grid: ReferenceGrid
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.grid.size,) or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("posterior weights must be finite, non-negative, one per grid point")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("posterior weights must sum to 1")


def squared_errors(grid, x_norm):
    """Per-step mean squared error ``e_j`` between normalized trajectories and references.

    ``x_norm`` has shape ``(n, H, d)``; returns ``(n, J)``.
    """
    X = x_norm.reshape(x_norm.shape[0], -1)
    e = X @ grid._flat.T
    e *= -2.0
    e += grid._sq[None, :]
    e += np.einsum("ij,ij->i", X, X)[:, None]
    np.maximum(e, 0.0, out=e)
    e /= grid.horizon
    return e


def softmax_weights(e, sigma_sq, log_prior):
    """Normalized ``exp(-e / (2 sigma_sq)) * prior`` per row, computed in place on ``e``."""
    e *= -0.5 / sigma_sq[:, None]
    e += log_prior[None, :]
    e -= e.max(axis=1, keepdims=True)
    np.maximum(e, _EXP_FLOOR, out=e)
    np.exp(e, out=e)
    total = e.sum(axis=1, keepdims=True)
    if np.any(~(total > 0)):
        raise DegeneratePosteriorError("all posterior weights underflowed")
    e /= total
    return e


def _log_prior(grid, prior):
    with np.errstate(divide="ignore"):
        return np.log(prior.pdf(grid.quantities))


def posterior_weights(grid, x_norm, prior):
    """Full posterior weights for a batch of normalized trajectories, shape ``(n, J)``."""
    e = squared_errors(grid, x_norm)
    sigma_sq = np.maximum(e.min(axis=1), grid.sigma_min_sq)
    return softmax_weights(e, sigma_sq, _log_prior(grid, prior))


def recover_posterior(grid, x, prior):
    """Posterior over the grid for one trajectory (family units)."""
    values = x.values if hasattr(x, "values") else np.asarray(x, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape != (grid.horizon, grid.dim):
        raise ValueError(f"trajectory shape {values.shape} does not match grid "
                         f"({grid.horizon}, {grid.dim})")
    xn = grid.normalization.normalize(values).ravel()
    # direct differences here; the batched path uses the expanded form
    diff = grid._flat - xn[None, :]
    e = np.einsum("jk,jk->j", diff, diff)[None, :] / grid.horizon
    sigma_sq = np.array([max(e.min(), grid.sigma_min_sq)])
    w = softmax_weights(e, sigma_sq, _log_prior(grid, prior))[0]
    return Posterior(grid, w)


def summarize(posterior, rule="mode"):
    """Collapse a posterior to a point value: ``mode`` (ties go low) or ``mean``."""
    q, w = posterior.grid.quantities, posterior.weights
    if rule == "mode":
        return float(q[np.argmax(w)])
    if rule == "mean":
        return float(np.dot(w, q))
    raise ValueError(f"unknown summary rule {rule!r}")


def grid_binning(grid, edges):
    """Sparse ``(J, B)`` matrix assigning each grid value to its bin (edge bins clamp)."""
    idx = _grid_bins(grid, edges)
    B = edges.size - 1
    return sp.csr_matrix((np.ones(grid.size), (np.arange(grid.size), idx)), shape=(grid.size, B))


def _grid_bins(grid, edges):
    B = edges.size - 1
    return np.clip(np.searchsorted(edges, grid.quantities, side="right") - 1, 0, B - 1)


def _unnormalized_weights(grid, x_norm, log_prior):
    """Posterior weights up to a per-row constant, largest weight of each row equal to one.

    Same arithmetic as :func:`posterior_weights` with fewer passes over the
    ``(n, J)`` block; a constant ``log_prior`` (uniform prior) is passed as None.
    """
    n = x_norm.shape[0]
    H = grid.horizon
    X = x_norm.reshape(n, -1)
    e = (-2.0 * X) @ grid._flat.T
    e += grid._sq[None, :]
    e += np.einsum("ij,ij->i", X, X)[:, None]
    emin = e.min(axis=1)
    a = -0.5 / (H * np.maximum(emin / H, grid.sigma_min_sq))
    e *= a[:, None]
    if log_prior is None:
        e -= (emin * a)[:, None]
    else:
        e += log_prior[None, :]
        e -= e.max(axis=1, keepdims=True)
    np.maximum(e, _EXP_FLOOR, out=e)
    np.exp(e, out=e)
    return e


def _batch_log_prior(grid, prior):
    lp = _log_prior(grid, prior)
    if np.all(lp == lp[0]):
        return None
    return lp


def binned_posteriors(grid, x_norm, prior, edges=None, rule="posterior", chunk=512):
    """Recover a batch and bin each result over the prior's bins.

    Parameters
    ----------
    x_norm : (n, H, d) array
        Trajectories in normalized coordinates.
    rule : {"posterior", "mode", "mean"}
        ``posterior`` bins the full posterior mass; ``mode`` and ``mean``
        put unit mass in the bin of the point summary.

    Returns
    -------
    (n, B) array whose rows sum to one.
    """
    if rule not in ("posterior", "mode", "mean"):
        raise ValueError(f"unknown recovery rule {rule!r}")
    edges = prior.edges if edges is None else edges
    B = edges.size - 1
    idx = _grid_bins(grid, edges)
    starts = np.searchsorted(idx, np.arange(B))
    contiguous = np.all(np.diff(idx) >= 0) and np.unique(idx).size == B
    binning = None if contiguous else grid_binning(grid, edges)
    log_prior = _batch_log_prior(grid, prior)
    out = np.empty((x_norm.shape[0], B))
    for lo in range(0, x_norm.shape[0], chunk):
        w = _unnormalized_weights(grid, x_norm[lo:lo + chunk], log_prior)
        if rule == "posterior":
            block = np.add.reduceat(w, starts, axis=1) if contiguous else (binning.T @ w.T).T
            total = block.sum(axis=1, keepdims=True)
            if np.any(~(total > 0)):
                raise DegeneratePosteriorError("all posterior weights underflowed")
            out[lo:lo + chunk] = block / total
            continue
        if rule == "mode":
            v = grid.quantities[np.argmax(w, axis=1)]
        else:
            v = (w @ grid.quantities) / w.sum(axis=1)
        b = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, B - 1)
        block = np.zeros((v.size, B))
        block[np.arange(v.size), b] = 1.0
        out[lo:lo + chunk] = block
    return out


def point_estimates(grid, x_norm, prior, chunk=512):
    """Posterior mode (ties go low) and mean of each trajectory, two ``(n,)`` arrays."""
    log_prior = _batch_log_prior(grid, prior)
    mode = np.empty(x_norm.shape[0])
    mean = np.empty(x_norm.shape[0])
    for lo in range(0, x_norm.shape[0], chunk):
        w = _unnormalized_weights(grid, x_norm[lo:lo + chunk], log_prior)
        mode[lo:lo + chunk] = grid.quantities[np.argmax(w, axis=1)]
        mean[lo:lo + chunk] = (w @ grid.quantities) / w.sum(axis=1)
    return mode, mean


def recover_pendulum_energy(x, config):
    """Median over interior timesteps of the finite-difference energy.

    ``x`` is an angle trajectory of shape ``(H, 2)`` (or a Trajectory), or a
    batch of shape ``(n, H, 2)`` which returns one energy per trajectory.
    """
    values = x.values if hasattr(x, "values") else np.asarray(x, dtype=float)
    single = values.ndim == 2
    q = values[None] if single else values
    if q.shape[1] < 3:
        raise ValueError("energy recovery needs at least 3 timesteps")
    qdot = (q[:, 2:] - q[:, :-2]) / (2.0 * config.dt)
    e_t = pendulum_energy(config.pendulum, q[:, 1:-1], qdot)
    med = np.median(e_t, axis=1)
    return float(med[0]) if single else med


def recover_path_length(x):
    """Total Euclidean length of a position trajectory ``(H, d)`` or batch ``(n, H, d)``."""
    values = x.values if hasattr(x, "values") else np.asarray(x, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[-2] < 2:
        raise ValueError("path length needs at least 2 positions")
    steps = np.linalg.norm(np.diff(values, axis=-2), axis=-1)
    total = steps.sum(axis=-1)
    return float(total) if values.ndim == 2 else total


def histogram_marginal(values, prior):
    """Histogram scalar recoveries over the prior's bins, clamping out-of-range values."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("no recoveries to histogram")
    edges = prior.edges
    outside = int(np.count_nonzero((v < prior.lower) | (v > prior.upper)))
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, prior.bins - 1)
    counts = np.bincount(idx, minlength=prior.bins).astype(float)
    return BinnedMarginal(edges, counts / counts.sum(), outside)


def pullback_marginal(sources, prior):
    """Average recoveries into one binned marginal over the prior's bins.

    ``sources`` mixes Posterior objects (binned by grid value) and scalar
    recoveries (histogrammed). Out-of-range scalars land in the nearest edge
    bin and are counted in ``out_of_range``.
    """
    sources = list(sources)
    if not sources:
        raise ValueError("pullback needs at least one recovery")
    edges = prior.edges
    total = np.zeros(prior.bins)
    scalars = []
    for s in sources:
        if isinstance(s, Posterior):
            total += grid_binning(s.grid, edges).T @ s.weights
        else:
            scalars.append(float(s))
    outside = 0
    if scalars:
        h = histogram_marginal(scalars, prior)
        total += h.mass * len(scalars)
        outside = h.out_of_range
    return BinnedMarginal(edges, total / total.sum(), outside)


def dataset_marginal(grid, dataset, rule="posterior", chunk=512):
    """Pullback of a synthetic dataset through the grid posterior."""
    xn = grid.normalization.normalize(dataset.values)
    rows = binned_posteriors(grid, xn, dataset.prior, rule=rule, chunk=chunk)
    mass = rows.mean(axis=0)
    return BinnedMarginal(dataset.prior.edges, mass / mass.sum())
