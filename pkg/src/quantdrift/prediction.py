"""Quantity-transport kernels, predicted marginals and drift statistics."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import json
import math

import numpy as np
from scipy import stats

from .devkernel import KernelConfig, build_piece_index, perturb_batch
from .errors import IncompatibleBinsError
from .recovery import (
    DEFAULT_RESOLUTION,
    BinnedMarginal,
    binned_posteriors,
    build_reference_grid,
    check_same_bins,
    recover_pendulum_energy,
)
from .rng import keyed_generator
from .systems import QuantityPrior, curate_pendulum_dataset, rollout_batch, sample_dataset

DEFAULT_SWEEP = (0.0, 0.0005, 0.002, 0.0045, 0.008, 0.0125, 0.018, 0.0245, 0.032, 0.0405, 0.05)


def tv_distance(p, q):
    """Total variation between two binned marginals on identical edges."""
    check_same_bins(p, q)
    return float(0.5 * np.abs(p.mass - q.mass).sum())


def signed_drift(a, b):
    """Per-bin mass difference ``a - b``; positive where ``a`` over-represents."""
    check_same_bins(a, b)
    return a.mass - b.mass


@dataclass(frozen=True)
class TransportKernel:
    """Row-stochastic ``K[b, b']``: probability a trajectory from source bin ``b``
    is recovered in bin ``b'`` after a kernel perturbation."""

    edges: np.ndarray
    matrix: np.ndarray
    samples_per_row: int
    sigma: float
    stderr: np.ndarray = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        B = self.edges.size - 1
        if m.shape != (B, B):
            raise ValueError("transport matrix must be B x B")
        if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("transport matrix must be row-stochastic")

    @property
    def bins(self):
        return self.matrix.shape[0]


def predict_marginal(transport, prior):
    """Push the prior's bin masses through the transport kernel."""
    if transport.bins != prior.bins or not np.allclose(transport.edges, prior.edges, rtol=0, atol=1e-12):
        raise IncompatibleBinsError("prior bins differ from the transport kernel's source bins")
    mass = np.asarray(prior.density) @ transport.matrix
    return BinnedMarginal(transport.edges, mass / mass.sum())


# --- estimation ------------------------------------------------------------------


class _Problem:
    """Everything needed to draw sources, perturb them and recover them."""

    def __init__(self, config, prior, grid, index, rule, seed, dataset=None):
        self.config = config
        self.prior = prior
        self.grid = grid
        self.index = index
        self.rule = rule
        self.seed = seed
        self.dataset = dataset
        self.normalization = index.normalization if index is not None else grid.normalization
        if config.kind == "pendulum":
            if dataset is None or dataset.quantities is None:
                raise ValueError("pendulum transport needs a curated dataset with energies")
            self._by_bin = [np.flatnonzero(prior.bin_of(dataset.quantities) == b)
                            for b in range(prior.bins)]

    def sources(self, b, n):
        """Normalized source trajectories for row ``b`` (quantities uniform in the bin)."""
        g = keyed_generator(self.seed, "transport-source", b)
        if self.config.kind == "pendulum":
            members = self._by_bin[b]
            if members.size == 0:
                raise ValueError(f"no curated trajectory falls in bin {b}")
            pick = members[g.integers(0, members.size, size=n)]
            return self.dataset.normalized()[pick]
        edges = self.prior.edges
        r = g.uniform(edges[b], edges[b + 1], size=n)
        r = np.clip(r, edges[b], edges[b + 1])
        return self.normalization.normalize(rollout_batch(self.config, r))

    def recover(self, x_norm, chunk=512):
        """Binned recovery of each normalized trajectory, shape ``(n, B)``."""
        if self.config.kind == "pendulum":
            energy = recover_pendulum_energy(self.normalization.denormalize(x_norm), self.config)
            idx = self.prior.bin_of(energy)
            out = np.zeros((energy.size, self.prior.bins))
            out[np.arange(energy.size), idx] = 1.0
            return out
        return binned_posteriors(self.grid, x_norm, self.prior, rule=self.rule, chunk=chunk)


def _accumulate(problem, X, chunk):
    """Row mean of the binned recoveries of ``X`` and its Monte Carlo standard error."""
    n = X.shape[0]
    total = np.zeros(problem.prior.bins)
    total_sq = np.zeros(problem.prior.bins)
    for lo in range(0, n, chunk):
        D = problem.recover(X[lo:lo + chunk], chunk)
        total += D.sum(axis=0)
        total_sq += (D * D).sum(axis=0)
    mean = total / n
    var = np.maximum(total_sq / n - mean**2, 0.0)
    return mean, np.sqrt(var / max(n - 1, 1))


def _row(problem, kernel, b, n, chunk, with_reference):
    X = problem.sources(b, n)
    ref = _accumulate(problem, X, chunk)[0] if with_reference else None
    g = keyed_generator(problem.seed, "transport-perturb", b)
    Xp = perturb_batch(problem.index, X, kernel, g) if kernel.sigma > 0 else X
    mean, se = _accumulate(problem, Xp, chunk)
    return mean, se, ref


def _estimate(problem, kernel, samples_per_row, n_jobs=1, chunk=512, with_reference=False):
    B = problem.prior.bins
    rows = [None] * B

    def work(b):
        rows[b] = _row(problem, kernel, b, samples_per_row, chunk, with_reference)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            list(pool.map(work, range(B)))
    else:
        for b in range(B):
            work(b)
    mean = np.array([r[0] for r in rows])
    mean /= mean.sum(axis=1, keepdims=True)
    se = np.array([r[1] for r in rows])
    K = TransportKernel(problem.prior.edges, mean, samples_per_row, kernel.sigma, se)
    ref = None
    if with_reference:
        ref = np.array([r[2] for r in rows])
        ref /= ref.sum(axis=1, keepdims=True)
    return K, ref


def estimate_transport_kernel(config, prior, grid, kernel, index, rule="posterior",
                              samples_per_row=2000, seed=0, n_jobs=1, dataset=None):
    """Monte Carlo estimate of the quantity-transport kernel.

    For each source bin, ``samples_per_row`` quantities are drawn uniformly in
    the bin and rolled out, each trajectory is perturbed once by the deviation
    kernel, and the binned recoveries are averaged into the row. Row ``b``
    draws from streams keyed by ``(seed, b)`` only.
    """
    if samples_per_row < 1:
        raise ValueError("samples_per_row must be >= 1")
    problem = _Problem(config, prior, grid, index, rule, seed, dataset)
    K, _ = _estimate(problem, kernel, samples_per_row, n_jobs)
    return K


def reference_transport(config, prior, grid, index, rule="posterior", samples_per_row=2000,
                        seed=0, n_jobs=1, dataset=None):
    """Binned recoveries of the unperturbed source trajectories, row by row."""
    problem = _Problem(config, prior, grid, index, rule, seed, dataset)
    K, ref = _estimate(problem, KernelConfig(sigma=0.0), samples_per_row, n_jobs, with_reference=True)
    return TransportKernel(prior.edges, ref, samples_per_row, 0.0)


# --- reports -----------------------------------------------------------------------


def _f(x):
    return float(x)


@dataclass
class DriftReport:
    prior: BinnedMarginal
    data_marginal: BinnedMarginal
    predicted_marginal: BinnedMarginal
    signed_drift: np.ndarray
    tv_data_prior: float
    tv_pred_prior: float
    tv_pred_data: float
    sigma: float
    seed: int
    out_of_range_count: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self):
        """Plain-data view with a fixed key order."""
        return {
            "sigma": _f(self.sigma),
            "seed": int(self.seed),
            "config": self.config,
            "bin_edges": [_f(e) for e in self.prior.edges],
            "prior": [_f(m) for m in self.prior.mass],
            "data_marginal": [_f(m) for m in self.data_marginal.mass],
            "predicted_marginal": [_f(m) for m in self.predicted_marginal.mass],
            "signed_drift": [_f(m) for m in self.signed_drift],
            "tv_data_prior": _f(self.tv_data_prior),
            "tv_pred_prior": _f(self.tv_pred_prior),
            "tv_pred_data": _f(self.tv_pred_data),
            "out_of_range_count": int(self.out_of_range_count),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d):
        edges = np.array(d["bin_edges"])
        return cls(
            prior=BinnedMarginal(edges, d["prior"]),
            data_marginal=BinnedMarginal(edges, d["data_marginal"]),
            predicted_marginal=BinnedMarginal(edges, d["predicted_marginal"]),
            signed_drift=np.array(d["signed_drift"]),
            tv_data_prior=d["tv_data_prior"],
            tv_pred_prior=d["tv_pred_prior"],
            tv_pred_data=d["tv_pred_data"],
            sigma=d["sigma"],
            seed=d["seed"],
            out_of_range_count=d.get("out_of_range_count", 0),
            config=d.get("config", {}),
        )


def _report(prior, reference, transport, seed, config_doc):
    prior_m = BinnedMarginal.from_prior(prior)
    data = BinnedMarginal(prior.edges, _normalized(np.asarray(prior.density) @ reference.matrix))
    pred = predict_marginal(transport, prior)
    return DriftReport(
        prior=prior_m,
        data_marginal=data,
        predicted_marginal=pred,
        signed_drift=signed_drift(pred, data),
        tv_data_prior=tv_distance(data, prior_m),
        tv_pred_prior=tv_distance(pred, prior_m),
        tv_pred_data=tv_distance(pred, data),
        sigma=transport.sigma,
        seed=seed,
        config=config_doc,
    )


def _normalized(m):
    return m / m.sum()


@dataclass
class SweepContext:
    """Shared ingredients of one prediction: training data, its piece index and the grid."""

    config: object
    prior: QuantityPrior
    dataset: object
    index: object
    grid: object
    rule: str
    seed: int
    problem: _Problem = None

    def __post_init__(self):
        self.problem = _Problem(self.config, self.prior, self.grid, self.index, self.rule,
                                self.seed, self.dataset)


def prepare(config, prior, rule="posterior", dataset_size=25000,
            grid_resolution=DEFAULT_RESOLUTION, seed=0, dataset=None):
    """Generate (or accept) the training data and build the index and grid."""
    if dataset is None:
        if config.kind == "pendulum":
            dataset = curate_pendulum_dataset(config, prior, dataset_size, seed)
        else:
            dataset = sample_dataset(config, prior, dataset_size, seed)
    index = build_piece_index(dataset)
    grid = None
    if config.kind != "pendulum":
        grid = build_reference_grid(config, prior, grid_resolution,
                                    normalization=dataset.normalization)
    return SweepContext(config, prior, dataset, index, grid, rule, seed)


def sigma_sweep(config, prior, kernel, sigmas=DEFAULT_SWEEP, rule="posterior",
                dataset_size=25000, samples_per_row=2000, grid_resolution=DEFAULT_RESOLUTION,
                seed=0, n_jobs=1, context=None, config_doc=None):
    """One DriftReport per deviation scale, sharing data, grid and source draws."""
    sigmas = list(sigmas)
    if not sigmas or any(not (s >= 0) for s in sigmas):
        raise ValueError("sigmas must be a non-empty list of non-negative values")
    ctx = context or prepare(config, prior, rule, dataset_size, grid_resolution, seed)
    _, ref = _estimate(ctx.problem, KernelConfig(sigma=0.0), samples_per_row, n_jobs,
                       with_reference=True)
    reference = TransportKernel(prior.edges, ref, samples_per_row, 0.0)
    reports = []
    for s in sigmas:
        transport = _estimate(ctx.problem, replace(kernel, sigma=float(s)), samples_per_row,
                              n_jobs)[0]
        doc = dict(config_doc or {})
        doc["kernel_sigma"] = float(s)
        reports.append(_report(prior, reference, transport, seed, doc))
    return reports


def drift_report(config, prior, kernel, rule="posterior", dataset_size=25000,
                 samples_per_row=2000, grid_resolution=DEFAULT_RESOLUTION, seed=0,
                 n_jobs=1, context=None, config_doc=None):
    """Data marginal, predicted marginal, signed drift and the three TV distances.

    The data marginal is the pullback of the unperturbed source trajectories
    used for the transport estimate, weighted by the prior; at ``sigma = 0``
    the prediction reproduces it exactly.
    """
    return sigma_sweep(config, prior, kernel, [kernel.sigma], rule, dataset_size,
                       samples_per_row, grid_resolution, seed, n_jobs, context, config_doc)[0]


def sweep_table(reports):
    """Rows ``(sigma, tv_data_prior, tv_pred_prior, tv_pred_data)`` for a sweep."""
    return [(r.sigma, r.tv_data_prior, r.tv_pred_prior, r.tv_pred_data) for r in reports]


# --- statistics ---------------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    degenerate: bool = False


def paired_t_test(d):
    """One-sided paired t-test of ``mean(d) > 0``.

    Returns ``t = mean / (sd / sqrt(n))`` and the upper-tail probability of a
    Student t with ``n - 1`` degrees of freedom. Zero spread is reported as
    ``p = 0`` (positive mean) or ``p = 1`` with ``degenerate`` set.
    """
    d = np.asarray(d, dtype=float)
    n = d.size
    if n < 2:
        raise ValueError("paired t-test needs at least two differences")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean > 0:
            return TTestResult(math.inf, 0.0, True)
        return TTestResult(-math.inf if mean < 0 else math.nan, 1.0, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), float(stats.t.sf(t, n - 1)))
