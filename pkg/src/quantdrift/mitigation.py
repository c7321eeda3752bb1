"""Interventions that counteract predicted drift.

Two routes are provided. Reweighting resamples the training data (or the
prior) against an observed model marginal. The coordinate-transform route
pairs trajectories with cells of a Latin-hypercube code design so that the
quantity mixtures a local code-space error produces stay close to the prior.
"""
from dataclasses import dataclass, field
import json

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .devkernel import KernelConfig, PieceIndex, perturb_batch
from .recovery import BinnedMarginal
from .rng import keyed_generator
from .systems import Normalization

WEIGHT_FLOOR = 1e-6
DEFAULT_K_DEC = 8
DEFAULT_PERTURBATIONS = 64


# --- reweighting -------------------------------------------------------------------


@dataclass(frozen=True)
class ReweightPlan:
    weights: np.ndarray
    bin_of: np.ndarray
    floor: float = WEIGHT_FLOOR
    out_of_range: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0 or np.any(~(w > 0)):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bin_of", np.asarray(self.bin_of, dtype=np.int64))


def compute_reweight(recovered, prior, model_marginal, floor=WEIGHT_FLOOR):
    """Sampling weights ``w_i = pi_b / max(pihat_b, floor)`` at each trajectory's bin.

    Parameters
    ----------
    recovered : array of N quantities
        Recovered quantity of every training trajectory. Values outside the
        prior's range are clamped to the edge bins and counted.
    prior : QuantityPrior
    model_marginal : BinnedMarginal
        Marginal the current generator produces, on the prior's bins.
    """
    r = np.asarray(recovered, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("no trajectories to reweight")
    if model_marginal.bins != prior.bins:
        from .errors import IncompatibleBinsError

        raise IncompatibleBinsError("model marginal and prior use different bins")
    outside = int(np.count_nonzero((r < prior.lower) | (r > prior.upper)))
    b = prior.bin_of(r)
    pi = np.asarray(prior.density)
    raw = pi[b] / np.maximum(model_marginal.mass[b], floor)
    if np.any(~(raw > 0)):
        raise ValueError("a trajectory falls in a bin with zero prior mass")
    return ReweightPlan(raw / raw.sum(), b, floor, outside)


def inverse_prior(model_marginal, floor_fraction=0.10):
    """Bin masses proportional to ``1 / max(pihat_b, floor_fraction / B)``."""
    B = model_marginal.bins
    inv = 1.0 / np.maximum(model_marginal.mass, floor_fraction / B)
    return BinnedMarginal(model_marginal.edges, inv / inv.sum())


# --- code support and decoder -------------------------------------------------------


@dataclass(frozen=True)
class CodeSupport:
    codes: np.ndarray  # (N, D) in [0, 1]
    seed: int = 0

    @property
    def size(self):
        return self.codes.shape[0]

    @property
    def D(self):
        return self.codes.shape[1]


def latin_hypercube(n, D, seed=0):
    """Latin-hypercube design: one jittered point per ``1/n`` stratum in every coordinate."""
    if n < 1 or D < 1:
        raise ValueError("need n >= 1 and D >= 1")
    sampler = qmc.LatinHypercube(d=D, rng=keyed_generator(seed, "latin-hypercube"))
    return CodeSupport(sampler.random(n), seed)


@dataclass(frozen=True)
class DecoderMatrix:
    """Expected decoding weight ``M[j, l]`` of code ``l`` after perturbing code ``j``."""

    matrix: sp.csr_matrix
    k_dec: int
    tau: float

    @property
    def size(self):
        return self.matrix.shape[0]


def decoder_weights(d2, tau):
    """Softmax weights ``exp(-(d2 - d2_min) / (2 tau))`` over the last axis."""
    d2 = np.asarray(d2, dtype=float)
    shift = d2 - d2.min(axis=-1, keepdims=True)
    if tau > 0:
        w = np.exp(-shift / (2.0 * tau))
    else:
        w = (shift == 0).astype(float)
    return w / w.sum(axis=-1, keepdims=True)


def _code_index(support):
    norm = Normalization(np.zeros(1), np.ones(1))
    return PieceIndex(norm.normalize(support.codes[:, :, None]), norm), norm


def decoder_matrix(support, kernel, k_dec=DEFAULT_K_DEC, perturbations_per_code=DEFAULT_PERTURBATIONS,
                   seed=0):
    """Decoder matrix under the deviation kernel applied in code space.

    Each code ``y_j`` is perturbed ``perturbations_per_code`` times by the
    piece-based kernel built from the code design itself (coordinates play
    the role of sequence locations, clipped to ``[0, 1]``). Every perturbed
    code is decoded to its ``k_dec`` nearest codes with softmax weights whose
    bandwidth ``tau`` is the median squared distance to the farthest of them.

    Parameters
    ----------
    kernel : KernelConfig or float
        Code-space kernel; a float is read as its ``sigma``.
    """
    if k_dec < 1:
        raise ValueError("k_dec must be >= 1")
    if perturbations_per_code < 1:
        raise ValueError("perturbations_per_code must be >= 1")
    if not isinstance(kernel, KernelConfig):
        kernel = KernelConfig(sigma=float(kernel))
    N = support.size
    k = min(k_dec, N)
    index, norm = _code_index(support)
    kernel = KernelConfig(**{**kernel.__dict__, "coordinate_bounds": (0.0, 1.0)})
    X = np.repeat(index.data, perturbations_per_code, axis=0)
    g = keyed_generator(seed, "decoder-perturb")
    Y = norm.denormalize(perturb_batch(index, X, kernel, g))[:, :, 0]
    tree = cKDTree(support.codes)
    dist, nbr = tree.query(Y, k=k)
    dist = dist.reshape(-1, k)
    nbr = nbr.reshape(-1, k)
    d2 = dist**2
    tau = float(np.median(d2[:, -1]))
    w = decoder_weights(d2, tau) / perturbations_per_code
    rows = np.repeat(np.arange(N), perturbations_per_code * k)
    M = sp.csr_matrix((w.ravel(), (rows, nbr.ravel())), shape=(N, N))
    M.sum_duplicates()
    return DecoderMatrix(M, k, tau)


# --- pairing --------------------------------------------------------------------------


@dataclass
class Pairing:
    """Bijection from code cells to trajectory indices and its objective trace."""

    assignment: np.ndarray
    objective: float
    trace: list = field(default_factory=list)
    accepted: int = 0
    proposals: int = 0

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.ndim != 1 or not np.array_equal(np.sort(a), np.arange(a.size)):
            raise ValueError("assignment must be a permutation")
        self.assignment = a

    def to_dict(self):
        return {
            "assignment": [int(i) for i in self.assignment],
            "objective": float(self.objective),
            "trace": [float(v) for v in self.trace],
            "accepted": int(self.accepted),
            "proposals": int(self.proposals),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["assignment"]), d["objective"], list(d.get("trace", [])),
                   d.get("accepted", 0), d.get("proposals", 0))


def _matrix(M):
    return M.matrix if isinstance(M, DecoderMatrix) else sp.csr_matrix(M)


def _posterior_array(nu):
    if isinstance(nu, np.ndarray):
        return np.asarray(nu, dtype=float)
    nu = list(nu)
    if nu and isinstance(nu[0], BinnedMarginal):
        edges = nu[0].edges
        for m in nu[1:]:
            if m.edges.shape != edges.shape or not np.allclose(m.edges, edges, rtol=0, atol=1e-12):
                from .errors import IncompatibleBinsError

                raise IncompatibleBinsError("posteriors use different bins")
        return np.array([m.mass for m in nu])
    return np.asarray(nu, dtype=float)


def local_mixtures(M, pairing, nu):
    """Quantity mixtures ``p_j = sum_l M[j, l] nu[a(l)]``, shape ``(N, B)``."""
    a = pairing.assignment if isinstance(pairing, Pairing) else np.asarray(pairing)
    M = _matrix(M)
    nu = _posterior_array(nu)
    if M.shape != (a.size, a.size) or nu.shape[0] != a.size:
        raise ValueError("decoder, pairing and posteriors disagree on N")
    return np.asarray(M @ nu[a])


def pairing_objective(M, assignment, nu, prior_mass):
    """Mean squared distance ``(1/N) sum_j |p_j - pi|^2``."""
    P = local_mixtures(M, assignment, nu)
    R = P - np.asarray(prior_mass)[None, :]
    return float(np.einsum("ij,ij->", R, R) / P.shape[0])


def _prior_mass(prior):
    if isinstance(prior, BinnedMarginal):
        return prior.mass
    if hasattr(prior, "density"):
        return np.asarray(prior.density, dtype=float)
    return np.asarray(prior, dtype=float)


def posterior_bins(nu):
    """Quantity bin of each trajectory: the bin holding most of its posterior (ties go low)."""
    return np.argmax(_posterior_array(nu), axis=1)


def init_pairing(nu, prior, support=None, seed=0, bins=None):
    """Random bijection between code cells and trajectories.

    Any bijection assigns every trajectory exactly once, so the assigned
    count in each quantity bin equals the data's.
    """
    nu = _posterior_array(nu)
    N = nu.shape[0]
    if support is not None and support.size != N:
        raise ValueError("need as many code cells as trajectories")
    a = keyed_generator(seed, "init-pairing").permutation(N)
    return Pairing(a, float("nan"), [], 0, 0)


def swap_optimize(M, nu, prior, pairing, max_iters=None, seed=0, patience=None, bins=None):
    """Greedy cross-bin swap search on the pairing objective.

    A proposal picks two code cells whose trajectories fall in different
    quantity bins (uniform over such ordered pairs) and is accepted only if it
    strictly lowers the objective. The objective change is evaluated on the
    rows of ``M`` that touch the two cells. Stops after ``max_iters``
    proposals (default ``200 N``) or ``patience`` consecutive rejections
    (default ``20 N``).
    """
    Mc = _matrix(M).tocsc()
    nu = _posterior_array(nu)
    pi = _prior_mass(prior)
    a = pairing.assignment.copy()
    N = a.size
    if nu.shape != (N, pi.size):
        raise ValueError("posteriors must be (N, B) on the prior's bins")
    traj_bin = posterior_bins(nu) if bins is None else np.asarray(bins)
    max_iters = 200 * N if max_iters is None else int(max_iters)
    patience = 20 * N if patience is None else int(patience)

    R = np.asarray(Mc.tocsr() @ nu[a]) - pi[None, :]
    obj = float(np.einsum("ij,ij->", R, R) / N)
    trace = [obj]
    result = Pairing(a, obj, trace, 0, 0)
    if obj == 0.0 or N < 2 or np.unique(traj_bin).size < 2:
        return result

    g = keyed_generator(seed, "swap-optimize")
    indptr, indices, data = Mc.indptr, Mc.indices, Mc.data
    rejections = 0
    proposals = 0
    accepted = 0
    while proposals < max_iters and rejections < patience:
        c1, c2 = g.integers(0, N, size=2)
        if traj_bin[a[c1]] == traj_bin[a[c2]]:
            continue
        proposals += 1
        t1, t2 = a[c1], a[c2]
        delta_nu = nu[t2] - nu[t1]
        rows = np.concatenate([indices[indptr[c1]:indptr[c1 + 1]], indices[indptr[c2]:indptr[c2 + 1]]])
        vals = np.concatenate([data[indptr[c1]:indptr[c1 + 1]], -data[indptr[c2]:indptr[c2 + 1]]])
        rows, inv = np.unique(rows, return_inverse=True)
        m = np.bincount(inv, weights=vals, minlength=rows.size)
        change = (2.0 * m @ (R[rows] @ delta_nu) + (m @ m) * (delta_nu @ delta_nu)) / N
        if change < 0:
            a[c1], a[c2] = t2, t1
            R[rows] += m[:, None] * delta_nu[None, :]
            obj += change
            trace.append(obj)
            accepted += 1
            rejections = 0
        else:
            rejections += 1
    return Pairing(a, float(np.einsum("ij,ij->", R, R) / N), trace, accepted, proposals)


def swap_delta(M, nu, prior, assignment, c1, c2):
    """Objective change of swapping cells ``c1`` and ``c2`` by full recomputation."""
    pi = _prior_mass(prior)
    before = pairing_objective(M, assignment, nu, pi)
    b = np.array(assignment, copy=True)
    b[c1], b[c2] = b[c2], b[c1]
    return pairing_objective(M, b, nu, pi) - before


def incremental_swap_delta(M, nu, prior, assignment, c1, c2):
    """Objective change of a swap from the rows of ``M`` touching the two cells."""
    Mc = _matrix(M).tocsc()
    nu = _posterior_array(nu)
    pi = _prior_mass(prior)
    a = np.asarray(assignment)
    N = a.size
    R = np.asarray(Mc.tocsr() @ nu[a]) - pi[None, :]
    delta_nu = nu[a[c2]] - nu[a[c1]]
    col = Mc[:, [c1]].toarray().ravel() - Mc[:, [c2]].toarray().ravel()
    rows = np.flatnonzero(col)
    m = col[rows]
    return float((2.0 * m @ (R[rows] @ delta_nu) + (m @ m) * (delta_nu @ delta_nu)) / N)


def mean_tv_to_prior(M, pairing, nu, prior):
    """Average ``TV(p_j, pi)`` over code cells."""
    P = local_mixtures(M, pairing, nu)
    return float(0.5 * np.abs(P - _prior_mass(prior)[None, :]).sum(axis=1).mean())


def decode_sample(code, support, pairing, k_dec=DEFAULT_K_DEC, tau=None, nu=None, rng=None,
                  edges=None):
    """Decode one code point through its ``k_dec`` nearest support codes.

    With posteriors ``nu`` the weighted average posterior is returned (a
    BinnedMarginal when ``edges`` is given, else an array). Otherwise one
    paired trajectory index is sampled by the decoder weights.
    """
    y = np.asarray(code, dtype=float).ravel()
    if y.size != support.D or np.any((y < 0) | (y > 1)):
        raise ValueError("code must be a point of [0, 1]^D")
    a = pairing.assignment if isinstance(pairing, Pairing) else np.asarray(pairing)
    k = min(k_dec, support.size)
    d2 = ((support.codes - y[None, :]) ** 2).sum(axis=1)
    near = np.argsort(d2, kind="stable")[:k]
    if tau is None:
        tau = float(d2[near[-1]])
    w = decoder_weights(d2[near], tau)
    if nu is not None:
        mix = w @ _posterior_array(nu)[a[near]]
        mix = mix / mix.sum()
        return BinnedMarginal(edges, mix) if edges is not None else mix
    if rng is None:
        return int(a[near[np.argmax(w)]])
    return int(a[near[rng.choice(k, p=w)]])
