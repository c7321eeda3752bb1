"""Trajectory families, quantity priors, and sensitivity oracles.

Four families are supported. The sinusoid, tent map and logistic map are
one-dimensional sequences indexed by a scalar parameter ``r``; the planar
double pendulum produces two angle coordinates and is indexed by its
mechanical energy.
"""
from dataclasses import dataclass, field
from fractions import Fraction
import math

import numpy as np

from .errors import (
    CurationError,
    DomainError,
    IntegrationError,
    NonDifferentiableOrbitError,
)
from .rng import keyed_generator, keyed_uniforms

MAP_KINDS = ("tent", "logistic")
KINDS = ("sinusoid", "tent", "logistic", "pendulum")

QUANTITY_RANGES = {
    "sinusoid": (32.0, 128.0),
    "tent": (0.0, 2.0),
    "logistic": (0.0, 4.0),
    "pendulum": (5.0, 40.0),
}

DEFAULT_BINS = {"sinusoid": 64, "tent": 64, "logistic": 64, "pendulum": 40}


@dataclass(frozen=True)
class QuantityPrior:
    """Piecewise-constant density over ``[lower, upper]`` split into ``bins`` bins.

    ``density`` holds the probability mass of each bin (not a density per
    unit length); it defaults to uniform.
    """

    lower: float
    upper: float
    bins: int
    density: np.ndarray = None

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"need lower < upper, got [{self.lower}, {self.upper}]")
        if int(self.bins) != self.bins or self.bins < 2:
            raise ValueError(f"bins must be an integer >= 2, got {self.bins}")
        if self.density is None:
            mass = np.full(self.bins, 1.0 / self.bins)
        else:
            mass = np.asarray(self.density, dtype=float).copy()
            if mass.shape != (self.bins,):
                raise ValueError(f"density must have {self.bins} entries")
            if np.any(mass < 0) or not np.all(np.isfinite(mass)):
                raise ValueError("density must be finite and non-negative")
            if abs(mass.sum() - 1.0) > 1e-12:
                raise ValueError(f"density sums to {mass.sum()!r}, not 1")
        mass.setflags(write=False)
        object.__setattr__(self, "density", mass)
        object.__setattr__(self, "bins", int(self.bins))

    @classmethod
    def uniform(cls, lower, upper, bins):
        return cls(float(lower), float(upper), bins)

    @classmethod
    def for_family(cls, config, bins=None):
        """Uniform prior over the family's quantity range."""
        lo, hi = QUANTITY_RANGES[config.kind]
        return cls(lo, hi, bins or DEFAULT_BINS[config.kind])

    @property
    def edges(self):
        return np.linspace(self.lower, self.upper, self.bins + 1)

    @property
    def width(self):
        return (self.upper - self.lower) / self.bins

    def bin_of(self, r):
        """Bin index of each value, clamping out-of-range values to the edge bins."""
        r = np.asarray(r, dtype=float)
        idx = np.floor((r - self.lower) / self.width).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)

    def pdf(self, r):
        """Density per unit quantity; zero outside ``[lower, upper]``."""
        r = np.asarray(r, dtype=float)
        inside = (r >= self.lower) & (r <= self.upper)
        return np.where(inside, self.density[self.bin_of(r)] / self.width, 0.0)

    def cdf_at_edges(self):
        c = np.concatenate([[0.0], np.cumsum(self.density)])
        c[-1] = 1.0
        return c


def quantile_transport(prior, u):
    """Map uniform variates to quantities through the inverse prior CDF.

    The CDF is piecewise linear between bin edges, so the inverse is exact.
    Accepts a scalar or an array; returns the same shape.
    """
    u_arr = np.asarray(u, dtype=float)
    if np.any(~np.isfinite(u_arr)) or np.any((u_arr < 0) | (u_arr > 1)):
        raise DomainError("u must lie in [0, 1]")
    c = prior.cdf_at_edges()
    k = np.searchsorted(c[1:], u_arr, side="left")
    k = np.minimum(k, prior.bins - 1)
    mass = prior.density[k]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(mass > 0, (u_arr - c[k]) / mass, 0.0)
    r = prior.lower + (k + np.clip(frac, 0.0, 1.0)) * prior.width
    r = np.minimum(r, prior.upper)
    return float(r) if np.ndim(u) == 0 else r


@dataclass(frozen=True)
class PendulumParams:
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    g: float = 9.81

    def __post_init__(self):
        for name in ("m1", "m2", "l1", "l2", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"pendulum parameter {name} must be positive")


@dataclass(frozen=True)
class FamilyConfig:
    kind: str
    horizon: int = 64
    x0: float = 0.25
    phase: float = -math.pi / 6
    state_bins: int = 1024
    dt: float = 0.01
    pendulum: PendulumParams = field(default_factory=PendulumParams)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}; expected one of {KINDS}")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if self.state_bins < 2:
            raise ValueError("state_bins must be >= 2")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.0 <= self.x0 <= 1.0:
            raise ValueError("x0 must lie in [0, 1]")

    @property
    def dim(self):
        return 2 if self.kind == "pendulum" else 1

    @property
    def quantity_range(self):
        return QUANTITY_RANGES[self.kind]

    def coordinate_range(self):
        """Physical range of each coordinate, or None when it is data dependent."""
        if self.kind == "pendulum":
            return None
        return np.zeros(1), np.ones(1)


@dataclass(frozen=True)
class Normalization:
    """Per-coordinate affine map from ``[lo, hi]`` to ``[-1, 1]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("normalization needs hi > lo per coordinate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_data(cls, values):
        v = values.reshape(-1, values.shape[-1])
        lo, hi = v.min(axis=0), v.max(axis=0)
        pad = np.where(hi > lo, 0.0, 0.5)
        return cls(lo - pad, hi + pad)

    def normalize(self, x):
        return 2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, y):
        return self.lo + (y + 1.0) * (self.hi - self.lo) / 2.0


@dataclass(frozen=True)
class Trajectory:
    values: np.ndarray  # (H, d), family units
    family: FamilyConfig
    quantity_true: float = None

    @property
    def horizon(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class Dataset:
    """An immutable batch of same-family trajectories stored as one array."""

    values: np.ndarray  # (N, H, d)
    family: FamilyConfig
    prior: QuantityPrior
    normalization: Normalization
    quantities: np.ndarray = None  # (N,) or None
    seed: int = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3:
            raise ValueError("values must have shape (N, H, d)")
        if not np.all(np.isfinite(v)):
            raise ValueError("trajectory values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.quantities is not None:
            q = np.asarray(self.quantities, dtype=float)
            if q.shape != (v.shape[0],):
                raise ValueError("need one quantity per trajectory")
            q.setflags(write=False)
            object.__setattr__(self, "quantities", q)

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i):
        q = None if self.quantities is None else float(self.quantities[i])
        return Trajectory(self.values[i], self.family, q)

    @property
    def horizon(self):
        return self.values.shape[1]

    @property
    def dim(self):
        return self.values.shape[2]

    def normalized(self):
        return self.normalization.normalize(self.values)


def default_normalization(config):
    rng = config.coordinate_range()
    if rng is None:
        raise ValueError(f"{config.kind} has no fixed coordinate range")
    return Normalization(*rng)


# --- one-dimensional families -------------------------------------------------


def snap(x, state_bins):
    """Round states to the nearest of ``state_bins`` equally spaced levels in [0, 1]."""
    k = state_bins - 1
    return np.rint(x * k) / k


def _check_quantity(config, r):
    lo, hi = config.quantity_range
    r = np.asarray(r, dtype=float)
    if np.any(~np.isfinite(r)) or np.any((r < lo) | (r > hi)):
        raise DomainError(f"{config.kind} quantity must lie in [{lo}, {hi}]")
    return r


def rollout_batch(config, r):
    """Roll out the family rule for each quantity in ``r``.

    Returns an array of shape ``(len(r), H, 1)``. Iterated-map states are
    snapped after every step.
    """
    if config.kind == "pendulum":
        raise DomainError("pendulum trajectories are indexed by initial state; use pendulum_rollout")
    r = _check_quantity(config, np.atleast_1d(r))
    H = config.horizon
    if config.kind == "sinusoid":
        t = np.arange(H)
        x = 0.5 * (np.sin(2 * np.pi * t[None, :] / r[:, None] + config.phase) + 1.0)
        return x[:, :, None]

    x = np.empty((r.size, H))
    x[:, 0] = config.x0
    cur = np.full(r.size, float(config.x0))
    for t in range(1, H):
        if config.kind == "tent":
            cur = r * np.minimum(cur, 1.0 - cur)
        else:
            cur = r * cur * (1.0 - cur)
        cur = snap(cur, config.state_bins)
        x[:, t] = cur
    if np.any((x < 0) | (x > 1)):
        raise AssertionError("iterated-map state left [0, 1]")
    return x[:, :, None]


def rollout(config, r):
    """Single trajectory generated at quantity ``r``."""
    values = rollout_batch(config, np.array([r], dtype=float))[0]
    return Trajectory(values, config, float(r))


# --- double pendulum -----------------------------------------------------------


def _mass_terms(p, th1, th2):
    c = np.cos(th1 - th2)
    a11 = (p.m1 + p.m2) * p.l1**2
    a12 = p.m2 * p.l1 * p.l2 * c
    a22 = p.m2 * p.l2**2
    return a11, a12, a22


def pendulum_energy(params, q, qdot):
    """Mechanical energy shifted so the downward rest state has zero energy.

    ``q`` and ``qdot`` have a trailing axis of length 2 (the two angles, measured
    from the downward vertical, and their rates).
    """
    p = params
    th1, th2 = q[..., 0], q[..., 1]
    w1, w2 = qdot[..., 0], qdot[..., 1]
    a11, a12, a22 = _mass_terms(p, th1, th2)
    kinetic = 0.5 * (a11 * w1**2 + 2 * a12 * w1 * w2 + a22 * w2**2)
    potential = -(p.m1 + p.m2) * p.g * p.l1 * np.cos(th1) - p.m2 * p.g * p.l2 * np.cos(th2)
    v_min = -(p.m1 + p.m2) * p.g * p.l1 - p.m2 * p.g * p.l2
    return kinetic + potential - v_min


def _pendulum_rhs(p, s):
    th1, th2, w1, w2 = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
    d = th1 - th2
    a11, a12, a22 = _mass_terms(p, th1, th2)
    sd = np.sin(d)
    b1 = -p.m2 * p.l1 * p.l2 * w2**2 * sd - (p.m1 + p.m2) * p.g * p.l1 * np.sin(th1)
    b2 = p.m2 * p.l1 * p.l2 * w1**2 * sd - p.m2 * p.g * p.l2 * np.sin(th2)
    det = a11 * a22 - a12**2
    acc1 = (a22 * b1 - a12 * b2) / det
    acc2 = (a11 * b2 - a12 * b1) / det
    return np.stack([w1, w2, acc1, acc2], axis=1)


def integrate_pendulum(params, initial, dt, horizon):
    """Fixed-step RK4 integration of many pendulums at once.

    Parameters
    ----------
    initial : (n, 4) array
        ``(theta1, theta2, omega1, omega2)`` per pendulum.

    Returns
    -------
    (n, horizon, 4) array of states, the first being ``initial``.
    """
    s = np.array(initial, dtype=float, ndmin=2)
    if not np.all(np.isfinite(s)):
        raise IntegrationError("non-finite initial state")
    out = np.empty((s.shape[0], horizon, 4))
    out[:, 0] = s
    for t in range(1, horizon):
        k1 = _pendulum_rhs(params, s)
        k2 = _pendulum_rhs(params, s + 0.5 * dt * k1)
        k3 = _pendulum_rhs(params, s + 0.5 * dt * k2)
        k4 = _pendulum_rhs(params, s + dt * k3)
        s = s + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(s)):
            raise IntegrationError(f"non-finite state at step {t}")
        out[:, t] = s
    return out


def pendulum_rollout(config, initial_state):
    """Integrate one double pendulum and keep the two angle coordinates.

    Returns
    -------
    trajectory : Trajectory
        Angles, shape ``(H, 2)``; ``quantity_true`` is the initial energy.
    energy : float
    """
    s0 = np.asarray(initial_state, dtype=float).reshape(1, 4)
    states = integrate_pendulum(config.pendulum, s0, config.dt, config.horizon)[0]
    energy = float(pendulum_energy(config.pendulum, s0[0, :2], s0[0, 2:]))
    return Trajectory(states[:, :2], config, energy), energy


def curate_pendulum_dataset(config, prior, n, seed, velocity_scale=3.0,
                            max_attempts_per_bin=10**6, batch=4096):
    """Rejection-sample pendulum rollouts stratified over the prior's energy bins.

    Initial angles are uniform on ``[-pi, pi)`` and angular velocities are
    isotropic Gaussian with standard deviation ``velocity_scale``. Each bin
    receives ``n // bins`` trajectories and the first ``n % bins`` bins one
    more; the prior's density is not used beyond its bins.
    """
    if config.kind != "pendulum":
        raise DomainError("curation applies to the pendulum family")
    if n < 1:
        raise ValueError("n must be >= 1")
    B = prior.bins
    quota = np.full(B, n // B)
    quota[: n % B] += 1
    filled = np.zeros(B, dtype=np.int64)
    attempts = np.zeros(B, dtype=np.int64)
    accepted = [[] for _ in range(B)]
    edges = prior.edges
    b_idx = 0
    while np.any(filled < quota):
        g = keyed_generator(seed, "curate", b_idx)
        b_idx += 1
        th = g.uniform(-np.pi, np.pi, size=(batch, 2))
        om = g.normal(0.0, velocity_scale, size=(batch, 2))
        energy = pendulum_energy(config.pendulum, th, om)
        attempts[filled < quota] += batch
        inside = (energy >= prior.lower) & (energy <= prior.upper)
        bins = np.clip(np.searchsorted(edges, energy, side="right") - 1, 0, B - 1)
        for i in np.flatnonzero(inside):
            b = bins[i]
            if filled[b] < quota[b]:
                accepted[b].append(np.concatenate([th[i], om[i]]))
                filled[b] += 1
        stuck = np.flatnonzero((filled < quota) & (attempts >= max_attempts_per_bin))
        if stuck.size:
            b = int(stuck[0])
            raise CurationError(b, edges[b], edges[b + 1], int(attempts[b]))

    initial = np.array([s for group in accepted for s in group])
    energies = pendulum_energy(config.pendulum, initial[:, :2], initial[:, 2:])
    states = integrate_pendulum(config.pendulum, initial, config.dt, config.horizon)
    angles = states[:, :, :2]
    return Dataset(angles, config, prior, Normalization.from_data(angles), energies, seed)


# --- sampling -------------------------------------------------------------------


def sample_dataset(config, prior, n, seed):
    """Draw ``n`` trajectories with quantities distributed according to ``prior``.

    Quantity ``i`` is ``T(u_i)`` with ``u_i = (i + U_i) / n``: one jittered
    draw per quantile stratum, so the sampled marginal matches the prior up to
    one trajectory per bin. ``U_i`` depends only on ``(seed, i)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if config.kind == "pendulum":
        raise DomainError("pendulum datasets are curated by energy; use curate_pendulum_dataset")
    u = (np.arange(n) + keyed_uniforms(seed, "dataset", n)) / n
    r = np.atleast_1d(quantile_transport(prior, u))
    values = rollout_batch(config, r)
    return Dataset(values, config, prior, default_normalization(config), r, seed)


# --- sensitivity ---------------------------------------------------------------


def lyapunov_finite(config, r, x0=None, horizon=None):
    """Finite-horizon Lyapunov exponent of the un-snapped orbit.

    ``(1 / (H - 1)) * sum_{t=0}^{H-2} log|f'(x_t)|``. The sinusoid has identity
    tangent dynamics and returns exactly zero.

    For the tent map, passing ``r`` and ``x0`` as ``fractions.Fraction``
    iterates the orbit in exact arithmetic. Binary floating point turns
    every tent orbit with ``r = 2`` into a dyadic one that eventually lands
    on the fold, whereas e.g. ``x0 = 3/10`` is periodic and never does.
    """
    if config.kind == "pendulum":
        raise DomainError("Lyapunov oracle is defined for the one-dimensional families")
    _check_quantity(config, float(r))
    H = horizon or config.horizon
    if H < 2:
        raise ValueError("horizon must be >= 2")
    if config.kind == "sinusoid":
        return 0.0
    x = config.x0 if x0 is None else x0
    exact = config.kind == "tent" and isinstance(r, Fraction) and isinstance(x, Fraction)
    if not exact:
        r, x = float(r), float(x)
    if not 0 <= x <= 1:
        raise DomainError("x0 must lie in [0, 1]")
    half = Fraction(1, 2) if exact else 0.5
    total = 0.0
    for t in range(H - 1):
        if config.kind == "tent":
            if x == half or r == 0:
                raise NonDifferentiableOrbitError(f"tent orbit hits the fold at t={t}")
            total += math.log(r)
            x = r * min(x, 1 - x)
        else:
            deriv = r * (1.0 - 2.0 * x)
            if deriv == 0:
                raise NonDifferentiableOrbitError(f"logistic derivative vanishes at t={t}")
            total += math.log(abs(deriv))
            x = r * x * (1.0 - x)
    return total / (H - 1)


def lyapunov_closed_form(config, r):
    """Known asymptotic exponent where one exists, else None.

    Tent: ``log r``. Logistic in the fixed-point regime ``1 < r < 3``:
    ``log|2 - r|``. Sinusoid: 0.
    """
    if config.kind == "sinusoid":
        return 0.0
    if config.kind == "tent":
        return math.log(r) if r > 0 else None
    if config.kind == "logistic" and 1.0 < r < 3.0 and r != 2.0:
        return math.log(abs(2.0 - r))
    return None
