"""Run configuration documents.

A run is described by one JSON object::

    {
      "family": {"kind": "tent", "horizon": 64},
      "prior": {"bins": 64},
      "kernel": {"sigma": 0.0125, "run_length": 3},
      "counts": {"dataset_size": 25000, "samples_per_row": 2000,
                 "grid_resolution": 16384},
      "recovery_rule": "posterior",
      "sweep": [0, 0.0005, ...],
      "seeds": [0],
      "output_dir": "out",
      "n_jobs": 1,
      "mitigation": {"method": "transform", "k_dec": 8}
    }

Only ``family.kind`` is required. Unknown fields are rejected with their
dotted path so typos never pass silently.
"""
from dataclasses import dataclass, field, fields
import json
import math
import os

from .devkernel import KernelConfig
from .errors import ConfigError
from .prediction import DEFAULT_SWEEP
from .recovery import DEFAULT_RESOLUTION
from .systems import DEFAULT_BINS, FamilyConfig, PendulumParams, QuantityPrior

OUTPUT_ENV = "QUANTDRIFT_OUTPUT"
RULES = ("posterior", "mode", "mean")


@dataclass(frozen=True)
class Counts:
    dataset_size: int = 25000
    samples_per_row: int = 2000
    grid_resolution: int = DEFAULT_RESOLUTION


@dataclass(frozen=True)
class MitigationConfig:
    method: str = "transform"
    k_dec: int = 8
    perturbations_per_code: int = 64
    code_sigma: float = None  # defaults to the trajectory kernel's sigma
    support_size: int = 512
    max_iters: int = None
    floor_fraction: float = 0.10
    weight_floor: float = 1e-6


@dataclass(frozen=True)
class RunConfig:
    family: FamilyConfig
    prior: QuantityPrior
    kernel: KernelConfig
    counts: Counts = field(default_factory=Counts)
    recovery_rule: str = "posterior"
    sweep: tuple = DEFAULT_SWEEP
    seeds: tuple = (0,)
    output_dir: str = "."
    n_jobs: int = 1
    mitigation: MitigationConfig = field(default_factory=MitigationConfig)

    @property
    def seed(self):
        return self.seeds[0]

    def to_dict(self):
        """Plain-data echo of the configuration, embedded in reports."""
        fam = self.family
        return {
            "family": {
                "kind": fam.kind, "horizon": fam.horizon, "x0": fam.x0, "phase": fam.phase,
                "state_bins": fam.state_bins, "dt": fam.dt,
                "pendulum": {f.name: getattr(fam.pendulum, f.name) for f in fields(PendulumParams)},
            },
            "prior": {"lower": self.prior.lower, "upper": self.prior.upper,
                      "bins": self.prior.bins, "density": [float(m) for m in self.prior.density]},
            "kernel": {f.name: _plain(getattr(self.kernel, f.name)) for f in fields(KernelConfig)},
            "counts": {f.name: getattr(self.counts, f.name) for f in fields(Counts)},
            "recovery_rule": self.recovery_rule,
            "sweep": [float(s) for s in self.sweep],
            "seeds": list(self.seeds),
            "n_jobs": self.n_jobs,
            "mitigation": {f.name: getattr(self.mitigation, f.name) for f in fields(MitigationConfig)},
        }


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _check_keys(doc, allowed, path):
    if not isinstance(doc, dict):
        raise ConfigError(path, "expected an object")
    for key in doc:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(where, "unknown field")


def _typed(value, kind, path, minimum=None, allow_none=False):
    if value is None and allow_none:
        return None
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(path, f"expected a finite number, got {value!r}")
        value = float(value)
    elif kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true or false, got {value!r}")
    elif kind is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value!r}")
    return value


def _build(cls, doc, path, spec):
    """Validate ``doc`` against ``spec`` ``{name: (type, minimum, allow_none)}`` and construct."""
    doc = {} if doc is None else doc
    _check_keys(doc, spec, path)
    kwargs = {}
    for name, (kind, minimum, allow_none) in spec.items():
        if name in doc:
            kwargs[name] = _typed(doc[name], kind, f"{path}.{name}", minimum, allow_none)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _family(doc):
    if doc is None:
        raise ConfigError("family", "missing required field")
    _check_keys(doc, {"kind", "horizon", "x0", "phase", "state_bins", "dt", "pendulum"}, "family")
    if "kind" not in doc:
        raise ConfigError("family.kind", "missing required field")
    pend = _build(PendulumParams, doc.get("pendulum"), "family.pendulum",
                  {n: (float, None, False) for n in ("m1", "m2", "l1", "l2", "g")})
    spec = {"kind": (str, None, False), "horizon": (int, 2, False), "x0": (float, None, False),
            "phase": (float, None, False), "state_bins": (int, 2, False), "dt": (float, None, False)}
    inner = {k: v for k, v in doc.items() if k != "pendulum"}
    _check_keys(inner, spec, "family")
    kwargs = {n: _typed(inner[n], spec[n][0], f"family.{n}", spec[n][1]) for n in inner}
    try:
        return FamilyConfig(pendulum=pend, **kwargs)
    except ValueError as exc:
        raise ConfigError("family", str(exc)) from exc


def _prior(doc, family):
    doc = {} if doc is None else doc
    _check_keys(doc, {"lower", "upper", "bins", "density"}, "prior")
    lo, hi = family.quantity_range
    lower = _typed(doc.get("lower", lo), float, "prior.lower")
    upper = _typed(doc.get("upper", hi), float, "prior.upper")
    density = doc.get("density")
    bins = _typed(doc.get("bins", len(density) if density else DEFAULT_BINS[family.kind]),
                  int, "prior.bins", 2)
    if density is not None:
        if not isinstance(density, list):
            raise ConfigError("prior.density", "expected a list of bin masses")
        density = [_typed(m, float, f"prior.density[{i}]", 0.0) for i, m in enumerate(density)]
    try:
        return QuantityPrior(lower, upper, bins, density)
    except ValueError as exc:
        raise ConfigError("prior", str(exc)) from exc


def _kernel(doc):
    doc = {} if doc is None else dict(doc)
    bounds = doc.pop("coordinate_bounds", None)
    k = _build(KernelConfig, doc, "kernel", {
        "sigma": (float, 0.0, False),
        "run_length": (int, 1, False),
        "dense_cutoff": (int, 1, True),
        "k_dec_floor": (int, 1, False),
        "preserve_endpoints": (bool, None, False),
        "random_phase": (bool, None, False),
        "variance_draws": (int, 2, False),
    })
    if bounds is not None:
        if not isinstance(bounds, list) or len(bounds) != 2:
            raise ConfigError("kernel.coordinate_bounds", "expected [lo, hi]")
        lo = _typed(bounds[0], float, "kernel.coordinate_bounds[0]")
        hi = _typed(bounds[1], float, "kernel.coordinate_bounds[1]")
        if not lo < hi:
            raise ConfigError("kernel.coordinate_bounds", "need lo < hi")
        k = KernelConfig(**{**k.__dict__, "coordinate_bounds": (lo, hi)})
    return k


def parse_config(text):
    """Parse and validate a JSON run configuration.

    Raises
    ------
    ConfigError
        With the dotted path of the first offending field.
    """
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from exc
    return config_from_dict(doc)


def config_from_dict(doc):
    allowed = {"family", "prior", "kernel", "counts", "recovery_rule", "sweep", "seeds",
               "output_dir", "n_jobs", "mitigation"}
    _check_keys(doc, allowed, "")
    family = _family(doc.get("family"))
    prior = _prior(doc.get("prior"), family)
    kernel = _kernel(doc.get("kernel"))
    counts = _build(Counts, doc.get("counts"), "counts", {
        "dataset_size": (int, 1, False),
        "samples_per_row": (int, 1, False),
        "grid_resolution": (int, 2, False),
    })
    rule = _typed(doc.get("recovery_rule", "posterior"), str, "recovery_rule")
    if rule not in RULES:
        raise ConfigError("recovery_rule", f"expected one of {RULES}, got {rule!r}")
    sweep = doc.get("sweep", list(DEFAULT_SWEEP))
    if not isinstance(sweep, list) or not sweep:
        raise ConfigError("sweep", "expected a non-empty list of sigmas")
    sweep = tuple(_typed(s, float, f"sweep[{i}]", 0.0) for i, s in enumerate(sweep))
    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds", "expected a non-empty list of integers")
    seeds = tuple(_typed(s, int, f"seeds[{i}]", 0) for i, s in enumerate(seeds))
    output_dir = _typed(doc.get("output_dir", os.environ.get(OUTPUT_ENV, ".")), str, "output_dir")
    n_jobs = _typed(doc.get("n_jobs", 1), int, "n_jobs", 1)
    mitigation = _build(MitigationConfig, doc.get("mitigation"), "mitigation", {
        "method": (str, None, False),
        "k_dec": (int, 1, False),
        "perturbations_per_code": (int, 1, False),
        "code_sigma": (float, 0.0, True),
        "support_size": (int, 1, False),
        "max_iters": (int, 0, True),
        "floor_fraction": (float, 0.0, False),
        "weight_floor": (float, 0.0, False),
    })
    if mitigation.method not in ("transform", "reweight"):
        raise ConfigError("mitigation.method", "expected 'transform' or 'reweight'")
    return RunConfig(family, prior, kernel, counts, rule, sweep, seeds, output_dir, n_jobs, mitigation)


def load_config(path):
    with open(path) as f:
        return parse_config(f.read())
