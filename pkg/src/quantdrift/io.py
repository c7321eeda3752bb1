"""File formats: long-format trajectory CSV, JSON sidecars, marginal and plot CSVs.

Floats are written with ``repr`` (shortest string that reads back to the same
double), so every write/read round trip is exact.
"""
import csv
import json
import math
import os

import numpy as np

from .errors import IngestError
from .recovery import BinnedMarginal
from .systems import Dataset, FamilyConfig, Normalization, QuantityPrior


def fmt(x):
    """Shortest round-trip decimal form of a float."""
    return repr(float(x))


def write_json(path, doc):
    with open(path, "w") as f:
        f.write(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def write_trajectories(path, values):
    """Write ``(N, H, d)`` values as rows ``traj_id,t,c0,...``."""
    values = np.asarray(values, dtype=float)
    N, H, d = values.shape
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["traj_id", "t"] + [f"c{k}" for k in range(d)])
        for i in range(N):
            for t in range(H):
                w.writerow([i, t] + [fmt(v) for v in values[i, t]])


def dataset_metadata(dataset):
    fam = dataset.family
    return {
        "family": fam.kind,
        "horizon": int(dataset.horizon),
        "dim": int(dataset.dim),
        "coordinate_lo": [float(v) for v in dataset.normalization.lo],
        "coordinate_hi": [float(v) for v in dataset.normalization.hi],
        "prior": {
            "lower": float(dataset.prior.lower),
            "upper": float(dataset.prior.upper),
            "density": [float(m) for m in dataset.prior.density],
        },
        "seed": dataset.seed,
    }


def write_dataset(directory, dataset, stem="dataset"):
    """Write ``<stem>.csv``, ``<stem>.json`` and, if known, ``<stem>_quantities.csv``."""
    os.makedirs(directory, exist_ok=True)
    paths = {"trajectories": os.path.join(directory, f"{stem}.csv"),
             "metadata": os.path.join(directory, f"{stem}.json")}
    write_trajectories(paths["trajectories"], dataset.values)
    write_json(paths["metadata"], dataset_metadata(dataset))
    if dataset.quantities is not None:
        paths["quantities"] = os.path.join(directory, f"{stem}_quantities.csv")
        write_quantities(paths["quantities"], dataset.quantities)
    return paths


def write_quantities(path, quantities, header="quantity"):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["traj_id", header])
        for i, q in enumerate(np.asarray(quantities, dtype=float)):
            w.writerow([i, fmt(q)])


def read_quantities(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return np.array([float(next(v for k, v in r.items() if k != "traj_id")) for r in rows])


def _metadata(meta_path):
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"cannot read metadata {meta_path}: {exc}") from exc
    for key in ("horizon", "dim"):
        if key not in meta:
            raise IngestError(f"metadata is missing {key!r}")
    return meta


def ingest_trajectories(csv_path, meta_path, family=None, prior=None):
    """Load externally generated trajectories in the long CSV format.

    The metadata JSON declares ``horizon``, ``dim`` and optionally
    ``family``, ``coordinate_lo``/``coordinate_hi`` (used for normalization)
    and ``prior``. Rows may come in any order.

    Raises
    ------
    IngestError
        On a non-finite or unparsable value (naming the CSV row) or a
        trajectory with missing or repeated timesteps (naming its id).
    """
    meta = _metadata(meta_path)
    H, d = int(meta["horizon"]), int(meta["dim"])
    series = {}
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        expected = ["traj_id", "t"] + [f"c{k}" for k in range(d)]
        if header is None or [h.strip() for h in header] != expected:
            raise IngestError(f"header must be {','.join(expected)}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise IngestError(f"row {row_no}: expected {d + 2} fields, got {len(row)}")
            try:
                tid, t = row[0].strip(), int(row[1])
                vals = [float(c) for c in row[2:]]
            except ValueError as exc:
                raise IngestError(f"row {row_no}: {exc}") from exc
            if not all(math.isfinite(v) for v in vals):
                raise IngestError(f"row {row_no}: non-finite value")
            steps = series.setdefault(tid, {})
            if t in steps:
                raise IngestError(f"trajectory {tid}: timestep {t} repeated")
            steps[t] = vals
    if not series:
        raise IngestError("no trajectories in file")
    values = np.empty((len(series), H, d))
    ids = sorted(series, key=_id_key)
    for i, tid in enumerate(ids):
        steps = series[tid]
        missing = sorted(set(range(H)) - set(steps))
        extra = sorted(set(steps) - set(range(H)))
        if missing or extra:
            raise IngestError(f"trajectory {tid}: missing timesteps {missing}" if missing
                              else f"trajectory {tid}: timesteps outside horizon {extra}")
        values[i] = [steps[t] for t in range(H)]

    if family is None:
        kind = meta.get("family")
        family = FamilyConfig(kind, horizon=H) if kind else None
    if prior is None and "prior" in meta:
        p = meta["prior"]
        prior = QuantityPrior(p["lower"], p["upper"], len(p["density"]), tuple(p["density"]))
    elif prior is None and family is not None:
        prior = QuantityPrior.for_family(family)
    if "coordinate_lo" in meta and "coordinate_hi" in meta:
        norm = Normalization(np.array(meta["coordinate_lo"]), np.array(meta["coordinate_hi"]))
    elif family is not None and family.coordinate_range() is not None:
        norm = Normalization(*family.coordinate_range())
    else:
        norm = Normalization.from_data(values)
    return Dataset(values, family, prior, norm, None, meta.get("seed"))


def _id_key(tid):
    try:
        return (0, int(tid), "")
    except ValueError:
        return (1, 0, tid)


def write_marginal(path, marginal):
    """CSV ``bin_lo,bin_hi,mass``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "mass"])
        for lo, hi, m in zip(marginal.edges[:-1], marginal.edges[1:], marginal.mass):
            w.writerow([fmt(lo), fmt(hi), fmt(m)])


def read_marginal(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise IngestError(f"{path}: empty marginal")
    edges = [float(rows[0]["bin_lo"])] + [float(r["bin_hi"]) for r in rows]
    mass = np.array([float(r["mass"]) for r in rows])
    return BinnedMarginal(np.array(edges), mass / mass.sum())


def kde_curve(marginal, points=256, bandwidth=None):
    """Gaussian KDE of a binned marginal for plotting (Silverman bandwidth by default).

    Bin centers act as weighted samples. Returns ``(grid, density)``.
    """
    c = marginal.centers
    w = marginal.mass
    mean = np.dot(w, c)
    sd = math.sqrt(max(np.dot(w, (c - mean) ** 2), 0.0))
    n_eff = 1.0 / np.sum(w**2)
    if bandwidth is None:
        bandwidth = 1.06 * sd * n_eff ** (-0.2) if sd > 0 else (c[-1] - c[0] + 1.0) / c.size
    x = np.linspace(marginal.edges[0], marginal.edges[-1], points)
    z = (x[:, None] - c[None, :]) / bandwidth
    dens = (np.exp(-0.5 * z**2) @ w) / (bandwidth * math.sqrt(2 * math.pi))
    return x, dens


def write_plot_data(path, curves, points=256):
    """One CSV with columns ``x`` and a density column per named marginal."""
    names = list(curves)
    cols = {}
    x = None
    for name in names:
        x, cols[name] = kde_curve(curves[name], points)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x"] + names)
        for i in range(x.size):
            w.writerow([fmt(x[i])] + [fmt(cols[n][i]) for n in names])


def write_weights(path, plan):
    """CSV ``traj_id,weight`` for a reweighting plan."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["traj_id", "weight"])
        for i, v in enumerate(plan.weights):
            w.writerow([i, fmt(v)])
