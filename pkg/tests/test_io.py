import json

import numpy as np
import pytest

from quantdrift.errors import IngestError
from quantdrift.io import (
    ingest_trajectories,
    kde_curve,
    read_marginal,
    read_quantities,
    write_dataset,
    write_marginal,
    write_plot_data,
    write_trajectories,
)
from quantdrift.recovery import BinnedMarginal
from quantdrift.systems import FamilyConfig, QuantityPrior, sample_dataset


def _meta(path, H, d, **extra):
    doc = {"horizon": H, "dim": d, **extra}
    path.write_text(json.dumps(doc))
    return path


def test_two_trajectories_ingest(tmp_path):
    csv = tmp_path / "x.csv"
    csv.write_text("traj_id,t,c0\n0,0,0.1\n0,1,0.2\n0,2,0.3\n1,0,0.5\n1,2,0.7\n1,1,0.6\n")
    ds = ingest_trajectories(csv, _meta(tmp_path / "m.json", 3, 1, family="tent"))
    assert len(ds) == 2
    assert np.allclose(ds.values[1, :, 0], [0.5, 0.6, 0.7])


def test_round_trip_is_bitwise(tmp_path):
    cfg = FamilyConfig("sinusoid")
    ds = sample_dataset(cfg, QuantityPrior.for_family(cfg), 7, seed=3)
    paths = write_dataset(tmp_path, ds)
    back = ingest_trajectories(paths["trajectories"], paths["metadata"])
    assert np.array_equal(back.values, ds.values)
    assert np.array_equal(read_quantities(paths["quantities"]), ds.quantities)
    assert np.array_equal(back.normalization.lo, ds.normalization.lo)
    assert back.family.kind == "sinusoid"


def test_missing_timestep_names_trajectory(tmp_path):
    csv = tmp_path / "x.csv"
    csv.write_text("traj_id,t,c0\n0,0,0.1\n0,1,0.2\n0,2,0.3\n7,0,0.5\n7,2,0.7\n")
    with pytest.raises(IngestError, match="trajectory 7"):
        ingest_trajectories(csv, _meta(tmp_path / "m.json", 3, 1))


def test_non_finite_value_names_row(tmp_path):
    csv = tmp_path / "x.csv"
    csv.write_text("traj_id,t,c0\n0,0,0.1\n0,1,nan\n0,2,0.3\n")
    with pytest.raises(IngestError, match="row 3"):
        ingest_trajectories(csv, _meta(tmp_path / "m.json", 3, 1))


def test_bad_header_and_width(tmp_path):
    csv = tmp_path / "x.csv"
    csv.write_text("id,t,c0\n0,0,0.1\n")
    with pytest.raises(IngestError):
        ingest_trajectories(csv, _meta(tmp_path / "m.json", 1, 1))
    csv.write_text("traj_id,t,c0\n0,0,0.1,0.2\n")
    with pytest.raises(IngestError, match="row 2"):
        ingest_trajectories(csv, _meta(tmp_path / "m.json", 1, 1))


def test_duplicate_timestep(tmp_path):
    csv = tmp_path / "x.csv"
    csv.write_text("traj_id,t,c0\n0,0,0.1\n0,0,0.2\n")
    with pytest.raises(IngestError, match="repeated"):
        ingest_trajectories(csv, _meta(tmp_path / "m.json", 1, 1))


def test_multidimensional_write_read(tmp_path):
    vals = np.random.default_rng(0).normal(size=(3, 4, 2))
    write_trajectories(tmp_path / "t.csv", vals)
    ds = ingest_trajectories(tmp_path / "t.csv", _meta(tmp_path / "m.json", 4, 2))
    assert np.array_equal(ds.values, vals)


def test_marginal_csv_round_trip(tmp_path):
    m = BinnedMarginal(np.array([0.0, 0.5, 2.0]), np.array([0.1, 0.9]))
    write_marginal(tmp_path / "m.csv", m)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "bin_lo,bin_hi,mass"
    back = read_marginal(tmp_path / "m.csv")
    assert np.array_equal(back.edges, m.edges) and np.allclose(back.mass, m.mass)


def test_kde_integrates_to_about_one(tmp_path):
    m = BinnedMarginal(np.linspace(0, 10, 21), np.full(20, 0.05))
    x, dens = kde_curve(m, points=2001)
    # tails beyond the range are cut off, so the integral is just under one
    assert 0.8 < np.trapezoid(dens, x) <= 1.0 + 1e-9
    narrow = BinnedMarginal(np.linspace(0, 10, 21), np.r_[np.zeros(9), 0.5, 0.5, np.zeros(9)])
    x, dens = kde_curve(narrow, points=2001)
    assert np.trapezoid(dens, x) == pytest.approx(1.0, abs=1e-6)
    write_plot_data(tmp_path / "p.csv", {"a": m, "b": m})
    assert (tmp_path / "p.csv").read_text().startswith("x,a,b\n")
