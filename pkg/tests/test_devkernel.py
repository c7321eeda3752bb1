import math

import numpy as np
import pytest

from quantdrift.devkernel import (
    KernelConfig,
    PieceIndex,
    _draw_sources_1d,
    build_piece_index,
    dense_cutoff,
    local_neighborhood,
    perturb_batch,
    perturb_trajectory,
    project,
)
from quantdrift.systems import FamilyConfig, Normalization, QuantityPrior, curate_pendulum_dataset, sample_dataset


@pytest.fixture(scope="module")
def tent_index():
    cfg = FamilyConfig("tent")
    ds = sample_dataset(cfg, QuantityPrior.for_family(cfg), 2000, seed=0)
    return ds, build_piece_index(ds)


def test_zero_sigma_is_identity(tent_index):
    ds, index = tent_index
    X = ds.normalized()[:20]
    out = perturb_batch(index, X, KernelConfig(sigma=0.0), np.random.default_rng(0))
    assert np.array_equal(out, X)
    traj = perturb_trajectory(index, ds[3], KernelConfig(sigma=0.0), np.random.default_rng(0))
    assert np.array_equal(traj.values, ds[3].values)


@pytest.mark.parametrize("medians,want", [([700], 512), ([1], 1), ([0.4], 1), ([3, 100, 600], 64), ([1024], 1024)])
def test_dense_cutoff_is_power_of_two_floor(medians, want):
    assert dense_cutoff(medians) == want


def test_neighborhood_matches_brute_force(tent_index):
    ds, index = tent_index
    data = ds.normalized()
    cfg = KernelConfig(sigma=0.01)
    cutoff = index.auto_cutoff(0.01)
    x = data[17]
    for u in (0, 5, 40):
        pieces, w = local_neighborhood(index, x, u, cfg)
        col = data[:, u, 0]
        n1 = np.count_nonzero(np.abs(col - x[u, 0]) <= 0.01)
        alpha = 3.0 if n1 >= cutoff else 1.0
        want = np.sort(col[np.abs(col - x[u, 0]) <= alpha * 0.01])
        assert np.allclose(np.sort(pieces[:, 0]), want)
        assert np.allclose(w, np.exp(-(pieces[:, 0] - x[u, 0]) ** 2 / (2 * 0.01**2)))


def test_sparse_draw_follows_gaussian_weights():
    data = np.array([0.0, 0.01, 0.02, 0.5, -0.7])[:, None, None]
    index = PieceIndex(data)
    g = np.random.default_rng(1)
    n = 30000
    ids = _draw_sources_1d(index, 0, np.zeros(n), 0.02, cutoff=10**9, floor=1, rng=g)
    freq = np.bincount(ids, minlength=5) / n
    w = np.exp(-np.array([0.0, 0.01, 0.02]) ** 2 / (2 * 0.02**2))
    p = w / w.sum()
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq[:3] - p) < 4 * se)
    assert freq[3] == 0 and freq[4] == 0


def test_dense_draw_offsets_are_truncated_gaussian():
    # a fine lattice of unique pieces makes the snapped offset close to continuous
    lattice = np.linspace(-1, 1, 20001)
    index = PieceIndex(lattice[:, None, None])
    g = np.random.default_rng(2)
    sigma = 0.02
    ids = _draw_sources_1d(index, 0, np.zeros(40000), sigma, cutoff=1, floor=1, rng=g)
    off = lattice[ids]
    assert np.all(np.abs(off) <= 3 * sigma + 1e-4)
    # sd of N(0, s^2) truncated at +-3s is s * sqrt(1 - 6 phi(3) / (2 Phi(3) - 1))
    phi3 = math.exp(-4.5) / math.sqrt(2 * math.pi)
    Phi3 = 0.5 * (1 + math.erf(3 / math.sqrt(2)))
    sd = sigma * math.sqrt(1 - 6 * phi3 / (2 * Phi3 - 1))
    assert off.std() == pytest.approx(sd, rel=0.03)
    assert abs(off.mean()) < 4 * sd / math.sqrt(40000)


def test_fallback_to_nearest_piece():
    data = np.array([0.0, 0.5])[:, None, None]
    index = PieceIndex(data)
    ids = _draw_sources_1d(index, 0, np.array([0.2, 0.4]), 0.01, cutoff=10, floor=1,
                           rng=np.random.default_rng(0))
    assert list(ids) == [0, 1]


def test_sources_persist_over_runs(tent_index):
    ds, index = tent_index
    X = ds.normalized()[:50]
    cfg = KernelConfig(sigma=0.0125, run_length=3)
    _, src = perturb_batch(index, X, cfg, np.random.default_rng(3), return_sources=True)
    for a in range(0, 64, 3):
        block = src[:, a:a + 3]
        assert np.all(block == block[:, :1])


def test_bounds_and_endpoints(tent_index):
    ds, index = tent_index
    X = ds.normalized()[:200]
    cfg = KernelConfig(sigma=0.05, coordinate_bounds=(0.0, 1.0), preserve_endpoints=True)
    out = perturb_batch(index, X, cfg, np.random.default_rng(4))
    assert out.min() >= -1.0 and out.max() <= 1.0
    assert np.array_equal(out[:, 0], X[:, 0]) and np.array_equal(out[:, -1], X[:, -1])


def test_project_clips():
    X = np.array([[[-2.0], [0.5], [3.0]]])
    project(X, X.copy(), (np.array([-1.0]), np.array([1.0])), False)
    assert X.ravel().tolist() == [-1.0, 0.5, 1.0]


def test_same_generator_state_reproduces(tent_index):
    ds, index = tent_index
    X = ds.normalized()[:30]
    cfg = KernelConfig(sigma=0.0125)
    a = perturb_batch(index, X, cfg, np.random.default_rng(9))
    b = perturb_batch(index, X, cfg, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_residual_noise_tops_up_small_recombination_variance():
    # identical pieces make recombination a no-op, so all variance must come from the residual
    data = np.tile(np.linspace(-0.5, 0.5, 16)[None, :, None], (64, 1, 1))
    index = PieceIndex(data)
    sigma = 0.03
    out = perturb_batch(index, data, KernelConfig(sigma=sigma), np.random.default_rng(5))
    dev = (out - data).ravel()
    assert dev.std() == pytest.approx(sigma, rel=0.1)


def test_multidimensional_pieces():
    cfg = FamilyConfig("pendulum", horizon=16)
    ds = curate_pendulum_dataset(cfg, QuantityPrior.for_family(cfg), 120, seed=0)
    index = build_piece_index(ds)
    out = perturb_batch(index, ds.normalized()[:10], KernelConfig(sigma=0.02), np.random.default_rng(0))
    assert out.shape == (10, 16, 2) and np.all(np.isfinite(out))
    pieces, w = local_neighborhood(index, ds.normalized()[0], 3, KernelConfig(sigma=0.02))
    assert pieces.shape[1] == 2 and np.all((w > 0) & (w <= 1))


def test_shape_mismatch_rejected(tent_index):
    ds, index = tent_index
    with pytest.raises(ValueError):
        perturb_batch(index, np.zeros((2, 10, 1)), KernelConfig(), np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        KernelConfig(sigma=-0.1)
    with pytest.raises(ValueError):
        KernelConfig(run_length=0)
