"""Two ways to counter a predicted drift.

1. Reweighting: upweight training trajectories whose quantity the model
   under-produces, with weights pi(b) / p_model(b).
2. Transform: pair each code point of a latent support with one training
   trajectory so that codes that decode into each other carry a quantity
   mix close to the prior. Random cross-bin swaps lower the objective.

    python3 demos/03_mitigation.py
"""
import numpy as np

from quantdrift import FamilyConfig, KernelConfig, QuantityPrior
from quantdrift.mitigation import (
    compute_reweight,
    decoder_matrix,
    init_pairing,
    inverse_prior,
    latin_hypercube,
    mean_tv_to_prior,
    swap_optimize,
)
from quantdrift.recovery import BinnedMarginal, binned_posteriors, build_reference_grid
from quantdrift.systems import sample_dataset

cfg = FamilyConfig("tent")
prior = QuantityPrior.for_family(cfg)

# --- reweighting against a made-up model marginal tilted toward small r
tilt = np.linspace(1.5, 0.5, prior.bins)
model = BinnedMarginal(prior.edges, tilt / tilt.sum())
ds = sample_dataset(cfg, prior, 2000, seed=0)
plan = compute_reweight(ds.quantities, prior, model)
low, high = ds.quantities < 1.0, ds.quantities >= 1.0
print(f"mean weight r<1: {plan.weights[low].mean() * len(plan.weights):.3f}   r>=1: {plan.weights[high].mean() * len(plan.weights):.3f}")
inv = inverse_prior(model)
print(f"inverse-prior training target: first bin {inv.mass[0]:.4f}, last bin {inv.mass[-1]:.4f}")

# --- transform: pair a 256-point latent support with 256 trajectories
N = 256
ds = sample_dataset(cfg, prior, N, seed=1)
nu = binned_posteriors(build_reference_grid(cfg, prior), ds.normalized(), prior)
support = latin_hypercube(N, 64, seed=0)
M = decoder_matrix(support, KernelConfig(sigma=0.0125), k_dec=8)
start = init_pairing(nu, prior, support, seed=3)
result = swap_optimize(M, nu, prior, start, seed=4)
tv0, tv1 = mean_tv_to_prior(M, start, nu, prior), mean_tv_to_prior(M, result, nu, prior)
print(f"pairing objective {result.trace[0]:.5f} -> {result.objective:.5f} "
      f"({result.accepted} of {result.proposals} swaps accepted)")
print(f"mean TV of local mixtures to the prior {tv0:.4f} -> {tv1:.4f}")
