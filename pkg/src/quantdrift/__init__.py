"""Predict, measure and mitigate drift of recovered physical quantities.

A trajectory generator trained on data whose physical quantity follows a
prior can reproduce individual trajectories well and still shift the
aggregate distribution of that quantity. This package simulates the data
families, recovers quantities from trajectories, predicts the shift that
local generator errors cause, and builds interventions against it.
"""
__version__ = "0.1.0"

from .devkernel import KernelConfig, PieceIndex, build_piece_index, perturb_batch, perturb_trajectory
from .errors import (
    ConfigError,
    CurationError,
    DegeneratePosteriorError,
    DomainError,
    IncompatibleBinsError,
    IngestError,
    IntegrationError,
    NonDifferentiableOrbitError,
)
from .mitigation import (
    CodeSupport,
    DecoderMatrix,
    Pairing,
    ReweightPlan,
    compute_reweight,
    decode_sample,
    decoder_matrix,
    init_pairing,
    inverse_prior,
    latin_hypercube,
    local_mixtures,
    swap_optimize,
)
from .prediction import (
    DEFAULT_SWEEP,
    DriftReport,
    TransportKernel,
    drift_report,
    estimate_transport_kernel,
    paired_t_test,
    predict_marginal,
    sigma_sweep,
    signed_drift,
    tv_distance,
)
from .recovery import (
    BinnedMarginal,
    Posterior,
    ReferenceGrid,
    build_reference_grid,
    pullback_marginal,
    recover_pendulum_energy,
    recover_posterior,
)
from .systems import (
    Dataset,
    FamilyConfig,
    PendulumParams,
    QuantityPrior,
    Trajectory,
    curate_pendulum_dataset,
    lyapunov_closed_form,
    lyapunov_finite,
    quantile_transport,
    rollout,
    sample_dataset,
)
