"""Bayesian model comparison for simulator models.

Trains mixture-density networks that map data summaries to a posterior over
model indices and per-model posteriors over parameters, validated against
exact oracles and rejection-sampling baselines.
"""

from .counts import (
    NB,
    POISSON,
    CountModelSpec,
    GammaParams,
    generate_count_dataset,
    make_scenario,
    sample_gamma,
    scale_difficulty,
    simulate_nb,
    simulate_poisson,
)
from .data import Dataset, LabeledSample
from .exact import (
    GridConfig,
    GridPosterior2D,
    grid_sample,
    model_posterior_exact,
    nb_grid_posterior,
    nb_log_evidence,
    poisson_log_evidence,
    poisson_posterior,
)
from .features import PcaBasis, ZScaler, build_pca_basis, count_summary, project_traces
from .mdn import (
    ClassifierHead,
    FeedforwardNet,
    MoGHead,
    MoGPosterior,
    TrainConfig,
    TrainedModel,
    classifier_loss,
    forward_classifier,
    forward_mog,
    mog_log_density,
    mog_to_original_scale,
    train,
)
from .channels import (
    KD_GROUND_TRUTH,
    KS_GROUND_TRUTH,
    KdParams,
    KsParams,
    TraceSet,
    VoltageProtocol,
    build_protocols,
    kd_rates,
    ks_kinetics,
    simulate_clamp,
)
from .abc import RejectionConfig, SmcConfig, reject_models, reject_params, smc_models
from .diagnostics import (
    CalibrationReport,
    compare_methods,
    credible_coverage,
    eigen_check,
    kl_divergence,
    normalized_kl,
    prior_consistency,
    quantile_check,
)

__version__ = "0.1.0"
