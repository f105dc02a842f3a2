"""Cluster-robust inference for linear quantile regression via the wild gradient bootstrap."""

from __future__ import annotations

__version__ = "0.1.0"

from .bootstrap import (
    BootstrapEnsemble,
    WeightDistribution,
    bootstrap_ensemble,
    draw_weights,
    gradient_process,
    pseudo_observation,
    read_ensemble,
    write_ensemble,
    y_star,
)
from .covariance import (
    CovarianceFunction,
    analytical_covariance,
    bootstrap_covariance,
    hall_sheather_bandwidth,
    powell_jacobian,
    pss_sigma,
    standard_errors,
)
from .dataset import ClusteredDataset, intraclass_correlation, load_csv, write_csv
from .errors import *  # noqa: F401,F403
from .inference import (
    ConfidenceBand,
    Hypothesis,
    LambdaKind,
    TestResult,
    WeightKind,
    bootstrap_ks,
    confidence_bands,
    critical_value,
    default_grid,
    inv_sqrt_psd,
    ks_statistic,
    pointwise_wald,
    test,
)
from .montecarlo import (
    HypothesisSpec,
    McConfig,
    RejectionTable,
    generate_dgp,
    run_coverage,
    run_size_power,
    true_beta,
)
from .solver import (
    CoefficientProcess,
    PseudoObservation,
    QuantileGrid,
    fit,
    fit_augmented,
    fit_process,
    objective,
)
