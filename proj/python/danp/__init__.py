"""Dimension-agnostic neural processes.

Thin wrapper over the C++ core: GP task sampling, metrics, BO helpers and
checkpoint loading / prediction.
"""

from ._core import (
    Checkpoint,
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionMismatchError,
    MalformedTaskError,
    ackley,
    cosine_objective,
    crps_gaussian,
    expected_improvement,
    gaussian_loglik,
    kernel,
    kl_diag_gaussians,
    load_checkpoint,
    log_mean_exp,
    new_checkpoint,
    rastrigin,
    sample_gp_task,
    validate_config,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DimensionMismatchError",
    "MalformedTaskError",
    "ackley",
    "cosine_objective",
    "crps_gaussian",
    "expected_improvement",
    "gaussian_loglik",
    "kernel",
    "kl_diag_gaussians",
    "load_checkpoint",
    "log_mean_exp",
    "new_checkpoint",
    "rastrigin",
    "sample_gp_task",
    "validate_config",
]
