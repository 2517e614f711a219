"""Bayesian and conventional multi-exposure fusion of Poisson count images."""

__version__ = "0.1.0"

from .estimators import BayesianMEF, ConventionalMEF
from .fusion import (
    FusionConfig,
    FusionResult,
    ModelError,
    NumericalError,
    TraceRecord,
    bayesian_mef,
    conventional_mef,
    em_step,
    estimate_uncensored,
    heuristic_flux,
    log_posterior,
)
from .io import Bundle, BundleError, load_bundle, load_image, save_bundle, save_image, write_pgm
from .metrics import SsimParams, log_intensity, masked_relative_rmse, mssim, ssim_map
from .stack import ExposureStack, StackError, check_stack, mean_dark_frames, saturation_mask
from .stats import DomainError, binomial_split_mean, poisson_sf_log, truncated_poisson_mean
from .synth import (
    SimulationParams,
    SyntheticScene,
    flux_jitter,
    make_scene,
    sample_dark_frames,
    sample_stack,
    spokes_target,
)

__all__ = [
    "BayesianMEF",
    "ConventionalMEF",
    "FusionConfig",
    "FusionResult",
    "ModelError",
    "NumericalError",
    "TraceRecord",
    "bayesian_mef",
    "conventional_mef",
    "em_step",
    "estimate_uncensored",
    "heuristic_flux",
    "log_posterior",
    "Bundle",
    "BundleError",
    "load_bundle",
    "load_image",
    "save_bundle",
    "save_image",
    "write_pgm",
    "SsimParams",
    "log_intensity",
    "masked_relative_rmse",
    "mssim",
    "ssim_map",
    "ExposureStack",
    "StackError",
    "check_stack",
    "mean_dark_frames",
    "saturation_mask",
    "DomainError",
    "binomial_split_mean",
    "poisson_sf_log",
    "truncated_poisson_mean",
    "SimulationParams",
    "SyntheticScene",
    "flux_jitter",
    "make_scene",
    "sample_dark_frames",
    "sample_stack",
    "spokes_target",
]
