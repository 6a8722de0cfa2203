"""Conditional density estimation when the covariate is measured with error."""
from .bandwidth import select_bandwidths, weight_window
from .data import Dataset, read_replicate_csv, read_wy_csv
from .errors import DeconvError
from .estimators import (
    ESTIMATORS,
    P1,
    P2,
    P3,
    P4,
    BandwidthSet,
    DensityGrid,
    default_kernels,
    estimate_deconv_onestep,
    estimate_deconv_twostep,
    estimate_naive_onestep,
    estimate_naive_twostep,
)
from .kernels import GAUSSIAN, NO_ERROR, SECOND_ORDER, ErrorModel, KernelSpec
from .regression import fit_mean
from .simulation import Scenario, generate_scenario, run_mc_study

__version__ = "0.1.0"

__all__ = [
    "select_bandwidths",
    "weight_window",
    "Dataset",
    "read_replicate_csv",
    "read_wy_csv",
    "DeconvError",
    "ESTIMATORS",
    "P1",
    "P2",
    "P3",
    "P4",
    "BandwidthSet",
    "DensityGrid",
    "default_kernels",
    "estimate_deconv_onestep",
    "estimate_deconv_twostep",
    "estimate_naive_onestep",
    "estimate_naive_twostep",
    "GAUSSIAN",
    "NO_ERROR",
    "SECOND_ORDER",
    "ErrorModel",
    "KernelSpec",
    "fit_mean",
    "Scenario",
    "generate_scenario",
    "run_mc_study",
]
