"""Robust change-plane regression: smoothed Huber estimation of subgroup
classifiers and weighted-average score tests for the existence of subgroups."""

from .changeplane_fit import (
    BootstrapCI,
    SmoothedFitResult,
    bootstrap_ci,
    fit_alternating,
    smoothed_loss,
    smoothed_loss_grad,
)
from .core import (
    ChangePlaneParams,
    Dataset,
    FitConfig,
    GammaVector,
    RngStream,
    classify,
    derive_stream,
    gamma_to_eta,
)
from .huber import calibrate_tau, huber_fit_adaptive, huber_fit_fixed_tau, huber_loss, huber_psi
from .simlab import DgpConfig, gen_dataset, run_estimation_experiment, run_test_experiment
from .smoothkernel import KernelSpec, kernel_eval, rule_of_thumb_h
from .subgroup_test import (
    TestResult,
    bootstrap_pvalue,
    fit_null,
    pair_weight,
    rwast_statistic,
    sst_statistic,
    wast_statistic,
)

__version__ = "0.1.0"
