"""
Closed-form theory: infinite-width kernels, prior cumulants and O(1/n) posterior corrections
"""

from .corrections import (
    PhiMatrix,
    cnn_correction,
    deep_linear_correction,
    eigenbasis_correction,
    high_temp_expansion,
    leading_posterior_mean,
    low_temp_linear,
    phi_operator,
    posterior_covariance_correction,
    single_nonlinear_correction,
    skip_correction_monte_carlo,
)
from .gpkernels import FourIndexKernel, cnn_linear_gp, mlp_linear_gp, readout_kernel, single_layer_gp
from .mathcore import CovSpec, GramMatrix, Spectrum
from .predictor import (
    EvaluationSet,
    aitchison_zero_temp_solve,
    bias_variance,
    li_sompolinsky_limit,
    predictor_covariance,
    predictor_mean,
)
from .priorcumulants import (
    cnn_kernel_covariance,
    mlp_kernel_covariance,
    nonlinear_fourpoint_cov,
    prior_cumulant_oracle,
)

__all__ = [
    "CovSpec",
    "EvaluationSet",
    "FourIndexKernel",
    "GramMatrix",
    "PhiMatrix",
    "Spectrum",
    "aitchison_zero_temp_solve",
    "bias_variance",
    "cnn_correction",
    "cnn_kernel_covariance",
    "cnn_linear_gp",
    "deep_linear_correction",
    "eigenbasis_correction",
    "high_temp_expansion",
    "leading_posterior_mean",
    "li_sompolinsky_limit",
    "low_temp_linear",
    "mlp_kernel_covariance",
    "mlp_linear_gp",
    "nonlinear_fourpoint_cov",
    "phi_operator",
    "posterior_covariance_correction",
    "predictor_covariance",
    "predictor_mean",
    "prior_cumulant_oracle",
    "readout_kernel",
    "single_layer_gp",
    "single_nonlinear_correction",
    "skip_correction_monte_carlo",
]
