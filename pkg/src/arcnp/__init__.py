"""Autoregressive deployment of conditional neural processes.

A library plus CLI harness for factorized-Gaussian prediction models, their
autoregressive rollout, exact Gaussian-process and function-mixture
oracles, synthetic task generators, and the evaluation protocol tying them
together.
"""

__version__ = "0.1.0"

from .core import (
    FactorizationError,
    GaussianJoint,
    MarginalPrediction,
    NonFiniteDensityError,
    Point,
    RngStream,
    Task,
    gaussian_kl,
    gaussian_logpdf,
    mc_kl,
)
from .oracles import (
    FunctionMixture,
    GpModel,
    Kernel,
    gp_posterior,
    ideal_cnp_gp,
    ideal_cnp_mixture,
    ideal_gnp_gp,
    ideal_gnp_mixture,
    kernel_eval,
    mixture_posterior,
    mixture_true_logpdf,
)
from .ar import (
    AuxArPrediction,
    CnpAdapter,
    IdealCnpGpAdapter,
    IdealCnpMixtureAdapter,
    ModelAdapter,
    Ordering,
    Trajectory,
    ar_loglik_spread,
    ar_logpdf,
    ar_sample,
    aux_ar_predict,
    smooth_sample,
)
from .neural import CnpConfig, CnpModel, TrainConfig, cnp_forward, nll_loss, train
from .evaluation import MetricReport, eval_kl_to_truth, eval_loglik, trivial_baseline

__all__ = [name for name in dir() if not name.startswith("_")]
