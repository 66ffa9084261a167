"""Inducing-weight Bayesian neural networks on a small NumPy/SciPy stack."""

from .accounting import ParamBudget, param_count
from .datasets import gen_ood_uniform, gen_toy_regression, gen_two_moons
from .layers import BayesLayer, LayerShape, Likelihood, Network, VariantConfig
from .linalg import RngStream
from .matrix_normal import InducingPrior, MatrixNormal, naive_conditional_moments
from .metrics import MetricsReport, auroc_aupr, brier, ece, predict
from .sampler import JointNoise, build_cache, matheron_extended, naive_conditional_sample
from .trainer import TrainConfig, elbo_batch, prune_ffgw, prune_z, train

__version__ = "0.1.0"
