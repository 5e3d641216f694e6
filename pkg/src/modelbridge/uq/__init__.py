from .distributions import Beta, Distribution, Normal, Product, SamplingError, Triangular, Uniform, sample
from .estimators import EstimatorError, MeanEstimate, mc_mean, qmc_mean
from .halton import halton, radical_inverse
from .kde import KernelDensity, kde
from .mcmc import ChainResult, MldaHierarchy, chain_rng, mlda, model_log_density, rwm

__all__ = [
    "Beta", "ChainResult", "Distribution", "EstimatorError", "KernelDensity", "MeanEstimate",
    "MldaHierarchy", "Normal", "Product", "SamplingError", "Triangular", "Uniform", "chain_rng",
    "halton", "kde", "mc_mean", "mlda", "model_log_density", "qmc_mean", "radical_inverse", "rwm",
    "sample",
]
