"""Interpretable latent stochastic dynamics.

Learns continuous-time latent SDEs from noisy, unevenly-sampled
observations.  The drift is a Gaussian-process posterior conditioned on
learnable fixed points with local Jacobians, so the fitted model exposes
its phase portrait directly.
"""

from .errors import (
    DivergenceError,
    InvalidArgumentError,
    LatentSdeError,
    NumericalError,
    SchemaError,
    StaleCacheError,
)
from .learning import FitConfig, FitReport, FitResult, LatentSDE, fit
from .likelihoods import Dataset, OutputMapGaussian, OutputMapPoisson, TrialData
from .systems import (
    DriftSpec,
    drift_eval,
    drift_jacobian,
    make_dataset,
    sample_gaussian_obs,
    sample_point_process,
    simulate_sde,
)

__version__ = "0.1.0"

__all__ = [
    "LatentSdeError",
    "InvalidArgumentError",
    "NumericalError",
    "DivergenceError",
    "StaleCacheError",
    "SchemaError",
    "Dataset",
    "TrialData",
    "OutputMapGaussian",
    "OutputMapPoisson",
    "DriftSpec",
    "drift_eval",
    "drift_jacobian",
    "simulate_sde",
    "sample_gaussian_obs",
    "sample_point_process",
    "make_dataset",
    "FitConfig",
    "FitReport",
    "FitResult",
    "fit",
    "LatentSDE",
    "__version__",
]
