"""Discovery of risk-neutral option-price dynamics from a stock/option pair.

The pipeline fits a differentiable price surface to one observed trajectory
pair, estimates the diffusion function from quadratic variation, extracts the
risk-neutral Brownian increments, identifies the sparse backward dynamics by
regression, and uses the identified law for online prediction and synthetic
path generation.
"""

from .data import PathPair, TimeGrid
from .diffusion import BrownianIncrements, SigmaModel, estimate_sigma_noisy, extract_brownian, fit_sigma
from .library import LibraryMatrix, LibrarySpec, Term, build_library
from .market import ModelParams, bs_greeks, bs_price, make_dataset, monte_carlo_price, simulate_gbm
from .solvers import SR3, STLSQ, RegressionConfig, SparseModel, fit_sparse, normalize_columns

__version__ = "0.1.0"

__all__ = [
    "PathPair",
    "TimeGrid",
    "ModelParams",
    "simulate_gbm",
    "bs_price",
    "bs_greeks",
    "make_dataset",
    "monte_carlo_price",
    "LibrarySpec",
    "LibraryMatrix",
    "Term",
    "build_library",
    "SparseModel",
    "STLSQ",
    "SR3",
    "RegressionConfig",
    "fit_sparse",
    "normalize_columns",
    "SigmaModel",
    "BrownianIncrements",
    "estimate_sigma_noisy",
    "fit_sigma",
    "extract_brownian",
    "__version__",
]
