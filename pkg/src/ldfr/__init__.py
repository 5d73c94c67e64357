"""Longitudinal dynamic functional regression.

Time-varying scalar-on-function regression for repeatedly observed noisy
functional predictors, with trajectory prediction and pointwise prediction
bands.
"""

from ldfr.basis import (
    QuadratureRule,
    SplineBasisSpec,
    bspline_design,
    difference_penalty,
    inner_product,
    tensor_product_design,
    truncated_polynomial_design,
)
from ldfr.bundle import load_model, save_model
from ldfr.data import LongitudinalFunctionalDataset
from ldfr.lfpca import LfpcaFit, MarginalFpca, ScoreProcess, fit_lfpca
from ldfr.pipeline import LDFR, LdfrConfig
from ldfr.prediction import PredictionBand, TrajectoryPrediction
from ldfr.regression import CoefficientSurface, LdfrFit, LdfrModelSpec

__all__ = [
    "CoefficientSurface",
    "LDFR",
    "LdfrConfig",
    "LdfrFit",
    "LdfrModelSpec",
    "LfpcaFit",
    "LongitudinalFunctionalDataset",
    "MarginalFpca",
    "PredictionBand",
    "QuadratureRule",
    "ScoreProcess",
    "SplineBasisSpec",
    "bspline_design",
    "difference_penalty",
    "inner_product",
    "tensor_product_design",
    "TrajectoryPrediction",
    "fit_lfpca",
    "load_model",
    "save_model",
    "truncated_polynomial_design",
]

__version__ = "0.1.0"
