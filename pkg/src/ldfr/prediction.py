"""Trajectory prediction and pointwise prediction bands."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from ldfr.errors import DimensionError, UnknownSubjectError, UnsupportedLinkError
from ldfr.lfpca import LfpcaFit, compute_raw_scores, predict_score_coefficients
from ldfr.regression import LdfrFit


@dataclass
class TrajectoryPrediction:
    """Predicted mean (and response) trajectory of one subject.

    ``rows`` holds the coefficient contrasts ``c(t)`` (one per time) such that the
    linear predictor equals ``rows @ [beta; u; b]``. ``prior_variance`` is the
    variance of random effects that enter the response but not the prediction
    (non-zero for new subjects only).
    """

    t: np.ndarray
    mu: np.ndarray
    y_hat: np.ndarray
    linear_predictor: np.ndarray
    kind: str
    link: str
    rows: np.ndarray
    prior_variance: np.ndarray
    loadings: np.ndarray
    subject: Optional[int] = None


@dataclass
class PredictionBand:
    """Pointwise band ``y_hat +/- z * se`` for ``Y(t) - Y_hat(t)``."""

    level: float
    t: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    se: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def _finish(fit, t, rows, loadings, kind, prior_var, subject=None):
    eta = rows @ fit.coef_vector
    if fit.spec.link == "identity":
        mu = eta
        y_hat = eta
    else:
        mu = expit(eta)
        y_hat = (mu >= 0.5).astype(float)
    return TrajectoryPrediction(t=t, mu=mu, y_hat=y_hat, linear_predictor=eta, kind=kind,
                                link=fit.spec.link, rows=rows, prior_variance=prior_var,
                                loadings=loadings, subject=subject)


def _contrast_rows(fit, t, loadings, subject=None, covariates=None):
    sub = np.full(t.size, 0 if subject is None else subject, dtype=int)
    design = fit.design(t, loadings, subject=sub, covariates=covariates)
    z_b = design.z_b if subject is not None else np.zeros_like(design.z_b)
    return np.hstack([design.v, design.z_spline, z_b]), design


def predict_existing(fit: LdfrFit, lfpca: LfpcaFit, coefficients: List[np.ndarray], subject: int,
                     t_eval, covariates=None) -> TrajectoryPrediction:
    """Prediction for a training subject, including its predicted random effects.

    Parameters
    ----------
    fit : LdfrFit
    lfpca : LfpcaFit
    coefficients : list of ndarray
        Per-component KL coefficients of every training subject (rows = subject codes).
    subject : int
        Subject code.
    t_eval : array_like
        Evaluation times.
    covariates : ndarray, optional
        Covariate values at ``t_eval`` when the model has covariates.
    """
    known = coefficients[0].shape[0] if coefficients else fit.layout.n_subjects
    if not 0 <= int(subject) < known:
        raise UnknownSubjectError(subject)
    t = np.atleast_1d(np.asarray(t_eval, dtype=float))
    loadings = lfpca.loadings(coefficients, np.full(t.size, subject), t)[:, : fit.k]
    # a subject with curves but no training responses has no predicted effect
    use_b = fit.layout.per_subject > 0 and subject < fit.layout.n_subjects
    rows, _ = _contrast_rows(fit, t, loadings, subject if use_b else None, covariates)
    prior = np.zeros(t.size) if use_b or not fit.layout.per_subject else _prior_variance(fit, t)
    return _finish(fit, t, rows, loadings, "existing", prior, subject)


def new_subject_loadings(lfpca: LfpcaFit, w, t_obs, t_eval) -> np.ndarray:
    """Predicted loadings of a new subject on ``t_eval`` from its curves ``w`` at ``t_obs``."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    t_obs = np.atleast_1d(np.asarray(t_obs, dtype=float))
    if w.shape[0] != t_obs.size and w.size:
        raise DimensionError("one curve per observation time is required")
    t_eval = np.atleast_1d(np.asarray(t_eval, dtype=float))
    out = np.zeros((t_eval.size, len(lfpca.processes)))
    if w.size == 0:
        return out
    raw = compute_raw_scores(w, t_obs, np.zeros(t_obs.size, int), lfpca.marginal)
    for j, proc in enumerate(lfpca.processes):
        zeta = predict_score_coefficients(proc, raw.values[:, proc.k], t_obs)
        out[:, j] = proc.psi(t_eval) @ zeta
    return out


def predict_new(fit: LdfrFit, lfpca: LfpcaFit, w, t_obs, t_eval,
                covariates=None) -> TrajectoryPrediction:
    """Prediction for a subject not in the training data, from its predictor curves only.

    No subject (or group) effect enters the predicted trajectory; their prior
    variance is recorded for the prediction band.
    """
    t = np.atleast_1d(np.asarray(t_eval, dtype=float))
    loadings = new_subject_loadings(lfpca, w, t_obs, t)[:, : fit.k]
    rows, _ = _contrast_rows(fit, t, loadings, None, covariates)
    return _finish(fit, t, rows, loadings, "new", _prior_variance(fit, t))


def _prior_variance(fit: LdfrFit, t) -> np.ndarray:
    out = np.zeros(t.size)
    if fit.d_matrix is not None:
        d = fit.d_matrix
        if d.shape == (1, 1):
            out += d[0, 0]
        else:
            out += d[0, 0] + 2 * d[0, 1] * t + d[1, 1] * t**2
    if fit.sigma2_group:
        out += fit.sigma2_group
    return out


def prediction_band(fit: LdfrFit, prediction: TrajectoryPrediction, level: float = 0.95
                    ) -> PredictionBand:
    """Pointwise prediction band for the response trajectory.

    ``Var{Y_hat(t) - Y(t)} = c(t)' Cov c(t) + sigma_e^2`` plus, for new subjects,
    the prior variance of the random effects left out of the prediction. ``Cov``
    is the posterior covariance of ``[beta; u; b]`` with the preprocessing
    estimates held fixed.
    """
    if fit.spec.link != "identity":
        raise UnsupportedLinkError("prediction bands are available for the identity link only")
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    c = prediction.rows
    var = np.einsum("ij,jk,ik->i", c, fit.covariance, c) + fit.sigma2_e + prediction.prior_variance
    se = np.sqrt(np.maximum(var, 0))
    z = norm.ppf(0.5 + level / 2)
    center = prediction.y_hat
    return PredictionBand(level=level, t=prediction.t, center=center, lower=center - z * se,
                          upper=center + z * se, se=se)
