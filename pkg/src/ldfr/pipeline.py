"""End-to-end estimator: predictor preprocessing followed by the regression fit."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from ldfr.data import LongitudinalFunctionalDataset
from ldfr.errors import DataError, UnknownSubjectError
from ldfr.lfpca import LfpcaFit, fit_lfpca
from ldfr.prediction import (
    PredictionBand,
    TrajectoryPrediction,
    predict_existing,
    predict_new,
    prediction_band,
)
from ldfr.regression import (
    CoefficientSurface,
    LdfrFit,
    LdfrModelSpec,
    assemble_design,
    estimate_coefficient_surface,
    fit_model,
)

logger = logging.getLogger(__name__)


@dataclass
class LdfrConfig:
    """Tuning of the preprocessing and of the regression model.

    ``mean_knots``/``cov_knots``/``score_knots`` are interior knot counts of the
    mean, marginal-covariance and score-covariance smoothers. ``t_domain`` is
    the visit-time interval on which predictions are possible (default: range
    of the visit times of all curves).
    """

    pve: float = 0.95
    pve_scores: float = 0.95
    mean_knots: Tuple[int, int] = (35, 35)
    cov_knots: int = 35
    score_knots: int = 10
    model: LdfrModelSpec = field(default_factory=LdfrModelSpec)
    fixed_smoothing: Optional[Tuple[float, float]] = None
    t_domain: Optional[Tuple[float, float]] = None


class LDFR:
    """Longitudinal dynamic functional regression.

    Examples
    --------
    >>> model = LDFR().fit(dataset)                      # doctest: +SKIP
    >>> pred = model.predict_existing(subject_label, t)  # doctest: +SKIP
    >>> band = model.band(pred, 0.95)                    # doctest: +SKIP
    """

    def __init__(self, config: Optional[LdfrConfig] = None):
        self.config = config or LdfrConfig()
        self.lfpca: Optional[LfpcaFit] = None
        self.fit_: Optional[LdfrFit] = None
        self.coefficients: List[np.ndarray] = []
        self.dataset: Optional[LongitudinalFunctionalDataset] = None
        self.loadings_: Optional[np.ndarray] = None
        self.train_rows: Optional[np.ndarray] = None
        self.subject_labels: Optional[np.ndarray] = None

    def fit(self, dataset: LongitudinalFunctionalDataset, response_rows=None) -> "LDFR":
        """Fit on ``dataset``.

        Every predictor curve feeds the preprocessing (mean, eigenbasis, score
        processes and predicted loadings); the regression uses the responses in
        ``response_rows`` only (default: all rows with a finite response).
        """
        if dataset.y is None:
            raise DataError("dataset has no responses")
        cfg = self.config
        rows = np.isfinite(dataset.y) if response_rows is None else np.asarray(response_rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        self.dataset = dataset
        self.train_rows = rows
        self.subject_labels = np.asarray(dataset.subject_labels)
        domain = cfg.t_domain
        if domain is None:
            domain = (float(dataset.t.min()), float(dataset.t.max()))
        domain = (float(domain[0]), float(domain[1]))
        self.lfpca = fit_lfpca(dataset, pve=cfg.pve, pve_scores=cfg.pve_scores,
                               mean_knots=tuple(cfg.mean_knots), cov_knots=cfg.cov_knots,
                               score_knots=cfg.score_knots, t_domain=domain)
        raw = self.lfpca.raw_scores(dataset)
        self.coefficients = self.lfpca.subject_coefficients(raw)
        self.loadings_ = self.lfpca.loadings(self.coefficients, dataset.subject, dataset.t)
        spec = cfg.model
        if spec.domain is None:
            spec = dataclasses.replace(spec, domain=domain)
        cov = None if dataset.covariates is None else dataset.covariates[rows]
        group = None if dataset.group is None else dataset.group[rows]
        design = assemble_design(dataset.t[rows], self.loadings_[rows], spec,
                                 subject=dataset.subject[rows], group=group, covariates=cov)
        kwargs = {}
        if cfg.fixed_smoothing is not None:
            kwargs["fixed_smoothing"] = cfg.fixed_smoothing
        self.fit_ = fit_model(dataset.y[rows], design, spec, **kwargs)
        return self

    def _check(self):
        if self.fit_ is None:
            raise RuntimeError("model is not fitted")

    @property
    def k(self) -> int:
        self._check()
        return self.lfpca.k

    def subject_code(self, label) -> int:
        """Internal code of a subject label."""
        self._check()
        hits = np.flatnonzero(self.subject_labels == label)
        if hits.size == 0 and not isinstance(label, str):
            hits = np.flatnonzero(self.subject_labels.astype(str) == str(label))
        if hits.size == 0:
            raise UnknownSubjectError(label)
        return int(hits[0])

    def predict_rows(self, rows=None) -> np.ndarray:
        """Predicted mean response at dataset rows (existing-subject predictions)."""
        self._check()
        ds = self.dataset
        if ds is None:
            raise RuntimeError("row predictions need the training dataset (not stored in bundles)")
        rows = np.arange(ds.n_visits) if rows is None else np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        fit = self.fit_
        cov = None if ds.covariates is None else ds.covariates[rows]
        design = fit.design(ds.t[rows], self.loadings_[rows], subject=ds.subject[rows],
                            covariates=cov)
        z_b = design.z_b
        if fit.layout.per_subject:
            z_b = z_b * (ds.subject[rows] < fit.layout.n_subjects)[:, None]
        eta = design.v @ fit.beta + design.z_spline @ np.concatenate(fit.u) + z_b @ fit.b
        return eta if fit.spec.link == "identity" else 1 / (1 + np.exp(-eta))

    def linear_predictor_rows(self, rows=None) -> np.ndarray:
        mu = self.predict_rows(rows)
        if self.fit_.spec.link == "identity":
            return mu
        return np.log(mu / (1 - mu))

    def predict_existing(self, subject, t_eval, covariates=None, by_code=False
                         ) -> TrajectoryPrediction:
        """Trajectory of a training subject given by label (or code with ``by_code``)."""
        self._check()
        code = int(subject) if by_code else self.subject_code(subject)
        return predict_existing(self.fit_, self.lfpca, self.coefficients, code, t_eval,
                                covariates=covariates)

    def predict_new(self, w, t_obs, t_eval, covariates=None) -> TrajectoryPrediction:
        """Trajectory of a new subject from its predictor curves ``w`` observed at ``t_obs``."""
        self._check()
        return predict_new(self.fit_, self.lfpca, w, t_obs, t_eval, covariates=covariates)

    def band(self, prediction: TrajectoryPrediction, level: float = 0.95) -> PredictionBand:
        self._check()
        return prediction_band(self.fit_, prediction, level)

    def coefficient_surface(self, t=None) -> CoefficientSurface:
        self._check()
        if t is None:
            lo, hi = self.fit_.basis.domain
            t = np.linspace(lo, hi, 41)
        m = self.lfpca.marginal
        return estimate_coefficient_surface(self.fit_, m.eigenfunctions, m.grid, t)
