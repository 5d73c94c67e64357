import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from ldfr.errors import DimensionError, UnknownSubjectError, UnsupportedLinkError
from ldfr.prediction import (
    _finish,
    predict_existing,
    predict_new,
    prediction_band,
)
from ldfr.regression import coefficient_functions
from ldfr.simulation import ScenarioConfig, run_replicate

T = np.linspace(0, 1, 41)


def zero_effects(fit):
    return dataclasses.replace(fit, b=np.zeros_like(fit.b))


class TestPredictExisting:
    def test_matches_fitted_values(self, small_model):
        ds = small_model.dataset
        fit = small_model.fit_
        for i in (0, 7, 23):
            rows = ds.subject_rows(i)
            pred = small_model.predict_existing(i, ds.t[rows], by_code=True)
            np.testing.assert_allclose(pred.mu, fit.fitted[rows], rtol=0, atol=1e-8)

    def test_row_predictions_match_fitted(self, small_model):
        np.testing.assert_allclose(small_model.predict_rows(), small_model.fit_.fitted, atol=1e-8)

    def test_zero_loadings_give_intercept(self, small_model):
        fit = zero_effects(small_model.fit_)
        coefs = [np.zeros_like(c) for c in small_model.coefficients]
        pred = predict_existing(fit, small_model.lfpca, coefs, 3, T)
        np.testing.assert_allclose(pred.mu, coefficient_functions(fit, T)[0], atol=1e-12)

    def test_unknown_subject(self, small_model):
        with pytest.raises(UnknownSubjectError):
            small_model.predict_existing(10_000, T, by_code=True)
        with pytest.raises(UnknownSubjectError):
            small_model.predict_existing("nobody", T)

    def test_prediction_kind(self, small_model):
        pred = small_model.predict_existing(0, T, by_code=True)
        assert pred.kind == "existing" and np.all(np.isfinite(pred.mu))
        np.testing.assert_array_equal(pred.prior_variance, 0)


class TestPredictNew:
    def test_zero_curves_give_intercept(self, small_model):
        m = small_model.lfpca.marginal
        t_obs = np.array([0.2, 0.45, 0.8])
        w = m.mean(m.grid, t_obs).T
        pred = small_model.predict_new(w, t_obs, T)
        np.testing.assert_allclose(pred.loadings, 0, atol=1e-10)
        np.testing.assert_allclose(pred.mu, coefficient_functions(small_model.fit_, T)[0],
                                   atol=1e-10)

    def test_training_subject_as_new(self, small_model):
        ds = small_model.dataset
        fit = small_model.fit_
        for i in (1, 12):
            rows = ds.subject_rows(i)
            old = small_model.predict_existing(i, T, by_code=True)
            new = small_model.predict_new(ds.w[rows], ds.t[rows], T)
            effect = fit.layout.design(np.full(T.size, i), T) @ fit.b
            np.testing.assert_allclose(new.mu, old.mu - effect, atol=1e-6)

    def test_grid_mismatch(self, small_model):
        with pytest.raises(DimensionError):
            small_model.predict_new(np.zeros((2, 50)), [0.1, 0.2], T)

    def test_no_curves(self, small_model):
        pred = predict_new(small_model.fit_, small_model.lfpca, np.zeros((0, 0)), [], T)
        np.testing.assert_allclose(pred.mu, coefficient_functions(small_model.fit_, T)[0])
        assert pred.kind == "new"


class TestLogitThreshold:
    def test_threshold(self, small_model):
        fit = small_model.fit_
        spec = dataclasses.replace(fit.spec, link="logit")
        fake = dataclasses.replace(fit, spec=spec)
        rows = np.zeros((2, fit.coef_vector.size))
        rows[:, 0] = logit(np.array([0.7, 0.3])) / fit.beta[0]
        pred = _finish(fake, np.array([0.1, 0.2]), rows, np.zeros((2, 0)), "new", np.zeros(2))
        np.testing.assert_allclose(pred.mu, [0.7, 0.3])
        np.testing.assert_array_equal(pred.y_hat, [1, 0])

    def test_band_needs_identity(self, small_model):
        fit = small_model.fit_
        fake = dataclasses.replace(fit, spec=dataclasses.replace(fit.spec, link="logit"))
        pred = small_model.predict_existing(0, T, by_code=True)
        with pytest.raises(UnsupportedLinkError):
            prediction_band(fake, pred)


class TestBands:
    def test_symmetric(self, small_model):
        pred = small_model.predict_existing(4, T, by_code=True)
        band = small_model.band(pred, 0.95)
        np.testing.assert_allclose((band.upper + band.lower) / 2, pred.y_hat, atol=1e-10)
        assert np.all(band.lower <= band.upper)
        np.testing.assert_allclose(band.width, 2 * 1.959963984540054 * band.se, rtol=1e-12)

    def test_level_monotone(self, small_model):
        pred = small_model.predict_existing(4, T, by_code=True)
        assert np.all(small_model.band(pred, 0.95).width > small_model.band(pred, 0.90).width)

    def test_zero_residual_variance(self, small_model):
        fit = dataclasses.replace(small_model.fit_, sigma2_e=0.0)
        pred = small_model.predict_existing(4, T, by_code=True)
        band = prediction_band(fit, pred, 0.95)
        se_fit = np.sqrt(np.einsum("ij,jk,ik->i", pred.rows, fit.covariance, pred.rows))
        np.testing.assert_allclose(band.width, 2 * 1.959963984540054 * se_fit, rtol=1e-10)
        assert np.all(band.width > 0)

    def test_bad_level(self, small_model):
        pred = small_model.predict_existing(4, T, by_code=True)
        with pytest.raises(ValueError):
            small_model.band(pred, 1.2)

    def test_new_wider_than_existing(self, moderate_model):
        data, model = moderate_model
        ds = data.dataset
        wider = []
        for i in range(ds.n_subjects):
            rows = ds.subject_rows(i)
            old = model.band(model.predict_existing(i, T, by_code=True))
            new = model.band(model.predict_new(ds.w[rows], ds.t[rows], T))
            wider.append(new.width >= old.width)
        assert np.mean(wider) >= 0.95

    @pytest.mark.slow
    @settings(max_examples=2, deadline=None, derandomize=True)
    @given(st.integers(0, 2**31 - 1))
    def test_coverage_calibrated(self, seed):
        cfg = ScenarioConfig(n_subjects=200, design="moderate", delta=1)
        res = run_replicate(cfg, seed, tasks=("bands",), n_new=10)
        assert 0.92 <= res.coverage_95 <= 0.98
