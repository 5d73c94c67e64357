"""Longitudinal functional principal components.

The predictor curves are expanded in the eigenbasis of their marginal
covariance (pooled over visits), and each time-varying loading is modelled as
a smooth random process in visit time whose covariance is estimated from
within-subject cross-products. Loading trajectories are then predicted by
conditional expectation under a working Gaussian model.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg

from ldfr.basis import QuadratureRule, bspline_design
from ldfr.data import LongitudinalFunctionalDataset
from ldfr.errors import (
    CovarianceInestimableError,
    DataError,
    DegenerateCovarianceError,
    DimensionError,
)
from ldfr.smoothing import (
    CovarianceSurface,
    SmoothSurface,
    fit_bivariate_mean,
    smooth_binned_covariance,
    smooth_covariance_surface,
)

logger = logging.getLogger(__name__)

_SIGN_TOL = 1e-8


def _fix_signs(vectors):
    """Make every column's sum positive (first nonzero entry positive on ties)."""
    out = vectors.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        total = col.sum()
        if abs(total) > _SIGN_TOL:
            flip = total < 0
        else:
            nz = np.flatnonzero(np.abs(col) > 1e-12)
            flip = nz.size > 0 and col[nz[0]] < 0
        if flip:
            out[:, k] = -col
    return out


def eigendecompose(cov, pve: float, quadrature: QuadratureRule):
    """Eigen-components of a covariance matrix in the L2 inner product.

    The symmetric matrix ``W^{1/2} C W^{1/2}`` (``W`` = quadrature weights) is
    diagonalized, so the returned eigenvectors are orthonormal under the
    quadrature rule. Non-positive eigenvalues are dropped before the PVE rule.

    Parameters
    ----------
    cov : ndarray, shape (R, R)
    pve : float
        Proportion of variance to explain, ``0 < pve <= 1``.
    quadrature : QuadratureRule

    Returns
    -------
    functions : ndarray, shape (R, K)
    values : ndarray, shape (K,)
    k : int
    """
    functions, values, k, _ = _eigen_full(cov, pve, quadrature)
    return functions, values, k


def _eigen_full(cov, pve, quadrature):
    if not 0 < pve <= 1:
        raise ValueError(f"pve must be in (0, 1], got {pve}")
    cov = np.asarray(cov, dtype=float)
    r = len(quadrature)
    if cov.shape != (r, r):
        raise DimensionError(f"covariance {cov.shape} does not match {r} quadrature points")
    root = np.sqrt(quadrature.weights)
    sym = root[:, None] * cov * root[None, :]
    vals, vecs = linalg.eigh((sym + sym.T) / 2)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    positive = vals > 0
    if not positive.any():
        raise DegenerateCovarianceError("covariance has no positive eigenvalue")
    vals, vecs = vals[positive], vecs[:, positive]
    ratio = np.cumsum(vals) / vals.sum()
    k = int(np.searchsorted(ratio, pve - 1e-12) + 1)
    k = min(k, vals.size)
    functions = _fix_signs(vecs[:, :k] / root[:, None])
    return functions, vals[:k], k, vals


def pooled_covariance(demeaned) -> np.ndarray:
    """Pooled sample covariance ``sum_ij W_ij W_ij' / sum_i n_i`` of demeaned curves."""
    w = np.atleast_2d(np.asarray(demeaned, dtype=float))
    if w.shape[0] == 0:
        raise DataError("pooled covariance of an empty dataset")
    return w.T @ w / w.shape[0]


@dataclass
class MarginalFpca:
    """Mean surface and marginal eigenbasis of the predictor curves."""

    mean: SmoothSurface
    grid: np.ndarray
    quadrature: QuadratureRule
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    k: int
    pve: float
    sigma2_w: float
    covariance: Optional[CovarianceSurface] = None
    positive_eigenvalues: Optional[np.ndarray] = None

    def demean(self, w, t) -> np.ndarray:
        """Subtract the mean surface ``tau(s, t)`` from curves observed at times ``t``."""
        w = np.atleast_2d(np.asarray(w, dtype=float))
        if w.shape[1] != self.grid.size:
            raise DimensionError(
                f"curves have {w.shape[1]} grid points, expected {self.grid.size}"
            )
        return w - self.mean(self.grid, np.asarray(t, dtype=float)).T


@dataclass
class RawScores:
    """Numerically integrated loadings ``xi~_{W,ijk}``, one row per visit."""

    values: np.ndarray
    subject: np.ndarray
    t: np.ndarray


def compute_raw_scores(w, t, subject, fpca: MarginalFpca) -> RawScores:
    """Project demeaned curves on the eigenfunctions with the quadrature rule."""
    demeaned = fpca.demean(w, t)
    values = demeaned @ (fpca.quadrature.weights[:, None] * fpca.eigenfunctions)
    return RawScores(values=values, subject=np.asarray(subject, int), t=np.asarray(t, float))


@dataclass
class ScoreProcess:
    """Covariance model of one loading process ``xi_ik(t)`` over visit time."""

    k: int
    grid: np.ndarray
    quadrature: QuadratureRule
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    sigma2: float
    covariance: CovarianceSurface
    pve: float
    coefficients: Optional[np.ndarray] = None
    _psi_coef: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._psi_coef is None:
            surf = self.covariance.surface
            basis = bspline_design(self.grid, surf.spec_s)
            weighted = self.quadrature.weights[:, None] * self.eigenfunctions
            self._psi_coef = surf.coef @ basis.T @ weighted / self.eigenvalues[None, :]

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size

    def psi(self, t) -> np.ndarray:
        """Eigenfunctions at arbitrary times, shape ``(len(t), L)``.

        Uses ``psi(t) = eta^{-1} int G(t, u) psi(u) du``, which is exact on the
        grid and inherits the smoothness of the covariance surface elsewhere.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return bspline_design(t, self.covariance.surface.spec_s) @ self._psi_coef


def _time_grid(t, max_points=101, n_binned=51):
    uniq = np.unique(t)
    if uniq.size <= max_points:
        return uniq
    return np.linspace(uniq[0], uniq[-1], n_binned)


def _bin_index(t, grid):
    idx = np.searchsorted(grid, t)
    idx = np.clip(idx, 1, grid.size - 1)
    left = grid[idx - 1]
    right = grid[idx]
    return np.where(np.abs(t - left) <= np.abs(right - t), idx - 1, idx)


def fit_score_process(
    raw,
    subject,
    t,
    pve: float = 0.95,
    grid=None,
    n_knots: int = 10,
    k: int = 0,
) -> ScoreProcess:
    """Estimate the covariance, noise variance and eigenbasis of one loading process.

    Parameters
    ----------
    raw : ndarray, shape (N,)
        Raw loadings of component ``k`` for every visit.
    subject, t : ndarray, shape (N,)
        Subject code and visit time of every visit.
    pve : float
        Variance fraction used to truncate the expansion.
    grid : ndarray, optional
        Time grid for the covariance; defaults to the distinct visit times (or
        51 equispaced bins when there are more than 101 of them).
    n_knots : int
        Interior knots per direction of the covariance smoother.
    """
    raw = np.asarray(raw, dtype=float)
    subject = np.asarray(subject, dtype=int)
    t = np.asarray(t, dtype=float)
    if np.unique(subject).size < 2:
        raise DataError("score process needs at least two subjects")
    grid = _time_grid(t) if grid is None else np.asarray(grid, dtype=float)
    g = grid.size
    cells = _bin_index(t, grid)

    sums = np.zeros((g, g))
    counts = np.zeros((g, g))
    diag_sums = np.zeros(g)
    diag_counts = np.zeros(g)
    np.add.at(diag_sums, cells, raw**2)
    np.add.at(diag_counts, cells, 1.0)
    order = np.argsort(subject, kind="stable")
    bounds = np.flatnonzero(np.diff(subject[order])) + 1
    for rows in np.split(order, bounds):
        if rows.size < 2:
            continue
        a, b = np.meshgrid(cells[rows], cells[rows], indexing="ij")
        prod = np.outer(raw[rows], raw[rows])
        off = ~np.eye(rows.size, dtype=bool)
        np.add.at(sums, (a[off], b[off]), prod[off])
        np.add.at(counts, (a[off], b[off]), 1.0)
    if np.count_nonzero(np.triu(counts) > 0) < 2:
        raise CovarianceInestimableError(
            "fewer than two distinct time pairs with within-subject cross-products"
        )

    cov = smooth_binned_covariance(sums, counts, grid, n_knots=n_knots)
    seen = np.flatnonzero(diag_counts > 0)
    lo, hi = grid[0] + 0.25 * (grid[-1] - grid[0]), grid[0] + 0.75 * (grid[-1] - grid[0])
    central = seen[(grid[seen] >= lo) & (grid[seen] <= hi)]
    if central.size == 0:
        central = seen
    excess = diag_sums[central] / diag_counts[central] - cov.values[central, central]
    sigma2 = float(np.mean(excess))
    if sigma2 < 0:
        logger.debug("score noise variance %.3g floored at 0 for component %d", sigma2, k)
        sigma2 = 0.0

    quad = QuadratureRule.trapezoid(grid)
    functions, values, _, _ = _eigen_full(cov.values, pve, quad)
    return ScoreProcess(
        k=k, grid=grid, quadrature=quad, eigenvalues=values, eigenfunctions=functions,
        sigma2=sigma2, covariance=cov, pve=pve,
    )


def predict_score_coefficients(process: ScoreProcess, raw, t_obs) -> np.ndarray:
    """Conditional expectation of the KL coefficients given one subject's raw loadings.

    ``zeta = diag(eta) Psi' (Psi diag(eta) Psi' + sigma2 I)^{-1} raw``; a subject
    without observations gets the prior mean (zeros).
    """
    raw = np.atleast_1d(np.asarray(raw, dtype=float))
    t_obs = np.atleast_1d(np.asarray(t_obs, dtype=float))
    if raw.size != t_obs.size:
        raise DimensionError("raw loadings and times differ in length")
    if raw.size == 0:
        return np.zeros(process.n_components)
    psi = process.psi(t_obs)
    eta = process.eigenvalues
    cmat = (psi * eta[None, :]) @ psi.T + process.sigma2 * np.eye(raw.size)
    try:
        factor = linalg.cho_factor(cmat)
        piv = np.abs(np.diag(factor[0]))
        if piv.min() <= 1e-7 * piv.max():
            raise linalg.LinAlgError("numerically singular")
        sol = linalg.cho_solve(factor, raw)
    except linalg.LinAlgError:
        warnings.warn("singular score covariance; adding a small ridge",
                      RuntimeWarning, stacklevel=2)
        ridge = 1e-8 * max(np.trace(cmat), 1e-300)
        sol = linalg.solve(cmat + ridge * np.eye(raw.size), raw, assume_a="pos")
    return eta * (psi.T @ sol)


def predict_score_trajectory(process: ScoreProcess, raw, t_obs, t_eval) -> np.ndarray:
    """Predicted loading trajectory ``xi_ik(t)`` on ``t_eval``."""
    zeta = predict_score_coefficients(process, raw, t_obs)
    return process.psi(t_eval) @ zeta


@dataclass
class LfpcaFit:
    """Marginal eigenbasis, score processes and per-subject KL coefficients."""

    marginal: MarginalFpca
    processes: List[ScoreProcess]

    @property
    def k(self) -> int:
        return self.marginal.k

    def raw_scores(self, dataset: LongitudinalFunctionalDataset) -> RawScores:
        return compute_raw_scores(dataset.w, dataset.t, dataset.subject, self.marginal)

    def subject_coefficients(self, raw: RawScores) -> List[np.ndarray]:
        """KL coefficients ``zeta_ikl`` for every subject code in ``raw``, per component."""
        n_subj = int(raw.subject.max()) + 1 if raw.subject.size else 0
        out = []
        for proc in self.processes:
            coef = np.zeros((n_subj, proc.n_components))
            for i in range(n_subj):
                rows = raw.subject == i
                coef[i] = predict_score_coefficients(proc, raw.values[rows, proc.k], raw.t[rows])
            out.append(coef)
        return out

    def loadings(self, coefficients: List[np.ndarray], subject, t) -> np.ndarray:
        """Predicted loadings ``xi_ik(t)`` at matched ``(subject, t)`` pairs, shape (n, K)."""
        subject = np.atleast_1d(np.asarray(subject, dtype=int))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros((t.size, len(self.processes)))
        for k, (proc, coef) in enumerate(zip(self.processes, coefficients)):
            out[:, k] = np.sum(proc.psi(t) * coef[subject], axis=1)
        return out


def fit_lfpca(
    dataset: LongitudinalFunctionalDataset,
    pve: float = 0.95,
    pve_scores: float = 0.95,
    mean_knots: Tuple[int, int] = (35, 35),
    cov_knots: int = 35,
    score_knots: int = 10,
    t_domain=None,
) -> LfpcaFit:
    """Run the full predictor preprocessing on ``dataset``.

    Steps: bivariate mean smoothing, demeaning, pooled covariance with its
    diagonal removed and smoothed, eigenanalysis with PVE truncation, raw
    loadings by quadrature, and one score-process model per component.
    """
    s = dataset.s
    mean = fit_bivariate_mean(
        dataset, n_knots_s=mean_knots[0], n_knots_t=mean_knots[1], t_domain=t_domain
    )
    quad = QuadratureRule.trapezoid(s)
    demeaned = dataset.w - mean(s, dataset.t).T
    raw_cov = pooled_covariance(demeaned)
    cov, sigma2_w = smooth_covariance_surface(raw_cov, s, n_knots=cov_knots)
    functions, values, k, positive = _eigen_full(cov.values, pve, quad)
    marginal = MarginalFpca(
        mean=mean, grid=s, quadrature=quad, eigenfunctions=functions, eigenvalues=values,
        k=k, pve=pve, sigma2_w=sigma2_w, covariance=cov, positive_eigenvalues=positive,
    )
    scores = demeaned @ (quad.weights[:, None] * functions)
    t_grid = _time_grid(dataset.t)
    if t_domain is not None:
        # score functions must be defined on the whole prediction domain
        t_grid = np.unique(np.concatenate([[t_domain[0]], t_grid, [t_domain[1]]]))
    processes = [
        fit_score_process(scores[:, j], dataset.subject, dataset.t, pve=pve_scores,
                          grid=t_grid, n_knots=score_knots, k=j)
        for j in range(k)
    ]
    return LfpcaFit(marginal=marginal, processes=processes)
