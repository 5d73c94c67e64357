"""Penalized least-squares smoothers with automatic smoothing selection.

Three smoothers live here:

* :func:`fit_penalized_ls`, a generic ridge-type smoother ``min ||y - X b||^2 +
  lam b'Pb`` with GCV or REML selection of ``lam``;
* a separable tensor-product smoother for data on a product grid (the
  "sandwich" form whose hat matrix factors as a Kronecker product), used for
  the bivariate mean surface and for the marginal covariance surface;
* :func:`smooth_binned_covariance` for scattered cross-products binned on a
  grid, used for the score-process covariances.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, optimize

from ldfr.basis import (
    SplineBasisSpec,
    bspline_design,
    difference_penalty,
    equispaced_knots,
)
from ldfr.data import LongitudinalFunctionalDataset
from ldfr.errors import DataError, DimensionError, NumericalRankError

logger = logging.getLogger(__name__)

Selector = Union[str, float]

_LOG10_SPAN = (-8.0, 8.0)
_GRID_SIZE = 50


@dataclass
class PenalizedFit:
    """Result of :func:`fit_penalized_ls`."""

    coef: np.ndarray
    lam: float
    edf: float
    fitted: np.ndarray
    selector: str
    score: float = np.nan


def _psd_sqrt(pen):
    """Return ``E`` with ``E'E = pen`` (rows for the positive eigenvalues only)."""
    vals, vecs = linalg.eigh(pen)
    keep = vals > 1e-12 * max(vals.max(), 1e-300)
    return np.sqrt(vals[keep])[:, None] * vecs[:, keep].T


def _solve_fixed(x, y, pen_root, lam):
    """Penalized LS by QR of the augmented system; raises on rank deficiency."""
    p = x.shape[1]
    aug = np.vstack([x, np.sqrt(lam) * pen_root]) if lam > 0 else x
    rhs = np.concatenate([y, np.zeros(aug.shape[0] - x.shape[0])])
    q, r = linalg.qr(aug, mode="economic")
    diag = np.abs(np.diag(r))
    if aug.shape[0] < p or diag.min() <= 1e-10 * max(diag.max(), 1e-300):
        raise NumericalRankError(
            f"penalized normal equations are singular at lambda={lam:g}"
        )
    coef = linalg.solve_triangular(r, q.T @ rhs)
    edf = float(np.sum(q[: x.shape[0]] ** 2))
    return coef, edf


class _SpectralPath:
    """Closed-form GCV / REML criteria along the whole ``lam`` path.

    With ``G = X'X`` and ``R'R = G`` (tiny ridge if singular), the eigenpairs of
    ``R^{-T} P R^{-1}`` diagonalize every penalized hat matrix at once.
    """

    def __init__(self, x, y, pen):
        n, p = x.shape
        gram = x.T @ x
        jitter = 1e-10 * np.trace(gram) / p
        try:
            r = linalg.cholesky(gram, lower=False)
        except linalg.LinAlgError:
            r = linalg.cholesky(gram + jitter * np.eye(p), lower=False)
        rinv = linalg.solve_triangular(r, np.eye(p))
        d, u = linalg.eigh(rinv.T @ pen @ rinv)
        d = np.clip(d, 0.0, None)
        self.d = d
        self.a = u.T @ (rinv.T @ (x.T @ y))
        self.rss0 = max(float(y @ y - self.a @ self.a), 0.0)
        self.n = n
        self.rank_pen = int(np.sum(d > 1e-10 * max(d.max(), 1e-300)))
        self.null_dim = p - self.rank_pen
        self.scale = np.trace(gram) / max(np.trace(pen), 1e-300)

    def _parts(self, lam):
        shrink = 1.0 / (1.0 + lam * self.d)
        rss = self.rss0 + np.sum(((1 - shrink) * self.a) ** 2)
        edf = float(np.sum(shrink))
        return rss, edf, shrink

    def gcv(self, lam):
        rss, edf, _ = self._parts(lam)
        return self.n * rss / max(self.n - edf, 1e-12) ** 2

    def reml(self, lam):
        """Profiled restricted likelihood, up to a constant (smaller is better)."""
        rss, _, shrink = self._parts(lam)
        pen = lam * np.sum(self.d * (self.a * shrink) ** 2)
        dof = self.n - self.null_dim
        pos = self.d > 1e-10 * max(self.d.max(), 1e-300)
        return (
            dof * np.log(max(rss + pen, 1e-300))
            + np.sum(np.log1p(lam * self.d[pos]))
            - self.rank_pen * np.log(lam)
        )


def _select_on_grid(criterion, log_grid):
    """Grid search followed by a bounded refinement inside the bracketing cells."""
    scores = np.array([criterion(10.0**g) for g in log_grid])
    k = int(np.nanargmin(scores))
    lo = log_grid[max(k - 1, 0)]
    hi = log_grid[min(k + 1, log_grid.size - 1)]
    best_log, best = log_grid[k], scores[k]
    if hi > lo:
        res = optimize.minimize_scalar(
            lambda g: criterion(10.0**g), bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-6},
        )
        if res.fun < best:
            best_log, best = float(res.x), float(res.fun)
    return 10.0**best_log, best


def fit_penalized_ls(
    design,
    penalty,
    y,
    selector: Selector = "gcv",
    weights=None,
    lambda_grid: Optional[Sequence[float]] = None,
) -> PenalizedFit:
    """Minimize ``||y - X b||_W^2 + lam b'Pb`` with fixed or selected ``lam``.

    Parameters
    ----------
    design : ndarray, shape (n, p)
    penalty : ndarray, shape (p, p)
        Symmetric positive semi-definite penalty.
    y : ndarray, shape (n,)
    selector : {'gcv', 'reml'} or float
        Criterion used to pick ``lam``, or a fixed non-negative value.
    weights : ndarray, shape (n,), optional
        Non-negative observation weights.
    lambda_grid : sequence of float, optional
        Candidate values for the search; defaults to 50 log-spaced values
        spanning 16 decades around ``tr(X'X) / tr(P)``.

    Returns
    -------
    PenalizedFit

    Raises
    ------
    NumericalRankError
        If the penalized normal equations are singular at the chosen ``lam``
        (e.g. ``lam = 0`` with a rank-deficient design).
    """
    x = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    pen = np.asarray(penalty, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise DimensionError(f"design has {x.shape[0]} rows but y has {y.size} values")
    if pen.shape != (x.shape[1], x.shape[1]):
        raise DimensionError(f"penalty shape {pen.shape} does not match design columns")
    if weights is not None:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        xw, yw = x * sw[:, None], y * sw
    else:
        xw, yw = x, y
    pen_root = _psd_sqrt(pen)

    if isinstance(selector, str):
        name = selector.lower()
        if name not in ("gcv", "reml"):
            raise ValueError(f"unknown selector {selector!r}")
        path = _SpectralPath(xw, yw, pen)
        crit = path.gcv if name == "gcv" else path.reml
        if lambda_grid is None:
            log_grid = np.log10(path.scale) + np.linspace(*_LOG10_SPAN, _GRID_SIZE)
        else:
            log_grid = np.log10(np.asarray(lambda_grid, dtype=float))
        lam, score = _select_on_grid(crit, log_grid)
    else:
        name = "fixed"
        lam, score = float(selector), np.nan
        if lam < 0:
            raise ValueError("fixed lambda must be non-negative")

    coef, edf = _solve_fixed(xw, yw, pen_root, lam)
    return PenalizedFit(coef=coef, lam=lam, edf=edf, fitted=x @ coef, selector=name, score=score)


def bspline_spec(domain, n_knots: int, degree: int = 3) -> SplineBasisSpec:
    """Clamped B-spline spec with ``n_knots`` equispaced interior knots."""
    return SplineBasisSpec("b-spline", degree, equispaced_knots(domain, n_knots), tuple(domain))


class _Marginal:
    """One direction of the separable smoother, diagonalized once."""

    def __init__(self, basis, penalty, weights=None):
        w = np.ones(basis.shape[0]) if weights is None else np.asarray(weights, float)
        sw = np.sqrt(w)
        bw = basis * sw[:, None]
        gram = bw.T @ bw
        c = gram.shape[0]
        jitter = 1e-10 * np.trace(gram) / c
        chol = linalg.cholesky(gram + jitter * np.eye(c), lower=True)
        cinv = linalg.solve_triangular(chol, np.eye(c), lower=True)
        d, u = linalg.eigh(cinv @ penalty @ cinv.T)
        self.d = np.clip(d, 0.0, None)
        self.transform = cinv.T @ u  # T'GT = I, T'PT = diag(d)
        self.ortho = bw @ self.transform  # weighted basis with orthonormal columns
        self.sw = sw
        self.scale = np.trace(gram) / max(np.trace(penalty), 1e-300)

    def shrink(self, lam):
        return 1.0 / (1.0 + lam * self.d)


class SeparableSmoother:
    """Tensor-product penalized smoother on a ``R x T`` grid with column weights.

    The penalty is the separable form ``(G_t + lt P_t) (x) (G_s + ls P_s) -
    G_t (x) G_s``, whose hat matrix is the Kronecker product of the two
    marginal hat matrices. ``col_weights`` gives each grid column (time) a
    weight, so that binned data with ``n_t`` replicates per column reproduce
    the pooled least-squares fit.
    """

    def __init__(self, basis_s, pen_s, basis_t, pen_t, col_weights=None):
        self.s_dir = _Marginal(basis_s, pen_s)
        self.t_dir = _Marginal(basis_t, pen_t, col_weights)

    def project(self, values):
        ytil = values * self.t_dir.sw[None, :]
        coords = self.s_dir.ortho.T @ ytil @ self.t_dir.ortho
        return coords, float(np.sum(ytil**2))

    def criterion_parts(self, coords, total_ss, lam_s, lam_t):
        fs = self.s_dir.shrink(lam_s)
        ft = self.t_dir.shrink(lam_t)
        f = np.outer(fs, ft)
        rss = max(total_ss - np.sum(coords**2), 0.0) + np.sum((coords * (1 - f)) ** 2)
        return rss, float(fs.sum() * ft.sum())

    def coefficients(self, coords, lam_s, lam_t):
        f = np.outer(self.s_dir.shrink(lam_s), self.t_dir.shrink(lam_t))
        return self.s_dir.transform @ (coords * f) @ self.t_dir.transform.T


def _gcv_2d(smoother, coords, total_ss, n, rss_offset, symmetric):
    """Minimize GCV over log smoothing parameters; returns (lam_s, lam_t, gcv)."""
    base_s = np.log10(smoother.s_dir.scale)
    base_t = np.log10(smoother.t_dir.scale)

    def gcv(logs):
        ls, lt = (logs[0], logs[0]) if symmetric else logs
        rss, edf = smoother.criterion_parts(coords, total_ss, 10.0**(base_s + ls), 10.0**(base_t + lt))
        return n * (rss + rss_offset) / max(n - edf, 1e-12) ** 2

    grid = np.linspace(-8.0, 8.0, 33)
    if symmetric:
        scores = np.array([gcv((g,)) for g in grid])
        k = int(np.argmin(scores))
        res = optimize.minimize_scalar(
            lambda g: gcv((g,)), bounds=(grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]),
            method="bounded", options={"xatol": 1e-5},
        )
        best = (float(res.x),) if res.fun < scores[k] else (grid[k],)
        best = (best[0], best[0])
    else:
        scores = np.array([[gcv((a, b)) for b in grid] for a in grid])
        ka, kb = np.unravel_index(np.argmin(scores), scores.shape)
        start = np.array([grid[ka], grid[kb]])
        res = optimize.minimize(gcv, start, method="Nelder-Mead",
                                options={"xatol": 1e-4, "fatol": 1e-12, "maxiter": 400})
        best = tuple(res.x) if res.fun < scores[ka, kb] else tuple(start)
    lam_s = 10.0 ** (base_s + best[0])
    lam_t = 10.0 ** (base_t + best[1])
    return lam_s, lam_t, gcv(best[:1] if symmetric else best)


@dataclass
class SmoothSurface:
    """Tensor-product spline surface ``f(s, t) = b_s(s)' C b_t(t)``."""

    spec_s: SplineBasisSpec
    spec_t: SplineBasisSpec
    coef: np.ndarray
    lambdas: Tuple[float, float]
    edf: float = np.nan

    def __post_init__(self):
        if self.coef.shape != (self.spec_s.num_basis, self.spec_t.num_basis):
            raise DimensionError("coefficient matrix does not match the basis sizes")

    def __call__(self, s, t) -> np.ndarray:
        """Surface on the product grid ``s x t`` (shape ``(len(s), len(t))``)."""
        bs = bspline_design(s, self.spec_s)
        bt = bspline_design(t, self.spec_t)
        return bs @ self.coef @ bt.T

    def at_pairs(self, s, t) -> np.ndarray:
        """Surface at matched pairs ``(s[i], t[i])``."""
        bs = bspline_design(s, self.spec_s)
        bt = bspline_design(t, self.spec_t)
        return np.einsum("ij,jk,ik->i", bs, self.coef, bt)


@dataclass
class CovarianceSurface:
    """Symmetric smooth covariance over ``D x D`` with its values on a grid."""

    surface: SmoothSurface
    grid: np.ndarray
    values: np.ndarray

    def __call__(self, a, b=None) -> np.ndarray:
        b = a if b is None else b
        out = self.surface(a, b)
        if b is a:
            out = (out + out.T) / 2
        return out


def fit_bivariate_mean(
    dataset: LongitudinalFunctionalDataset,
    n_knots_s: int = 35,
    n_knots_t: int = 35,
    degree: int = 3,
    order: int = 2,
    t_domain=None,
    lambdas: Optional[Tuple[float, float]] = None,
) -> SmoothSurface:
    """Tensor-product penalized fit of every ``W_ijr`` on ``(s_r, t_ij)``.

    All points are pooled with equal weight (working independence). Curves
    observed at the same visit time are collapsed to their mean with the count
    as a column weight, which leaves the least-squares problem unchanged.
    Smoothing parameters are chosen by GCV unless ``lambdas`` is given.
    """
    w = dataset.w
    if w.size == 0 or np.all(np.isnan(w)):
        raise DataError("no predictor values to smooth")
    if np.any(np.isnan(w)):
        raise DataError("predictor curves contain missing values; impute them first")
    s = dataset.s
    t_domain = t_domain or (float(dataset.t.min()), float(dataset.t.max()))
    t_unique, inverse, counts = np.unique(dataset.t, return_inverse=True, return_counts=True)
    sums = np.zeros((s.size, t_unique.size))
    np.add.at(sums.T, inverse, w)
    means = sums / counts[None, :]
    rss_offset = float(np.sum(w**2) - np.sum(counts[None, :] * means**2))

    spec_s = bspline_spec((s[0], s[-1]), n_knots_s, degree)
    spec_t = bspline_spec(t_domain, n_knots_t, degree)
    smoother = SeparableSmoother(
        bspline_design(s, spec_s),
        difference_penalty(spec_s.num_basis, order),
        bspline_design(t_unique, spec_t),
        difference_penalty(spec_t.num_basis, order),
        col_weights=counts,
    )
    coords, total_ss = smoother.project(means)
    if lambdas is None:
        lam_s, lam_t, _ = _gcv_2d(smoother, coords, total_ss, w.size, max(rss_offset, 0.0), False)
    else:
        lam_s, lam_t = map(float, lambdas)
    _, edf = smoother.criterion_parts(coords, total_ss, lam_s, lam_t)
    coef = smoother.coefficients(coords, lam_s, lam_t)
    return SmoothSurface(spec_s, spec_t, coef, (lam_s, lam_t), edf)


def smooth_covariance_surface(
    raw,
    grid,
    exclude_diagonal: bool = True,
    n_knots: int = 35,
    degree: int = 3,
    order: int = 2,
    lam: Optional[float] = None,
    max_iter: int = 200,
    tol: float = 1e-10,
) -> Tuple[CovarianceSurface, float]:
    """Smooth a raw covariance matrix, optionally ignoring its diagonal.

    The diagonal is treated as missing and imputed by the current fit until
    the imputations stop moving (an EM iteration for least squares with
    missing cells). The white-noise variance is the average of ``raw diagonal
    - smooth diagonal`` over the central half of the grid, floored at zero.

    Returns
    -------
    CovarianceSurface
        Symmetrized smooth surface.
    float
        Estimated white-noise variance.
    """
    raw = np.asarray(raw, dtype=float)
    grid = np.asarray(grid, dtype=float)
    r = grid.size
    if raw.shape != (r, r):
        raise DimensionError(f"raw covariance {raw.shape} does not match grid of {r} points")
    if r < 4:
        raise DataError("covariance smoothing needs at least 4 grid points")
    scale = max(np.abs(raw).max(), 1e-300)
    if np.max(np.abs(raw - raw.T)) > 1e-8 * scale:
        raise DataError("raw covariance must be symmetric")

    spec = bspline_spec((grid[0], grid[-1]), n_knots, degree)
    basis = bspline_design(grid, spec)
    pen = difference_penalty(spec.num_basis, order)
    smoother = SeparableSmoother(basis, pen, basis, pen)

    work = raw.copy()
    idx = np.arange(r)
    if exclude_diagonal:
        nbr = np.empty(r)
        nbr[1:-1] = (raw[idx[1:-1], idx[1:-1] - 1] + raw[idx[1:-1], idx[1:-1] + 1]) / 2
        nbr[0], nbr[-1] = raw[0, 1], raw[-1, -2]
        work[idx, idx] = nbr

    lam_used = lam
    fitted = None
    for it in range(max_iter if exclude_diagonal else 1):
        coords, total_ss = smoother.project(work)
        if lam is None and it < 10:
            lam_used, _, _ = _gcv_2d(smoother, coords, total_ss, r * r, 0.0, True)
        coef = smoother.coefficients(coords, lam_used, lam_used)
        fitted = basis @ coef @ basis.T
        if not exclude_diagonal:
            break
        change = np.max(np.abs(fitted[idx, idx] - work[idx, idx]))
        work[idx, idx] = fitted[idx, idx]
        if it >= 10 and change <= tol * scale:
            break
    else:
        logger.debug("diagonal imputation stopped after %d iterations", max_iter)

    coef = (coef + coef.T) / 2
    values = basis @ coef @ basis.T
    values = (values + values.T) / 2
    _, edf = smoother.criterion_parts(coords, total_ss, lam_used, lam_used)

    lo, hi = int(np.floor(r / 4)), int(np.ceil(3 * r / 4))
    sigma2 = float(np.mean(raw[idx[lo:hi], idx[lo:hi]] - values[idx[lo:hi], idx[lo:hi]]))
    if sigma2 < 0:
        if sigma2 < -1e-8 * scale:
            warnings.warn(f"negative white-noise variance estimate {sigma2:.3g} floored at 0",
                          RuntimeWarning, stacklevel=2)
        sigma2 = 0.0
    surface = SmoothSurface(spec, spec, coef, (lam_used, lam_used), edf)
    return CovarianceSurface(surface=surface, grid=grid, values=values), sigma2


def smooth_binned_covariance(
    sums,
    counts,
    grid,
    n_knots: int = 10,
    degree: int = 3,
    order: int = 2,
    selector: Selector = "gcv",
) -> CovarianceSurface:
    """Smooth binned cross-products ``sums / counts`` over a square grid.

    Cells with a zero count (including the diagonal, when the caller zeroes
    it) carry no information. The fit is weighted by the cell counts and
    penalized symmetrically in both directions with a single parameter.
    """
    sums = np.asarray(sums, dtype=float)
    counts = np.asarray(counts, dtype=float)
    grid = np.asarray(grid, dtype=float)
    g = grid.size
    if sums.shape != (g, g) or counts.shape != (g, g):
        raise DimensionError("binned sums/counts must be square on the grid")
    sums = (sums + sums.T) / 2
    counts = (counts + counts.T) / 2
    rows, cols = np.nonzero(counts > 0)
    spec = bspline_spec((grid[0], grid[-1]), n_knots, degree)
    basis = bspline_design(grid, spec)
    c = spec.num_basis
    design = (basis[rows][:, :, None] * basis[cols][:, None, :]).reshape(rows.size, -1)
    pen1 = difference_penalty(c, order)
    eye = np.eye(c)
    pen = np.kron(pen1, eye) + np.kron(eye, pen1)
    fit = fit_penalized_ls(
        design, pen, sums[rows, cols] / counts[rows, cols],
        selector=selector, weights=counts[rows, cols],
    )
    coef = fit.coef.reshape(c, c)
    coef = (coef + coef.T) / 2
    values = basis @ coef @ basis.T
    values = (values + values.T) / 2
    surface = SmoothSurface(spec, spec, coef, (fit.lam, fit.lam), fit.edf)
    return CovarianceSurface(surface=surface, grid=grid, values=values)
