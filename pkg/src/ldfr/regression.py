"""Time-varying functional regression as a penalized-spline mixed model.

The response is modelled as

    g(mu_ij) = alpha(t_ij) + sum_k xi_ik(t_ij) beta_k(t_ij) + Z_b b_i,

with ``alpha`` and every ``beta_k`` expanded in a shared truncated-power basis.
Polynomial coefficients are fixed effects; truncated coefficients are random
effects with variance ``sigma0^2`` (intercept function) and a common ``sigma^2``
(all coefficient functions), so the fit has exactly two smoothing parameters.
Variance parameters are estimated by restricted maximum likelihood, profiling
out the fixed effects and the residual scale.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize

from ldfr.basis import SplineBasisSpec, quantile_knots, truncated_polynomial_design
from ldfr.errors import ConvergenceError, DataError, SpecError, UnsupportedLinkError

logger = logging.getLogger(__name__)

RANDOM_EFFECTS = ("none", "intercept", "intercept-slope", "group-intercept-slope")
LINKS = ("identity", "logit")
_LOG_BOUND = 15.0
_ETA_CAP = 20.0


@dataclass
class LdfrModelSpec:
    """Model specification.

    Parameters
    ----------
    link : {'identity', 'logit'}
    degree : int
        Degree ``p`` of the truncated-power basis shared by ``alpha`` and ``beta_k``.
    n_knots : int
        Number of knots ``L`` (placed at quantiles of the distinct visit times)
        when ``knots`` is not given.
    knots : array_like, optional
        Explicit knots.
    random_effects : {'none', 'intercept', 'intercept-slope', 'group-intercept-slope'}
        Subject-level structure ``Z_b b_i``; the last adds a group intercept.
    covariate_kinds : sequence of {'linear', 'factor'}, optional
        How each extra covariate column enters the fixed effects.
    domain : tuple, optional
        Time domain; defaults to the range of the visit times.
    """

    link: str = "identity"
    degree: int = 1
    n_knots: int = 15
    knots: Optional[np.ndarray] = None
    random_effects: str = "intercept"
    covariate_kinds: Optional[Tuple[str, ...]] = None
    domain: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.link not in LINKS:
            raise SpecError(f"unknown link {self.link!r}")
        if self.random_effects not in RANDOM_EFFECTS:
            raise SpecError(f"unknown random-effects structure {self.random_effects!r}")
        if self.degree < 1:
            raise SpecError("regression basis needs degree >= 1")
        if self.n_knots < 1 and self.knots is None:
            raise SpecError("need at least one knot")
        if self.covariate_kinds is not None:
            self.covariate_kinds = tuple(self.covariate_kinds)
            bad = set(self.covariate_kinds) - {"linear", "factor"}
            if bad:
                raise SpecError(f"unknown covariate kinds {sorted(bad)}")

    def basis_for(self, t) -> SplineBasisSpec:
        """Truncated-power basis spec, placing knots from ``t`` if needed."""
        t = np.asarray(t, dtype=float)
        domain = self.domain if self.domain is not None else (float(t.min()), float(t.max()))
        if self.knots is not None:
            knots = np.asarray(self.knots, dtype=float)
        else:
            knots = quantile_knots(t, self.n_knots, domain)
        return SplineBasisSpec("truncated-polynomial", self.degree, knots, domain)


@dataclass
class RandomEffectsLayout:
    """Column layout of ``Z_b``.

    Subject effects are stored subject-major (``[b_0i, b_1i]`` pairs for the
    slope structure), preceded by the group intercepts when present.
    """

    structure: str
    n_subjects: int
    n_groups: int = 0
    subject_group: Optional[np.ndarray] = None

    @property
    def per_subject(self) -> int:
        return {"none": 0, "intercept": 1}.get(self.structure, 2)

    @property
    def width(self) -> int:
        return self.n_groups + self.n_subjects * self.per_subject

    def design(self, subject, t, group=None) -> np.ndarray:
        subject = np.asarray(subject, dtype=int)
        t = np.asarray(t, dtype=float)
        z = np.zeros((t.size, self.width))
        if self.structure == "none":
            return z
        rows = np.arange(t.size)
        off = self.n_groups
        if self.n_groups:
            g = self.subject_group[subject] if group is None else np.asarray(group, dtype=int)
            z[rows, g] = 1.0
        z[rows, off + self.per_subject * subject] = 1.0
        if self.per_subject == 2:
            z[rows, off + 2 * subject + 1] = t
        return z

    def subject_effects(self, b) -> np.ndarray:
        """Per-subject effects as an ``(I, per_subject)`` array."""
        return np.asarray(b)[self.n_groups:].reshape(self.n_subjects, self.per_subject)


@dataclass
class DesignMatrices:
    """Fixed-effect matrix ``V``, spline blocks ``Z_0..Z_K`` and random-effect design ``Z_b``."""

    v: np.ndarray
    z_blocks: List[np.ndarray]
    z_b: np.ndarray
    basis: SplineBasisSpec
    k: int
    layout: RandomEffectsLayout
    covariate_levels: List[Optional[np.ndarray]] = field(default_factory=list)

    @property
    def z_spline(self) -> np.ndarray:
        return np.hstack(self.z_blocks)

    @property
    def z(self) -> np.ndarray:
        return np.hstack([self.z_spline, self.z_b])

    @property
    def n_fixed(self) -> int:
        return self.v.shape[1]

    @property
    def n_spline(self) -> int:
        return self.basis.knots.size


def _covariate_columns(covariates, kinds, levels=None):
    if covariates is None:
        return np.zeros((0, 0)), []
    cov = np.atleast_2d(np.asarray(covariates, dtype=float))
    if cov.shape[0] == 1 and cov.shape[1] != 1 and kinds is not None and len(kinds) == 1:
        cov = cov.T
    kinds = kinds or ("linear",) * cov.shape[1]
    if len(kinds) != cov.shape[1]:
        raise SpecError("one covariate kind per covariate column is required")
    cols, out_levels = [], []
    for j, kind in enumerate(kinds):
        col = cov[:, j]
        if kind == "linear":
            cols.append(col[:, None])
            out_levels.append(None)
        else:
            lev = np.unique(col) if levels is None else levels[j]
            cols.append((col[:, None] == lev[None, 1:]).astype(float))
            out_levels.append(lev)
    return np.hstack(cols), out_levels


def assemble_design(
    t,
    loadings,
    spec: LdfrModelSpec,
    subject=None,
    group=None,
    covariates=None,
    basis: Optional[SplineBasisSpec] = None,
    layout: Optional[RandomEffectsLayout] = None,
    covariate_levels=None,
) -> DesignMatrices:
    """Build the regression design.

    Parameters
    ----------
    t : ndarray, shape (n,)
        Visit times.
    loadings : ndarray, shape (n, K)
        Predicted loadings ``xi_ik(t_ij)``; ``K`` may be zero.
    spec : LdfrModelSpec
    subject, group : ndarray of int, optional
        Codes for the random-effect design.
    covariates : ndarray, shape (n, c), optional
    basis, layout, covariate_levels : optional
        Reuse the basis, random-effect layout and factor levels of an existing fit.

    Returns
    -------
    DesignMatrices
        ``V`` rows are ``[1, t, ..., t^p, xi_1, t xi_1, ..., t^p xi_K]`` followed by
        covariates; ``Z_k = xi_k * [(t - kappa_l)_+^p]`` with ``xi_0 = 1``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    xi = np.asarray(loadings, dtype=float).reshape(t.size, -1)
    if not np.all(np.isfinite(xi)):
        raise DataError("missing or non-finite predicted loadings")
    basis = spec.basis_for(t) if basis is None else basis
    full = truncated_polynomial_design(t, basis)
    p1 = basis.degree + 1
    poly, trunc = full[:, :p1], full[:, p1:]
    k = xi.shape[1]
    ones_xi = np.hstack([np.ones((t.size, 1)), xi])
    v = np.hstack([poly * ones_xi[:, [j]] for j in range(k + 1)])
    z_blocks = [trunc * ones_xi[:, [j]] for j in range(k + 1)]
    cov_cols, levels = _covariate_columns(covariates, spec.covariate_kinds, covariate_levels)
    if cov_cols.size:
        v = np.hstack([v, cov_cols])

    if layout is None:
        if spec.random_effects != "none" and subject is None:
            raise DataError("random effects need subject codes")
        n_subj = int(np.max(subject)) + 1 if subject is not None and np.size(subject) else 0
        n_groups, subject_group = 0, None
        if spec.random_effects == "group-intercept-slope":
            if group is None:
                raise DataError("group random effect needs group codes")
            group = np.asarray(group, dtype=int)
            n_groups = int(group.max()) + 1
            subject_group = np.zeros(n_subj, dtype=int)
            subject_group[np.asarray(subject, dtype=int)] = group
        layout = RandomEffectsLayout(spec.random_effects, n_subj, n_groups, subject_group)
    z_b = layout.design(subject if subject is not None else np.zeros(t.size, int), t, group)
    return DesignMatrices(v=v, z_blocks=z_blocks, z_b=z_b, basis=basis, k=k, layout=layout,
                          covariate_levels=levels)


@dataclass
class _Segment:
    """Consecutive random-effect columns sharing one (block) covariance factor."""

    name: str
    start: int
    count: int
    size: int = 1
    fixed: Optional[np.ndarray] = None

    @property
    def width(self) -> int:
        return self.count * self.size

    @property
    def n_params(self) -> int:
        return 0 if self.fixed is not None else self.size * (self.size + 1) // 2

    def factor(self, params) -> np.ndarray:
        if self.fixed is not None:
            return self.fixed
        logs = np.clip(params[: self.size], -_LOG_BOUND, _LOG_BOUND)
        if self.size == 1:
            return np.exp(logs).reshape(1, 1)
        out = np.diag(np.exp(logs))
        out[np.tril_indices(self.size, -1)] = params[self.size:]
        return out


def _segments_for(design: DesignMatrices, fixed_theta=None) -> List[_Segment]:
    lsz = design.n_spline
    segs = [_Segment("spline0", 0, lsz)]
    if design.k:
        segs.append(_Segment("spline", lsz, lsz * design.k))
    if fixed_theta is not None:
        segs[0].fixed = np.array([[fixed_theta[0]]])
        if design.k:
            segs[1].fixed = np.array([[fixed_theta[1]]])
    start = lsz * (design.k + 1)
    lay = design.layout
    if lay.n_groups:
        segs.append(_Segment("group", start, lay.n_groups))
        start += lay.n_groups
    if lay.per_subject:
        segs.append(_Segment("subject", start, lay.n_subjects, lay.per_subject))
    return segs


class RemlCriterion:
    """Profiled REML deviance of a linear mixed model ``y = X beta + Z Lambda v + e``.

    ``Lambda`` is block diagonal, built from ``segments``; ``v ~ N(0, sigma_e^2 I)``.
    With ``known_scale`` the residual scale is fixed at one and ``Lambda``
    holds absolute standard deviations (used for the PQL working model).
    """

    def __init__(self, x, z, y, segments: Sequence[_Segment], weights=None, known_scale=False):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float).reshape(x.shape[0], -1)
        y = np.asarray(y, dtype=float)
        if weights is not None:
            root = np.sqrt(np.asarray(weights, dtype=float))
            x, z, y = x * root[:, None], z * root[:, None], y * root
        self.n, self.p = x.shape
        self.q = z.shape[1]
        if self.n <= self.p:
            raise DataError(f"{self.n} observations for {self.p} fixed effects")
        self.segments = list(segments)
        self.known_scale = known_scale
        self.x, self.z, self.y = x, z, y
        self.xtx = x.T @ x
        self.xty = x.T @ y
        self.yty = float(y @ y)
        self.ztz = z.T @ z
        self.ztx = z.T @ x
        self.zty = z.T @ y
        self.n_params = sum(s.n_params for s in self.segments)
        self._x_rank_check()

    def _x_rank_check(self):
        try:
            linalg.cholesky(self.xtx + 1e-12 * np.trace(self.xtx) / self.p * np.eye(self.p))
        except linalg.LinAlgError as exc:
            raise DataError("fixed-effect design is rank deficient") from exc
        s = linalg.svdvals(self.xtx)
        if s[-1] <= 1e-12 * s[0]:
            raise DataError("fixed-effect design is rank deficient")

    def split(self, params):
        out, pos = [], 0
        for seg in self.segments:
            out.append(seg.factor(params[pos: pos + seg.n_params]))
            pos += seg.n_params
        return out

    def right_lambda(self, mat, factors):
        """``mat @ Lambda`` for a matrix with ``q`` columns."""
        out = np.array(mat, dtype=float, copy=True)
        m = out.shape[0]
        for seg, fac in zip(self.segments, factors):
            sl = slice(seg.start, seg.start + seg.width)
            if seg.size == 1:
                out[:, sl] *= fac[0, 0]
            else:
                out[:, sl] = (out[:, sl].reshape(m, seg.count, seg.size) @ fac).reshape(m, -1)
        return out

    def solve(self, params):
        """Penalized least-squares solution and REML pieces for given parameters."""
        factors = self.split(params)
        if self.q:
            lztz = self.right_lambda(self.right_lambda(self.ztz, factors).T, factors)
            m = lztz + np.eye(self.q)
            chol = linalg.cholesky(m, lower=True)
            lzx = self.right_lambda(self.ztx.T, factors).T
            lzy = self.right_lambda(self.zty[None, :], factors)[0]
            cu = linalg.solve_triangular(chol, lzy, lower=True)
            cx = linalg.solve_triangular(chol, lzx, lower=True)
            logdet_m = 2 * np.sum(np.log(np.diag(chol)))
        else:
            chol = np.zeros((0, 0))
            cu, cx = np.zeros(0), np.zeros((0, self.p))
            logdet_m = 0.0
        rx2 = self.xtx - cx.T @ cx
        rx = linalg.cholesky(rx2, lower=False)
        rhs = self.xty - cx.T @ cu
        beta = linalg.cho_solve((rx, False), rhs)
        v = linalg.solve_triangular(chol.T, cu - cx @ beta, lower=False) if self.q else cu
        # penalized residual sum of squares from the explicit residual; the
        # cross-product shortcut cancels badly near the optimum
        resid = self.y - self.x @ beta
        if self.q:
            resid = resid - self.right_lambda(self.z, factors) @ v
        r2 = max(float(resid @ resid + v @ v), 1e-300)
        return dict(factors=factors, chol=chol, rx=rx, beta=beta, v=v, r2=r2,
                    logdet_m=logdet_m, logdet_rx=2 * np.sum(np.log(np.abs(np.diag(rx)))))

    def deviance_from(self, parts) -> float:
        dof = self.n - self.p
        base = parts["logdet_m"] + parts["logdet_rx"]
        if self.known_scale:
            return base + parts["r2"] + dof * np.log(2 * np.pi)
        return base + dof * (1 + np.log(2 * np.pi * parts["r2"] / dof))

    def __call__(self, params) -> float:
        try:
            return self.deviance_from(self.solve(np.asarray(params, dtype=float)))
        except (linalg.LinAlgError, FloatingPointError, ValueError):
            return np.inf

    def gradient(self, params, step=1e-5) -> np.ndarray:
        """Central-difference gradient."""
        params = np.asarray(params, dtype=float)
        g = np.zeros_like(params)
        for i in range(params.size):
            e = np.zeros_like(params)
            e[i] = step
            g[i] = (self(params + e) - self(params - e)) / (2 * step)
        return g

    def bounds(self):
        out = []
        for seg in self.segments:
            if seg.n_params:
                out += [(-_LOG_BOUND, _LOG_BOUND)] * seg.size
                out += [(-1e3, 1e3)] * (seg.n_params - seg.size)
        return out

    def scale(self, parts) -> float:
        return 1.0 if self.known_scale else parts["r2"] / (self.n - self.p)

    def posterior_covariance(self, parts, scale) -> np.ndarray:
        """Covariance of ``[beta; u]`` under the penalized-fit (Bayesian) posterior."""
        factors = parts["factors"]
        p, q = self.p, self.q
        top = np.hstack([self.xtx, self.right_lambda(self.ztx.T, factors)])
        if q:
            lzx = top[:, p:].T
            lztz = self.right_lambda(self.right_lambda(self.ztz, factors).T, factors)
            bottom = np.hstack([lzx, lztz + np.eye(q)])
            prec = np.vstack([top, bottom])
        else:
            prec = top
        try:
            cov = linalg.cho_solve(linalg.cho_factor(prec), np.eye(p + q)) * scale
        except linalg.LinAlgError:
            cov = linalg.pinvh(prec) * scale
        if q:
            t_map = np.eye(p + q)
            t_map[p:, p:] = self.right_lambda(np.eye(q), factors)
            cov = t_map @ cov @ t_map.T
        return (cov + cov.T) / 2

    def edf(self, parts) -> float:
        factors = parts["factors"]
        p, q = self.p, self.q
        if not q:
            return float(p)
        lzx = self.right_lambda(self.ztx.T, factors).T
        lztz = self.right_lambda(self.right_lambda(self.ztz, factors).T, factors)
        prec = np.block([[self.xtx, lzx.T], [lzx, lztz + np.eye(q)]])
        inv = linalg.cho_solve(linalg.cho_factor(prec), np.eye(p + q))
        return float(p + q - np.trace(inv[p:, p:]))


def _optimize(crit: RemlCriterion, start, max_iter=2000):
    """Nelder-Mead followed by a bounded quasi-Newton polish."""
    start = np.clip(np.asarray(start, dtype=float), -_LOG_BOUND + 1, _LOG_BOUND - 1)
    if crit.n_params == 0:
        return start, 0, True
    # the documented start can sit in the basin of a boundary optimum (a variance
    # collapsing to zero), so unit variance ratios and the best point of a coarse
    # grid over the smoothing parameters are tried as well
    nm = None
    for x0 in (start, np.zeros_like(start), _grid_start(crit, start)):
        res = optimize.minimize(
            crit, x0, method="Nelder-Mead",
            options=dict(maxiter=max_iter * crit.n_params, xatol=1e-3, fatol=1e-6, adaptive=True),
        )
        if nm is None or res.fun < nm.fun:
            nm = res
    x = np.clip(nm.x, -_LOG_BOUND, _LOG_BOUND)
    polish = optimize.minimize(crit, x, method="L-BFGS-B", bounds=crit.bounds(),
                               jac=lambda p: crit.gradient(p),
                               options=dict(maxiter=200, gtol=1e-7, ftol=1e-14))
    best = polish.x if polish.fun <= nm.fun else x
    best = _newton_refine(crit, best)
    n_iter = nm.nit + polish.nit
    grad = crit.gradient(best)
    free = _interior(best, crit.bounds())
    converged = bool(np.all(np.abs(grad[free]) <= 1e-3))
    if not converged:
        # a second Nelder-Mead pass from the polished point usually settles flat directions
        nm2 = optimize.minimize(crit, best, method="Nelder-Mead",
                                options=dict(maxiter=max_iter * crit.n_params, xatol=1e-8,
                                             fatol=1e-12, adaptive=True))
        if nm2.fun <= crit(best):
            best = nm2.x
        grad = crit.gradient(best)
        free = _interior(best, crit.bounds())
        converged = bool(np.all(np.abs(grad[free]) <= 1e-2))
    if not np.isfinite(crit(best)):
        raise ConvergenceError("REML optimization failed", last_iterate=best)
    return best, n_iter, converged


def _grid_start(crit: RemlCriterion, start, levels=tuple(np.arange(-6.0, 6.5))):
    """Best point of a coarse grid over the (at most two) smoothing parameters."""
    n_smooth = sum(1 for s in crit.segments[:2] if s.name.startswith("spline") and s.n_params)
    best, best_val = np.array(start, dtype=float), crit(start)
    if not n_smooth:
        return best
    for combo in itertools.product(levels, repeat=n_smooth):
        x = np.array(start, dtype=float)
        x[:n_smooth] = combo
        val = crit(x)
        if val < best_val:
            best, best_val = x, val
    return best


def _newton_refine(crit: RemlCriterion, x, steps: int = 6, h: float = 1e-4):
    """A few finite-difference Newton steps on the interior parameters.

    Settles the optimum well below the quasi-Newton tolerance so that fits of
    equivalent data (e.g. shifted responses) agree to rounding.
    """
    x = np.array(x, dtype=float)
    free = np.flatnonzero(_interior(x, crit.bounds(), margin=0.5))
    if free.size == 0:
        return x
    fx = crit(x)
    for _ in range(steps):
        n = free.size
        grad = np.zeros(n)
        hess = np.zeros((n, n))
        eye = np.eye(x.size)[free] * h
        for a in range(n):
            fp, fm = crit(x + eye[a]), crit(x - eye[a])
            grad[a] = (fp - fm) / (2 * h)
            hess[a, a] = (fp - 2 * fx + fm) / h**2
            for b in range(a):
                val = (crit(x + eye[a] + eye[b]) - crit(x + eye[a] - eye[b])
                       - crit(x - eye[a] + eye[b]) + crit(x - eye[a] - eye[b])) / (4 * h**2)
                hess[a, b] = hess[b, a] = val
        if not np.all(np.isfinite(hess)) or np.any(np.linalg.eigvalsh(hess) <= 0):
            break
        step = np.linalg.solve(hess, grad)
        cand = x.copy()
        cand[free] -= step
        fc = crit(cand)
        if not fc <= fx + 1e-12:
            break
        x, fx = cand, fc
        if np.max(np.abs(step)) < 1e-10:
            break
    return x


def _interior(params, bounds, margin=1e-3):
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return (params > lo + margin) & (params < hi - margin)


@dataclass
class LdfrFit:
    """A fitted longitudinal dynamic functional regression model.

    Attributes
    ----------
    beta : ndarray
        Fixed effects; the first ``(p+1)(K+1)`` entries are the polynomial
        coefficients of ``alpha, beta_1, ..., beta_K`` in that order.
    u : list of ndarray
        Truncated-basis coefficients ``u_0, ..., u_K`` (length ``L`` each).
    b : ndarray
        Stacked random effects in the layout of ``layout``.
    lambdas : tuple
        ``(1 / sigma0^2, 1 / sigma^2)``; the second is ``nan`` when ``K = 0``.
    sigma2_e : float
        Residual variance (fixed at one for the logit link).
    d_matrix : ndarray or None
        Covariance of the per-subject random effects.
    sigma2_group : float or None
    """

    spec: LdfrModelSpec
    basis: SplineBasisSpec
    layout: RandomEffectsLayout
    k: int
    beta: np.ndarray
    u: List[np.ndarray]
    b: np.ndarray
    lambdas: Tuple[float, float]
    sigma2_e: float
    d_matrix: Optional[np.ndarray]
    sigma2_group: Optional[float]
    fitted: np.ndarray
    linear_predictor: np.ndarray
    edf: float
    covariance: np.ndarray
    reml: float
    params: np.ndarray
    converged: bool
    n_iter: int
    log_likelihood: float
    n_obs: int
    covariate_levels: List = field(default_factory=list)
    outer_iterations: int = 0
    aic_approximate: bool = False

    @property
    def n_fixed(self) -> int:
        return self.beta.size

    @property
    def coef_vector(self) -> np.ndarray:
        """``[beta; u_0; ...; u_K; b]`` in design-column order."""
        return np.concatenate([self.beta, *self.u, self.b])

    @property
    def subject_effects(self) -> np.ndarray:
        return self.layout.subject_effects(self.b)

    @property
    def group_effects(self) -> np.ndarray:
        return self.b[: self.layout.n_groups]

    @property
    def aic(self) -> float:
        return marginal_aic(self)

    def design(self, t, loadings, subject=None, group=None, covariates=None) -> DesignMatrices:
        """Design rows for new ``(t, loadings)`` pairs using this fit's basis and layout."""
        return assemble_design(t, loadings, self.spec, subject=subject, group=group,
                               covariates=covariates, basis=self.basis, layout=self.layout,
                               covariate_levels=self.covariate_levels or None)

    def random_effect_prior(self) -> np.ndarray:
        """Prior covariance of one subject's effects (plus the group variance if present)."""
        if self.d_matrix is None:
            return np.zeros((0, 0))
        return self.d_matrix


def _theta_start(design, y, weights, known_scale, structure):
    x = design.v
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid_var = max(np.var(y - x @ coef), 1e-8) if not known_scale else 1.0
    rel = 1.0 / np.sqrt(resid_var)
    start = [np.log(rel)]
    if design.k:
        start.append(np.log(rel))
    if design.layout.n_groups:
        start.append(np.log(np.sqrt(0.1) * rel))
    ps = design.layout.per_subject
    if ps:
        start += [np.log(np.sqrt(0.1) * rel)] * ps + [0.0] * (ps * (ps - 1) // 2)
    return np.array(start)


def _fit_linear_mixed(design: DesignMatrices, y, spec, weights=None, known_scale=False,
                      fixed_smoothing=None, start=None):
    z = design.z
    fixed_theta = None
    if fixed_smoothing is not None:
        lam = np.atleast_1d(np.asarray(fixed_smoothing, dtype=float))
        if np.any(lam <= 0):
            raise SpecError("fixed smoothing parameters must be positive")
        lam = np.resize(lam, 2)
        fixed_theta = 1.0 / np.sqrt(lam)
    segments = _segments_for(design, fixed_theta)
    crit = RemlCriterion(design.v, z, y, segments, weights=weights, known_scale=known_scale)
    if start is None:
        start = _theta_start(design, y, weights, known_scale, spec.random_effects)
        if fixed_theta is not None:
            start = start[1 + (design.k > 0):]
    params, n_iter, converged = _optimize(crit, start)
    parts = crit.solve(params)
    scale = crit.scale(parts)
    coef_u = crit.right_lambda(parts["v"][None, :], parts["factors"])[0] if crit.q else np.zeros(0)
    return crit, params, parts, scale, coef_u, n_iter, converged


def _package_fit(design, spec, crit, params, parts, scale, coef_u, n_iter, converged,
                 linear_predictor, fitted, y_len, outer=0, approximate=False):
    lsz, k = design.n_spline, design.k
    u = [coef_u[j * lsz:(j + 1) * lsz] for j in range(k + 1)]
    b = coef_u[lsz * (k + 1):]
    factors = parts["factors"]
    seg_names = [s.name for s in crit.segments]
    rel0 = factors[seg_names.index("spline0")][0, 0]
    lam0 = 1.0 / (scale * rel0**2)
    lam = 1.0 / (scale * factors[seg_names.index("spline")][0, 0] ** 2) if k else np.nan
    d_matrix, sigma2_group = None, None
    if "subject" in seg_names:
        fac = factors[seg_names.index("subject")]
        d_matrix = scale * fac @ fac.T
    if "group" in seg_names:
        sigma2_group = float(scale * factors[seg_names.index("group")][0, 0] ** 2)
    cov = crit.posterior_covariance(parts, scale)
    dof = crit.n - crit.p
    loglik = -0.5 * (crit.n * np.log(2 * np.pi * scale) + parts["logdet_m"] + parts["r2"] / scale)
    return LdfrFit(
        spec=spec, basis=design.basis, layout=design.layout, k=k, beta=parts["beta"], u=u, b=b,
        lambdas=(float(lam0), float(lam)), sigma2_e=float(scale), d_matrix=d_matrix,
        sigma2_group=sigma2_group, fitted=fitted, linear_predictor=linear_predictor,
        edf=crit.edf(parts), covariance=cov, reml=crit.deviance_from(parts), params=params,
        converged=converged, n_iter=n_iter, log_likelihood=float(loglik), n_obs=y_len,
        covariate_levels=design.covariate_levels, outer_iterations=outer,
        aic_approximate=approximate,
    )


def fit_gaussian(y, design: DesignMatrices, spec: LdfrModelSpec, weights=None,
                 fixed_smoothing=None) -> LdfrFit:
    """Fit the identity-link model by REML.

    Parameters
    ----------
    y : ndarray, shape (n,)
    design : DesignMatrices
    spec : LdfrModelSpec
    weights : ndarray, optional
        Prior observation weights.
    fixed_smoothing : float or pair of float, optional
        Penalty weights ``(lambda_0, lambda)`` on the least-squares scale, i.e. the
        criterion becomes ``|y - V beta - Z u|^2 + lambda_0 |u_0|^2 + lambda sum_k |u_k|^2``.
        Only the remaining variance parameters are estimated.

    Returns
    -------
    LdfrFit
    """
    if spec.link != "identity":
        raise UnsupportedLinkError("fit_gaussian needs the identity link")
    y = np.asarray(y, dtype=float)
    if y.shape != (design.v.shape[0],) or not np.all(np.isfinite(y)):
        raise DataError("responses must be finite with one value per design row")
    # the first column of V is the constant, so centring only moves the intercept
    # and makes the fit exactly equivariant to shifts of the responses
    shift = float(np.mean(y))
    crit, params, parts, scale, coef_u, n_iter, converged = _fit_linear_mixed(
        design, y - shift, spec, weights=weights, fixed_smoothing=fixed_smoothing)
    if not converged:
        warnings.warn("REML gradient above tolerance at the returned optimum",
                      RuntimeWarning, stacklevel=2)
    parts["beta"][0] += shift
    lin = design.v @ parts["beta"] + design.z @ coef_u
    return _package_fit(design, spec, crit, params, parts, scale, coef_u, n_iter, converged,
                        lin, lin, y.size)


def fit_binomial(y, design: DesignMatrices, spec: LdfrModelSpec, fixed_smoothing=None,
                 max_outer: int = 200, tol: float = 1e-6) -> LdfrFit:
    """Fit the logit-link model by penalized quasi-likelihood.

    Each outer step forms the working response ``z = eta + (y - mu) / (mu (1 - mu))``
    with weights ``mu (1 - mu)`` and refits the Gaussian working model with its
    dispersion fixed at one, re-estimating the variance parameters by REML.
    """
    if spec.link != "logit":
        raise UnsupportedLinkError("fit_binomial needs the logit link")
    y = np.asarray(y, dtype=float)
    if y.shape != (design.v.shape[0],):
        raise DataError("one response per design row is required")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("binary responses must be 0 or 1")
    if y.min() == y.max():
        raise DataError("binary responses need both zeros and ones")
    mu = (y + 0.5) / 2
    eta = np.log(mu / (1 - mu))
    start = None
    capped = False
    for outer in range(1, max_outer + 1):
        w = mu * (1 - mu)
        work = eta + (y - mu) / w
        crit, params, parts, scale, coef_u, n_iter, converged = _fit_linear_mixed(
            design, work, spec, weights=w, known_scale=True,
            fixed_smoothing=fixed_smoothing, start=start)
        start = params
        new_eta = design.v @ parts["beta"] + design.z @ coef_u
        if np.any(np.abs(new_eta) > _ETA_CAP):
            capped = True
            new_eta = np.clip(new_eta, -_ETA_CAP, _ETA_CAP)
        change = np.linalg.norm(new_eta - eta) / max(np.linalg.norm(eta), 1e-8)
        eta = new_eta
        mu = 1 / (1 + np.exp(-eta))
        if change < tol:
            break
    else:
        raise ConvergenceError(f"PQL did not converge in {max_outer} iterations",
                               last_iterate=eta)
    if capped:
        warnings.warn("linear predictor capped at |20| (possible separation)",
                      RuntimeWarning, stacklevel=2)
    return _package_fit(design, spec, crit, params, parts, scale, coef_u, n_iter, converged,
                        eta, mu, y.size, outer=outer, approximate=True)


def fit_model(y, design: DesignMatrices, spec: LdfrModelSpec, **kwargs) -> LdfrFit:
    """Dispatch on the link function."""
    if spec.link == "identity":
        return fit_gaussian(y, design, spec, **kwargs)
    return fit_binomial(y, design, spec, **kwargs)


def marginal_aic(fit: LdfrFit) -> float:
    """``-2 log L + 2 (variance parameters + fixed effects)``.

    ``log L`` is the Gaussian marginal log-likelihood at the REML estimates with
    the fixed effects at their estimates. For logit fits it refers to the PQL
    working model (``fit.aic_approximate`` is set).
    """
    n_var = fit.params.size + (0 if fit.aic_approximate else 1)
    return -2 * fit.log_likelihood + 2 * (n_var + fit.n_fixed)


@dataclass
class CoefficientSurface:
    """Estimated ``alpha(t)``, ``beta_k(t)`` and ``gamma(s, t) = sum_k phi_k(s) beta_k(t)``."""

    s: np.ndarray
    t: np.ndarray
    alpha: np.ndarray
    alpha_se: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray


def coefficient_functions(fit: LdfrFit, t) -> np.ndarray:
    """``alpha(t), beta_1(t), ..., beta_K(t)`` as rows of a ``(K+1, len(t))`` array."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    full = truncated_polynomial_design(t, fit.basis)
    p1 = fit.basis.degree + 1
    out = np.empty((fit.k + 1, t.size))
    for j in range(fit.k + 1):
        out[j] = full[:, :p1] @ fit.beta[j * p1:(j + 1) * p1] + full[:, p1:] @ fit.u[j]
    return out


def estimate_coefficient_surface(fit: LdfrFit, eigenfunctions, s, t) -> CoefficientSurface:
    """Evaluate the coefficient functions and the surface on ``s x t``.

    Parameters
    ----------
    fit : LdfrFit
    eigenfunctions : ndarray, shape (R, K)
        Marginal eigenfunctions on the grid ``s``.
    s, t : ndarray
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    phi = np.asarray(eigenfunctions, dtype=float).reshape(len(s), -1)
    funcs = coefficient_functions(fit, t)
    gamma = phi[:, : fit.k] @ funcs[1:]
    full = truncated_polynomial_design(t, fit.basis)
    p1 = fit.basis.degree + 1
    lsz = fit.basis.knots.size
    nf = fit.n_fixed
    c = np.zeros((t.size, fit.covariance.shape[0]))
    c[:, :p1] = full[:, :p1]
    c[:, nf:nf + lsz] = full[:, p1:]
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", c, fit.covariance, c), 0))
    return CoefficientSurface(s=np.asarray(s, float), t=t, alpha=funcs[0], alpha_se=se,
                              beta=funcs[1:], gamma=gamma)
