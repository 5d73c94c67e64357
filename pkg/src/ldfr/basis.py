"""Spline bases, difference penalties and trapezoidal quadrature."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Tuple

import numpy as np
from scipy.interpolate import BSpline

from ldfr.errors import DimensionError, DomainError, SpecError

_DOMAIN_TOL = 1e-10


@dataclass(frozen=True)
class SplineBasisSpec:
    """Description of a univariate spline basis.

    Parameters
    ----------
    kind : {'truncated-polynomial', 'b-spline'}
        Basis family.
    degree : int
        Polynomial degree ``p``.
    knots : array_like
        Interior knots, strictly increasing and strictly inside ``domain``.
    domain : tuple of float
        Closed interval ``(lo, hi)`` on which the basis is evaluated.
    """

    kind: Literal["truncated-polynomial", "b-spline"]
    degree: int
    knots: np.ndarray
    domain: Tuple[float, float]

    def __post_init__(self):
        knots = np.atleast_1d(np.asarray(self.knots, dtype=float))
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "domain", (float(self.domain[0]), float(self.domain[1])))
        lo, hi = self.domain
        if self.kind not in ("truncated-polynomial", "b-spline"):
            raise SpecError(f"unknown basis kind {self.kind!r}")
        if int(self.degree) != self.degree or self.degree < 0:
            raise SpecError(f"degree must be a non-negative integer, got {self.degree}")
        if not hi > lo:
            raise SpecError(f"empty domain {self.domain}")
        if knots.size and np.any(np.diff(knots) <= 0):
            raise SpecError("knots must be strictly increasing")
        if knots.size and (knots[0] <= lo or knots[-1] >= hi):
            raise SpecError("knots must lie strictly inside the domain")

    @property
    def num_basis(self) -> int:
        if self.kind == "truncated-polynomial":
            return self.degree + 1 + self.knots.size
        return self.knots.size + self.degree + 1

    @property
    def full_knots(self) -> np.ndarray:
        """Clamped knot vector for the B-spline case."""
        lo, hi = self.domain
        p = self.degree
        return np.concatenate([np.full(p + 1, lo), self.knots, np.full(p + 1, hi)])


def equispaced_knots(domain, n_knots: int) -> np.ndarray:
    """``n_knots`` interior knots splitting ``domain`` into equal pieces."""
    lo, hi = domain
    return np.linspace(lo, hi, n_knots + 2)[1:-1]


def quantile_knots(points, n_knots: int, domain=None) -> np.ndarray:
    """Interior knots at equispaced quantiles of the distinct observation points.

    Quantiles are taken at probabilities ``l / (n_knots + 1)``. Ties (possible
    when few distinct points exist) are removed, so fewer than ``n_knots``
    knots may be returned.
    """
    pts = np.unique(np.asarray(points, dtype=float))
    if domain is None:
        domain = (pts[0], pts[-1])
    lo, hi = domain
    probs = np.arange(1, n_knots + 1) / (n_knots + 1)
    knots = np.unique(np.quantile(pts, probs))
    return knots[(knots > lo) & (knots < hi)]


def _check_domain(x, domain):
    lo, hi = domain
    if x.size and (np.min(x) < lo - _DOMAIN_TOL or np.max(x) > hi + _DOMAIN_TOL):
        raise DomainError(
            f"points in [{np.min(x):.6g}, {np.max(x):.6g}] fall outside domain [{lo}, {hi}]"
        )


def truncated_polynomial_design(times, spec: SplineBasisSpec) -> np.ndarray:
    """Truncated power basis ``[1, t, ..., t^p, (t-k_1)_+^p, ..., (t-k_L)_+^p]``.

    Parameters
    ----------
    times : array_like, shape (n,)
    spec : SplineBasisSpec

    Returns
    -------
    ndarray, shape (n, p + 1 + L)
    """
    t = np.atleast_1d(np.asarray(times, dtype=float))
    _check_domain(t, spec.domain)
    p = spec.degree
    poly = np.vander(t, p + 1, increasing=True)
    diff = t[:, None] - spec.knots[None, :]
    trunc = np.where(diff > 0, diff, 0.0) ** p if p > 0 else (diff > 0).astype(float)
    return np.hstack([poly, trunc])


def bspline_design(points, spec: SplineBasisSpec) -> np.ndarray:
    """Dense B-spline collocation matrix on clamped knots.

    Rows sum to one everywhere in the domain.
    """
    if spec.kind != "b-spline":
        raise SpecError("bspline_design needs a 'b-spline' spec")
    if spec.num_basis < spec.degree + 1:
        raise SpecError("fewer basis functions than degree + 1")
    x = np.atleast_1d(np.asarray(points, dtype=float))
    _check_domain(x, spec.domain)
    x = np.clip(x, *spec.domain)
    mat = BSpline.design_matrix(x, spec.full_knots, spec.degree)
    return mat.toarray()


def difference_penalty(num_basis: int, order: int = 2) -> np.ndarray:
    """Difference penalty ``D^T D`` with ``D`` the order-``d`` difference operator."""
    if order < 1 or num_basis <= order:
        raise SpecError(f"need num_basis > order >= 1, got num_basis={num_basis}, order={order}")
    d = np.diff(np.eye(num_basis), n=order, axis=0)
    return d.T @ d


def ridge_penalty(spec: SplineBasisSpec) -> np.ndarray:
    """Identity on the truncated block, zero on the polynomial block."""
    p1 = spec.degree + 1
    pen = np.zeros((spec.num_basis, spec.num_basis))
    idx = np.arange(p1, spec.num_basis)
    pen[idx, idx] = 1.0
    return pen


def tensor_product_design(row_s, row_t) -> np.ndarray:
    """Kronecker product of two basis rows (or row-wise for matrices)."""
    a = np.asarray(row_s, dtype=float)
    b = np.asarray(row_t, dtype=float)
    if a.size == 0 or b.size == 0:
        raise DimensionError("tensor product of an empty row")
    if a.ndim == 1 and b.ndim == 1:
        return np.kron(a, b)
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError("row-wise tensor product needs equal row counts")
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)


@dataclass(frozen=True)
class QuadratureRule:
    """Trapezoidal weights on a fixed grid."""

    points: np.ndarray
    weights: np.ndarray = field(repr=False)

    @classmethod
    def trapezoid(cls, points) -> "QuadratureRule":
        x = np.asarray(points, dtype=float)
        if x.ndim != 1 or x.size < 2:
            raise DimensionError("trapezoid rule needs at least two points")
        if np.any(np.diff(x) <= 0):
            raise SpecError("quadrature points must be strictly increasing")
        h = np.diff(x)
        w = np.zeros_like(x)
        w[:-1] += h / 2
        w[1:] += h / 2
        return cls(points=x, weights=w)

    def __len__(self):
        return self.points.size

    def integrate(self, f) -> np.ndarray:
        """Integrate along the last axis."""
        f = np.asarray(f, dtype=float)
        if f.shape[-1] != self.weights.size:
            raise DimensionError("integrand length does not match the quadrature grid")
        return f @ self.weights


def inner_product(f, g, rule: QuadratureRule) -> float:
    """Trapezoidal approximation of the L2 inner product of ``f`` and ``g``."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != g.shape or f.shape[-1] != len(rule):
        raise DimensionError(
            f"length mismatch: f{f.shape}, g{g.shape}, rule has {len(rule)} points"
        )
    return float(np.sum(rule.weights * f * g))
