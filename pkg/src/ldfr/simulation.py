"""Scenario generators, train/test splits and evaluation metrics for Monte Carlo studies."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ldfr.basis import QuadratureRule
from ldfr.data import LongitudinalFunctionalDataset
from ldfr.errors import ConfigurationError, InputError, MetricError

logger = logging.getLogger(__name__)

DESIGNS = {"sparse": (6, 10), "moderate": (16, 20)}
_DESIGN_ALIASES = {"c1": "sparse", "c2": "moderate", "moderately-sparse": "moderate",
                   "mod-sparse": "moderate", "sparse": "sparse", "moderate": "moderate"}
NOISE_VARIANCE = {"B1": 9.0, "B2": 1.0}
RESPONSES = ("D1i", "D1ii", "D1iii", "D2")
EFFECTS = ("E1", "E2")

SCORE_VARIANCES = np.array([3.5, 2.0, 3.0, 1.5])
SMOOTH_NOISE_VARIANCES = np.array([0.3, 0.7])
RE_COVARIANCE = np.array([[1.0, 0.1], [0.1, 0.5]])


@dataclass
class ScenarioConfig:
    """One simulation setting.

    Parameters
    ----------
    n_subjects : int
        Number of subjects ``I``.
    design : {'sparse', 'moderate'}
        Visits per subject drawn uniformly from 6..10 or 16..20.
    noise : {'B1', 'B2'}
        White-noise variance 9 (SNR 0.5) or 1 (SNR 2.5) of the predictor curves.
    response : {'D1i', 'D1ii', 'D1iii', 'D2'}
        Response family and dependence structure.
    effect : {'E1', 'E2'}
        Shape of the time-varying coefficient.
    delta : float
        Strength of the time variation of the coefficient (0 = constant in time).
    seed : int
    n_s, n_t : int
        Sizes of the functional grid and of the candidate visit-time grid.
    """

    n_subjects: int = 100
    design: str = "sparse"
    noise: str = "B1"
    response: str = "D1ii"
    effect: str = "E1"
    delta: float = 0.0
    seed: int = 0
    n_s: int = 101
    n_t: int = 41

    def __post_init__(self):
        key = str(self.design).lower()
        if key not in _DESIGN_ALIASES:
            raise ConfigurationError(f"unknown design {self.design!r}")
        self.design = _DESIGN_ALIASES[key]
        if self.noise not in NOISE_VARIANCE:
            raise ConfigurationError(f"unknown noise setting {self.noise!r}")
        if self.response not in RESPONSES:
            raise ConfigurationError(f"unknown response family {self.response!r}")
        if self.effect not in EFFECTS:
            raise ConfigurationError(f"unknown effect {self.effect!r}")
        if self.n_subjects < 2:
            raise ConfigurationError("need at least two subjects")
        if self.delta < 0:
            raise ConfigurationError("delta must be non-negative")
        if self.n_t < DESIGNS[self.design][1]:
            raise ConfigurationError("time grid smaller than the number of visits")

    @property
    def binary(self) -> bool:
        return self.response == "D2"

    @property
    def noise_variance(self) -> float:
        return NOISE_VARIANCE[self.noise]


def integrated_predictor_variance(noise_variance: float) -> float:
    """``int int Var W(s, t) ds dt`` of the generating predictor on the unit square.

    Each KL coefficient contributes half its variance (``cos^2`` and ``sin^2``
    average 1/2 over ``t``); the smooth and white noise terms add their variances.
    """
    return SCORE_VARIANCES.sum() / 2 + SMOOTH_NOISE_VARIANCES.sum() + noise_variance


def signal_to_noise(noise_variance: float) -> float:
    """``int int Var W / (total noise variance) - 1``."""
    noise = SMOOTH_NOISE_VARIANCES.sum() + noise_variance
    return integrated_predictor_variance(noise_variance) / noise - 1


def mean_surface(s, t) -> np.ndarray:
    """Generating mean ``1 + 2s + 3t + 4st`` on the grid ``s x t`` (shape ``(len(s), len(t))``)."""
    s = np.atleast_1d(np.asarray(s, float))[:, None]
    t = np.atleast_1d(np.asarray(t, float))[None, :]
    return 1 + 2 * s + 3 * t + 4 * s * t


def marginal_eigenfunctions(s) -> np.ndarray:
    """``sqrt(2) cos(2 pi s)`` and ``sqrt(2) sin(2 pi s)`` as columns."""
    s = np.asarray(s, float)
    return np.sqrt(2) * np.column_stack([np.cos(2 * np.pi * s), np.sin(2 * np.pi * s)])


def true_gamma(effect: str, delta: float, s, t) -> np.ndarray:
    """Time-varying coefficient ``gamma(s, t)`` evaluated on the grid ``s x t``."""
    s = np.atleast_1d(np.asarray(s, float))[:, None]
    t = np.atleast_1d(np.asarray(t, float))[None, :]
    c = np.sqrt(2) * np.cos(2 * np.pi * s)
    sn = np.sqrt(2) * np.sin(2 * np.pi * s)
    dt = delta * t
    if effect == "E1":
        return np.exp(-dt) * c + dt * np.sin(dt) * sn
    if effect == "E2":
        return (1 + dt) * c + (1 - dt + delta * t**2) * sn
    raise ConfigurationError(f"unknown effect {effect!r}")


def _score_paths(zeta, t):
    """Loading trajectories on ``t`` from KL coefficients ``zeta`` (I x 4) -> (I, T, 2)."""
    c1, s1 = np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)
    c2, s2 = np.cos(4 * np.pi * t), np.sin(4 * np.pi * t)
    xi1 = zeta[:, [0]] * c1 + zeta[:, [1]] * s1
    xi2 = zeta[:, [2]] * c2 + zeta[:, [3]] * s2
    return np.stack([xi1, xi2], axis=-1)


@dataclass
class ScenarioData:
    """A generated dataset with the latent quantities needed for evaluation.

    ``*_full`` arrays hold every subject on the full candidate time grid, so
    trajectory metrics and band coverage can be computed at unobserved times.
    """

    config: ScenarioConfig
    s: np.ndarray
    t_grid: np.ndarray
    zeta: np.ndarray
    visits: List[np.ndarray]
    dataset: LongitudinalFunctionalDataset
    x_scores_full: np.ndarray
    mu_full: Optional[np.ndarray] = None
    y_full: Optional[np.ndarray] = None
    random_effects: Optional[np.ndarray] = None

    @property
    def visit_index(self) -> np.ndarray:
        """Candidate-grid index of every dataset row."""
        return np.concatenate(self.visits)


def _substreams(seed: int, n: int = 4):
    return [np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(n)]


def generate_predictors(config: ScenarioConfig, rng: np.random.Generator) -> ScenarioData:
    """Draw visit times, latent predictor curves and their noisy observations."""
    s = np.linspace(0, 1, config.n_s)
    t_grid = np.linspace(0, 1, config.n_t)
    lo, hi = DESIGNS[config.design]
    n_i = rng.integers(lo, hi + 1, size=config.n_subjects)
    visits = [np.sort(rng.choice(config.n_t, size=n, replace=False)) for n in n_i]
    zeta = rng.normal(size=(config.n_subjects, 4)) * np.sqrt(SCORE_VARIANCES)
    paths = _score_paths(zeta, t_grid)

    phi = marginal_eigenfunctions(s)
    tau = mean_surface(s, t_grid)
    subject = np.repeat(np.arange(config.n_subjects), n_i)
    idx = np.concatenate(visits)
    n = idx.size
    x = tau[:, idx].T + paths[subject, idx] @ phi.T
    eps = rng.normal(size=(n, 2)) * np.sqrt(SMOOTH_NOISE_VARIANCES)
    white = rng.normal(scale=np.sqrt(config.noise_variance), size=(n, s.size))
    w = x + eps @ phi.T + white

    dataset = LongitudinalFunctionalDataset(subject=subject, t=t_grid[idx], s=s, w=w)
    return ScenarioData(config=config, s=s, t_grid=t_grid, zeta=zeta, visits=visits,
                        dataset=dataset, x_scores_full=paths)


def integral_term(data: ScenarioData) -> np.ndarray:
    """``int X_i(s, t) gamma(s, t) ds`` for every subject on the full time grid, by trapezoid."""
    cfg = data.config
    quad = QuadratureRule.trapezoid(data.s)
    gamma = true_gamma(cfg.effect, cfg.delta, data.s, data.t_grid)
    phi = marginal_eigenfunctions(data.s)
    tau_part = quad.integrate((mean_surface(data.s, data.t_grid) * gamma).T)
    proj = np.stack([quad.integrate((phi[:, [k]] * gamma).T) for k in range(2)], axis=-1)
    return tau_part[None, :] + np.sum(data.x_scores_full * proj[None, :, :], axis=-1)


def generate_responses(data: ScenarioData, rng: np.random.Generator) -> ScenarioData:
    """Attach responses (observed and on the full grid) to generated predictors."""
    cfg = data.config
    i_count, t = cfg.n_subjects, data.t_grid
    signal = integral_term(data)
    if cfg.response == "D2":
        alpha = np.full_like(t, 2.0)
    else:
        alpha = 7 * np.sin(3 * np.pi * t)
    if cfg.response == "D1i":
        b = np.zeros((i_count, 2))
        noise_var = 2.0
    elif cfg.response == "D1ii":
        b = np.column_stack([rng.normal(size=i_count), np.zeros(i_count)])
        noise_var = 0.5
    else:
        b = rng.multivariate_normal(np.zeros(2), RE_COVARIANCE, size=i_count)
        noise_var = 0.3
    lin = alpha[None, :] + signal + b[:, [0]] + b[:, [1]] * t[None, :]
    if cfg.binary:
        mu = 1 / (1 + np.exp(-lin))
        y_full = (rng.uniform(size=mu.shape) < mu).astype(float)
        data.mu_full = lin
    else:
        y_full = lin + rng.normal(scale=np.sqrt(noise_var), size=lin.shape)
        data.mu_full = lin
    data.y_full = y_full
    data.random_effects = b
    ds = data.dataset
    ds.y = y_full[ds.subject, data.visit_index]
    return data


def generate_scenario(config: ScenarioConfig, seed: Optional[int] = None) -> ScenarioData:
    """Predictors and responses for one replicate, from independent substreams of ``seed``."""
    seed = config.seed if seed is None else seed
    pred_rng, resp_rng = _substreams(seed, 2)
    return generate_responses(generate_predictors(config, pred_rng), resp_rng)


# ---------------------------------------------------------------------------
# grouped generator


@dataclass
class GroupedComponents:
    """Inputs of the grouped generator, all on fixed grids.

    Parameters
    ----------
    s, t_grid : ndarray
        Functional grid and candidate visit times.
    mean : ndarray, shape (R, T)
        Predictor mean surface.
    eigenfunctions : ndarray, shape (R, K)
    score_covariances : list of ndarray, shape (T, T)
        Covariance of each loading process over ``t_grid``.
    noise_variance : float
        White-noise variance of the observed curves.
    gamma : ndarray, shape (R, T)
        Coefficient surface.
    alpha : ndarray, shape (T,)
        Intercept function.
    """

    s: np.ndarray
    t_grid: np.ndarray
    mean: np.ndarray
    eigenfunctions: np.ndarray
    score_covariances: List[np.ndarray]
    noise_variance: float
    gamma: np.ndarray
    alpha: np.ndarray

    @classmethod
    def from_scenario(cls, delta: float = 1.0, noise_variance: float = 1.0,
                      n_s: int = 101, n_t: int = 41) -> "GroupedComponents":
        """Components of the standard scenario (handy default and test fixture)."""
        s = np.linspace(0, 1, n_s)
        t = np.linspace(0, 1, n_t)
        c1, s1 = np.cos(2 * np.pi * t), np.sin(2 * np.pi * t)
        c2, s2 = np.cos(4 * np.pi * t), np.sin(4 * np.pi * t)
        g1 = 3.5 * np.outer(c1, c1) + 2.0 * np.outer(s1, s1)
        g2 = 3.0 * np.outer(c2, c2) + 1.5 * np.outer(s2, s2)
        return cls(s=s, t_grid=t, mean=mean_surface(s, t), eigenfunctions=marginal_eigenfunctions(s),
                   score_covariances=[g1, g2], noise_variance=noise_variance,
                   gamma=true_gamma("E1", delta, s, t), alpha=7 * np.sin(3 * np.pi * t))

    _FILE_KEYS = ("s", "t_grid", "mean", "eigenfunctions", "score_covariances",
                  "noise_variance", "gamma", "alpha")

    def save(self, path) -> None:
        """Write the components to an ``.npz`` file readable by :meth:`load`."""
        np.savez(path, s=self.s, t_grid=self.t_grid, mean=self.mean,
                 eigenfunctions=self.eigenfunctions,
                 score_covariances=np.stack(self.score_covariances),
                 noise_variance=self.noise_variance, gamma=self.gamma, alpha=self.alpha)

    @classmethod
    def load(cls, path) -> "GroupedComponents":
        """Read components from an ``.npz`` file (keys as the constructor fields)."""
        try:
            with np.load(path, allow_pickle=False) as npz:
                missing = [k for k in cls._FILE_KEYS if k not in npz.files]
                if missing:
                    raise InputError(f"component file {path} lacks {missing}")
                arr = {k: npz[k] for k in cls._FILE_KEYS}
        except OSError as exc:
            raise InputError(f"cannot read component file {path}: {exc}") from exc
        return cls(s=arr["s"], t_grid=arr["t_grid"], mean=arr["mean"],
                   eigenfunctions=arr["eigenfunctions"],
                   score_covariances=list(arr["score_covariances"]),
                   noise_variance=float(arr["noise_variance"]), gamma=arr["gamma"],
                   alpha=arr["alpha"])


@dataclass
class GroupedConfig:
    """Size and variance settings of the grouped generator.

    Defaults mimic a herd study: 475 subjects in 21 groups with 7 to 21 visits.
    """

    n_subjects: int = 475
    n_groups: int = 21
    visits: Tuple[int, int] = (7, 21)
    group_variance: float = 0.5
    re_covariance: np.ndarray = field(default_factory=lambda: RE_COVARIANCE.copy())
    error_variance: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_groups < 1 or self.n_subjects < self.n_groups:
            raise ConfigurationError("need at least one subject per group")
        if self.visits[0] < 1 or self.visits[1] < self.visits[0]:
            raise ConfigurationError(f"invalid visit range {self.visits}")
        if self.group_variance < 0 or self.error_variance < 0:
            raise ConfigurationError("variances must be non-negative")


def _gaussian_paths(cov, size, rng):
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    root = vecs * np.sqrt(np.clip(vals, 0, None))
    return rng.normal(size=(size, cov.shape[0])) @ root.T


def generate_grouped(config: GroupedConfig, components: GroupedComponents,
                     rng: Optional[np.random.Generator] = None):
    """Grouped dataset with response ``alpha + int X gamma + b_g + b_0i + b_1i t + e``.

    Returns
    -------
    dataset : LongitudinalFunctionalDataset
        With ``group`` codes; subjects are nested in groups.
    truth : dict
        ``group_effects``, ``subject_effects`` and the noiseless mean ``mu`` per row.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    comp = components
    n_t = comp.t_grid.size
    lo, hi = config.visits
    if hi > n_t:
        raise ConfigurationError("more visits than candidate times")
    n_i = rng.integers(lo, hi + 1, size=config.n_subjects)
    groups = np.concatenate([np.arange(config.n_groups),
                             rng.integers(0, config.n_groups, config.n_subjects - config.n_groups)])
    groups = np.sort(groups)
    visits = [np.sort(rng.choice(n_t, size=n, replace=False)) for n in n_i]
    paths = np.stack([_gaussian_paths(g, config.n_subjects, rng) for g in comp.score_covariances],
                     axis=-1)
    g_eff = rng.normal(scale=np.sqrt(config.group_variance), size=config.n_groups)
    b = rng.multivariate_normal(np.zeros(2), config.re_covariance, size=config.n_subjects)

    subject = np.repeat(np.arange(config.n_subjects), n_i)
    idx = np.concatenate(visits)
    x = comp.mean[:, idx].T + np.einsum("nk,rk->nr", paths[subject, idx], comp.eigenfunctions)
    w = x + rng.normal(scale=np.sqrt(comp.noise_variance), size=x.shape)
    quad = QuadratureRule.trapezoid(comp.s)
    integral = np.sum(x * comp.gamma[:, idx].T * quad.weights[None, :], axis=1)
    t = comp.t_grid[idx]
    grp = groups[subject]
    mu = comp.alpha[idx] + integral + g_eff[grp] + b[subject, 0] + b[subject, 1] * t
    y = mu + rng.normal(scale=np.sqrt(config.error_variance), size=mu.size)
    ds = LongitudinalFunctionalDataset(subject=subject, t=t, s=comp.s, w=w, y=y, group=grp)
    truth = {"group_effects": g_eff, "subject_effects": b, "mu": mu, "subject_group": groups}
    return ds, truth


# ---------------------------------------------------------------------------
# splitting and metrics

SPLIT_MODES = ("holdout", "last", "fraction")


def train_test_split(dataset: LongitudinalFunctionalDataset, mode: str = "holdout",
                     rng: Optional[np.random.Generator] = None, n_test: int = 5,
                     fraction: float = 0.2) -> Tuple[np.ndarray, np.ndarray]:
    """Split visits into training and test rows; every subject keeps training rows.

    Parameters
    ----------
    mode : {'holdout', 'last', 'fraction'}
        ``holdout``: ``n_test`` random visits per subject are held out (needs
        ``n_i > n_test``); ``last``: each subject's last ``n_test`` visits;
        ``fraction``: a random ``fraction`` of each subject's visits (at least one
        visit stays in training).

    Returns
    -------
    train, test : ndarray of int
        Sorted, disjoint row indices covering all rows.
    """
    if mode not in SPLIT_MODES:
        raise ConfigurationError(f"unknown split mode {mode!r}")
    rng = np.random.default_rng() if rng is None else rng
    test = []
    for i in range(dataset.n_subjects):
        rows = dataset.subject_rows(i)
        if rows.size == 0:
            continue
        if mode in ("holdout", "last") and rows.size <= n_test:
            raise ConfigurationError(
                f"subject {dataset.subject_labels[i]} has {rows.size} visits; "
                f"cannot hold out {n_test}")
        if mode == "holdout":
            test.append(rng.choice(rows, size=n_test, replace=False))
        elif mode == "last":
            test.append(rows[np.argsort(dataset.t[rows])[-n_test:]])
        else:
            m = min(int(round(fraction * rows.size)), rows.size - 1)
            test.append(rng.choice(rows, size=m, replace=False))
    test_idx = np.sort(np.concatenate(test)) if test else np.zeros(0, int)
    mask = np.ones(dataset.n_visits, bool)
    mask[test_idx] = False
    return np.flatnonzero(mask), test_idx


def prediction_error(y, y_hat, subject) -> float:
    """``sqrt( mean_i [ mean_j (y_ij - y_hat_ij)^2 ] )`` over the subjects present."""
    y = np.asarray(y, float)
    y_hat = np.asarray(y_hat, float)
    subject = np.asarray(subject)
    if y.size == 0:
        raise MetricError("prediction error of an empty set")
    if y.shape != y_hat.shape or subject.shape != y.shape:
        raise MetricError("misaligned inputs")
    codes, inv = np.unique(subject, return_inverse=True)
    sums = np.bincount(inv, weights=(y - y_hat) ** 2)
    counts = np.bincount(inv)
    return float(np.sqrt(np.mean(sums / counts)))


def trajectory_error(y_full, y_hat_full) -> float:
    """Root mean prediction error over whole trajectories (subjects x grid)."""
    y_full = np.asarray(y_full, float)
    y_hat_full = np.asarray(y_hat_full, float)
    if y_full.size == 0:
        raise MetricError("trajectory error of an empty set")
    return float(np.sqrt(np.mean(np.mean((y_full - y_hat_full) ** 2, axis=1))))


def band_coverage(y_full, lower, upper) -> Tuple[float, float]:
    """Average pointwise coverage and average band length."""
    y_full = np.asarray(y_full, float)
    if y_full.size == 0:
        raise MetricError("coverage of an empty set")
    inside = (y_full >= lower) & (y_full <= upper)
    return float(inside.mean()), float(np.mean(np.asarray(upper) - np.asarray(lower)))


def true_positive_rate(y, mu) -> float:
    """Share of observed successes predicted as successes (``mu >= 0.5``)."""
    y = np.asarray(y)
    pos = y == 1
    if not pos.any():
        raise MetricError("no successes to classify")
    return float(np.mean(np.asarray(mu)[pos] >= 0.5))


@dataclass
class ReplicateResult:
    """Metrics of one Monte Carlo replicate (``nan`` where not computed)."""

    seed: int
    in_pe: float = np.nan
    out_pe: float = np.nan
    rmpe_existing: float = np.nan
    rmpe_new: float = np.nan
    coverage_95: float = np.nan
    length_95: float = np.nan
    coverage_90: float = np.nan
    length_90: float = np.nan
    coverage_new_95: float = np.nan
    length_new_95: float = np.nan
    coverage_new_90: float = np.nan
    length_new_90: float = np.nan
    tpr: float = np.nan
    k: int = -1
    seconds: float = np.nan
    error: str = ""
    scenario: str = ""

    @classmethod
    def fields(cls) -> List[str]:
        return list(cls.__dataclass_fields__)

    def as_row(self) -> Dict[str, object]:
        return {f: getattr(self, f) for f in self.fields()}


METRIC_TASKS = ("split", "trajectory", "bands")


def scenario_tag(config: ScenarioConfig) -> str:
    """Compact label such as ``sparse/B1/D1ii/E1/delta=2/I=100``."""
    return (f"{config.design}/{config.noise}/{config.response}/{config.effect}/"
            f"delta={config.delta:g}/I={config.n_subjects}")


def _split_seed(seed: int) -> np.random.Generator:
    return _substreams(seed, 4)[2]


def _new_subjects_seed(seed: int) -> int:
    return int(np.random.SeedSequence(seed).spawn(4)[3].generate_state(1)[0])


def run_replicate(config: ScenarioConfig, seed: Optional[int] = None,
                  tasks: Tuple[str, ...] = ("split",), model_config=None,
                  n_new: Optional[int] = None) -> ReplicateResult:
    """Generate one dataset and evaluate the estimator on it.

    Parameters
    ----------
    config : ScenarioConfig
    seed : int, optional
        Replicate seed (defaults to ``config.seed``).
    tasks : tuple of {'split', 'trajectory', 'bands'}
        ``split``: fit on training rows (five held-out visits per subject) and
        report IN/OUT errors (for binary data: linear-predictor errors and TPR);
        ``trajectory``: fit on all rows and report whole-trajectory errors for
        existing and new subjects; ``bands``: 95% and 90% band coverage and
        length for the same full-data fit.
    model_config : LdfrConfig, optional
    n_new : int, optional
        Number of new subjects (default ``config.n_subjects``).
    """
    import time

    from ldfr.pipeline import LDFR, LdfrConfig
    from ldfr.regression import LdfrModelSpec

    bad = set(tasks) - set(METRIC_TASKS)
    if bad:
        raise ConfigurationError(f"unknown tasks {sorted(bad)}")
    seed = config.seed if seed is None else int(seed)
    if model_config is None:
        link = "logit" if config.binary else "identity"
        model_config = LdfrConfig(model=LdfrModelSpec(link=link, random_effects="intercept"))
    if model_config.t_domain is None:
        model_config = dataclasses.replace(model_config, t_domain=(0.0, 1.0))
    start = time.perf_counter()
    data = generate_scenario(config, seed)
    ds = data.dataset
    res = ReplicateResult(seed=seed, scenario=scenario_tag(config))

    if "split" in tasks:
        train, test = train_test_split(ds, "holdout", _split_seed(seed))
        model = LDFR(model_config).fit(ds, response_rows=train)
        res.k = model.k
        if config.binary:
            eta = model.linear_predictor_rows()
            omega = data.mu_full[ds.subject, data.visit_index]
            res.in_pe = prediction_error(omega[train], eta[train], ds.subject[train])
            res.out_pe = prediction_error(omega[test], eta[test], ds.subject[test])
            res.tpr = true_positive_rate(ds.y[train], 1 / (1 + np.exp(-eta[train])))
        else:
            pred = model.predict_rows()
            res.in_pe = prediction_error(ds.y[train], pred[train], ds.subject[train])
            res.out_pe = prediction_error(ds.y[test], pred[test], ds.subject[test])

    if {"trajectory", "bands"} & set(tasks):
        model = LDFR(model_config).fit(ds)
        res.k = model.k
        t = data.t_grid
        gaussian = not config.binary
        new_cfg = ScenarioConfig(**{**config.__dict__, "n_subjects": n_new or config.n_subjects})
        new = generate_scenario(new_cfg, _new_subjects_seed(seed))
        target = "y_full" if gaussian else "mu_full"
        fits_e, fits_n = [], []
        bands = {0.95: ([], [], [], []), 0.90: ([], [], [], [])}
        for i in range(ds.n_subjects):
            p = model.predict_existing(i, t, by_code=True)
            fits_e.append(p.y_hat if gaussian else p.linear_predictor)
            if "bands" in tasks and gaussian:
                for lev, store in bands.items():
                    b = model.band(p, lev)
                    store[0].append(b.lower)
                    store[1].append(b.upper)
        for i in range(new.dataset.n_subjects):
            rows = new.dataset.subject_rows(i)
            p = model.predict_new(new.dataset.w[rows], new.dataset.t[rows], t)
            fits_n.append(p.y_hat if gaussian else p.linear_predictor)
            if "bands" in tasks and gaussian:
                for lev, store in bands.items():
                    b = model.band(p, lev)
                    store[2].append(b.lower)
                    store[3].append(b.upper)
        if "trajectory" in tasks:
            res.rmpe_existing = trajectory_error(getattr(data, target), np.array(fits_e))
            res.rmpe_new = trajectory_error(getattr(new, target), np.array(fits_n))
        if "bands" in tasks and gaussian:
            for lev, (lo_e, hi_e, lo_n, hi_n) in bands.items():
                tag = "95" if lev == 0.95 else "90"
                cov, length = band_coverage(data.y_full, np.array(lo_e), np.array(hi_e))
                setattr(res, f"coverage_{tag}", cov)
                setattr(res, f"length_{tag}", length)
                cov, length = band_coverage(new.y_full, np.array(lo_n), np.array(hi_n))
                setattr(res, f"coverage_new_{tag}", cov)
                setattr(res, f"length_new_{tag}", length)
    res.seconds = time.perf_counter() - start
    return res


def replicate_seeds(seed: int, n: int) -> List[int]:
    """Independent per-replicate seeds derived from one master seed."""
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def _safe_replicate(args):
    config, seed, tasks, model_config = args
    try:
        return run_replicate(config, seed, tasks, model_config)
    except Exception as exc:  # recorded, the run continues
        logger.warning("replicate with seed %d failed: %s", seed, exc)
        return ReplicateResult(seed=seed, error=f"{type(exc).__name__}: {exc}",
                               scenario=scenario_tag(config))


def run_replicates(config: ScenarioConfig, n_replicates: int, seed: Optional[int] = None,
                   tasks: Tuple[str, ...] = ("split",), threads: int = 1,
                   model_config=None) -> List[ReplicateResult]:
    """Run replicates (in worker processes when ``threads > 1``).

    Results come back in seed order whatever the scheduling; failed replicates
    carry their error message and ``nan`` metrics.
    """
    seeds = replicate_seeds(config.seed if seed is None else seed, n_replicates)
    jobs = [(config, s, tuple(tasks), model_config) for s in seeds]
    if threads <= 1:
        return [_safe_replicate(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_safe_replicate, jobs))


# ---------------------------------------------------------------------------
# result files and summaries

SUMMARY_METRICS = ("in_pe", "out_pe", "rmpe_existing", "rmpe_new", "coverage_95", "length_95",
                   "coverage_90", "length_90", "coverage_new_95", "length_new_95",
                   "coverage_new_90", "length_new_90", "tpr", "seconds")


def write_results_csv(results: List[ReplicateResult], path, header: Optional[Dict] = None,
                      append: bool = False) -> None:
    """Write one row per replicate; ``header`` (config and seed) goes in ``#`` comment lines."""
    import csv
    import json
    import os

    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", newline="") as fh:
        # every appended block carries its own config/seed comment line
        if header:
            fh.write("# " + json.dumps(header, sort_keys=True, default=str) + "\n")
        writer = csv.DictWriter(fh, fieldnames=ReplicateResult.fields())
        if not exists:
            writer.writeheader()
        for r in results:
            writer.writerow(r.as_row())


def read_results_csv(path) -> Tuple[List[ReplicateResult], List[Dict]]:
    """Read a results file; returns the rows and every embedded header."""
    import csv
    import json

    headers, lines = [], []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                headers.append(json.loads(line[1:].strip()))
            else:
                lines.append(line)
    rows = []
    for rec in csv.DictReader(lines):
        kwargs = {}
        for name, value in rec.items():
            if name == "seed" or name == "k":
                kwargs[name] = int(value)
            elif name in ("error", "scenario"):
                kwargs[name] = value
            else:
                kwargs[name] = float(value) if value not in ("", None) else np.nan
        rows.append(ReplicateResult(**kwargs))
    return rows, headers


def summarize(results: List[ReplicateResult]) -> Dict[str, Tuple[float, float]]:
    """Median and interquartile range of every metric over successful replicates."""
    ok = [r for r in results if not r.error]
    out = {}
    for name in SUMMARY_METRICS:
        vals = np.array([getattr(r, name) for r in ok], float)
        vals = vals[np.isfinite(vals)]
        if vals.size:
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            out[name] = (float(med), float(q3 - q1))
    return out


def format_summary(results: List[ReplicateResult], title: str = "") -> str:
    """Table-style block: ``metric  median (IQR)`` lines."""
    summ = summarize(results)
    failed = sum(1 for r in results if r.error)
    lines = [title] if title else []
    lines.append(f"replicates: {len(results)} (failed: {failed})")
    for name, (med, iqr) in summ.items():
        lines.append(f"  {name:<16s} {med:.2f} ({iqr:.2f})")
    return "\n".join(lines)
