import numpy as np
import pytest

from ldfr.lfpca import fit_lfpca
from ldfr.pipeline import LDFR, LdfrConfig
from ldfr.regression import LdfrModelSpec
from ldfr.simulation import ScenarioConfig, generate_scenario


def principal_angles_deg(a, b, weights):
    """Principal angles (degrees) between column spans of ``a`` and ``b`` in a weighted L2."""
    root = np.sqrt(weights)[:, None]
    qa, _ = np.linalg.qr(a * root)
    qb, _ = np.linalg.qr(b * root)
    sv = np.clip(np.linalg.svd(qa.T @ qb, compute_uv=False), -1, 1)
    return np.degrees(np.arccos(sv))


@pytest.fixture(scope="session")
def scenario300():
    """Moderately sparse scenario data with 300 subjects and its predictor model."""
    data = generate_scenario(ScenarioConfig(n_subjects=300, design="moderate"), seed=2024)
    return data, fit_lfpca(data.dataset)


@pytest.fixture(scope="session")
def small_scenario():
    return generate_scenario(ScenarioConfig(n_subjects=40, design="sparse", delta=1.0), seed=5)


@pytest.fixture(scope="session")
def small_model(small_scenario):
    cfg = LdfrConfig(mean_knots=(12, 12), cov_knots=12, t_domain=(0.0, 1.0))
    return LDFR(cfg).fit(small_scenario.dataset)


@pytest.fixture(scope="session")
def moderate_model():
    data = generate_scenario(ScenarioConfig(n_subjects=60, design="moderate", delta=1.0), seed=8)
    cfg = LdfrConfig(mean_knots=(15, 15), cov_knots=15, t_domain=(0.0, 1.0),
                     model=LdfrModelSpec(random_effects="intercept"))
    return data, LDFR(cfg).fit(data.dataset)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
