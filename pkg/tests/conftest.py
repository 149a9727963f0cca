import os
import sys

import numpy as np
import pytest

# Ensure the project root is on sys.path so 'core' and 'mean_models' are importable
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from core.models import CovariateSpec, TrialDataset  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="lance aussi les tests statistiques longs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: test statistique long (active avec --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="necessite --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_dataset(treat, survive, outcome, X, names=None, kinds=None) -> TrialDataset:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    K = X.shape[1]
    names = tuple(names or [f"x{k + 1}" for k in range(K)])
    kinds = tuple(kinds or ["continuous"] * K)
    n = X.shape[0]
    return TrialDataset(
        ids=np.array([f"u{i:03d}" for i in range(n)]),
        treat=np.asarray(treat, dtype=np.int8),
        survive=np.asarray(survive, dtype=np.int8),
        outcome=np.asarray(outcome, dtype=float),
        covariates=X,
        covariate_spec=CovariateSpec(names=names, kinds=kinds),
    )


@pytest.fixture
def small_trial():
    """Eight units, two per observed group, one continuous covariate."""
    treat = [1, 1, 1, 1, 0, 0, 0, 0]
    survive = [1, 1, 0, 0, 1, 1, 0, 0]
    outcome = [2.0, 3.0, np.nan, np.nan, 1.0, 1.5, np.nan, np.nan]
    X = [0.1, 0.5, -0.3, 1.2, 0.0, -1.0, 0.7, 0.4]
    return make_dataset(treat, survive, outcome, X)
