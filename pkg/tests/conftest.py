import math
from pathlib import Path

import numpy as np
import pytest

from lcprf.calibration import LcpModel
from lcprf.forest import RandomForest

DATA = Path(__file__).parent / "data"


def random_instance(seed, n_max=50, ties=None):
    """Small random localizer problem: (model, x_test, rng)."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, n_max + 1))
    d = int(rng.integers(1, 4))
    X = rng.uniform(size=(n, d))
    V = np.abs(rng.normal(size=n)) * (1 + X[:, 0])
    if ties if ties is not None else seed % 7 == 0:
        V = np.round(V, 1)
    forest = RandomForest(
        n_estimators=int(rng.integers(1, 6)),
        min_samples_leaf=int(rng.integers(1, min(4, n + 1))),
        max_features=d,
        bootstrap=bool(seed % 3),
        random_state=seed,
    ).fit(X, V)
    alpha = float(rng.uniform(0.05, 0.3))
    return LcpModel(forest, alpha), rng.uniform(size=d), rng


def single_leaf_model(V, alpha, d=2, seed=0):
    """Localizer whose every tree is one leaf holding every row once."""
    V = np.asarray(V, dtype=float)
    X = np.random.default_rng(seed).uniform(size=(V.size, d))
    forest = RandomForest(n_estimators=3, min_samples_leaf=V.size, bootstrap=False, random_state=seed).fit(X, V)
    return LcpModel(forest, alpha)


def split_order_stat(V, alpha):
    k = math.ceil((1 - alpha) * (len(V) + 1) - 1e-9)
    return math.inf if k > len(V) else float(np.sort(V)[k - 1])


@pytest.fixture
def data_dir():
    return DATA
