import sys
from pathlib import Path

import numpy as np
import pytest

from crowdlgp.annotators import unstack
from crowdlgp.data import LabelMatrix

sys.path.insert(0, str(Path(__file__).parent))

DATA_DIR = Path(__file__).parent / "data"


def random_instance(rng, n=30, d=5, t=3, missing=0.3, scale=0.5):
    """Random features, partially observed labels and moderate parameters.

    Parameters are kept small so that sigma stays well away from its floor.
    """
    X = rng.normal(size=(n, d))
    values = rng.integers(0, 2, size=(n, t))
    observed = rng.random((n, t)) > missing
    labels = LabelMatrix(values, observed)
    coef = rng.normal(scale=scale, size=d)
    intercept = float(rng.normal(scale=scale))
    W = rng.normal(scale=scale / np.sqrt(d), size=(t, d))
    gamma = rng.normal(scale=scale, size=t)
    return X, labels, coef, intercept, W, gamma, unstack(W, gamma)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ionosphere_path():
    return DATA_DIR / "ionosphere.csv"


def two_blob_problem(seed, n=200, error=0.4, sep=6.0):
    """Two Gaussian blobs along x1; truth is the sign of x2 in both blobs.

    Annotator t copies the truth on blob t and flips a fraction ``error`` of
    the labels on the other blob.
    """
    rng = np.random.default_rng(seed)
    half = n // 2
    blob = np.r_[np.zeros(half, dtype=int), np.ones(n - half, dtype=int)]
    X = rng.normal(size=(n, 2))
    X[:, 0] += np.where(blob == 0, -sep / 2, sep / 2)
    z = (X[:, 1] > 0).astype(np.int8)
    values = np.tile(z[:, None], (1, 2))
    for t in (0, 1):
        off = np.flatnonzero(blob != t)
        flip = rng.choice(off, size=int(round(error * len(off))), replace=False)
        values[flip, t] = 1 - values[flip, t]
    return X, z, blob, LabelMatrix(values, np.ones_like(values, dtype=bool))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
