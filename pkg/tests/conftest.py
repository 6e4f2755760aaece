import numpy as np
import pytest

from nbp.hilbert_map import FeatureMap, HilbertMap, ScanDataset


def fd_gradient(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar field at x."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(2)
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        out[d] = (f(x + e) - f(x - e)) / (2.0 * h)
    return out


def assert_grad_close(analytic, numeric, rel=1e-4, atol=1e-8):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    err = np.linalg.norm(analytic - numeric)
    assert err <= rel * np.linalg.norm(analytic) + atol, \
        f"gradient mismatch: analytic {analytic}, numeric {numeric}, err {err:.3e}"


def train_wall_map(lengthscale=0.5, seed=0):
    """Map trained on a synthetic vertical wall at x = 3 with free space west.

    Free labels fill [0.4, 2.6] x [0.4, 3.6]; occupied labels line x = 3.
    """
    rng = np.random.default_rng(seed)
    free = np.column_stack([rng.uniform(0.4, 2.6, 400), rng.uniform(0.4, 3.6, 400)])
    wall_y = np.linspace(0.4, 3.6, 60)
    occ = np.column_stack([np.full(60, 3.0), wall_y])
    pts = np.vstack([free, occ])
    labels = np.concatenate([-np.ones(400), np.ones(60)])
    fm = FeatureMap.grid((0, 0, 4, 4), lengthscale)
    m = HilbertMap(fm)
    m.train_sgd(ScanDataset(pts, labels, (1.5, 2.0, 0.0)), epochs=20, seed=seed)
    return m


def random_weight_map(seed=1, bounds=(0, 0, 4, 4), lengthscale=0.5, scale=1.0):
    fm = FeatureMap.grid(bounds, lengthscale)
    m = HilbertMap(fm)
    m.weights = np.random.default_rng(seed).normal(0.0, scale, fm.dim)
    m.weights[0] = 0.0
    return m


def train_blob_map(seed=2):
    """Map trained on two occupied blobs inside a free field."""
    rng = np.random.default_rng(seed)
    free = np.column_stack([rng.uniform(0.4, 3.6, 500), rng.uniform(0.4, 3.6, 500)])
    blob1 = rng.normal((1.2, 1.2), 0.15, (40, 2))
    blob2 = rng.normal((2.8, 2.6), 0.15, (40, 2))
    keep = np.linalg.norm(free - (1.2, 1.2), axis=1) > 0.5
    keep &= np.linalg.norm(free - (2.8, 2.6), axis=1) > 0.5
    pts = np.vstack([free[keep], blob1, blob2])
    labels = np.concatenate([-np.ones(keep.sum()), np.ones(80)])
    fm = FeatureMap.grid((0, 0, 4, 4), 0.5)
    m = HilbertMap(fm)
    m.train_sgd(ScanDataset(pts, labels, (2.0, 2.0, 0.0)), epochs=20, seed=seed)
    return m


@pytest.fixture(scope="session")
def wall_map():
    return train_wall_map()


@pytest.fixture(scope="session")
def blob_map():
    return train_blob_map()


@pytest.fixture(scope="session")
def random_map():
    return random_weight_map()
