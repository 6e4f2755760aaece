"""Continuous occupancy model: kernel features, logistic prediction, SGD
training from range scans, and closed-form occupancy/entropy gradients.

The map is a logistic regression classifier over an approximate kernel
feature projection. Occupancy anywhere is ``sigmoid(w @ features(x))``,
so spatial gradients of occupancy and entropy are analytic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import as_points, coerce_rng, entropy_bits, entropy_slope, sigmoid

log = logging.getLogger("nbp.hilbert_map")

SPARSE_RBF = "sparse-rbf"
RANDOM_FOURIER = "random-fourier"

# Grid features farther than this many lengthscales from a query are treated
# as zero. exp(-8^2/2) ~ 1.3e-14, below every tolerance used on gradients.
_WINDOW_LENGTHSCALES = 8.0


class FeatureMap:
    """Feature projection approximating an RBF kernel inner product.

    Two kinds are supported:

    * ``sparse-rbf``: one Gaussian bump per inducing point on a regular
      grid; feature i is exp(-|x - x_i|^2 / (2 l^2)), in [0, 1].
    * ``random-fourier``: cos(w_j @ x + b_j) features with frequencies
      drawn from the kernel's spectral density.

    Every feature vector carries a leading bias entry fixed at 1, so the
    full dimension is ``feature_count + 1``.
    """

    def __init__(self, kind: str, lengthscale: float, *,
                 grid_origin=None, grid_shape=None,
                 freqs=None, phases=None, rff_seed=None):
        if lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        self.kind = kind
        self.lengthscale = float(lengthscale)
        if kind == SPARSE_RBF:
            self.grid_origin = np.asarray(grid_origin, dtype=float)
            self.grid_shape = (int(grid_shape[0]), int(grid_shape[1]))
            self.pitch = self.lengthscale
            self._freqs = None
            self._phases = None
            self.rff_seed = None
        elif kind == RANDOM_FOURIER:
            self._freqs = np.asarray(freqs, dtype=float)
            self._phases = np.asarray(phases, dtype=float)
            self.rff_seed = rff_seed
            self.grid_origin = None
            self.grid_shape = None
        else:
            raise ValueError(f"unknown feature kind {kind!r}")

    # -- constructors ------------------------------------------------------

    @classmethod
    def grid(cls, bounds, lengthscale: float, margin: float = 1.0) -> "FeatureMap":
        """Sparse RBF features on a regular grid covering ``bounds``.

        bounds = (xmin, ymin, xmax, ymax); grid pitch equals the
        lengthscale. ``margin`` extends the grid past the bounds so edge
        queries keep full support.
        """
        xmin, ymin, xmax, ymax = (float(b) for b in bounds)
        origin = np.array([xmin - margin, ymin - margin])
        nx = int(np.ceil((xmax - xmin + 2 * margin) / lengthscale)) + 1
        ny = int(np.ceil((ymax - ymin + 2 * margin) / lengthscale)) + 1
        return cls(SPARSE_RBF, lengthscale, grid_origin=origin, grid_shape=(nx, ny))

    @classmethod
    def random_fourier(cls, lengthscale: float, count: int, seed: int = 0) -> "FeatureMap":
        rng = np.random.default_rng(seed)
        freqs = rng.normal(0.0, 1.0 / lengthscale, size=(count, 2))
        phases = rng.uniform(0.0, 2 * np.pi, size=count)
        return cls(RANDOM_FOURIER, lengthscale, freqs=freqs, phases=phases, rff_seed=seed)

    # -- geometry ----------------------------------------------------------

    @property
    def feature_count(self) -> int:
        if self.kind == SPARSE_RBF:
            return self.grid_shape[0] * self.grid_shape[1]
        return self._freqs.shape[0]

    @property
    def dim(self) -> int:
        """Full feature dimension including the bias entry."""
        return self.feature_count + 1

    def inducing_points(self) -> np.ndarray:
        """(feature_count, 2) grid locations (sparse-rbf only)."""
        if self.kind != SPARSE_RBF:
            raise ValueError("inducing points exist only for sparse-rbf features")
        nx, ny = self.grid_shape
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        pts = np.stack([ix.ravel(), iy.ravel()], axis=1) * self.pitch
        return pts + self.grid_origin

    # -- sparse window evaluation (hot path) --------------------------------

    def _offsets(self, w: int):
        cache = getattr(self, "_offset_cache", None)
        if cache is None:
            cache = self._offset_cache = {}
        if w not in cache:
            offs = np.arange(-w, w + 1)
            ox, oy = np.meshgrid(offs, offs, indexing="ij")
            ox, oy = ox.ravel(), oy.ravel()
            cache[w] = (ox, oy, ox * self.pitch, oy * self.pitch)
        return cache[w]

    def _window(self, X: np.ndarray, radius_ls: float = _WINDOW_LENGTHSCALES,
                grads: bool = False):
        """Windowed feature values (and optionally spatial gradients) at X.

        Returns (idx, val) or (idx, val, gvx, gvy); all (N, K). idx maps
        into the full weight vector (bias at 0, so offset by +1); features
        outside the grid contribute zero value.
        """
        nx, ny = self.grid_shape
        w = int(np.ceil(radius_ls * self.lengthscale / self.pitch))
        ox, oy, oxp, oyp = self._offsets(w)
        inv = 1.0 / self.pitch
        bx = np.rint((X[:, 0:1] - self.grid_origin[0]) * inv).astype(np.int64)
        by = np.rint((X[:, 1:2] - self.grid_origin[1]) * inv).astype(np.int64)
        dx = (X[:, 0:1] - self.grid_origin[0] - bx * self.pitch) - oxp
        dy = (X[:, 1:2] - self.grid_origin[1] - by * self.pitch) - oyp
        val = np.exp((dx * dx + dy * dy) * (-0.5 / self.lengthscale ** 2))
        interior = (bx.min() >= w and bx.max() < nx - w
                    and by.min() >= w and by.max() < ny - w)
        gx = bx + ox
        gy = by + oy
        if not interior:
            valid = (gx >= 0) & (gx < nx) & (gy >= 0) & (gy < ny)
            val = np.where(valid, val, 0.0)
            gx = np.where(valid, gx, 0)
            gy = np.where(valid, gy, 0)
        idx = gx * ny + gy + 1
        if not grads:
            return idx, val
        scale = -1.0 / self.lengthscale ** 2
        return idx, val, dx * val * scale, dy * val * scale

    def sparse_values(self, X: np.ndarray, radius_ls: float = _WINDOW_LENGTHSCALES):
        """(idx, val) arrays for windowed feature values at X (N, 2)."""
        return self._window(X, radius_ls)

    # -- dense evaluation (reference surface) -------------------------------

    def compute(self, x) -> np.ndarray:
        """Full feature vector(s) at x: shape (dim,) or (N, dim), bias first."""
        X, single = as_points(x)
        n = X.shape[0]
        out = np.zeros((n, self.dim))
        out[:, 0] = 1.0
        if self.kind == SPARSE_RBF:
            idx, val = self.sparse_values(X)
            rows = np.repeat(np.arange(n), idx.shape[1])
            out[rows, idx.ravel()] += val.ravel()
        else:
            arg = X @ self._freqs.T + self._phases
            out[:, 1:] = np.sqrt(2.0 / self.feature_count) * np.cos(arg)
        return out[0] if single else out

    def jacobian(self, x) -> np.ndarray:
        """Spatial gradient of every feature: (dim, 2) or (N, dim, 2).

        The bias row is zero.
        """
        X, single = as_points(x)
        n = X.shape[0]
        out = np.zeros((n, self.dim, 2))
        if self.kind == SPARSE_RBF:
            idx, _, gvx, gvy = self._window(X, grads=True)
            rows = np.repeat(np.arange(n), idx.shape[1])
            out[rows, idx.ravel(), 0] += gvx.ravel()
            out[rows, idx.ravel(), 1] += gvy.ravel()
        else:
            arg = X @ self._freqs.T + self._phases
            coef = -np.sqrt(2.0 / self.feature_count) * np.sin(arg)
            out[:, 1:, :] = coef[:, :, None] * self._freqs[None, :, :]
        return out[0] if single else out

    # -- serialization -------------------------------------------------------

    def spec_dict(self) -> dict:
        d = {"feature_kind": self.kind, "lengthscale": self.lengthscale}
        if self.kind == SPARSE_RBF:
            d["grid_origin"] = list(self.grid_origin)
            d["grid_shape"] = list(self.grid_shape)
        else:
            d["feature_count"] = self.feature_count
            d["rff_seed"] = self.rff_seed
        return d

    @classmethod
    def from_spec_dict(cls, d: dict) -> "FeatureMap":
        if d["feature_kind"] == SPARSE_RBF:
            return cls(SPARSE_RBF, d["lengthscale"],
                       grid_origin=d["grid_origin"], grid_shape=d["grid_shape"])
        return cls.random_fourier(d["lengthscale"], d["feature_count"], d["rff_seed"])


@dataclass
class ScanDataset:
    """Labeled range-scan points: +1 occupied at beam hits, -1 free along
    the beam strictly between origin and endpoint."""

    points: np.ndarray          # (N, 2)
    labels: np.ndarray          # (N,) in {-1, +1}
    origin_pose: np.ndarray     # (3,) x, y, heading

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=float).reshape(-1)
        self.origin_pose = np.asarray(self.origin_pose, dtype=float).reshape(-1)

    def __len__(self) -> int:
        return self.points.shape[0]


class HilbertMap:
    """Logistic occupancy model over a feature projection.

    Queries (predict, gradients, entropy) are pure reads, safe for
    concurrent callers. ``train_sgd`` mutates the weights and needs
    exclusive access.
    """

    def __init__(self, features: FeatureMap, *, l1: float = 1e-4, l2: float = 1e-4,
                 sgd_step: float = 0.1, pos_weight_cap: float = 10.0,
                 weights: np.ndarray | None = None):
        self.features = features
        self.l1 = float(l1)
        self.l2 = float(l2)
        self.sgd_step = float(sgd_step)
        self.pos_weight_cap = float(pos_weight_cap)
        if weights is None:
            self.weights = np.zeros(features.dim)
        else:
            self.weights = np.asarray(weights, dtype=float).copy()
            if self.weights.shape != (features.dim,):
                raise ValueError("weights dimension must equal feature dimension")
        self.dataset_count = 0

    def copy(self) -> "HilbertMap":
        m = HilbertMap(self.features, l1=self.l1, l2=self.l2,
                       sgd_step=self.sgd_step, pos_weight_cap=self.pos_weight_cap,
                       weights=self.weights)
        m.dataset_count = self.dataset_count
        return m

    # -- queries -------------------------------------------------------------

    def logit(self, x, radius_ls: float = _WINDOW_LENGTHSCALES):
        """w @ features(x); scalar or (N,).

        ``radius_ls`` narrows the feature window for bulk threshold checks
        where sub-1e-3 logit accuracy is irrelevant.
        """
        X, single = as_points(x)
        if self.features.kind == SPARSE_RBF:
            f = np.empty(X.shape[0])
            for lo in range(0, X.shape[0], 4096):
                sl = slice(lo, lo + 4096)
                idx, val = self.features.sparse_values(X[sl], radius_ls)
                f[sl] = self.weights[0] + np.einsum("nk,nk->n", val, self.weights[idx])
        else:
            f = self.features.compute(X) @ self.weights
        return float(f[0]) if single else f

    def predict(self, x):
        """Occupancy probability, strictly inside (0, 1)."""
        return sigmoid(self.logit(x))

    def logit_and_gradient(self, x,
                           radius_ls: float = _WINDOW_LENGTHSCALES) -> tuple[np.ndarray, np.ndarray]:
        """(logits (N,), logit gradients (N, 2)) from one feature pass."""
        X, _ = as_points(x)
        if self.features.kind == SPARSE_RBF:
            idx, val, gvx, gvy = self.features._window(X, radius_ls, grads=True)
            wv = self.weights[idx]
            f = self.weights[0] + np.einsum("nk,nk->n", val, wv)
            g = np.stack([np.einsum("nk,nk->n", gvx, wv),
                          np.einsum("nk,nk->n", gvy, wv)], axis=1)
        else:
            f = self.features.compute(X) @ self.weights
            g = np.einsum("d,ndk->nk", self.weights, self.features.jacobian(X))
        return f, g

    def logit_gradient(self, x):
        """Spatial gradient of the log-odds: (2,) or (N, 2)."""
        X, single = as_points(x)
        g = self.logit_and_gradient(X)[1]
        return g[0] if single else g

    def occupancy_gradient(self, x):
        """Closed-form spatial gradient of predict: sigma (1 - sigma) grad-logit."""
        X, single = as_points(x)
        f, lg = self.logit_and_gradient(X)
        s = sigmoid(f)
        g = (s * (1.0 - s))[:, None] * lg
        return g[0] if single else g

    def entropy(self, x):
        """Occupancy entropy in bits."""
        return entropy_bits(self.predict(x))

    def entropy_gradient(self, x):
        """Spatial entropy gradient: dH/dp * grad p."""
        X, single = as_points(x)
        f, lg = self.logit_and_gradient(X)
        p = sigmoid(f)
        g = (np.asarray(entropy_slope(p)) * p * (1.0 - p))[:, None] * lg
        return g[0] if single else g

    # -- training --------------------------------------------------------------

    def scan_pos_weight(self, scan: ScanDataset) -> float:
        """Occupied-class weight balancing a scan's free/occupied counts.

        Beam endpoints are rare next to the free samples lining every
        beam; unweighted training smears thin obstacles into low
        occupancy. Capped by ``pos_weight_cap``.
        """
        n_occ = int(np.sum(scan.labels > 0))
        n_free = len(scan) - n_occ
        if n_occ == 0:
            return 1.0
        return float(min(self.pos_weight_cap, max(1.0, n_free / n_occ)))

    def train_sgd(self, scan: ScanDataset, epochs: int = 1, *,
                  batch_size: int = 64, seed=0) -> "HilbertMap":
        """Mini-batch SGD on the elastic-net regularized logistic NLL,
        with the occupied class weighted by ``scan_pos_weight``.

        Incremental: the current weights are the starting point, so maps
        stay consistent across sequential scans. The step size decays as
        1/sqrt(epoch) within the call. The bias weight stays pinned at
        zero so unsensed space keeps even odds. Returns self.
        """
        if len(scan) == 0:
            log.warning("train_sgd called with empty scan; weights unchanged")
            return self
        if epochs <= 0:
            return self
        rng = coerce_rng(seed)
        X = scan.points
        y = scan.labels
        n = len(scan)
        w_pos = self.scan_pos_weight(scan)
        sparse = self.features.kind == SPARSE_RBF
        if sparse:
            idx_all, val_all = self.features.sparse_values(X)
        else:
            phi_all = self.features.compute(X)
        for epoch in range(int(epochs)):
            lr = self.sgd_step / np.sqrt(epoch + 1.0)
            order = rng.permutation(n)
            for lo in range(0, n, batch_size):
                sel = order[lo:lo + batch_size]
                m = sel.size
                if sparse:
                    idx, val = idx_all[sel], val_all[sel]
                    f = self.weights[0] + np.einsum("nk,nk->n", val, self.weights[idx])
                else:
                    phi = phi_all[sel]
                    f = phi @ self.weights
                # d/df log(1 + exp(-y f)) = -y * sigmoid(-y f); batch updates
                # sum per-point gradients (per-sample SGD applied batch-wise)
                coef = -y[sel] * sigmoid(-y[sel] * f)
                coef = np.where(y[sel] > 0, w_pos * coef, coef)
                reg = self.l1 * np.sign(self.weights) + self.l2 * self.weights
                reg[0] = 0.0
                if sparse:
                    self.weights -= lr * reg
                    upd = lr * (coef[:, None] * val)
                    np.subtract.at(self.weights, idx.ravel(), upd.ravel())
                else:
                    grad = coef @ phi + reg
                    grad[0] = 0.0
                    self.weights -= lr * grad
        self.dataset_count += 1
        return self

    def regularized_nll(self, points, labels, pos_weight: float = 1.0) -> float:
        """Sum logistic NLL plus elastic-net penalty (bias excluded)."""
        X, _ = as_points(points)
        y = np.asarray(labels, dtype=float)
        f = np.atleast_1d(self.logit(X))
        losses = np.logaddexp(0.0, -y * f)
        losses = np.where(y > 0, pos_weight * losses, losses)
        nll = np.sum(losses)
        w = self.weights[1:]
        return float(nll + self.l1 * np.abs(w).sum() + 0.5 * self.l2 * w @ w)

    # -- snapshot ----------------------------------------------------------------

    def save_snapshot(self, path: str | Path) -> None:
        d = self.features.spec_dict()
        d["weights"] = self.weights.tolist()
        Path(path).write_text(json.dumps(d))

    @classmethod
    def load_snapshot(cls, path: str | Path) -> "HilbertMap":
        d = json.loads(Path(path).read_text())
        fm = FeatureMap.from_spec_dict(d)
        return cls(fm, weights=np.asarray(d["weights"], dtype=float))


# Functional aliases matching the operation-level surface.

def compute_features(fm: FeatureMap, x) -> np.ndarray:
    return fm.compute(x)


def compute_feature_jacobian(fm: FeatureMap, x) -> np.ndarray:
    return fm.jacobian(x)


def predict_occupancy(m: HilbertMap, x):
    return m.predict(x)


def occupancy_gradient(m: HilbertMap, x):
    return m.occupancy_gradient(x)


def entropy(m: HilbertMap, x):
    return m.entropy(x)


def entropy_gradient(m: HilbertMap, x):
    return m.entropy_gradient(x)


def train_sgd(m: HilbertMap, scan: ScanDataset, epochs: int = 1, **kw) -> HilbertMap:
    return m.train_sgd(scan, epochs, **kw)
