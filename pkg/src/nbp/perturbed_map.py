"""Perturbed occupancy model: a GP over log-odds whose mean function is the
base map, conditioned on free-space pseudo-observations.

Conditioning the GP on a handful of expected observations approximates the
map after hypothetically taking those observations, without retraining.
Pointwise mutual information and its spatial gradient follow in closed
form from the entropy of the base and perturbed predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hilbert_map import HilbertMap
from .util import as_points, entropy_bits, entropy_slope, sigmoid

_JITTER_START = 1e-10
_JITTER_MAX = 1e-4


def free_space_log_odds(p_free: float) -> float:
    """Log-odds target for a confident free-space pseudo-observation."""
    if not 0.0 < p_free < 1.0:
        raise ValueError("p_free must lie in (0, 1)")
    return float(np.log(p_free / (1.0 - p_free)))


@dataclass
class PseudoObservations:
    """Expected free-space observations at the sensor's range limit."""

    points: np.ndarray          # (N, 2)
    log_odds: np.ndarray        # (N,) targets r_i, negative for free space
    source_pose: np.ndarray     # (3,) x, y, heading of the emitting pose

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.log_odds = np.asarray(self.log_odds, dtype=float).reshape(-1)
        self.source_pose = np.asarray(self.source_pose, dtype=float).reshape(-1)

    def __len__(self) -> int:
        return self.points.shape[0]


def _rbf(A: np.ndarray, B: np.ndarray, lengthscale: float) -> np.ndarray:
    """RBF kernel matrix between point sets A (N, 2) and B (M, 2)."""
    d2 = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=2)
    return np.exp(-d2 / (2.0 * lengthscale ** 2))


class PerturbedMap:
    """Base map conditioned on pseudo-observations via a GP posterior mean.

    The posterior log-odds at x is

        psi(x) = base_logit(x) + sum_i alpha_i k(x, x_i)

    with alpha solving (K + noise I) alpha = min(r - base_logit(X_obs), 0).
    The residual clamp encodes that a free-space observation never raises
    occupancy: where the map already sits at or below the free target, the
    observation carries no information and leaves the model untouched.
    Immutable after construction; queries are pure.
    """

    def __init__(self, base: HilbertMap, obs: PseudoObservations,
                 gp_noise: float = 1e-2, kernel_lengthscale: float | None = None):
        self.base = base
        self.obs = obs
        self.gp_noise = float(gp_noise)
        self.kernel_lengthscale = float(kernel_lengthscale
                                        if kernel_lengthscale is not None
                                        else base.features.lengthscale)
        n = len(obs)
        if n == 0:
            self.alpha = np.zeros(0)
            return
        K = _rbf(obs.points, obs.points, self.kernel_lengthscale)
        resid = np.minimum(obs.log_odds - np.atleast_1d(base.logit(obs.points)), 0.0)
        self.alpha = self._solve(K + self.gp_noise * np.eye(n), resid)

    @staticmethod
    def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
        jitter = 0.0
        while True:
            try:
                x = np.linalg.solve(A + jitter * np.eye(A.shape[0]), b)
                if np.all(np.isfinite(x)):
                    return x
            except np.linalg.LinAlgError:
                pass
            jitter = _JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > _JITTER_MAX:
                cond = np.linalg.cond(A)
                raise np.linalg.LinAlgError(
                    f"pseudo-observation Gram system singular even with jitter "
                    f"{_JITTER_MAX:g} (condition estimate {cond:.3e})")

    # -- queries ---------------------------------------------------------------

    def logit(self, x):
        """Perturbed log-odds psi(x); scalar or (N,)."""
        X, single = as_points(x)
        f = np.atleast_1d(self.base.logit(X))
        if len(self.obs):
            f = f + _rbf(X, self.obs.points, self.kernel_lengthscale) @ self.alpha
        return float(f[0]) if single else f

    def predict(self, x):
        """Perturbed occupancy probability sigmoid(psi(x))."""
        if len(self.obs) == 0:
            return self.base.predict(x)
        return sigmoid(self.logit(x))

    def logit_gradient(self, x):
        X, single = as_points(x)
        g = np.atleast_2d(self.base.logit_gradient(X))
        if len(self.obs):
            k = _rbf(X, self.obs.points, self.kernel_lengthscale)
            diff = X[:, None, :] - self.obs.points[None, :, :]
            # grad_x k(x, x_i) = -k (x - x_i) / l^2
            gk = -(k * self.alpha)[:, :, None] * diff / self.kernel_lengthscale ** 2
            g = g + gk.sum(axis=1)
        return g[0] if single else g

    def gradient(self, x):
        """Spatial gradient of the perturbed occupancy probability."""
        X, single = as_points(x)
        if len(self.obs) == 0:
            g = np.atleast_2d(self.base.occupancy_gradient(X))
            return g[0] if single else g
        f = np.atleast_1d(self.logit(X))
        s = sigmoid(f)
        g = (s * (1.0 - s))[:, None] * np.atleast_2d(self.logit_gradient(X))
        return g[0] if single else g

    def entropy(self, x):
        return entropy_bits(self.predict(x))

    def entropy_gradient(self, x):
        X, single = as_points(x)
        p = np.atleast_1d(self.predict(X))
        g = np.asarray(entropy_slope(p))[:, None] * np.atleast_2d(self.gradient(X))
        return g[0] if single else g

    # -- mutual information -------------------------------------------------------

    def mi(self, m):
        """Pointwise MI: base entropy minus perturbed entropy at m, in bits.

        May be negative where conditioning moves the prediction toward 0.5;
        values are returned raw, not clipped. Without observations the
        models coincide, so MI is exactly zero.
        """
        X, single = as_points(m)
        if len(self.obs) == 0:
            v = np.zeros(X.shape[0])
        else:
            v = np.asarray(entropy_bits(np.atleast_1d(self.base.predict(X)))) \
                - np.asarray(entropy_bits(np.atleast_1d(self.predict(X))))
        return float(v[0]) if single else v

    def mi_gradient(self, m):
        """Spatial MI gradient: base entropy gradient minus perturbed one."""
        X, single = as_points(m)
        if len(self.obs) == 0:
            g = np.zeros((X.shape[0], 2))
        else:
            g = np.atleast_2d(self.base.entropy_gradient(X)) \
                - np.atleast_2d(self.entropy_gradient(X))
        return g[0] if single else g


def build_perturbed(base: HilbertMap, obs: PseudoObservations,
                    gp_noise: float = 1e-2) -> PerturbedMap:
    return PerturbedMap(base, obs, gp_noise)


def perturbed_predict(pm: PerturbedMap, x):
    return pm.predict(x)


def perturbed_gradient(pm: PerturbedMap, x):
    return pm.gradient(x)


def mi_point(pm: PerturbedMap, m):
    return pm.mi(m)


def mi_point_gradient(pm: PerturbedMap, m):
    return pm.mi_gradient(m)
