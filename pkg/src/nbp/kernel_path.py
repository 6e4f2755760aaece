"""Trajectory representation over approximate kernel features of time.

A path is a weighted sum of random Fourier features of a 1D RBF kernel
over t in [0, 1], plus an initial guess and a boundary correction that
pins the start exactly for any weights:

    xi(t) = W' Y(t) - (1 - t) W' Y(0) + xi_o(t)

The kernel correlation between time points makes single-sample weight
updates deform the path smoothly around the sampled t.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import rotation

_HEADING_EPS = 1e-6


def time_kernel(t, tp, lengthscale: float = 0.15) -> np.ndarray:
    """Exact RBF kernel over time, the target of the feature approximation."""
    t = np.asarray(t, dtype=float)
    tp = np.asarray(tp, dtype=float)
    return np.exp(-((t - tp) ** 2) / (2.0 * lengthscale ** 2))


class TimeFeatures:
    """Random Fourier features of the 1D RBF time kernel, with analytic
    first and second derivatives."""

    def __init__(self, freqs: np.ndarray, phases: np.ndarray, lengthscale: float):
        self.freqs = np.asarray(freqs, dtype=float)
        self.phases = np.asarray(phases, dtype=float)
        self.lengthscale = float(lengthscale)
        self._scale = np.sqrt(2.0 / self.freqs.size)

    @classmethod
    def draw(cls, count: int = 200, lengthscale: float = 0.15, seed=0) -> "TimeFeatures":
        rng = np.random.default_rng(seed)
        freqs = rng.normal(0.0, 1.0 / lengthscale, size=count)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=count)
        return cls(freqs, phases, lengthscale)

    @property
    def count(self) -> int:
        return self.freqs.size

    def feats(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self._scale * np.cos(np.outer(t, self.freqs) + self.phases)

    def dfeats(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return -self._scale * self.freqs * np.sin(np.outer(t, self.freqs) + self.phases)

    def d2feats(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return -self._scale * self.freqs ** 2 * np.cos(np.outer(t, self.freqs) + self.phases)


class InitialPath:
    """Base initial guess; derivatives default to central differences."""

    _FD_H = 1e-6

    def eval(self, t) -> np.ndarray:
        raise NotImplementedError

    def velocity(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        h = self._FD_H
        tc = np.clip(t, h, 1.0 - h)
        return (self.eval(tc + h) - self.eval(tc - h)) / (2.0 * h)

    def acceleration(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        h = 1e-4  # second difference needs a wider stencil
        tc = np.clip(t, h, 1.0 - h)
        return (self.eval(tc + h) - 2.0 * self.eval(tc) + self.eval(tc - h)) / h ** 2


class LinePath(InitialPath):
    """Straight segment from start along a heading (or to an endpoint)."""

    def __init__(self, start, end):
        self.start = np.asarray(start, dtype=float)
        self.end = np.asarray(end, dtype=float)

    @classmethod
    def along_heading(cls, start_pose, length: float) -> "LinePath":
        p = np.asarray(start_pose, dtype=float)
        d = np.array([np.cos(p[2]), np.sin(p[2])])
        return cls(p[:2], p[:2] + length * d)

    def eval(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.start + t[:, None] * (self.end - self.start)

    def velocity(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.broadcast_to(self.end - self.start, (t.size, 2)).copy()

    def acceleration(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.zeros((t.size, 2))


class CallablePath(InitialPath):
    """Wraps an arbitrary t -> (x, y) function as an initial guess."""

    def __init__(self, fn):
        self.fn = fn

    def eval(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.asarray([self.fn(float(ti)) for ti in t], dtype=float).reshape(-1, 2)


class WaypointPath(InitialPath):
    """Piecewise-linear interpolation of waypoints, parameterized by
    normalized arc length."""

    def __init__(self, waypoints):
        wp = np.asarray(waypoints, dtype=float).reshape(-1, 2)
        if wp.shape[0] < 2:
            wp = np.vstack([wp, wp])
        seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        total = cum[-1]
        self.waypoints = wp
        self.knots = cum / total if total > 0 else np.linspace(0, 1, wp.shape[0])

    def eval(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.interp(t, self.knots, self.waypoints[:, 0])
        y = np.interp(t, self.knots, self.waypoints[:, 1])
        return np.stack([x, y], axis=1)


@dataclass
class BodyModel:
    """Body points in the robot frame, origin included."""

    offsets: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(-1, 2)

    @classmethod
    def disc(cls, radius: float = 0.2, ring_points: int = 8) -> "BodyModel":
        ang = np.linspace(0, 2 * np.pi, ring_points, endpoint=False)
        ring = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return cls(np.vstack([[0.0, 0.0], ring]))

    def inflated(self, margin: float) -> "BodyModel":
        """Body with ring offsets pushed outward by ``margin`` (checks only)."""
        out = self.offsets.copy()
        norms = np.linalg.norm(out, axis=1)
        ring = norms > 1e-9
        out[ring] *= ((norms[ring] + margin) / norms[ring])[:, None]
        return BodyModel(out)

    def __len__(self):
        return self.offsets.shape[0]


class KernelPath:
    """Kernel-feature trajectory with a pinned start.

    Evaluation is pure; ``update_weights`` returns a new path and leaves
    the receiver untouched.
    """

    def __init__(self, start_pose, time_features: TimeFeatures | None = None,
                 xi_o: InitialPath | None = None, weights: np.ndarray | None = None,
                 init_length: float = 2.0):
        self.start_pose = np.asarray(start_pose, dtype=float).reshape(3)
        self.tf = time_features if time_features is not None else TimeFeatures.draw()
        self.xi_o = xi_o if xi_o is not None else LinePath.along_heading(self.start_pose, init_length)
        if weights is None:
            self.weights = np.zeros((self.tf.count, 2))
        else:
            self.weights = np.asarray(weights, dtype=float).reshape(self.tf.count, 2)
        self._u0 = self.tf.feats(0.0)[0]

    def _check_t(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < -1e-12) or np.any(t > 1.0 + 1e-12):
            raise ValueError("path parameter t must lie in [0, 1]")
        return np.clip(t, 0.0, 1.0)

    # -- evaluation ---------------------------------------------------------

    def eval(self, t):
        tv = self._check_t(t)
        # Folding the boundary term into the feature row keeps xi(0) pinned
        # to the start bitwise: the t=0 row is exactly zero before the matmul.
        feats = self.tf.feats(tv) - (1.0 - tv)[:, None] * self._u0
        out = feats @ self.weights + self.xi_o.eval(tv)
        return out[0] if np.isscalar(t) or np.ndim(t) == 0 else out

    def velocity(self, t):
        tv = self._check_t(t)
        out = (self.tf.dfeats(tv) + self._u0) @ self.weights + self.xi_o.velocity(tv)
        return out[0] if np.isscalar(t) or np.ndim(t) == 0 else out

    def acceleration(self, t):
        tv = self._check_t(t)
        out = self.tf.d2feats(tv) @ self.weights + self.xi_o.acceleration(tv)
        return out[0] if np.isscalar(t) or np.ndim(t) == 0 else out

    def heading(self, t):
        """Tangent angle; degenerate velocities fall back to the last
        well-defined heading walking back toward the start."""
        tv = self._check_t(t)
        v = np.atleast_2d(self.velocity(tv))
        speed = np.linalg.norm(v, axis=1)
        ang = np.arctan2(v[:, 1], v[:, 0])
        for i in np.flatnonzero(speed < _HEADING_EPS):
            ti = tv[i]
            found = False
            while ti > 0.0:
                ti = max(0.0, ti - 0.01)
                vb = self.velocity(np.array([ti]))[0]
                if np.linalg.norm(vb) >= _HEADING_EPS:
                    ang[i] = np.arctan2(vb[1], vb[0])
                    found = True
                    break
                if ti == 0.0:
                    break
            if not found:
                ang[i] = self.start_pose[2]
        return float(ang[0]) if np.isscalar(t) or np.ndim(t) == 0 else ang

    def pose(self, t) -> np.ndarray:
        """(x, y, heading) at t."""
        tv = self._check_t(t)
        pts = np.atleast_2d(self.eval(tv))
        ang = np.atleast_1d(self.heading(tv))
        out = np.column_stack([pts, ang])
        return out[0] if np.isscalar(t) or np.ndim(t) == 0 else out

    def forward_kinematics(self, t, b):
        """Workspace location of body offset b at time t."""
        b = np.asarray(b, dtype=float)
        pt = self.eval(t)
        if np.isscalar(t) or np.ndim(t) == 0:
            return pt + rotation(self.heading(t)) @ b
        ang = self.heading(t)
        c, s = np.cos(ang), np.sin(ang)
        rb = np.stack([c * b[0] - s * b[1], s * b[0] + c * b[1]], axis=1)
        return pt + rb

    def jacobian(self, t, b) -> np.ndarray:
        """Workspace Jacobian of the body point w.r.t. path position.

        Heading is treated as exogenous, so the translation part is the
        identity.
        """
        return np.eye(2)

    # -- updates -----------------------------------------------------------

    def update_weights(self, grad, t: float, step: float,
                       metric_inverse=None) -> "KernelPath":
        """One functional-gradient step from a workspace gradient at t.

        The update is the outer product of the time features at t with the
        gradient, optionally mapped through an inverse metric operator.
        Non-finite gradients are rejected (the same path is returned).
        """
        grad = np.asarray(grad, dtype=float).reshape(2)
        if not np.all(np.isfinite(grad)):
            return self
        if step == 0.0 or not np.any(grad):
            return self
        u = self.tf.feats(float(t))[0]
        upd = np.outer(u, grad)
        if metric_inverse is not None:
            upd = metric_inverse(upd)
        return self.with_weights(self.weights - step * upd)

    def with_weights(self, weights: np.ndarray) -> "KernelPath":
        return KernelPath(self.start_pose, self.tf, self.xi_o, weights)

    # -- geometry helpers ----------------------------------------------------

    def sample_poses(self, n: int = 200) -> np.ndarray:
        """(n, 3) poses at uniform t."""
        return self.pose(np.linspace(0.0, 1.0, n))

    def arclength_table(self, n: int = 200):
        """(t_grid, cumulative_length) for stride-based execution."""
        t = np.linspace(0.0, 1.0, n)
        pts = np.atleast_2d(self.eval(t))
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        return t, np.concatenate([[0.0], np.cumsum(seg)])

    def export_csv(self, path: str | Path, n: int = 200) -> None:
        """Write (t, x, y, heading) rows at uniform t."""
        t = np.linspace(0.0, 1.0, n)
        pts = np.atleast_2d(self.eval(t))
        ang = np.atleast_1d(self.heading(t))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "heading"])
            for i in range(n):
                w.writerow([repr(float(t[i])), repr(float(pts[i, 0])),
                            repr(float(pts[i, 1])), repr(float(ang[i]))])
