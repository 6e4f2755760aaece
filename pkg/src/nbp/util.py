"""Small numeric helpers shared across the package."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

# Probabilities are clamped before any log to dodge log(0) in float arithmetic;
# the models themselves never produce exact 0 or 1 analytically.
P_FLOOR = 1e-9


def sigmoid(f: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function.

    Both branches share the same denominator, so sigmoid(f) + sigmoid(-f)
    is exactly 1.0 in floating point.
    """
    f = np.asarray(f, dtype=float)
    out = np.empty_like(f)
    pos = f >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-f[pos]))
    ef = np.exp(f[~pos])
    out[~pos] = ef / (1.0 + ef)
    if out.ndim == 0:
        return float(out)
    return out


def entropy_bits(p: np.ndarray | float) -> np.ndarray | float:
    """Shannon entropy of a Bernoulli variable, in bits."""
    p = np.clip(np.asarray(p, dtype=float), P_FLOOR, 1.0 - P_FLOOR)
    h = -(p * np.log2(p) + (1.0 - p) * np.log2(1.0 - p))
    if h.ndim == 0:
        return float(h)
    return h


def entropy_slope(p: np.ndarray | float) -> np.ndarray | float:
    """dH/dp for Bernoulli entropy in bits: log2((1 - p) / p)."""
    p = np.clip(np.asarray(p, dtype=float), P_FLOOR, 1.0 - P_FLOOR)
    s = np.log2((1.0 - p) / p)
    if s.ndim == 0:
        return float(s)
    return s


def as_points(x) -> tuple[np.ndarray, bool]:
    """Coerce a 2D location or an (N, 2) batch to (N, 2).

    Returns the array and whether the input was a single point. Non-finite
    coordinates are rejected.
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected 2D location(s), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite location rejected")
    return arr, single


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def coerce_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
