"""Benchmark environments, generated deterministically.

``rooms``: 20 x 20 m, four rooms opening onto a central corridor.
``intel-crop``: 15 x 15 m office-style loop with an inner block of rooms.
Run ``python -m nbp.envs OUT_DIR`` to write them as PGM + sidecar JSON.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from .sensor import GroundTruthEnv

RESOLUTION = 0.05
# walls must be resolvable by a 0.5 m map lengthscale; thin slivers train
# as ambiguous occupancy
WALL = 0.4

BUILTIN_START = {
    "rooms": (10.0, 10.0, 0.0),
    "intel-crop": (1.9, 7.5, np.pi / 2),
}


def _blank(size_m: float) -> np.ndarray:
    n = int(round(size_m / RESOLUTION))
    return np.zeros((n, n), dtype=bool)


def _fill(grid: np.ndarray, x0, y0, x1, y1, value=True) -> None:
    i0 = max(0, int(np.floor(y0 / RESOLUTION)))
    i1 = min(grid.shape[0], int(np.ceil(y1 / RESOLUTION)))
    j0 = max(0, int(np.floor(x0 / RESOLUTION)))
    j1 = min(grid.shape[1], int(np.ceil(x1 / RESOLUTION)))
    grid[i0:i1, j0:j1] = value


def _outer_walls(grid: np.ndarray, size: float) -> None:
    _fill(grid, 0, 0, size, WALL)
    _fill(grid, 0, size - WALL, size, size)
    _fill(grid, 0, 0, WALL, size)
    _fill(grid, size - WALL, 0, size, size)


def make_rooms() -> GroundTruthEnv:
    """Four rooms around a central horizontal corridor with 2 m doors."""
    size = 20.0
    g = _blank(size)
    _outer_walls(g, size)
    # corridor spans y in [8.4, 11.6]
    _fill(g, WALL, 8.0, size - WALL, 8.4)         # south corridor wall
    _fill(g, WALL, 11.6, size - WALL, 12.0)       # north corridor wall
    for x0, x1 in ((4.0, 6.0), (14.0, 16.0)):     # doors on both sides
        _fill(g, x0, 8.0, x1, 8.4, False)
        _fill(g, x0, 11.6, x1, 12.0, False)
    _fill(g, 9.8, WALL, 10.2, 8.0)                # south divider
    _fill(g, 9.8, 12.0, 10.2, size - WALL)        # north divider
    return GroundTruthEnv(g, RESOLUTION, (0.0, 0.0))


def make_intel_crop() -> GroundTruthEnv:
    """Ring corridor around an inner block of rooms, office style."""
    size = 15.0
    g = _blank(size)
    _outer_walls(g, size)
    # inner block perimeter [3.8, 11.2]^2
    _fill(g, 3.8, 3.8, 11.2, 4.2)
    _fill(g, 3.8, 10.8, 11.2, 11.2)
    _fill(g, 3.8, 3.8, 4.2, 11.2)
    _fill(g, 10.8, 3.8, 11.2, 11.2)
    _fill(g, 3.8, 6.6, 4.2, 8.4, False)           # west door into the block
    _fill(g, 6.6, 3.8, 8.4, 4.2, False)           # south door
    # divider inside the block, door near the top
    _fill(g, 7.3, 4.2, 7.7, 10.8)
    _fill(g, 7.3, 9.0, 7.7, 10.6, False)
    return GroundTruthEnv(g, RESOLUTION, (0.0, 0.0))


def builtin_env(name: str) -> tuple[GroundTruthEnv, tuple[float, float, float]]:
    if name == "rooms":
        return make_rooms(), BUILTIN_START["rooms"]
    if name == "intel-crop":
        return make_intel_crop(), BUILTIN_START["intel-crop"]
    raise KeyError(name)


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    out = Path(args[0]) if args else Path("envs")
    out.mkdir(parents=True, exist_ok=True)
    make_rooms().to_pgm(out / "rooms.pgm")
    make_intel_crop().to_pgm(out / "intel_crop.pgm")
    print(f"wrote rooms.pgm and intel_crop.pgm to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
