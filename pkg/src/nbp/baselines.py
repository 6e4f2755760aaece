"""Comparison explorers: nearest-frontier and an RRT explorer that ranks
candidate paths by mutual information over the sensor's full field of view.

Both plug into the same exploration loop as the functional planner and
return the same (path, report) pair. The RRT variant recomputes MI densely
for every scored pose, which makes it the expensive reference point for
runtime comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hilbert_map import HilbertMap
from .kernel_path import KernelPath, WaypointPath
from .perturbed_map import PerturbedMap, PseudoObservations, free_space_log_odds
from .planner import ObjectiveConfig, OptimizeReport, path_safety_profile
from .sensor import SensorModel, beam_angles
from .util import coerce_rng


@dataclass
class FrontierSet:
    """Free cells adjacent to unknown cells, grouped into clusters."""

    cells: list                      # [(ix, iy), ...]
    clusters: list                   # [[(ix, iy), ...], ...]
    centroids: np.ndarray            # (n_clusters, 2) world coordinates
    grid_resolution: float
    origin: np.ndarray


def classify_grid(map: HilbertMap, grid_resolution: float, bounds,
                  free_thresh: float = 0.35, occ_thresh: float = 0.65):
    """Discretize the continuous map: -1 free, 0 unknown, +1 occupied.

    Returns (classes (nx, ny), origin) where cell (i, j) is centered at
    origin + (i + .5, j + .5) * resolution.
    """
    xmin, ymin, xmax, ymax = bounds
    nx = max(1, int(round((xmax - xmin) / grid_resolution)))
    ny = max(1, int(round((ymax - ymin) / grid_resolution)))
    xs = xmin + (np.arange(nx) + 0.5) * grid_resolution
    ys = ymin + (np.arange(ny) + 0.5) * grid_resolution
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    p = np.atleast_1d(map.predict(np.stack([gx.ravel(), gy.ravel()], axis=1)))
    p = p.reshape(nx, ny)
    classes = np.zeros((nx, ny), dtype=np.int8)
    classes[p < free_thresh] = -1
    classes[p > occ_thresh] = 1
    return classes, np.array([xmin, ymin])


def detect_frontiers(map: HilbertMap, grid_resolution: float, bounds,
                     free_thresh: float = 0.35, occ_thresh: float = 0.65,
                     min_cluster: int = 3) -> FrontierSet:
    """Frontier cells (free, 4-adjacent to unknown) clustered 8-connected.

    Clusters smaller than ``min_cluster`` cells are dropped.
    """
    classes, origin = classify_grid(map, grid_resolution, bounds,
                                    free_thresh, occ_thresh)
    nx, ny = classes.shape
    free = classes == -1
    unknown = classes == 0
    near_unknown = np.zeros_like(free)
    near_unknown[1:, :] |= unknown[:-1, :]
    near_unknown[:-1, :] |= unknown[1:, :]
    near_unknown[:, 1:] |= unknown[:, :-1]
    near_unknown[:, :-1] |= unknown[:, 1:]
    frontier = free & near_unknown
    cells = [(int(i), int(j)) for i, j in zip(*np.nonzero(frontier))]

    cell_set = set(cells)
    seen: set = set()
    clusters = []
    for c in cells:
        if c in seen:
            continue
        group = [c]
        seen.add(c)
        stack = [c]
        while stack:
            ci, cj = stack.pop()
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    nb = (ci + di, cj + dj)
                    if nb in cell_set and nb not in seen:
                        seen.add(nb)
                        group.append(nb)
                        stack.append(nb)
        if len(group) >= min_cluster:
            clusters.append(group)
    if clusters:
        centroids = np.array([
            [(np.mean([c[0] for c in g]) + 0.5) * grid_resolution + origin[0],
             (np.mean([c[1] for c in g]) + 0.5) * grid_resolution + origin[1]]
            for g in clusters])
    else:
        centroids = np.zeros((0, 2))
    return FrontierSet(cells, clusters, centroids, grid_resolution, origin)


# -- RRT machinery ------------------------------------------------------------------


def _edge_safe(map: HilbertMap, a: np.ndarray, b: np.ndarray, p_safe: float,
               body_offsets: np.ndarray, check_step: float = 0.1) -> bool:
    """Collision-check the segment a-b at <= check_step intervals; the body
    ring is swept along the segment heading."""
    d = b - a
    length = float(np.linalg.norm(d))
    n = max(2, int(np.ceil(length / check_step)) + 1)
    ts = np.linspace(0.0, 1.0, n)
    pts = a + ts[:, None] * d
    if length > 1e-9:
        ang = np.arctan2(d[1], d[0])
        c, s = np.cos(ang), np.sin(ang)
    else:
        c, s = 1.0, 0.0
    stacked = [pts + np.array([c * bo[0] - s * bo[1], s * bo[0] + c * bo[1]])
               for bo in body_offsets]
    occ = np.atleast_1d(map.predict(np.vstack(stacked)))
    return bool(np.all(occ <= p_safe))


def grow_rrt(map: HilbertMap, start: np.ndarray, bounds, p_safe: float,
             body_offsets: np.ndarray, rng, node_budget: int = 300,
             step: float = 0.5, goal: np.ndarray | None = None,
             goal_bias: float = 0.1, goal_radius: float = 0.75):
    """Grow a safety-checked RRT; returns (nodes, parents, goal_idx).

    goal_idx is the first node within goal_radius of the goal, or -1.
    """
    xmin, ymin, xmax, ymax = bounds
    nodes = [np.asarray(start, dtype=float)[:2].copy()]
    parents = [-1]
    goal_idx = -1
    attempts = 0
    max_attempts = node_budget * 8
    while len(nodes) < node_budget and attempts < max_attempts:
        attempts += 1
        if goal is not None and rng.uniform() < goal_bias:
            sample = np.asarray(goal, dtype=float)
        else:
            sample = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)])
        arr = np.asarray(nodes)
        near = int(np.argmin(np.sum((arr - sample) ** 2, axis=1)))
        d = sample - nodes[near]
        dist = float(np.linalg.norm(d))
        if dist < 1e-9:
            continue
        new = nodes[near] + d * min(1.0, step / dist)
        if not _edge_safe(map, nodes[near], new, p_safe, body_offsets):
            continue
        nodes.append(new)
        parents.append(near)
        if goal is not None and np.linalg.norm(new - goal) <= goal_radius:
            goal_idx = len(nodes) - 1
            break
    return np.asarray(nodes), np.asarray(parents, dtype=int), goal_idx


def _root_path(nodes: np.ndarray, parents: np.ndarray, idx: int) -> np.ndarray:
    out = []
    while idx >= 0:
        out.append(nodes[idx])
        idx = parents[idx]
    return np.asarray(out[::-1])


def _shortcut(map: HilbertMap, wp: np.ndarray, p_safe: float,
              body_offsets: np.ndarray, rng, tries: int = 60) -> np.ndarray:
    wp = [w for w in wp]
    for _ in range(tries):
        if len(wp) < 3:
            break
        i = int(rng.integers(0, len(wp) - 2))
        j = int(rng.integers(i + 2, len(wp)))
        if _edge_safe(map, wp[i], wp[j], p_safe, body_offsets):
            wp = wp[:i + 1] + wp[j:]
    return np.asarray(wp)


def _catmull_rom(wp: np.ndarray, per_segment: int = 8) -> np.ndarray:
    """Centripetal-flavored Catmull-Rom fit through the waypoints."""
    if wp.shape[0] < 3:
        return wp
    padded = np.vstack([wp[0], wp, wp[-1]])
    out = [wp[0]]
    for k in range(1, padded.shape[0] - 2):
        p0, p1, p2, p3 = padded[k - 1], padded[k], padded[k + 1], padded[k + 2]
        for t in np.linspace(0.0, 1.0, per_segment + 1)[1:]:
            t2, t3 = t * t, t * t * t
            pt = 0.5 * ((2 * p1) + (-p0 + p2) * t
                        + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t2
                        + (-p0 + 3 * p1 - 3 * p2 + p3) * t3)
            out.append(pt)
    return np.asarray(out)


def _waypoint_path(run, wp: np.ndarray) -> KernelPath:
    return KernelPath(run.robot_pose, xi_o=WaypointPath(wp))


# -- the two explorers ------------------------------------------------------------------


def frontier_explore_step(run) -> tuple[KernelPath | None, OptimizeReport]:
    """Nearest-frontier exploration: grid the map, cluster frontiers, plan
    to the nearest centroid with a safety-only RRT, smooth the result."""
    fs = detect_frontiers(run.map, run.loop.entropy_grid_resolution,
                          run.env.bounds, min_cluster=run.loop.frontier_min_cluster)
    if len(fs.clusters) == 0:
        return None, OptimizeReport(status="complete")
    p_safe = run.objective.p_safe
    body = run.body.offsets
    order = np.argsort(np.linalg.norm(fs.centroids - run.robot_pose[:2], axis=1))
    for ci in order:
        goal = fs.centroids[ci]
        nodes, parents, gi = grow_rrt(
            run.map, run.robot_pose, run.env.bounds, p_safe, body, run.rng,
            node_budget=run.loop.node_budget, goal=goal)
        if gi < 0:
            continue
        wp = _root_path(nodes, parents, gi)
        wp = _shortcut(run.map, wp, p_safe, body, run.rng)
        smooth = _catmull_rom(wp)
        path = _waypoint_path(run, smooth)
        max_occ, safe = path_safety_profile(run.map, path, p_safe, body=run.body)
        if not safe:
            # spline overshoot into unsafe space: fall back to the polyline
            path = _waypoint_path(run, wp)
            max_occ, safe = path_safety_profile(run.map, path, p_safe, body=run.body)
        if safe:
            rep = OptimizeReport(status="converged", converged=True,
                                 final_max_occ=max_occ)
            return path, rep
    return None, OptimizeReport(status="trapped")


def full_fov_mi(map: HilbertMap, pose, s: SensorModel, cfg: ObjectiveConfig,
                grid_resolution: float = 0.5) -> float:
    """MI of hypothetical observations over the whole field of view.

    Free pseudo-points are laid every lengthscale along each unblocked
    beam, the perturbed map is conditioned on all of them, and pointwise
    MI is summed over a coarse grid covering the FOV sector. Deliberately
    exhaustive; this is the baseline's cost center.
    """
    pose = np.asarray(pose, dtype=float)
    ell = map.features.lengthscale
    angles = beam_angles(pose[2], s.fov, s.beam_count)
    obs_pts = []
    march = np.arange(ell / 2.0, s.r_max - 1e-12, ell / 2.0)
    sample_d = np.arange(ell, s.r_max + 1e-12, ell)
    for ang in angles:
        direction = np.array([np.cos(ang), np.sin(ang)])
        p = np.atleast_1d(map.predict(pose[:2] + march[:, None] * direction))
        if p.max() > cfg.p_block:
            continue
        obs_pts.append(pose[:2] + sample_d[:, None] * direction)
    if not obs_pts:
        return 0.0
    obs = PseudoObservations(np.vstack(obs_pts),
                             np.full(sum(len(o) for o in obs_pts),
                                     free_space_log_odds(cfg.p_free_target)),
                             pose)
    pm = PerturbedMap(map, obs, cfg.gp_noise)
    r = s.r_max
    n = max(2, int(np.ceil(2 * r / grid_resolution)))
    ax = pose[0] + np.linspace(-r, r, n)
    ay = pose[1] + np.linspace(-r, r, n)
    gx, gy = np.meshgrid(ax, ay, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    rel = pts - pose[:2]
    rad = np.linalg.norm(rel, axis=1)
    in_range = rad <= r + 1e-9
    if s.fov < 2 * np.pi - 1e-9:
        ang = np.arctan2(rel[:, 1], rel[:, 0]) - pose[2]
        ang = np.mod(ang + np.pi, 2 * np.pi) - np.pi
        in_range &= np.abs(ang) <= s.fov / 2.0 + 1e-9
    sector = pts[in_range]
    if sector.shape[0] == 0:
        return 0.0
    return float(np.sum(pm.mi(sector)))


def rrt_mi_explore_step(run, node_budget: int = 300,
                        candidate_count: int = 10) -> tuple[KernelPath | None, OptimizeReport]:
    """Grow a safety-checked RRT, score the deepest leaves by full-FOV MI
    along the path, return the argmax (ties break toward shorter paths)."""
    p_safe = run.objective.p_safe
    body = run.body.offsets
    nodes, parents, _ = grow_rrt(
        run.map, run.robot_pose, run.env.bounds, p_safe, body, run.rng,
        node_budget=node_budget)
    if nodes.shape[0] < 2:
        return None, OptimizeReport(status="trapped")
    is_parent = np.zeros(nodes.shape[0], dtype=bool)
    is_parent[parents[parents >= 0]] = True
    leaves = np.flatnonzero(~is_parent)
    depth = np.zeros(nodes.shape[0])
    for i in range(1, nodes.shape[0]):
        depth[i] = depth[parents[i]] + np.linalg.norm(nodes[i] - nodes[parents[i]])
    leaves = [int(l) for l in leaves if depth[l] >= 0.25]
    if not leaves:
        return None, OptimizeReport(status="trapped")
    leaves.sort(key=lambda l: -depth[l])
    chosen = leaves[:candidate_count]

    scored = []
    for leaf in chosen:
        wp = _root_path(nodes, parents, leaf)
        seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        length = cum[-1]
        ds = list(np.arange(0.0, length, 0.5)) + [length]
        score = 0.0
        for d in ds:
            x = np.interp(d, cum, wp[:, 0])
            y = np.interp(d, cum, wp[:, 1])
            k = min(int(np.searchsorted(cum, d, side="right")), len(seg))
            tangent = wp[k] - wp[k - 1]
            heading = np.arctan2(tangent[1], tangent[0])
            score += full_fov_mi(run.map, (x, y, heading), run.sensor, run.objective)
        scored.append((score, length, wp))
    best_score = max(sc for sc, _, _ in scored)
    viable = [(ln, wp) for sc, ln, wp in scored if sc >= best_score - 1e-9]
    _, best_wp = min(viable, key=lambda e: e[0])
    path = _waypoint_path(run, best_wp)
    max_occ, _ = path_safety_profile(run.map, path, p_safe, body=run.body)
    return path, OptimizeReport(status="converged", converged=True,
                                final_max_occ=max_occ)
