"""Stochastic functional gradient optimization of a path against the map.

The objective is a weighted sum of an obstacle cost (occupancy along the
path), a dynamics cost (squared velocity norm) and a mutual-information
reward. Each iteration draws a mini-batch of (t, body point) samples,
gates them on occupancy, and applies per-sample weight updates. MI enters
as a reward: its descent gradient is the negated sum of pointwise MI
spatial gradients over the sensing arc, so the weighted combination
effectively descends obs + dyn - MI. Pointwise MI can be negative and is
summed raw.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hilbert_map import HilbertMap
from .kernel_path import BodyModel, KernelPath, TimeFeatures
from .perturbed_map import PerturbedMap, PseudoObservations
from .sensor import SensorModel, arc_samples, expected_observations
from .util import coerce_rng, entropy_bits, entropy_slope, sigmoid


class StartUnsafeError(RuntimeError):
    """The start pose fails the occupancy safety threshold."""


@dataclass
class ObjectiveConfig:
    """Weights, learning schedule and safety gate for the optimizer."""

    beta_obs: float = 10.0
    beta_dyn: float = 1.0
    beta_mi: float = 5.0
    eta0: float = 0.05
    eta_decay: float = 0.5
    p_safe: float = 0.4
    minibatch_size: int = 8
    max_iterations: int = 500
    convergence_window: int = 20
    convergence_tol: float = 1e-4
    # MI machinery
    p_block: float = 0.6
    p_free_target: float = 0.1
    gp_noise: float = 1e-2
    # cap on the combined per-sample gradient norm (0 disables); unnormalized
    # MI sums over the arc reach tens of units and would swing the path by
    # meters on the first updates
    grad_clip: float = 5.0
    # path representation
    path_feature_count: int = 200
    path_kernel_lengthscale: float = 0.15
    init_path_length: float = 4.0
    robot_radius: float = 0.2

    def __post_init__(self):
        if not (self.beta_obs > 0 or self.beta_dyn > 0 or self.beta_mi > 0):
            raise ValueError("at least one objective weight must be positive")
        if not 0.0 < self.p_safe < 1.0:
            raise ValueError("p_safe must lie in (0, 1)")


@dataclass
class OptimizeReport:
    iterations: int = 0
    rejected_fraction: float = 0.0
    wall_time_s: float = 0.0
    final_max_occ: float = 0.0
    converged: bool = False
    status: str = "max_iterations"   # converged | max_iterations | trapped
    final_objective: float = float("nan")

    def to_json_dict(self) -> dict:
        return {"iterations": self.iterations,
                "rejected_fraction": self.rejected_fraction,
                "wall_time_s": self.wall_time_s,
                "final_max_occ": self.final_max_occ,
                "converged": self.converged}

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()))


# -- per-sample gradients ------------------------------------------------------


def obstacle_gradient_at(map: HilbertMap, path: KernelPath, t: float, b) -> np.ndarray:
    """Workspace obstacle-cost gradient at the sample (t, b)."""
    x_t = path.forward_kinematics(t, b)
    return path.jacobian(t, b) @ map.occupancy_gradient(x_t)


def dynamics_gradient_at(path: KernelPath, t: float) -> np.ndarray:
    """Functional gradient of the squared-velocity cost: -xi''(t)."""
    return -path.acceleration(t)


def mi_descent_gradient_at_pose(map: HilbertMap, pose, s: SensorModel,
                                cfg: ObjectiveConfig) -> tuple[np.ndarray, float]:
    """Descent-ready MI gradient and the raw MI value at one pose.

    Builds the expected observations at the range limit, conditions the
    perturbed map on them and sums pointwise MI gradients over the arc.
    The sum is negated so that subtracting it in the update moves the
    path toward information. Empty observations (fully blocked pose)
    yield a zero gradient.
    """
    g, c = _mi_batch(map, np.asarray(pose, dtype=float)[None, :], s, cfg)
    return g[0], float(c[0])


def mi_gradient_at(map: HilbertMap, path: KernelPath, t: float, b,
                   s: SensorModel, cfg: ObjectiveConfig | None = None) -> np.ndarray:
    """Descent-ready MI gradient for the sample (t, b)."""
    cfg = cfg or ObjectiveConfig()
    b = np.asarray(b, dtype=float)
    x_t = path.forward_kinematics(t, b)
    pose = np.array([x_t[0], x_t[1], path.heading(t)])
    g, _ = mi_descent_gradient_at_pose(map, pose, s, cfg)
    return path.jacobian(t, b) @ g


def _expected_obs_batch(map: HilbertMap, poses: np.ndarray, s: SensorModel,
                        p_block: float, p_free: float) -> list[PseudoObservations]:
    """Expected observations for (M, 3) poses with one fused beam march.

    Produces the same observations as per-pose ``expected_observations``.
    """
    from .perturbed_map import free_space_log_odds
    from .sensor import beam_offsets
    m = poses.shape[0]
    offs = beam_offsets(s.fov, s.beam_count)
    ang = poses[:, 2:3] + offs[None, :]                      # (M, B)
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=2)      # (M, B, 2)
    r = free_space_log_odds(p_free)
    ell = map.features.lengthscale
    # 3-lengthscale feature window: worst-case 0.011 feature truncation is
    # ~0.003 in probability, far under the blocking threshold's needs
    march = np.append(np.arange(ell / 2.0, s.r_max - 1e-12, ell / 2.0), s.r_max)
    pts = poses[:, None, None, :2] + dirs[:, :, None, :] * march[None, None, :, None]
    f = np.atleast_1d(map.logit(pts.reshape(-1, 2), radius_ls=3.0))
    p = sigmoid(f).reshape(m, offs.size, march.size)
    open_beam = p.max(axis=2) <= p_block
    ends = poses[:, None, :2] + dirs * s.r_max                       # (M, B, 2)
    nbr = ends[:, :, None, :] + ell * np.array([[1.0, 0], [-1.0, 0], [0, 1.0], [0, -1.0]])
    fn = np.atleast_1d(map.logit(nbr.reshape(-1, 2), radius_ls=3.0))
    clear = sigmoid(fn).reshape(m, offs.size, 4).max(axis=2) <= p_block
    open_beam &= clear
    out = []
    for i in range(m):
        e = ends[i, open_beam[i]]
        out.append(PseudoObservations(e, np.full(e.shape[0], r), poses[i]))
    return out


def _mi_batch(map: HilbertMap, poses: np.ndarray, s: SensorModel,
              cfg: ObjectiveConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized MI descent gradients and values for (M, 3) poses.

    All poses share one feature-window pass for beam marching and one for
    the arc queries; the small per-pose GP systems are solved in a loop.
    """
    m = poses.shape[0]
    grads = np.zeros((m, 2))
    vals = np.zeros(m)
    obs_sets = _expected_obs_batch(map, poses, s, cfg.p_block, cfg.p_free_target)
    arcs = np.stack([arc_samples(poses[i], s) for i in range(m)])  # (M, A, 2)
    a = arcs.shape[1]
    counts = [len(o) for o in obs_sets]
    n_obs = sum(counts)
    queries = arcs.reshape(-1, 2)
    if n_obs:
        queries = np.vstack([queries, *[o.points for o in obs_sets if len(o)]])
    # 5-lengthscale window: ~4e-6 logit truncation, immaterial to planning
    f_all, g_all = map.logit_and_gradient(queries, radius_ls=5.0)
    f0, g0 = f_all[:m * a], g_all[:m * a]
    p0 = sigmoid(f0)
    h0_grad = (np.asarray(entropy_slope(p0)) * p0 * (1.0 - p0))[:, None] * g0
    h0_grad = h0_grad.reshape(m, a, 2)
    h0 = np.asarray(entropy_bits(p0)).reshape(m, a)
    f0 = f0.reshape(m, a)
    g0 = g0.reshape(m, a, 2)
    if n_obs == 0:
        return grads, vals
    mu_split = np.split(f_all[m * a:], np.cumsum([c for c in counts if c])[:-1])
    mus = {}
    j = 0
    for i in range(m):
        if counts[i]:
            mus[i] = mu_split[j]
            j += 1
    ell2 = 2.0 * map.features.lengthscale ** 2
    inv_l2 = 2.0 / ell2
    noise = cfg.gp_noise
    # batch the small GP systems across poses with equal observation counts
    by_count: dict[int, list[int]] = {}
    for i, c in enumerate(counts):
        if c:
            by_count.setdefault(c, []).append(i)
    for c, sel in by_count.items():
        P = np.stack([obs_sets[i].points for i in sel])              # (S, c, 2)
        # free observations never raise occupancy (matches PerturbedMap)
        resid = np.minimum(np.stack([obs_sets[i].log_odds - mus[i] for i in sel]), 0.0)
        d2 = np.sum((P[:, :, None, :] - P[:, None, :, :]) ** 2, axis=3)
        K = np.exp(-d2 / ell2) + noise * np.eye(c)
        try:
            alpha = np.linalg.solve(K, resid[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            alpha = np.stack([PerturbedMap._solve(K[k_], resid[k_])
                              for k_ in range(len(sel))])
        diff = arcs[sel][:, :, None, :] - P[:, None, :, :]           # (S, A, c, 2)
        k = np.exp(-np.sum(diff ** 2, axis=3) / ell2)                # (S, A, c)
        ka = k * alpha[:, None, :]
        f1 = f0[sel] + ka.sum(axis=2)
        g1 = g0[sel] - np.einsum("sac,sacd->sad", ka, diff) * inv_l2
        p1 = sigmoid(f1)
        h1_grad = (np.asarray(entropy_slope(p1)) * p1 * (1.0 - p1))[:, :, None] * g1
        h1 = np.asarray(entropy_bits(p1))
        grads[sel] = -(h0_grad[sel] - h1_grad).sum(axis=1)
        vals[sel] = (h0[sel] - h1).sum(axis=1)
    return grads, vals


# -- safety ---------------------------------------------------------------------


def path_safety_profile(map: HilbertMap, path: KernelPath, p_safe: float,
                        n: int = 50, body: BodyModel | None = None,
                        t_lo: float = 0.0) -> tuple[float, bool]:
    """Max occupancy over n uniform path samples times all body points.

    ``t_lo`` restricts the check to the remaining piece of the path.
    """
    if n < 2:
        raise ValueError("safety profile needs at least 2 samples")
    body = body or BodyModel.disc()
    t = np.linspace(t_lo, 1.0, n)
    pts = np.atleast_2d(path.eval(t))
    ang = np.atleast_1d(path.heading(t))
    c, si = np.cos(ang), np.sin(ang)
    all_pts = []
    for b in body.offsets:
        rb = np.stack([c * b[0] - si * b[1], si * b[0] + c * b[1]], axis=1)
        all_pts.append(pts + rb)
    occ = np.atleast_1d(map.predict(np.vstack(all_pts)))
    max_occ = float(occ.max())
    return max_occ, max_occ <= p_safe


# -- the optimizer -----------------------------------------------------------------


def optimize(map: HilbertMap, start_pose, cfg: ObjectiveConfig, s: SensorModel,
             xi_o=None, body: BodyModel | None = None, seed=0,
             sample_callback=None, fixed_ts: np.ndarray | None = None,
             time_features: TimeFeatures | None = None) -> tuple[KernelPath, OptimizeReport]:
    """Stochastic functional exploration of the next best path.

    Loops until convergence (window-mean weight change small), a trapped
    state (every sample rejected for a full window) or the iteration cap.
    Samples with occupancy above ``cfg.p_safe`` are rejected and produce
    no update. Per-iteration gradients are computed against the path as
    of the iteration start and applied in sample order, so results are
    reproducible for a fixed seed.

    ``sample_callback(t, b, p_occ, accepted)`` is invoked for every drawn
    sample; ``fixed_ts`` replaces the random mini-batch with a fixed one
    for evaluation studies.
    """
    t_start = time.perf_counter()
    start_pose = np.asarray(start_pose, dtype=float).reshape(3)
    rng = coerce_rng(seed)
    p0 = map.predict(start_pose[:2])
    if p0 > cfg.p_safe:
        raise StartUnsafeError(
            f"start occupancy {p0:.3f} exceeds p_safe {cfg.p_safe:.3f}")
    body = body or BodyModel.disc(cfg.robot_radius)
    tf = time_features or TimeFeatures.draw(
        cfg.path_feature_count, cfg.path_kernel_lengthscale, rng)
    path = KernelPath(start_pose, tf, xi_o, init_length=cfg.init_path_length)

    n_body = len(body)
    body_cursor = 0
    total = rejected = 0
    all_rejected_streak = 0
    dw_hist: list[float] = []
    obj_hist: list[float] = []
    report = OptimizeReport()
    status = "max_iterations"
    iterations = 0

    for n in range(1, cfg.max_iterations + 1):
        iterations = n
        if fixed_ts is not None:
            ts = np.asarray(fixed_ts, dtype=float)
        else:
            ts = rng.uniform(0.0, 1.0, cfg.minibatch_size)
        m = ts.size
        bsel = body.offsets[(body_cursor + np.arange(m)) % n_body]
        body_cursor = (body_cursor + m) % n_body

        pts = np.atleast_2d(path.eval(ts))
        ang = np.atleast_1d(path.heading(ts))
        c, si = np.cos(ang), np.sin(ang)
        xts = pts + np.stack([c * bsel[:, 0] - si * bsel[:, 1],
                              si * bsel[:, 0] + c * bsel[:, 1]], axis=1)
        f_x, g_x = map.logit_and_gradient(xts, radius_ls=5.0)
        p_occ = np.asarray(sigmoid(f_x))
        safe = p_occ <= cfg.p_safe
        total += m
        rejected += int(np.sum(~safe))
        if sample_callback is not None:
            for i in range(m):
                sample_callback(float(ts[i]), bsel[i], float(p_occ[i]), bool(safe[i]))

        eta = cfg.eta0 * n ** (-cfg.eta_decay)
        w_before = path.weights
        obj_terms = []
        if np.any(safe):
            idx = np.flatnonzero(safe)
            grads = np.zeros((idx.size, 2))
            if cfg.beta_obs > 0:
                sg = p_occ[idx] * (1.0 - p_occ[idx])
                grads += cfg.beta_obs * sg[:, None] * g_x[idx]
            vel = np.atleast_2d(path.velocity(ts[idx]))
            if cfg.beta_dyn > 0:
                grads += cfg.beta_dyn * (-np.atleast_2d(path.acceleration(ts[idx])))
            if cfg.beta_mi > 0:
                poses = np.column_stack([xts[idx], ang[idx]])
                mi_g, mi_v = _mi_batch(map, poses, s, cfg)
                grads += cfg.beta_mi * mi_g
            else:
                mi_v = np.zeros(idx.size)
            obj = (cfg.beta_obs * p_occ[idx]
                   + cfg.beta_dyn * 0.5 * np.sum(vel ** 2, axis=1)
                   - cfg.beta_mi * mi_v)
            obj_terms = obj.tolist()
            if cfg.grad_clip > 0:
                norms = np.linalg.norm(grads, axis=1)
                big = norms > cfg.grad_clip
                grads[big] *= (cfg.grad_clip / norms[big])[:, None]
            for j, i in enumerate(idx):
                path = path.update_weights(grads[j], float(ts[i]), eta)
        obj_hist.append(float(np.mean(obj_terms)) if obj_terms else float("nan"))

        dw = float(np.linalg.norm(path.weights - w_before))
        dw_hist.append(dw)
        all_rejected_streak = all_rejected_streak + 1 if not np.any(safe) else 0
        win = cfg.convergence_window
        if all_rejected_streak >= win:
            status = "trapped"
            break
        if len(dw_hist) >= win:
            if np.mean(dw_hist[-win:]) < cfg.convergence_tol * np.linalg.norm(path.weights) + 1e-6:
                status = "converged"
                break

    report.iterations = iterations
    report.rejected_fraction = rejected / total if total else 0.0
    report.status = status
    report.converged = status == "converged"
    tail = [o for o in obj_hist[-cfg.convergence_window:] if not np.isnan(o)]
    report.final_objective = float(np.mean(tail)) if tail else float("nan")
    report.final_max_occ, _ = path_safety_profile(map, path, cfg.p_safe, body=body)
    report.wall_time_s = time.perf_counter() - t_start
    return path, report
