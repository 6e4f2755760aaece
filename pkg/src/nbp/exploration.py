"""The autonomous exploration loop.

Each iteration plans a next-best path from the current pose, executes it
in fixed-stride increments with a scan and a map update at every stride,
re-plans mid-course when a newly revealed obstacle makes the remainder
unsafe, and logs map entropy and path-occupancy metrics. Dead ends are
detected from vanishing MI gradients and escaped by reversing along the
traversed path.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pgm
from .hilbert_map import FeatureMap, HilbertMap, RANDOM_FOURIER, SPARSE_RBF
from .kernel_path import BodyModel, KernelPath, LinePath
from .planner import (ObjectiveConfig, OptimizeReport, StartUnsafeError,
                      mi_descent_gradient_at_pose, optimize, path_safety_profile)
from .sensor import GroundTruthEnv, SensorModel, raycast_truth
from .util import coerce_rng

log = logging.getLogger("nbp.exploration")

METHODS = ("functional", "frontier", "rrt-mi")


@dataclass
class MapConfig:
    lengthscale: float = 0.5
    feature_kind: str = SPARSE_RBF
    rff_count: int = 1000
    rff_seed: int = 0
    l1: float = 1e-4
    l2: float = 1e-4
    sgd_step: float = 0.1
    pos_weight_cap: float = 10.0


@dataclass
class LoopConfig:
    scan_stride_m: float = 0.5
    max_replans: int = 3
    # reachable-information floor: fully-mapped rooms still score up to ~0.5
    # from wall-fringe residuals, open frontiers score over 3
    deadend_mi_threshold: float = 1.0
    deadend_patience: int = 3
    deadend_displacement_m: float = 0.5
    entropy_grid_resolution: float = 0.25
    train_epochs: int = 5
    train_batch_size: int = 64
    scan_beam_count: int = 180
    scan_fov: float = 2.0 * np.pi
    node_budget: int = 300          # rrt-mi tree size
    candidate_count: int = 10       # rrt-mi scored leaves
    frontier_min_cluster: int = 3


@dataclass
class MetricsRecord:
    iteration: int
    map_entropy_bits: float
    mean_occ_along_path: float      # percent
    max_occ_along_path: float       # percent
    plan_time_s: float
    distance_traveled_m: float      # cumulative

    CSV_FIELDS = ("iteration", "map_entropy_bits", "mean_occ_along_path",
                  "max_occ_along_path", "distance_traveled_m")


def map_entropy_total(map: HilbertMap, resolution: float, bounds) -> float:
    """Total entropy in bits over a uniform query grid of cell centers."""
    xmin, ymin, xmax, ymax = bounds
    nx = max(1, int(round((xmax - xmin) / resolution)))
    ny = max(1, int(round((ymax - ymin) / resolution)))
    xs = xmin + (np.arange(nx) + 0.5) * resolution
    ys = ymin + (np.arange(ny) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return float(np.sum(map.entropy(pts)))


def occupancy_raster(map: HilbertMap, resolution: float, bounds) -> np.ndarray:
    """uint8 occupancy image (row 0 at the top), 0 = free (black)."""
    xmin, ymin, xmax, ymax = bounds
    nx = max(1, int(round((xmax - xmin) / resolution)))
    ny = max(1, int(round((ymax - ymin) / resolution)))
    xs = xmin + (np.arange(nx) + 0.5) * resolution
    ys = ymin + (np.arange(ny) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    p = np.atleast_1d(map.predict(np.stack([gx.ravel(), gy.ravel()], axis=1)))
    img = np.rint(p.reshape(ny, nx) * 255.0).astype(np.uint8)
    return np.flipud(img)


class ExplorationRun:
    """State machine for one exploration run.

    The ground-truth environment is only ever queried to emulate scans
    and to detect collisions; planning sees the learned map alone.
    """

    def __init__(self, env: GroundTruthEnv, method: str = "functional",
                 seed: int = 0, start_pose=None,
                 map_config: MapConfig | None = None,
                 sensor: SensorModel | None = None,
                 objective: ObjectiveConfig | None = None,
                 loop: LoopConfig | None = None,
                 env_label: str = "", env_hash: str = ""):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
        self.env = env
        self.method = method
        self.seed = int(seed)
        self.rng = coerce_rng(seed)
        self.map_config = map_config or MapConfig()
        self.sensor = sensor or SensorModel()
        self.objective = objective or ObjectiveConfig()
        self.loop = loop or LoopConfig()
        self.env_label = env_label
        self.env_hash = env_hash
        self.body = BodyModel.disc(self.objective.robot_radius)

        bounds = env.bounds
        mc = self.map_config
        if mc.feature_kind == SPARSE_RBF:
            fm = FeatureMap.grid(bounds, mc.lengthscale)
        elif mc.feature_kind == RANDOM_FOURIER:
            fm = FeatureMap.random_fourier(mc.lengthscale, mc.rff_count, mc.rff_seed)
        else:
            raise ValueError(f"unknown feature kind {mc.feature_kind!r}")
        self.map = HilbertMap(fm, l1=mc.l1, l2=mc.l2, sgd_step=mc.sgd_step,
                              pos_weight_cap=mc.pos_weight_cap)

        if start_pose is None:
            xmin, ymin, xmax, ymax = bounds
            start_pose = ((xmin + xmax) / 2.0, (ymin + ymax) / 2.0, 0.0)
        self.robot_pose = np.asarray(start_pose, dtype=float).reshape(3)
        if not env.is_free_pose(self.robot_pose):
            raise ValueError(f"start pose {start_pose} is not in ground-truth free space")
        self.scan_sensor = SensorModel(
            r_max=self.sensor.r_max, fov=self.loop.scan_fov,
            beam_count=self.loop.scan_beam_count,
            arc_sample_count=self.sensor.arc_sample_count,
            range_noise_sigma=self.sensor.range_noise_sigma)
        # heading-independent probe for seeding plans and spotting dead ends
        self.probe_sensor = SensorModel(
            r_max=self.sensor.r_max, fov=2.0 * np.pi,
            beam_count=self.sensor.beam_count,
            arc_sample_count=self.sensor.arc_sample_count,
            range_noise_sigma=0.0)

        self.traversed: list[np.ndarray] = [self.robot_pose.copy()]
        self._history: list[np.ndarray] = [self.robot_pose.copy()]
        self.iteration = 0
        self.status = "running"
        self.metrics: list[MetricsRecord] = []
        self.total_distance = 0.0
        self.replan_counts: list[int] = []
        self._deadend_window: list[tuple[float, str, float]] = []
        self.last_path: KernelPath | None = None

        self._scan_at(self.robot_pose)
        self.initial_entropy = self.entropy_total()

    # -- helpers ---------------------------------------------------------------

    def entropy_total(self) -> float:
        return map_entropy_total(self.map, self.loop.entropy_grid_resolution,
                                 self.env.bounds)

    def _scan_at(self, pose) -> None:
        scan = raycast_truth(self.env, pose, self.scan_sensor, self.rng,
                             free_step=0.5 * self.map_config.lengthscale)
        self.map.train_sgd(scan, self.loop.train_epochs,
                           batch_size=self.loop.train_batch_size, seed=self.rng)

    def _move_to(self, pose) -> None:
        pose = np.asarray(pose, dtype=float).reshape(3)
        self.total_distance += float(np.linalg.norm(pose[:2] - self.robot_pose[:2]))
        self.robot_pose = pose.copy()
        self.traversed.append(pose.copy())
        self._history.append(pose.copy())

    def _mi_probe(self, pose) -> np.ndarray:
        """Full-circle MI descent gradient at a pose (heading independent)."""
        g, _ = mi_descent_gradient_at_pose(self.map, pose, self.probe_sensor,
                                           self.objective)
        return g

    def _vantage_scan(self, pose) -> tuple[LinePath | None, float]:
        """Coarse scan for reachable information around a pose.

        Rates a ring of candidate directions by the MI available from the
        farthest safely reachable point along each ray. Returns the best
        straight-line guess and its score; (None, 0.0) when nothing
        informative is reachable. Information behind walls scores low
        because the reach toward it is short.
        """
        pose = np.asarray(pose, dtype=float)
        start = pose[:2]
        L = self.objective.init_path_length
        steps = np.arange(0.25, L + 1e-9, 0.25)
        best = None
        for k in range(12):
            th = pose[2] + k * np.pi / 6.0
            d = np.array([np.cos(th), np.sin(th)])
            p = np.atleast_1d(self.map.predict(start + steps[:, None] * d))
            bad = np.flatnonzero(p > self.objective.p_safe)
            reach = L if bad.size == 0 else (0.0 if bad[0] == 0 else steps[bad[0] - 1])
            if reach < 0.5:
                continue
            vantage = np.array([*(start + reach * d), th])
            _, value = mi_descent_gradient_at_pose(
                self.map, vantage, self.probe_sensor, self.objective)
            score = value * reach
            if score > 1e-9 and (best is None or score > best[0]):
                best = (score, d, reach)
        if best is None:
            return None, 0.0
        score, d, reach = best
        return LinePath(start, start + reach * d), score

    def _seed_guess(self) -> LinePath | None:
        """Initial guess for the optimizer: toward reachable information,
        or a hold-in-place path when no direction clears the dead-end
        floor (the optimizer is local, so a wall-facing straight line
        stalls it and fringe noise sends it wandering)."""
        xi_o, score = self._vantage_scan(self.robot_pose)
        self._last_seed_score = score
        if xi_o is None or score < self.loop.deadend_mi_threshold:
            start = self.robot_pose[:2]
            return LinePath(start, start)
        return xi_o

    def _plan(self) -> tuple[KernelPath | None, OptimizeReport]:
        if self.method == "functional":
            xi_o = self._seed_guess()
            try:
                return optimize(self.map, self.robot_pose, self.objective,
                                self.sensor, xi_o=xi_o, body=self.body, seed=self.rng)
            except StartUnsafeError:
                rep = OptimizeReport(status="trapped")
                return None, rep
        from . import baselines  # deferred: baselines import this module
        if self.method == "frontier":
            return baselines.frontier_explore_step(self)
        return baselines.rrt_mi_explore_step(
            self, node_budget=self.loop.node_budget,
            candidate_count=self.loop.candidate_count)

    def _worst_occupancy(self, path: KernelPath, t: np.ndarray,
                         body: BodyModel, exempt_radius: float = 0.0) -> np.ndarray:
        """Max body-point occupancy per path sample.

        With ``exempt_radius`` > 0, body samples inside that radius of the
        current pose read as free: the robot already overlaps that space,
        so it cannot be blocked by it, only steered out of it.
        """
        pts = np.atleast_2d(path.eval(t))
        ang = np.atleast_1d(path.heading(t))
        c, s = np.cos(ang), np.sin(ang)
        worst = np.zeros(t.size)
        for b in body.offsets:
            rb = np.stack([c * b[0] - s * b[1], s * b[0] + c * b[1]], axis=1)
            loc = pts + rb
            occ = np.atleast_1d(self.map.predict(loc))
            if exempt_radius > 0:
                inside = np.linalg.norm(loc - self.robot_pose[:2], axis=1) <= exempt_radius
                occ = np.where(inside, 0.0, occ)
            worst = np.maximum(worst, occ)
        return worst

    def _horizon_from(self, worst: np.ndarray, t: np.ndarray) -> float:
        bad = np.flatnonzero(worst > self.objective.p_safe)
        if bad.size == 0:
            return 1.0
        if bad[0] == 0:
            return 0.0
        return float(t[bad[0] - 1])

    def _safe_horizon(self, path: KernelPath, n: int = 100) -> float:
        """Largest t such that the path prefix stays under p_safe.

        Checked with a margin-inflated body first; if that pins the robot
        in place (a sharpened map fringe under the body), fall back to the
        true body with the current footprint exempted so the robot can
        slide out without being allowed to push deeper in.
        """
        t = np.linspace(0.0, 1.0, n)
        inflated = self.body.inflated(0.1)
        horizon = self._horizon_from(self._worst_occupancy(path, t, inflated), t)
        if horizon > 0.0:
            return horizon
        exempt = self.objective.robot_radius + 0.05
        worst = self._worst_occupancy(path, t, self.body, exempt_radius=exempt)
        return self._horizon_from(worst, t)

    def _remainder_safe(self, path: KernelPath, t_lo: float, n: int = 50) -> bool:
        """Safety of the path remainder, exempting the current footprint."""
        t = np.linspace(t_lo, 1.0, n)
        exempt = self.objective.robot_radius + 0.05
        worst = self._worst_occupancy(path, t, self.body, exempt_radius=exempt)
        return bool(np.all(worst <= self.objective.p_safe))

    # -- the step ------------------------------------------------------------------

    def step(self) -> MetricsRecord:
        """One planning iteration: plan, execute with mid-course checks,
        sense, update, log."""
        if self.status != "running":
            raise RuntimeError(f"run is over (status {self.status!r})")
        self.iteration += 1
        iter_start_pose = self.robot_pose.copy()
        plan_time = 0.0
        replans = 0
        occ_samples: list[float] = []
        last_status = "trapped"

        def record_path_occ(p):
            # occupancy of the planned path against the map at plan time;
            # this is what separates cautious planners from bold ones
            if p is not None:
                t = np.linspace(0.0, 1.0, 50)
                occ_samples.extend(
                    np.atleast_1d(self.map.predict(np.atleast_2d(p.eval(t)))).tolist())

        t0 = time.perf_counter()
        path, report = self._plan()
        plan_time += time.perf_counter() - t0
        last_status = report.status
        self.last_path = path
        record_path_occ(path)
        scanned = False

        while path is not None:
            t_max = self._safe_horizon(path)
            tgrid, cum = path.arclength_table()
            # clip the table to the safe prefix
            keep = tgrid <= t_max + 1e-12
            tgrid, cum = tgrid[keep], cum[keep]
            length = cum[-1] if cum.size else 0.0
            if length < 1e-6:
                break
            stride = self.loop.scan_stride_m
            targets = list(np.arange(stride, length, stride)) + [length]
            aborted = False
            for d in targets:
                t_here = float(np.interp(d, cum, tgrid))
                pose = path.pose(t_here)
                if not self.env.is_free_pose(pose):
                    self.status = "collision"
                    log.error("ground-truth collision at %s; run terminated", pose[:2])
                    break
                self._move_to(pose)
                self._scan_at(pose)
                scanned = True
                if not self._remainder_safe(path, min(1.0, t_here + 1e-9)) \
                        and d < length - 1e-9:
                    aborted = True
                    break
            if self.status == "collision":
                break
            if not aborted:
                break
            replans += 1
            if replans > self.loop.max_replans:
                log.warning("iteration %d: re-plan limit reached, holding", self.iteration)
                break
            t0 = time.perf_counter()
            path, report = self._plan()
            plan_time += time.perf_counter() - t0
            last_status = report.status
            self.last_path = path
            record_path_occ(path)

        if not scanned and self.status == "running":
            # degenerate or trapped plan: hold position but keep sensing
            self._scan_at(self.robot_pose)
            if path is None and len(self._history) > 1 \
                    and self.map.predict(self.robot_pose[:2]) > self.objective.p_safe:
                # newly revealed obstruction swallowed the robot's spot:
                # retreat one pose along the traversed history
                self._history.pop()
                back = self._history[-1].copy()
                back[2] = np.mod(back[2] + np.pi, 2 * np.pi)
                self.total_distance += float(np.linalg.norm(back[:2] - self.robot_pose[:2]))
                self.robot_pose = back
                self.traversed.append(back.copy())
                log.info("iteration %d: retreating from map-unsafe pose", self.iteration)
        self.replan_counts.append(replans)

        if not occ_samples:
            occ_samples = [float(self.map.predict(self.robot_pose[:2]))]
        record = MetricsRecord(
            iteration=self.iteration,
            map_entropy_bits=self.entropy_total(),
            mean_occ_along_path=100.0 * float(np.mean(occ_samples)),
            max_occ_along_path=100.0 * float(np.max(occ_samples)),
            plan_time_s=plan_time,
            distance_traveled_m=self.total_distance)
        self.metrics.append(record)

        if self.status == "running":
            displacement = float(np.linalg.norm(self.robot_pose[:2] - iter_start_pose[:2]))
            # reachable-information score: the raw MI gradient at the pose
            # itself is degenerate right after scanning from it
            if self.method == "functional":
                mi_mag = getattr(self, "_last_seed_score", 0.0)
            else:
                _, mi_mag = self._vantage_scan(self.robot_pose)
            self._deadend_window.append((mi_mag, last_status, displacement))
            patience = self.loop.deadend_patience
            keep = int(patience) if np.isfinite(patience) else 10
            self._deadend_window = self._deadend_window[-keep:]
            if self.detect_deadend():
                log.info("dead-end detected at iteration %d; reversing", self.iteration)
                self.reverse_on_path()
        return record

    # -- dead ends --------------------------------------------------------------------

    def detect_deadend(self) -> bool:
        """MI gradient collapsed and recent plans went nowhere."""
        patience = self.loop.deadend_patience
        if not np.isfinite(patience) or patience <= 0:
            return False
        w = self._deadend_window
        if len(w) < int(patience):
            return False
        mags = [e[0] for e in w]
        if float(np.mean(mags)) >= self.loop.deadend_mi_threshold:
            return False
        return all(st in ("trapped", "converged", "max_iterations")
                   and disp < self.loop.deadend_displacement_m
                   for _, st, disp in w)

    def _pose_is_deadend(self, pose) -> bool:
        _, score = self._vantage_scan(pose)
        return score < self.loop.deadend_mi_threshold

    def reverse_on_path(self) -> None:
        """Retrace traversed poses backwards until the dead-end clears.

        Reversal moves only through already-visited space, so no scans are
        taken. Exhausting the history back to the start ends the run:
        with no frontier left anywhere the exploration is complete,
        otherwise the remaining information is unreachable and the run
        reports itself exhausted.
        """
        from .baselines import detect_frontiers
        while len(self._history) > 1:
            self._history.pop()
            prev = self._history[-1]
            back = prev.copy()
            back[2] = np.mod(back[2] + np.pi, 2 * np.pi)  # face back out
            self.total_distance += float(np.linalg.norm(back[:2] - self.robot_pose[:2]))
            self.robot_pose = back
            self.traversed.append(back.copy())
            if not self._pose_is_deadend(back):
                self._deadend_window.clear()
                return
        self.status = "exhausted" if self._real_frontiers_remain() else "complete"
        log.warning("reverse-on-path exhausted the traversal history (%s)",
                    self.status)

    def _real_frontiers_remain(self) -> bool:
        """Unknown space left that is not a wall-transition fringe.

        The continuous map keeps a band of intermediate occupancy around
        every wall; those cells classify as unknown but carry no news.
        Unknown cells are only counted when they sit clear of
        believed-occupied cells and touch free space.
        """
        from .baselines import classify_grid
        res = self.loop.entropy_grid_resolution
        classes, _ = classify_grid(self.map, res, self.env.bounds)
        occ = classes == 1
        k = max(1, int(np.ceil(self.map_config.lengthscale / res)))
        fringe = occ.copy()
        for _ in range(k):
            grown = fringe.copy()
            grown[1:, :] |= fringe[:-1, :]
            grown[:-1, :] |= fringe[1:, :]
            grown[:, 1:] |= fringe[:, :-1]
            grown[:, :-1] |= fringe[:, 1:]
            fringe = grown
        real_unknown = (classes == 0) & ~fringe
        free = classes == -1
        boundary = np.zeros_like(free)
        boundary[1:, :] |= real_unknown[:-1, :]
        boundary[:-1, :] |= real_unknown[1:, :]
        boundary[:, 1:] |= real_unknown[:, :-1]
        boundary[:, :-1] |= real_unknown[:, 1:]
        return int(np.sum(free & boundary)) >= self.loop.frontier_min_cluster

    # -- orchestration -------------------------------------------------------------------

    def run(self, iterations: int, out_dir: str | Path | None = None) -> dict:
        """Run up to ``iterations`` steps, optionally writing artifacts.

        Output files: metrics.csv (one record per completed iteration,
        deterministic fields), timings.csv (wall-clock plan times),
        path_iterN.csv, map_iterN.pgm and run_report.json.
        """
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        res = self.loop.entropy_grid_resolution
        for _ in range(iterations):
            if self.status != "running":
                break
            rec = self.step()
            if out is not None:
                if self.last_path is not None:
                    self.last_path.export_csv(out / f"path_iter{rec.iteration}.csv")
                pgm.write_pgm(out / f"map_iter{rec.iteration}.pgm",
                              occupancy_raster(self.map, res, self.env.bounds),
                              "occupancy: 0 = free (black), 255 = occupied")
        report = self.report_dict()
        if out is not None:
            self.write_metrics_csv(out / "metrics.csv")
            self.write_timings_csv(out / "timings.csv")
            self.map.save_snapshot(out / "map_final.json")
            (out / "run_report.json").write_text(json.dumps(report, indent=2))
        return report

    def report_dict(self) -> dict:
        occ_mean = [m.mean_occ_along_path for m in self.metrics]
        occ_max = [m.max_occ_along_path for m in self.metrics]
        return {
            "method": self.method,
            "seed": self.seed,
            "env": self.env_label,
            "env_sha256": self.env_hash,
            "iterations_completed": self.iteration,
            "status": self.status if self.status != "running" else "completed",
            "collision": self.status == "collision",
            "initial_entropy_bits": self.initial_entropy,
            "final_entropy_bits": self.metrics[-1].map_entropy_bits if self.metrics else self.initial_entropy,
            "total_distance_m": self.total_distance,
            "mean_occ": float(np.mean(occ_mean)) if occ_mean else 0.0,
            "max_occ": float(np.max(occ_max)) if occ_max else 0.0,
            "plan_times_s": [m.plan_time_s for m in self.metrics],
            "replan_counts": self.replan_counts,
        }

    def write_metrics_csv(self, path: str | Path) -> None:
        """Deterministic per-iteration metrics; wall-clock timing lives in
        timings.csv so fixed-seed runs are byte-identical."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MetricsRecord.CSV_FIELDS)
            for m in self.metrics:
                w.writerow([m.iteration, repr(m.map_entropy_bits),
                            repr(m.mean_occ_along_path), repr(m.max_occ_along_path),
                            repr(m.distance_traveled_m)])

    def write_timings_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "plan_time_s"])
            for m in self.metrics:
                w.writerow([m.iteration, repr(m.plan_time_s)])
