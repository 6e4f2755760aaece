import csv
import json

import numpy as np
import pytest

from nbp.exploration import ExplorationRun, LoopConfig, MapConfig, map_entropy_total
from nbp.hilbert_map import FeatureMap, HilbertMap
from nbp.planner import ObjectiveConfig
from nbp.sensor import GroundTruthEnv, SensorModel


def box_env(w=10.0, h=6.0, res=0.05, wall=0.4):
    """Closed box with the outer wall drawn inside the bounds."""
    nx, ny = int(w / res), int(h / res)
    g = np.zeros((ny, nx), dtype=bool)
    k = int(wall / res)
    g[:k, :] = True
    g[-k:, :] = True
    g[:, :k] = True
    g[:, -k:] = True
    return GroundTruthEnv(g, res, (0.0, 0.0))


def small_sensor():
    return SensorModel(r_max=3.0, fov=np.pi, beam_count=12, arc_sample_count=12)


def quick_objective(**kw):
    kw.setdefault("max_iterations", 60)
    return ObjectiveConfig(**kw)


class TestMapEntropyTotal:
    def test_unknown_grid_is_one_bit_per_cell(self):
        m = HilbertMap(FeatureMap.grid((0, 0, 10, 10), 0.5))
        assert map_entropy_total(m, 1.0, (0, 0, 10, 10)) == 100.0

    def test_non_negative(self, wall_map):
        assert map_entropy_total(wall_map, 0.5, (0, 0, 4, 4)) >= 0.0

    def test_training_reduces_total(self, wall_map):
        baseline = 8 * 8  # 4 m / 0.5 m grid
        assert map_entropy_total(wall_map, 0.5, (0, 0, 4, 4)) < 0.5 * baseline


class TestStep:
    def test_empty_env_entropy_decreases(self):
        env = box_env()
        run = ExplorationRun(env, "functional", seed=0, start_pose=(5, 3, 0),
                             sensor=small_sensor(), objective=quick_objective())
        baseline = (10 / 0.25) * (6 / 0.25)
        assert run.initial_entropy < baseline
        rec = run.step()
        assert rec.map_entropy_bits < run.initial_entropy

    def test_zero_length_path_scans_in_place(self):
        env = box_env()
        run = ExplorationRun(env, "functional", seed=0, start_pose=(5, 3, 0),
                             sensor=small_sensor(),
                             objective=quick_objective(eta0=0.0, init_path_length=0.0))
        before = run.map.dataset_count
        pose0 = run.robot_pose.copy()
        rec = run.step()
        assert np.array_equal(run.robot_pose, pose0)
        assert run.map.dataset_count == before + 1
        assert rec.iteration == 1

    def test_replan_on_revealed_wall(self):
        # corridor with a wall beyond the initial sensing range; the straight
        # plan crosses it, a mid-execution scan reveals it, execution aborts
        env = box_env(w=12.0, h=4.0)
        k0 = int(6.0 / env.resolution)
        k1 = int(6.4 / env.resolution)
        env.grid[:, k0:k1] = True
        run = ExplorationRun(
            env, "functional", seed=3, start_pose=(1.5, 2.0, 0.0),
            sensor=SensorModel(r_max=3.0, fov=np.pi, beam_count=12,
                               arc_sample_count=12),
            objective=quick_objective(eta0=0.0, init_path_length=6.0, p_safe=0.62))
        run._seed_guess = lambda: None  # plan straight along the heading
        rec = run.step()
        assert sum(run.replan_counts) >= 1
        assert run.status == "running"
        assert run.robot_pose[0] < 6.0

    def test_metrics_fields(self):
        env = box_env()
        run = ExplorationRun(env, "functional", seed=1, start_pose=(5, 3, 0),
                             sensor=small_sensor(), objective=quick_objective())
        rec = run.step()
        assert rec.iteration == 1
        assert rec.map_entropy_bits >= 0
        assert 0 <= rec.mean_occ_along_path <= 100
        assert rec.mean_occ_along_path <= rec.max_occ_along_path
        assert rec.plan_time_s > 0
        assert rec.distance_traveled_m >= 0

    def test_pose_trace_continuity(self):
        env = box_env()
        run = ExplorationRun(env, "functional", seed=2, start_pose=(5, 3, 0),
                             sensor=small_sensor(), objective=quick_objective())
        for _ in range(3):
            if run.status != "running":
                break
            run.step()
        poses = np.array([p[:2] for p in run.traversed])
        gaps = np.linalg.norm(np.diff(poses, axis=0), axis=1)
        assert gaps.max() <= 1.5 * run.loop.scan_stride_m + 1e-9

    def test_collision_terminates_run(self):
        # one-cell sliver wall and a lax threshold: the map never flags it
        # hard enough to abort, so the executed path reaches the cell
        env = box_env(w=10.0, h=4.0)
        k0 = int(5.0 / env.resolution)
        env.grid[:, k0:k0 + 1] = True
        run = ExplorationRun(
            env, "functional", seed=0, start_pose=(1.5, 2.0, 0.0),
            sensor=SensorModel(r_max=3.0, fov=np.pi, beam_count=8,
                               arc_sample_count=8, range_noise_sigma=0.0),
            objective=quick_objective(eta0=0.0, init_path_length=6.0, p_safe=0.999),
            loop=LoopConfig(train_epochs=1))
        run._seed_guess = lambda: None
        for _ in range(8):
            if run.status != "running":
                break
            run.step()
        assert run.status == "collision"
        assert run.report_dict()["collision"] is True

    def test_start_in_wall_rejected(self):
        env = box_env()
        with pytest.raises(ValueError):
            ExplorationRun(env, "functional", start_pose=(0.1, 0.1, 0))

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError, match="functional"):
            ExplorationRun(box_env(), "teleport")


def sealed_room_run(patience=2):
    """Fully scanned closed box smaller than the sensor range.

    Every ray from any interior pose crosses a confident wall, so no
    expected observation survives anywhere: a bona fide dead end.
    """
    env = box_env(w=3.8, h=3.8)
    run = ExplorationRun(env, "functional", seed=4, start_pose=(1.9, 1.9, 0),
                         sensor=small_sensor(),
                         objective=quick_objective(max_iterations=40),
                         loop=LoopConfig(deadend_patience=patience))
    for pose in ((2.6, 1.9, 0.0), (2.6, 2.6, np.pi / 2), (1.2, 2.6, np.pi),
                 (1.2, 1.2, -np.pi / 2), (1.9, 1.9, 0.0)):
        run._move_to(pose)
        run._scan_at(pose)
    return run


class TestDeadEnd:
    def test_open_frontier_not_deadend(self):
        env = box_env(w=14.0, h=6.0)
        run = ExplorationRun(env, "functional", seed=5, start_pose=(2, 3, 0),
                             sensor=small_sensor(),
                             objective=quick_objective(),
                             loop=LoopConfig(deadend_patience=1))
        run.step()
        assert run.status == "running"

    def test_sealed_room_completes(self):
        # nothing informative anywhere and no frontier left: the reversal
        # exhausts the history and the run reports full coverage
        run = sealed_room_run(patience=2)
        for _ in range(4):
            if run.status != "running":
                break
            run.step()
        assert run.status == "complete"

    def test_infinite_patience_never_triggers(self):
        run = sealed_room_run(patience=float("inf"))
        for _ in range(3):
            run.step()
        assert run.status == "running"
        assert not run.detect_deadend()

    def test_probe_is_small_when_sealed(self):
        run = sealed_room_run()
        assert np.linalg.norm(run._mi_probe(run.robot_pose)) < 1e-3


class TestReverseOnPath:
    def _pocket_env(self):
        # 10 x 4 box whose west wall has a doorway into unexplored space
        env = box_env(w=10.0, h=4.0)
        j0 = int(1.4 / env.resolution)
        j1 = int(2.6 / env.resolution)
        env.grid[j0:j1, :int(0.4 / env.resolution)] = False  # open west door
        # widen the world so the door leads somewhere unknown
        pad = np.zeros((env.grid.shape[0], int(6.0 / env.resolution)), dtype=bool)
        pad[:int(0.4 / env.resolution), :] = True
        pad[-int(0.4 / env.resolution):, :] = True
        grid = np.hstack([pad, env.grid])
        return GroundTruthEnv(grid, env.resolution, (-6.0, 0.0))

    def test_reverses_to_informative_pose(self):
        env = self._pocket_env()
        run = ExplorationRun(env, "functional", seed=6, start_pose=(1.5, 2.0, 0.0),
                             sensor=small_sensor(),
                             objective=quick_objective(),
                             loop=LoopConfig(deadend_patience=2))
        # walk east into the pocket, scanning along the way
        xs = np.arange(2.0, 8.6, 0.5)
        for x in xs:
            run._move_to((x, 2.0, 0.0))
            run._scan_at((x, 2.0, 0.0))
        visited = {tuple(np.round(p[:2], 6)) for p in run.traversed}
        assert run._pose_is_deadend(run.robot_pose)
        run._deadend_window = [(0.0, "trapped", 0.0)] * 2
        assert run.detect_deadend()
        run.reverse_on_path()
        assert run.status == "running"
        # ended west of the pocket, at an already-visited location
        assert run.robot_pose[0] < 8.0
        assert tuple(np.round(run.robot_pose[:2], 6)) in visited
        assert not run._pose_is_deadend(run.robot_pose)

    def test_complete_at_history_start_when_no_frontiers(self):
        run = sealed_room_run(patience=2)
        run._deadend_window = [(0.0, "trapped", 0.0)] * 2
        assert run.detect_deadend()
        run.reverse_on_path()
        assert run.status == "complete"

    def test_exhausted_when_frontiers_unreachable(self):
        # sealed room with a slit to a second chamber: scans through the
        # slit leave a frontier behind it, but the body cannot pass
        env = box_env(w=7.0, h=3.8)
        k0 = int(3.4 / env.resolution)
        k1 = int(3.8 / env.resolution)
        env.grid[:, k0:k1] = True
        j0 = int(1.75 / env.resolution)
        j1 = int(2.05 / env.resolution)
        env.grid[j0:j1, k0:k1] = False  # 0.3 m slit
        run = ExplorationRun(env, "functional", seed=8, start_pose=(1.9, 1.9, 0),
                             sensor=small_sensor(),
                             objective=quick_objective(max_iterations=40),
                             loop=LoopConfig(deadend_patience=2))
        for pose in ((2.6, 1.9, 0.0), (2.6, 2.6, 1.5), (1.2, 2.6, 3.0),
                     (1.2, 1.2, -1.5), (2.9, 1.9, 0.0), (1.9, 1.9, 0.0)):
            run._move_to(pose)
            run._scan_at(pose)
        run._history = [run.robot_pose.copy()]  # dead-end right at the start
        run._deadend_window = [(0.0, "trapped", 0.0)] * 2
        assert run.detect_deadend()
        run.reverse_on_path()
        assert run.status == "exhausted"


class TestRunOutputs:
    def test_artifact_files(self, tmp_path):
        env = box_env()
        run = ExplorationRun(env, "functional", seed=7, start_pose=(5, 3, 0),
                             sensor=small_sensor(), objective=quick_objective(),
                             env_label="box", env_hash=env.content_hash())
        report = run.run(2, tmp_path)
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "timings.csv").exists()
        assert (tmp_path / "run_report.json").exists()
        assert (tmp_path / "map_iter1.pgm").exists()
        assert (tmp_path / "path_iter1.csv").exists()
        with open(tmp_path / "metrics.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "map_entropy_bits", "mean_occ_along_path",
                           "max_occ_along_path", "distance_traveled_m"]
        assert len(rows) == 3
        with open(tmp_path / "timings.csv", newline="") as fh:
            trows = list(csv.reader(fh))
        assert trows[0] == ["iteration", "plan_time_s"]
        assert len(trows) == 3
        loaded = json.loads((tmp_path / "run_report.json").read_text())
        assert loaded["method"] == "functional"
        assert loaded["seed"] == 7
        assert loaded["env_sha256"] == env.content_hash()
        assert loaded == report
