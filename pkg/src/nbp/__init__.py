"""Next-Best-Path exploration on continuous occupancy maps."""

from .baselines import FrontierSet, detect_frontiers, frontier_explore_step, rrt_mi_explore_step
from .exploration import (ExplorationRun, LoopConfig, MapConfig, MetricsRecord,
                          map_entropy_total)
from .hilbert_map import FeatureMap, HilbertMap, ScanDataset
from .kernel_path import BodyModel, KernelPath, LinePath, TimeFeatures, WaypointPath
from .perturbed_map import PerturbedMap, PseudoObservations, build_perturbed
from .planner import ObjectiveConfig, OptimizeReport, StartUnsafeError, optimize, path_safety_profile
from .sensor import (GroundTruthEnv, InvalidPoseError, SensorModel, arc_samples,
                     expected_observations, raycast_truth)

__version__ = "0.1.0"
