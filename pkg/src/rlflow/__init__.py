"""Desk-scale simulator for disaggregated RL post-training.

Trainers, rollout services, a versioned weight store and a dataflow
layer run under a discrete-event clock. See README.md for a tour.
"""

from .core import (
    ModelVersion,
    RolloutGroup,
    RolloutTask,
    TrainingBatch,
    Trajectory,
    TrajectoryMeta,
    WorkflowSpec,
    group_is_zero_advantage,
    validate_workflow,
)
from .harness import MetricsLog, RunResult, Simulation, emit_metrics, run, run_live
from .scenario import Scenario, load_preset, load_scenario, loads_scenario

__version__ = "0.1.0"

__all__ = [
    "ModelVersion",
    "RolloutGroup",
    "RolloutTask",
    "TrainingBatch",
    "Trajectory",
    "TrajectoryMeta",
    "WorkflowSpec",
    "group_is_zero_advantage",
    "validate_workflow",
    "MetricsLog",
    "RunResult",
    "Simulation",
    "emit_metrics",
    "run",
    "run_live",
    "Scenario",
    "load_preset",
    "load_scenario",
    "loads_scenario",
]
