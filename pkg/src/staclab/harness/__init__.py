"""Simulated actor-learner pipeline and desk-scale environments."""

from staclab.harness.envs import (
    BatchedEnv,
    BoxSpace,
    ChainMDP,
    DiscreteSpace,
    EnvFault,
    GridWorld,
    PointMass,
    RandomMDP,
    make_env,
    value_iteration,
)
from staclab.harness.pipeline import (
    Actor,
    EpisodeStats,
    HarnessConfig,
    Learner,
    RunResult,
    SnapshotBoard,
    run,
    run_deterministic,
    run_threaded,
)
from staclab.harness.queue import QueueClosed, TrajectoryQueue
from staclab.harness.tlog import TrajectoryLog, read_log

__all__ = [
    "Actor",
    "BatchedEnv",
    "BoxSpace",
    "ChainMDP",
    "DiscreteSpace",
    "EnvFault",
    "EpisodeStats",
    "GridWorld",
    "HarnessConfig",
    "Learner",
    "PointMass",
    "QueueClosed",
    "RandomMDP",
    "RunResult",
    "SnapshotBoard",
    "TrajectoryLog",
    "TrajectoryQueue",
    "make_env",
    "read_log",
    "run",
    "run_deterministic",
    "run_threaded",
    "value_iteration",
]
