"""Scene-graph guided task planning for a mobile manipulator in a 2D grid world."""

from .agent import AgentConfig, run_episode
from .gridworld import SceneSpec, SimState, load_scene, load_scene_file
from .scenes import bundled_suite, generate_scene
from .taskspec import EpisodeRecord, MetricsReport, TaskSpec, compute_metrics, parse_task

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "EpisodeRecord",
    "MetricsReport",
    "SceneSpec",
    "SimState",
    "TaskSpec",
    "bundled_suite",
    "compute_metrics",
    "generate_scene",
    "load_scene",
    "load_scene_file",
    "parse_task",
    "run_episode",
]
