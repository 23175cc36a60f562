"""Core modules for hierarchical latent planning."""

from .config import RunConfig, RunConfigParser
from .diffusion import DiffusionModel, ManifoldIndex, NoiseSchedule, make_schedule
from .errors import PlannerError
from .flow import FlowModel, integrate_ode
from .linalg import RngStream
from .maze import MazeSpec, generate_dataset
from .mpc import EvalReport, evaluate, make_agent, mpc_rollout
from .planner import PlannerComponents, train_planner
from .world_model import WorldModel, train_world_model

__all__ = [
    "DiffusionModel",
    "EvalReport",
    "FlowModel",
    "ManifoldIndex",
    "MazeSpec",
    "NoiseSchedule",
    "PlannerComponents",
    "PlannerError",
    "RngStream",
    "RunConfig",
    "RunConfigParser",
    "WorldModel",
    "evaluate",
    "generate_dataset",
    "integrate_ode",
    "make_agent",
    "make_schedule",
    "mpc_rollout",
    "train_planner",
    "train_world_model",
]
