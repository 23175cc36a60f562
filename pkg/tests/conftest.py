"""Shared fixtures: a tiny run configuration and a corridor pipeline trained for a few epochs."""

import pytest

from subgoal_planner.core.config import RunConfig, RunConfigParser
from subgoal_planner.core.linalg import RngStream
from subgoal_planner.core.maze import generate_dataset
from subgoal_planner.core.planner import train_planner
from subgoal_planner.core.world_model import export_latent_dataset, train_world_model

TINY = {
    "seed": 0,
    "eval_episodes": 2,
    "maze": {"maze_id": "corridor5", "max_episode_length": 40, "n_success": 3, "n_fail": 2},
    "world_model": {
        "d_z": 3,
        "d_h": 6,
        "d_e": 6,
        "hidden": 12,
        "proj_dim": 4,
        "anchor_interval": 3,
        "loss": {"negatives_per_anchor": 4},
    },
    "diffusion": {"steps": 20, "hidden": [16, 16], "time_dim": 4},
    "guidance": {"k_neighbors": 3, "sample_steps": 5},
    "flow": {"integrator": "rk4", "steps": 2, "hidden": [16, 16], "time_dim": 4},
    "planner": {
        "H": 4,
        "K": 2,
        "replan_every": 2,
        "max_env_steps": 12,
        "context_stride": 0,
        "ebm_hidden": [8],
        "projection_batch": 2,
        "projection_sample_steps": 3,
    },
    "training": {"wm_epochs": 2, "planner_epochs": 2, "batch_size": 4, "lr": 1e-3},
}


def tiny_config(**overrides) -> RunConfig:
    data = {k: dict(v) if isinstance(v, dict) else v for k, v in TINY.items()}
    for section, values in overrides.items():
        if isinstance(values, dict):
            data[section] = {**data[section], **values}
        else:
            data[section] = values
    return RunConfigParser.from_dict(data)


@pytest.fixture
def tiny_run() -> RunConfig:
    return tiny_config()


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(RunConfigParser.to_yaml(tiny_config()))
    return path


@pytest.fixture(scope="session")
def corridor():
    return tiny_config().maze.to_spec()


@pytest.fixture(scope="session")
def demos(corridor):
    return generate_dataset(corridor, 3, 2, RngStream(0))


@pytest.fixture(scope="session")
def trained_wm(demos):
    run = tiny_config()
    return train_world_model(demos, run.world_model, run.training, RngStream(1))


@pytest.fixture(scope="session")
def wm(trained_wm):
    return trained_wm[0]


@pytest.fixture(scope="session")
def latents(wm, demos):
    return export_latent_dataset(wm, demos)


@pytest.fixture(scope="session")
def hdflow(latents):
    comps, _ = train_planner(latents, tiny_config(), RngStream(2))
    return comps
