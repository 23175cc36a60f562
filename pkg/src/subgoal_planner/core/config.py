"""Run configuration: pydantic models plus a commented YAML format."""

import json
import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

OUT_ENV = "SUBGOAL_PLANNER_OUT"


def default_output_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "./output"))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MazeSettings(_Section):
    maze_id: str = Field("default8", description="built-in layout name")
    cell_size: float = Field(1.0, gt=0, description="length units per grid cell")
    goal_radius: float = Field(0.3, gt=0, description="success radius, length units")
    max_episode_length: int = Field(200, ge=1, description="env steps per episode")
    randomization: Literal["low", "med", "high"] = Field(
        "low", description="start/goal perturbation level"
    )
    n_success: int = Field(100, ge=0, description="successful demonstrations")
    n_fail: int = Field(50, ge=0, description="failed demonstrations")

    def to_spec(self, **overrides):
        from .maze import MazeSpec

        kwargs = {
            "cell_size": self.cell_size,
            "goal_radius": self.goal_radius,
            "max_episode_length": self.max_episode_length,
            "randomization": self.randomization,
        }
        kwargs.update(overrides)
        return MazeSpec.named(self.maze_id, **kwargs)


class WmLossWeights(_Section):
    lambda_wm: float = Field(1.0, ge=0, description="reconstruction + KL weight")
    lambda_idm: float = Field(0.1, ge=0, description="inverse-dynamics weight")
    lambda_contrastive: float = Field(0.1, ge=0, description="InfoNCE weight")
    temperature: float = Field(0.1, gt=0, description="InfoNCE temperature")
    negatives_per_anchor: int = Field(16, ge=1, description="failed latents per anchor")


class WorldModelConfig(_Section):
    d_z: int = Field(8, ge=1, description="stochastic latent dim")
    d_h: int = Field(32, ge=1, description="recurrent state dim")
    d_e: int = Field(32, ge=1, description="observation embedding dim")
    hidden: int = Field(64, ge=1, description="hidden width of every head")
    proj_dim: int = Field(16, ge=1, description="contrastive projection dim")
    anchor_interval: int = Field(10, ge=1, description="steps between contrastive anchors")
    loss: WmLossWeights = Field(default_factory=WmLossWeights)


class GuidanceConfig(_Section):
    w_cfg: float = Field(2.0, ge=0, description="classifier-free guidance scale")
    w_ebm: float = Field(0.1, ge=0, description="energy guidance scale")
    sign: Literal["descent", "ascent"] = Field(
        "descent", description="energy guidance direction"
    )
    mode: Literal["mean_shift", "epsilon"] = Field(
        "mean_shift", description="where energy guidance enters the update"
    )
    project: bool = Field(True, description="manifold projection on/off")
    projection_window: Optional[tuple[int, int]] = Field(
        None, description="training-step window [lo, hi]; null = [L/3, 2L/3]"
    )
    k_neighbors: int = Field(10, ge=1, description="successful neighbours per projection")
    variance_retention: float = Field(
        0.99, gt=0, le=1, description="PCA cumulative variance kept"
    )
    sample_steps: int = Field(100, ge=1, description="respaced inference steps")

    @model_validator(mode="after")
    def _check_window(self):
        if self.projection_window is not None:
            lo, hi = self.projection_window
            if not 1 <= lo <= hi:
                raise ValueError(f"projection_window must satisfy 1 <= lo <= hi, got {lo, hi}")
        return self

    def window(self, train_steps: int) -> tuple[int, int]:
        if self.projection_window is not None:
            return self.projection_window
        return max(1, train_steps // 3), max(1, 2 * train_steps // 3)


class DiffusionConfig(_Section):
    steps: int = Field(1000, ge=1, description="training diffusion steps L")
    beta_start: float = Field(1e-4, gt=0, lt=1, description="first beta")
    beta_end: float = Field(0.02, gt=0, lt=1, description="last beta")
    hidden: tuple[int, ...] = Field((256, 256), description="noise-net hidden widths")
    time_dim: int = Field(16, ge=2, description="time embedding dim (even)")
    p_uncond: float = Field(0.1, ge=0, le=1, description="context drop-out probability")

    @model_validator(mode="after")
    def _check_betas(self):
        if self.beta_start >= self.beta_end:
            raise ValueError("beta_start must be below beta_end")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        return self


class FlowConfig(_Section):
    integrator: Literal["euler", "rk4", "dopri"] = Field("rk4", description="ODE solver")
    steps: int = Field(20, ge=1, description="fixed steps; dopri starts at 1/steps")
    rtol: float = Field(1e-6, gt=0, description="dopri relative tolerance")
    atol: float = Field(1e-8, gt=0, description="dopri absolute tolerance")
    hidden: tuple[int, ...] = Field((256, 256), description="velocity-net hidden widths")
    time_dim: int = Field(16, ge=2, description="time embedding dim (even)")


class PlannerConfig(_Section):
    variant: Literal["hdflow", "fd", "hf", "hd"] = Field(
        "hdflow", description="generator per level"
    )
    H: int = Field(10, ge=2, description="env steps between subgoals")
    K: int = Field(5, ge=1, description="subgoals sampled per plan")
    lambda_hl: float = Field(1.0, ge=0, description="subgoal diffusion loss weight")
    lambda_ll: float = Field(1.0, ge=0, description="segment flow loss weight")
    lambda_ebm: float = Field(0.1, ge=0, description="energy model loss weight")
    lambda_proj: float = Field(0.05, ge=0, description="projection loss weight")
    replan_every: int = Field(5, ge=1, description="executed actions between replans")
    max_env_steps: int = Field(200, ge=1, description="env steps per evaluation episode")
    context_stride: int = Field(5, ge=0, description="replan-offset augmentation; 0 = off")
    mask_padding: bool = Field(False, description="drop padded subgoal slots from the loss")
    ebm_hidden: tuple[int, ...] = Field((128, 128), description="energy-net hidden widths")
    projection_batch: int = Field(4, ge=1, description="plans sampled for the projection loss")
    projection_sample_steps: int = Field(
        10, ge=1, description="denoising steps for the projection loss"
    )

    @model_validator(mode="after")
    def _check_replan(self):
        if self.replan_every > self.H - 1:
            raise ValueError(f"replan_every must be <= H - 1 = {self.H - 1}")
        return self


class TrainingConfig(_Section):
    wm_epochs: int = Field(100, ge=1, description="world-model epochs")
    planner_epochs: int = Field(200, ge=1, description="planner epochs")
    batch_size: int = Field(64, ge=1, description="sequences per batch")
    lr: float = Field(1e-4, gt=0, description="Adam learning rate")


class RunConfig(_Section):
    seed: int = Field(0, ge=0, description="master seed")
    eval_episodes: int = Field(100, ge=1, description="episodes per evaluation")
    maze: MazeSettings = Field(default_factory=MazeSettings)
    world_model: WorldModelConfig = Field(default_factory=WorldModelConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    planner: PlannerConfig = Field(default_factory=PlannerConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)

    @model_validator(mode="after")
    def _check_cross(self):
        lo, hi = self.guidance.window(self.diffusion.steps)
        if hi > self.diffusion.steps:
            raise ValueError(f"projection_window upper end {hi} exceeds L={self.diffusion.steps}")
        if self.guidance.sample_steps > self.diffusion.steps:
            raise ValueError("sample_steps cannot exceed the training diffusion steps")
        return self


def _render(model: BaseModel, indent: int = 0) -> list[str]:
    lines = []
    pad = "  " * indent
    for name, info in type(model).model_fields.items():
        value = getattr(model, name)
        if isinstance(value, BaseModel):
            lines.append(f"{pad}{name}:")
            lines.extend(_render(value, indent + 1))
            continue
        if isinstance(value, tuple):
            value = list(value)
        text = yaml.safe_dump({name: value}, default_flow_style=None, sort_keys=False).strip()
        comment = f"  # {info.description}" if info.description else ""
        lines.append(f"{pad}{text}{comment}")
    return lines


class RunConfigParser:
    """Parse run configs in YAML or JSON format."""

    @staticmethod
    def from_dict(data: Optional[dict]) -> RunConfig:
        try:
            return RunConfig.model_validate(data or {})
        except ValidationError as e:
            raise ConfigError(f"invalid configuration: {e}") from e

    @staticmethod
    def parse(file_path: str | Path) -> RunConfig:
        """Parse a config file."""
        path = Path(file_path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        content = path.read_text(encoding="utf-8")
        fmt = "json" if path.suffix == ".json" else "yaml"
        return RunConfigParser.parse_string(content, format=fmt)

    @staticmethod
    def parse_string(content: str, format: str = "yaml") -> RunConfig:
        """Parse a config from string."""
        try:
            data = yaml.safe_load(content) if format == "yaml" else json.loads(content)
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            raise ConfigError(f"unparseable {format} config: {e}") from e
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config must be a mapping at the top level")
        return RunConfigParser.from_dict(data)

    @staticmethod
    def to_yaml(config: RunConfig) -> str:
        """Render a config as YAML with one comment per key."""
        return "\n".join(_render(config)) + "\n"
