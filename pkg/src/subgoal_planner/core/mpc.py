"""Receding-horizon deployment of trained planners in the maze.

An agent turns (z_now, z_goal) into a short action plan; ``mpc_rollout``
executes the first ``replan_every`` actions, re-encodes the new observation
and asks again, until success or the step limit.
"""

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import torch

from .checkpoint import atomic_write_text
from .config import GuidanceConfig, PlannerConfig
from .diffusion import DiffusionModel
from .errors import ConfigError, DivergenceError, IntegrationError
from .flow import FlowModel, anchor_segment, generate_segment
from .linalg import RngStream
from .maze import Action, MazeSpec, env_reset, env_step, is_success
from .neural import CallCounter
from .planner import PlannerComponents, actions_from_segment, load_planner
from .world_model import WorldModel, load_world_model

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "task", "randomization", "seed", "episode", "success", "steps",
    "hl_ms", "ll_ms", "hl_nfe", "ll_nfe",
)  # fmt: skip


@dataclass
class Plan:
    actions: list[Action]
    subgoal: Optional[torch.Tensor] = None
    hl_nfe: int = 0
    ll_nfe: int = 0
    hl_ms: float = 0.0
    ll_ms: float = 0.0


class Agent(Protocol):
    name: str

    def plan(self, z_now: torch.Tensor, z_goal: torch.Tensor, rng: RngStream) -> Plan: ...


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self._start = 0.0

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.ms = (time.perf_counter() - self._start) * 1e3 if self.enabled else 0.0
        return False


@dataclass
class HierarchicalAgent:
    """Subgoal generator on top, segment generator below, IDM for actions."""

    wm: WorldModel
    components: PlannerComponents
    guidance: Optional[GuidanceConfig] = None
    timing: bool = True
    name: str = "hierarchical"

    def _subgoals(self, c: torch.Tensor, rng: RngStream, counter: CallCounter) -> torch.Tensor:
        hl = self.components.hl
        if isinstance(hl, DiffusionModel):
            x = hl.sample(c, rng, counter, self.guidance)
        else:
            x = hl.sample(c, rng, counter)
        return x.reshape(self.components.K, self.components.d_z)

    def _segment(self, z_now, z_next, rng: RngStream, counter: CallCounter) -> torch.Tensor:
        ll, H = self.components.ll, self.components.H
        if isinstance(ll, FlowModel):
            return generate_segment(ll.v_net, z_now, z_next, ll.config, rng, H, counter)
        seg = ll.sample(torch.cat([z_now, z_next]), rng, counter)
        return anchor_segment(seg.reshape(H, self.components.d_z), z_now, z_next)

    def plan(self, z_now, z_goal, rng: RngStream) -> Plan:
        hl_calls, ll_calls = CallCounter(), CallCounter()
        with _Clock(self.timing) as hl_clock:
            subgoal = self._subgoals(torch.cat([z_now, z_goal]), rng, hl_calls)[0]
        with _Clock(self.timing) as ll_clock:
            seg = self._segment(z_now, subgoal, rng, ll_calls)
            actions = actions_from_segment(self.wm, seg)
        return Plan(actions, subgoal, hl_calls.calls, ll_calls.calls, hl_clock.ms, ll_clock.ms)


@dataclass
class FlatAgent:
    """One diffusion model over the whole dense latent future."""

    wm: WorldModel
    components: PlannerComponents
    guidance: Optional[GuidanceConfig] = None
    timing: bool = True
    name: str = "flat"

    def plan(self, z_now, z_goal, rng: RngStream) -> Plan:
        H, d_z = self.components.H, self.components.d_z
        calls = CallCounter()
        with _Clock(self.timing) as clock:
            dense = self.components.hl.sample(torch.cat([z_now, z_goal]), rng, calls, self.guidance)
            dense = dense.reshape(-1, d_z)
            seg = torch.cat([z_now[None], dense[: H - 1]])
            actions = actions_from_segment(self.wm, seg)
        return Plan(actions, dense[H - 2], calls.calls, 0, clock.ms, 0.0)


@dataclass
class RandomActionPlanner:
    """Uniform random actions; the lower reference for evaluations."""

    H: int = 10
    name: str = "random"

    def plan(self, z_now, z_goal, rng: RngStream) -> Plan:
        return Plan([Action.from_array(a) for a in rng.uniform(-1.0, 1.0, size=(self.H - 1, 2))])


def make_agent(
    wm: WorldModel,
    components: PlannerComponents,
    guidance: Optional[GuidanceConfig] = None,
    timing: bool = True,
) -> Agent:
    if components.variant == "fd":
        return FlatAgent(wm, components, guidance, timing)
    return HierarchicalAgent(wm, components, guidance, timing)


def load_components(
    wm_path: str | Path, planner_path: str | Path
) -> tuple[WorldModel, PlannerComponents]:
    """World model and planner bundle, rejected unless built on the same world model."""
    wm = load_world_model(wm_path)
    return wm, load_planner(planner_path, wm_checksum=wm.checksum())


@dataclass
class EpisodeResult:
    episode: int
    seed: int
    success: bool
    steps: int
    hl_ms: float = 0.0
    ll_ms: float = 0.0
    hl_nfe: int = 0
    ll_nfe: int = 0
    replans: int = 0
    error: Optional[str] = None
    trace: list[dict] = field(default_factory=list)


def _trace_row(episode, spec, state, goal, z, action, replan, subgoal_pos) -> dict:
    row = {
        "episode": episode,
        "maze_id": spec.maze_id,
        "t": state.t,
        "x": state.position[0],
        "y": state.position[1],
        "goal_x": float(goal[0]),
        "goal_y": float(goal[1]),
        "ax": action[0] if action is not None else math.nan,
        "ay": action[1] if action is not None else math.nan,
        "replan": int(replan),
        "sub_x": subgoal_pos[0],
        "sub_y": subgoal_pos[1],
    }
    row.update({f"z{i}": float(v) for i, v in enumerate(z)})
    return row


def mpc_rollout(
    spec: MazeSpec,
    wm: WorldModel,
    agent: Agent,
    config: PlannerConfig,
    rng: RngStream,
    episode: int = 0,
    trace: bool = False,
) -> EpisodeResult:
    """Run one episode with replanning every ``config.replan_every`` actions."""
    state, goal = env_reset(spec, rng.child(0))
    plan_rng = rng.child(1)
    z_goal = wm.encode_goal(goal)
    latent = wm.filter_step(None, state.array())
    result = EpisodeResult(
        episode=episode, seed=rng.seed, success=is_success(spec, state, goal), steps=0
    )
    no_subgoal = (math.nan, math.nan)
    if trace:
        result.trace.append(
            _trace_row(episode, spec, state, goal, latent.z, None, False, no_subgoal)
        )

    limit = min(config.max_env_steps, spec.max_episode_length)
    while not result.success and state.t < limit:
        try:
            plan = agent.plan(latent.z, z_goal, plan_rng)
        except (DivergenceError, IntegrationError) as e:
            logger.warning("episode %d: planner failed at t=%d: %s", episode, state.t, e)
            result.error = str(e)
            break
        result.replans += 1
        result.hl_nfe += plan.hl_nfe
        result.ll_nfe += plan.ll_nfe
        result.hl_ms += plan.hl_ms
        result.ll_ms += plan.ll_ms
        sub_pos = no_subgoal
        if plan.subgoal is not None:
            sub_pos = tuple(float(v) for v in wm.decode_position(latent.h, plan.subgoal))
        for i, action in enumerate(plan.actions[: config.replan_every]):
            if state.t >= limit:
                break
            state = env_step(spec, state, action)
            latent = wm.filter_step(latent, state.array())
            result.steps += 1
            if trace:
                row = _trace_row(
                    episode, spec, state, goal, latent.z, action.velocity, i == 0, sub_pos
                )
                result.trace.append(row)
            if is_success(spec, state, goal):
                result.success = True
                break
    logger.info(
        "episode %d: %s after %d steps (%d replans)",
        episode,
        "success" if result.success else "failure",
        result.steps,
        result.replans,
    )
    return result


@dataclass
class EvalReport:
    task: str
    randomization: str
    seed: int
    episodes: list[EpisodeResult] = field(default_factory=list)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    @property
    def successes(self) -> int:
        return sum(e.success for e in self.episodes)

    @property
    def success_rate(self) -> float:
        return self.successes / self.n_episodes if self.episodes else 0.0

    @property
    def mean_steps_to_success(self) -> float:
        steps = [e.steps for e in self.episodes if e.success]
        return float(np.mean(steps)) if steps else math.nan

    def _per_step(self, attr: str) -> float:
        steps = sum(e.steps for e in self.episodes)
        return sum(getattr(e, attr) for e in self.episodes) / steps if steps else 0.0

    @property
    def hl_ms_per_step(self) -> float:
        return self._per_step("hl_ms")

    @property
    def ll_ms_per_step(self) -> float:
        return self._per_step("ll_ms")

    @property
    def hl_nfe_per_replan(self) -> float:
        replans = sum(e.replans for e in self.episodes)
        return sum(e.hl_nfe for e in self.episodes) / replans if replans else 0.0

    @property
    def ll_nfe_per_replan(self) -> float:
        replans = sum(e.replans for e in self.episodes)
        return sum(e.ll_nfe for e in self.episodes) / replans if replans else 0.0

    def summary(self) -> dict[str, float]:
        return {
            "episodes": self.n_episodes,
            "successes": self.successes,
            "success_rate": self.success_rate,
            "mean_steps_to_success": self.mean_steps_to_success,
            "hl_ms_per_step": self.hl_ms_per_step,
            "ll_ms_per_step": self.ll_ms_per_step,
            "hl_nfe_per_replan": self.hl_nfe_per_replan,
            "ll_nfe_per_replan": self.ll_nfe_per_replan,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for e in self.episodes:
            writer.writerow(
                [
                    self.task, self.randomization, e.seed, e.episode, int(e.success), e.steps,
                    f"{e.hl_ms:.3f}", f"{e.ll_ms:.3f}", e.hl_nfe, e.ll_nfe,
                ]  # fmt: skip
            )
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.to_csv())


def trace_to_csv(episodes: list[EpisodeResult]) -> str:
    rows = [r for e in episodes for r in e.trace]
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def evaluate(
    spec: MazeSpec,
    wm: WorldModel,
    agent: Agent,
    config: PlannerConfig,
    n_episodes: int,
    rng: RngStream,
    task: Optional[str] = None,
    trace_path: Optional[str | Path] = None,
) -> EvalReport:
    """``n_episodes`` independent rollouts, episode i on stream ``rng.child(i)``."""
    if n_episodes < 1:
        raise ConfigError(f"evaluation needs at least one episode, got {n_episodes}")
    report = EvalReport(task=task or spec.maze_id, randomization=spec.randomization, seed=rng.seed)
    for i in range(n_episodes):
        result = mpc_rollout(
            spec, wm, agent, config, rng.child(i), episode=i, trace=trace_path is not None
        )
        report.episodes.append(result)
    logger.info(
        "%s: %d/%d successes (%.2f)", agent.name, report.successes, n_episodes, report.success_rate
    )
    if trace_path is not None:
        atomic_write_text(trace_path, trace_to_csv(report.episodes))
    return report

