"""Planner ablations: generator variants, component toggles and subgoal-count sweeps.

Every row is evaluated on the same latent dataset, world model and evaluation
seed so that differences isolate the planner choice.
"""

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import atomic_write_text
from .config import RunConfig, RunConfigParser
from .errors import ConfigError
from .linalg import RngStream
from .maze import Demonstration, MazeSpec
from .mpc import EvalReport, RandomActionPlanner, evaluate, make_agent
from .planner import PlannerComponents, train_planner
from .world_model import LatentDataset, WorldModel, export_latent_dataset, train_world_model

logger = logging.getLogger(__name__)

VARIANTS = ("hdflow", "fd", "hf", "hd")
COMPONENTS = ("no-proj", "no-ebm", "no-contrastive")

ABLATION_COLUMNS = (
    "name",
    "group",
    "K",
    "episodes",
    "success_rate",
    "mean_steps_to_success",
    "hl_ms_per_step",
    "ll_ms_per_step",
    "hl_nfe_per_replan",
    "ll_nfe_per_replan",
)


@dataclass
class AblationRow:
    name: str
    group: str
    K: int
    report: EvalReport

    def values(self) -> list:
        s = self.report.summary()
        return [self.name, self.group, self.K, s["episodes"]] + [
            repr(float(s[k])) for k in ABLATION_COLUMNS[4:]
        ]


@dataclass
class AblationResult:
    rows: list[AblationRow] = field(default_factory=list)

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for r in self.rows:
            writer.writerow(r.values())
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.to_csv())


@dataclass
class AblationContext:
    """Shared inputs of every ablation row."""

    spec: MazeSpec
    wm: WorldModel
    latents: LatentDataset
    run: RunConfig
    rng: RngStream
    episodes: int
    timing: bool = True
    demos: Optional[Sequence[Demonstration]] = None

    @property
    def train_rng(self) -> RngStream:
        return self.rng.child(0)

    @property
    def eval_rng(self) -> RngStream:
        return self.rng.child(1)

    def evaluate(
        self, comps: PlannerComponents, wm: Optional[WorldModel] = None, guidance=None
    ) -> EvalReport:
        wm = wm or self.wm
        agent = make_agent(wm, comps, guidance, self.timing)
        return evaluate(self.spec, wm, agent, comps.config, self.episodes, self.eval_rng)


def random_reference(ctx: AblationContext) -> AblationRow:
    agent = RandomActionPlanner(H=ctx.run.planner.H)
    report = evaluate(ctx.spec, ctx.wm, agent, ctx.run.planner, ctx.episodes, ctx.eval_rng)
    return AblationRow("random", "reference", ctx.run.planner.K, report)


def run_variants(ctx: AblationContext, variants: Sequence[str]) -> list[AblationRow]:
    rows = []
    for variant in variants:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown planner variant '{variant}', expected one of {VARIANTS}")
        logger.info("ablation: training variant %s", variant)
        comps, _ = train_planner(ctx.latents, ctx.run, ctx.train_rng, variant=variant)
        rows.append(AblationRow(variant, "variant", comps.K, ctx.evaluate(comps)))
    return rows


def run_components(
    ctx: AblationContext, components: Sequence[str], base: Optional[PlannerComponents] = None
) -> list[AblationRow]:
    """Full method plus one row per removed mechanism.

    Projection and energy guidance are switched off at sampling time on the
    base planner; the contrastive ablation retrains the world model and planner.
    """
    for name in components:
        if name not in COMPONENTS:
            raise ConfigError(f"unknown component ablation '{name}', expected one of {COMPONENTS}")
    if base is None:
        base, _ = train_planner(ctx.latents, ctx.run, ctx.train_rng, variant="hdflow")
    guidance = getattr(base.hl, "guidance", ctx.run.guidance)
    rows = [AblationRow("hdflow", "component", base.K, ctx.evaluate(base, guidance=guidance))]
    for name in components:
        logger.info("ablation: %s", name)
        if name == "no-proj":
            report = ctx.evaluate(base, guidance=guidance.model_copy(update={"project": False}))
        elif name == "no-ebm":
            report = ctx.evaluate(base, guidance=guidance.model_copy(update={"w_ebm": 0.0}))
        else:
            if ctx.demos is None:
                raise ConfigError("the no-contrastive ablation needs the demonstration dataset")
            wm_cfg = ctx.run.world_model.model_copy(deep=True)
            wm_cfg.loss.lambda_contrastive = 0.0
            wm, _ = train_world_model(ctx.demos, wm_cfg, ctx.run.training, ctx.rng.child(2))
            comps, _ = train_planner(
                export_latent_dataset(wm, ctx.demos), ctx.run, ctx.train_rng, variant="hdflow"
            )
            report = ctx.evaluate(comps, wm=wm)
        rows.append(AblationRow(name, "component", base.K, report))
    return rows


def sweep_config(run: RunConfig, k: int) -> RunConfig:
    """``run`` with K subgoals and the low-level loss off, re-validated as a whole."""
    data = run.model_dump()
    data["planner"].update(K=k, lambda_ll=0.0)
    return RunConfigParser.from_dict(data)


def run_k_sweep(
    ctx: AblationContext, ks: Sequence[int], base: Optional[PlannerComponents] = None
) -> list[AblationRow]:
    """One row per subgoal count; only the high-level planner is retrained."""
    if not ks or any(k < 1 for k in ks):
        raise ConfigError(f"k-sweep values must be >= 1, got {list(ks)}")
    if base is None:
        base, _ = train_planner(ctx.latents, ctx.run, ctx.train_rng, variant="hdflow")
    rows = []
    for k in ks:
        run = sweep_config(ctx.run, k)
        logger.info("ablation: K=%d", k)
        comps, _ = train_planner(ctx.latents, run, ctx.train_rng, variant=base.variant)
        comps.ll = base.ll
        rows.append(AblationRow(f"K={k}", "k-sweep", k, ctx.evaluate(comps)))
    return rows
