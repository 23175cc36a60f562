"""CLI entry point for the subgoal planner."""

import functools
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from .. import __version__
from ..core.ablation import (
    COMPONENTS,
    VARIANTS,
    AblationContext,
    AblationResult,
    random_reference,
    run_components,
    run_k_sweep,
    run_variants,
)
from ..core.checkpoint import require_same_world_model
from ..core.config import RunConfig, RunConfigParser, default_output_dir
from ..core.diffusion import make_schedule
from ..core.errors import PlannerError
from ..core.gap import default_steps, guidance_gap_experiment
from ..core.linalg import RngStream
from ..core.maze import MAZES, generate_dataset, load_dataset, save_dataset
from ..core.mpc import evaluate, load_components, make_agent
from ..core.planner import load_planner, save_planner, train_planner
from ..core.plots import PLOTTERS, render_plot
from ..core.world_model import (
    export_latent_dataset,
    load_latent_dataset,
    load_world_model,
    save_latent_dataset,
    save_world_model,
    train_world_model,
)

console = Console()
err_console = Console(stderr=True)

# stream offsets per command, so commands sharing a seed draw independent noise
_GEN_STREAM, _WM_STREAM, _PLANNER_STREAM, _EVAL_STREAM, _ABLATE_STREAM, _GAP_STREAM = range(6)


def setup_logging(verbose: bool = False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False, rich_tracebacks=False)],
        force=True,
    )


def handle_errors(fn):
    """Report domain errors in red and exit with their code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PlannerError as e:
            err_console.print(f"[bold red]❌ {type(e).__name__}: {e}[/bold red]")
            sys.exit(e.exit_code)
        except FileNotFoundError as e:
            err_console.print(f"[bold red]❌ {e}[/bold red]")
            sys.exit(3)
        except ValueError as e:
            err_console.print(f"[bold red]❌ invalid input: {e}[/bold red]")
            sys.exit(1)

    return wrapper


@contextmanager
def spinner(description: str):
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    ) as progress:
        progress.add_task(description, total=None)
        yield


def load_config(path: str | None, echo: bool = True) -> RunConfig:
    if path is not None:
        return RunConfigParser.parse(path)
    config = RunConfig()
    if echo:
        console.print("   [dim]no --config given, using defaults:[/dim]")
        console.print(RunConfigParser.to_yaml(config), markup=False, highlight=False)
    return config


def with_seed(config: RunConfig, seed: int | None) -> RunConfig:
    return config if seed is None else config.model_copy(update={"seed": seed})


def int_list(ctx, param, value):
    if value is None:
        return None
    try:
        items = [int(v) for v in value.replace(",", " ").split()]
    except ValueError:
        raise click.BadParameter(
            f"expected integers separated by spaces or commas, got '{value}'"
        ) from None
    if not items:
        raise click.BadParameter("expected at least one integer")
    return items


def out_dir(path: str | None) -> Path:
    directory = Path(path) if path else default_output_dir()
    directory.mkdir(parents=True, exist_ok=True)
    return directory


@click.group()
@click.version_option(version=__version__)
@click.option("--verbose", "-v", is_flag=True, help="Debug-level logging")
def cli(verbose):
    """Subgoal Planner - hierarchical latent planning in a 2D maze.

    Output files go to --out, or to $SUBGOAL_PLANNER_OUT (default ./output).
    """
    setup_logging(verbose)


@cli.command("gen-data")
@click.option("--maze", type=click.Choice(sorted(MAZES)), default=None, help="Maze layout")
@click.option("--n-success", type=int, default=None, help="Successful demonstrations")
@click.option("--n-fail", type=int, default=None, help="Failed demonstrations")
@click.option("--randomization", type=click.Choice(["low", "med", "high"]), default=None)
@click.option("--seed", type=int, default=None, help="Master seed")
@click.option("--config", "-c", default=None, help="Run config (YAML/JSON)")
@click.option("--out", "-o", default=None, help="Output directory")
@handle_errors
def gen_data(maze, n_success, n_fail, randomization, seed, config, out):
    """Generate expert demonstrations (writes demos.jsonl)."""
    run = with_seed(load_config(config, echo=False), seed)
    settings = run.maze.model_copy(
        update={
            k: v
            for k, v in {
                "maze_id": maze,
                "n_success": n_success,
                "n_fail": n_fail,
                "randomization": randomization,
            }.items()
            if v is not None
        }
    )
    spec = settings.to_spec()
    console.print("[bold blue]🧭 Generating demonstrations[/bold blue]")
    console.print(f"   maze: {spec.maze_id}  randomization: {spec.randomization}  seed: {run.seed}")

    rng = RngStream(run.seed).child(_GEN_STREAM)
    with spinner("Rolling out expert..."):
        demos = generate_dataset(spec, settings.n_success, settings.n_fail, rng)
    path = save_dataset(spec, demos, out_dir(out) / "demos.jsonl")

    ok = [d.T for d in demos if d.success]
    bad = [d.T for d in demos if not d.success]
    console.print(f"   ✅ {len(ok)} successful (mean length {sum(ok) / max(len(ok), 1):.1f})")
    console.print(f"   ✅ {len(bad)} failed (mean length {sum(bad) / max(len(bad), 1):.1f})")
    console.print(f"\n[bold green]✅ Dataset saved: {path}[/bold green]")


@cli.command("train-wm")
@click.option("--data", "-d", required=True, help="Demonstration dataset (demos.jsonl)")
@click.option("--config", "-c", default=None, help="Run config (YAML/JSON)")
@click.option("--seed", type=int, default=None, help="Master seed")
@click.option("--out", "-o", default=None, help="Output directory")
@handle_errors
def train_wm(data, config, seed, out):
    """Stage 1: train the world model and export latents.

    Writes world_model.zip, wm_losses.csv (epoch plus one column per loss)
    and latents.jsonl.
    """
    console.print("[bold blue]🌍 Training world model[/bold blue]")
    run = with_seed(load_config(config), seed)
    directory = out_dir(out)

    console.print("\n[bold]1. Loading demonstrations...[/bold]")
    _, demos = load_dataset(data)
    console.print(f"   ✅ Loaded {len(demos)} demonstrations")

    console.print("\n[bold]2. Training...[/bold]")
    with spinner(f"{run.training.wm_epochs} epochs..."):
        wm, curves = train_world_model(
            demos, run.world_model, run.training, RngStream(run.seed).child(_WM_STREAM)
        )
    wm_path = save_world_model(wm, directory / "world_model.zip")
    curves.save(directory / "wm_losses.csv")
    console.print(f"   ✅ Final loss {curves.column('total')[-1]:.4f}")

    console.print("\n[bold]3. Exporting latents...[/bold]")
    latents = export_latent_dataset(wm, demos)
    lat_path = save_latent_dataset(latents, directory / "latents.jsonl")
    console.print(f"   ✅ {len(latents.records)} latent records")

    console.print(f"\n[bold green]✅ World model: {wm_path}[/bold green]")
    console.print(f"📦 Latents: {lat_path}")


@cli.command("train-planner")
@click.option("--latents", "-l", required=True, help="Latent dataset (latents.jsonl)")
@click.option("--wm", default=None, help="World model the latents must come from")
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Planner variant")
@click.option("--config", "-c", default=None, help="Run config (YAML/JSON)")
@click.option("--seed", type=int, default=None, help="Master seed")
@click.option("--out", "-o", default=None, help="Output directory")
@handle_errors
def train_planner_cmd(latents, wm, variant, config, seed, out):
    """Stage 2: train the hierarchical planner.

    Writes planner.zip and planner_losses.csv (epoch, hl, ll, ebm, proj, total).
    """
    console.print("[bold blue]🗺️  Training planner[/bold blue]")
    run = with_seed(load_config(config), seed)
    directory = out_dir(out)

    data = load_latent_dataset(latents)
    if wm is not None:
        require_same_world_model(
            load_world_model(wm).checksum(), data.wm_checksum, what="latents and world model"
        )
    console.print(f"   ✅ Loaded {len(data.records)} latent records")

    with spinner(f"{run.training.planner_epochs} epochs..."):
        comps, curves = train_planner(
            data, run, RngStream(run.seed).child(_PLANNER_STREAM), variant=variant
        )
    path = save_planner(comps, directory / "planner.zip")
    curves.save(directory / "planner_losses.csv")
    console.print(f"   ✅ Final loss {curves.column('total')[-1]:.4f}")
    console.print(f"\n[bold green]✅ Planner ({comps.variant}): {path}[/bold green]")


def _summary_table(title: str, rows: list[tuple[str, dict]]) -> Table:
    table = Table(title=title)
    table.add_column("planner")
    for key in (
        "episodes",
        "success_rate",
        "mean_steps_to_success",
        "hl_nfe_per_replan",
        "ll_nfe_per_replan",
    ):
        table.add_column(key, justify="right")
    for name, s in rows:
        table.add_row(
            name,
            str(s["episodes"]),
            f"{s['success_rate']:.2f}",
            f"{s['mean_steps_to_success']:.1f}",
            f"{s['hl_nfe_per_replan']:.0f}",
            f"{s['ll_nfe_per_replan']:.0f}",
        )
    return table


@cli.command("eval")
@click.option("--wm", required=True, help="World model bundle")
@click.option("--components", "-p", required=True, help="Planner bundle")
@click.option("--episodes", "-n", type=int, default=None, help="Episodes (default from config)")
@click.option("--randomization", type=click.Choice(["low", "med", "high"]), default=None)
@click.option("--maze", type=click.Choice(sorted(MAZES)), default=None, help="Maze layout")
@click.option("--seed", type=int, default=None, help="Master seed")
@click.option("--config", "-c", default=None, help="Run config (YAML/JSON)")
@click.option("--trace", is_flag=True, help="Also write trace.csv for trajectory plots")
@click.option("--no-timing", is_flag=True, help="Write zero wall-clock columns")
@click.option("--out", "-o", default=None, help="Output directory")
@handle_errors
def eval_cmd(wm, components, episodes, randomization, maze, seed, config, trace, no_timing, out):
    """Evaluate a trained planner with receding-horizon control.

    Writes eval.csv with columns task, randomization, seed, episode, success,
    steps, hl_ms, ll_ms, hl_nfe, ll_nfe. With --trace, trace.csv holds one row
    per step: episode, maze_id, t, x, y, goal_x, goal_y, ax, ay, replan,
    sub_x, sub_y, z0.. .
    """
    run = with_seed(load_config(config, echo=False), seed)
    overrides = {k: v for k, v in {"maze_id": maze, "randomization": randomization}.items() if v}
    spec = run.maze.model_copy(update=overrides).to_spec()
    n = episodes if episodes is not None else run.eval_episodes
    directory = out_dir(out)

    console.print("[bold blue]🎯 Evaluating planner[/bold blue]")
    world_model, comps = load_components(wm, components)
    agent = make_agent(world_model, comps, timing=not no_timing)
    console.print(f"   ✅ Loaded {comps.variant} planner (H={comps.H}, K={comps.K})")

    with spinner(f"{n} episodes..."):
        report = evaluate(
            spec,
            world_model,
            agent,
            comps.config,
            n,
            RngStream(run.seed).child(_EVAL_STREAM),
            trace_path=directory / "trace.csv" if trace else None,
        )
    path = report.save(directory / "eval.csv")
    title = f"{spec.maze_id} / {spec.randomization}"
    console.print(_summary_table(title, [(comps.variant, report.summary())]))
    console.print(f"\n[bold green]✅ Report: {path}[/bold green]")


@cli.command()
@click.option("--data", "-d", required=True, help="Demonstration dataset (for no-contrastive)")
@click.option("--wm", required=True, help="World model bundle")
@click.option("--latents", "-l", required=True, help="Latent dataset from that world model")
@click.option("--variant", multiple=True, type=click.Choice(VARIANTS), help="Planner variants")
@click.option(
    "--k-sweep", callback=int_list, default=None, help="Subgoal counts, e.g. '2 3 5 8 12'"
)
@click.option(
    "--component", multiple=True, type=click.Choice(COMPONENTS), help="Mechanisms to remove"
)
@click.option(
    "--components", "-p", default=None, help="Trained hdflow planner to reuse as the base"
)
@click.option("--episodes", "-n", type=int, default=None, help="Episodes per row")
@click.option("--seed", type=int, default=None, help="Master seed")
@click.option("--config", "-c", default=None, help="Run config (YAML/JSON)")
@click.option("--no-timing", is_flag=True, help="Write zero wall-clock columns")
@click.option("--out", "-o", default=None, help="Output directory")
@handle_errors
def ablate(
    data,
    wm,
    latents,
    variant,
    k_sweep,
    component,
    components,
    episodes,
    seed,
    config,
    no_timing,
    out,
):
    """Compare planner variants, removed mechanisms or subgoal counts.

    Writes ablation.csv with columns name, group, K, episodes, success_rate,
    mean_steps_to_success, hl_ms_per_step, ll_ms_per_step, hl_nfe_per_replan,
    ll_nfe_per_replan. A random-action reference row is always included.
    """
    if not (variant or k_sweep or component):
        raise click.UsageError("give at least one of --variant, --k-sweep or --component")
    run = with_seed(load_config(config, echo=False), seed)
    console.print("[bold blue]🧪 Ablation[/bold blue]")

    world_model = load_world_model(wm)
    lat = load_latent_dataset(latents)
    require_same_world_model(
        world_model.checksum(), lat.wm_checksum, what="latents and world model"
    )
    base = load_planner(components, wm_checksum=world_model.checksum()) if components else None
    _, demos = load_dataset(data)
    ctx = AblationContext(
        spec=run.maze.to_spec(),
        wm=world_model,
        latents=lat,
        run=run,
        rng=RngStream(run.seed).child(_ABLATE_STREAM),
        episodes=episodes if episodes is not None else run.eval_episodes,
        timing=not no_timing,
        demos=demos,
    )

    result = AblationResult()
    with spinner("Running ablations..."):
        result.rows.append(random_reference(ctx))
        if variant:
            result.rows.extend(run_variants(ctx, variant))
        if component:
            result.rows.extend(run_components(ctx, component, base))
        if k_sweep:
            result.rows.extend(run_k_sweep(ctx, k_sweep, base))
    path = result.save(out_dir(out) / "ablation.csv")
    console.print(_summary_table("ablation", [(r.name, r.report.summary()) for r in result.rows]))
    console.print(f"\n[bold green]✅ Comparison: {path}[/bold green]")


@cli.command("gap-analysis")
@click.option("--dims", callback=int_list, default="4 16 64 256", help="Latent dimensions")
@click.option(
    "--steps", "n_steps", type=int, default=1000, help="Diffusion steps L of the schedule"
)
@click.option(
    "--ells", callback=int_list, default=None, help="Steps to probe (default 10..90% of L)"
)
@click.option("--samples", type=int, default=100_000, help="Monte Carlo samples per point")
@click.option("--energy-scale", type=float, default=0.05, help="Energy weight per dimension")
@click.option("--seed", type=int, default=0, help="Seed")
@click.option("--out", "-o", default=None, help="Output directory")
@handle_errors
def gap_analysis(dims, n_steps, ells, samples, energy_scale, seed, out):
    """Measure the energy-guidance gap against latent dimension.

    Writes gap.csv with columns d, ell, alpha_bar, delta_ebm, stderr, analytic.
    """
    console.print("[bold blue]📐 Guidance gap[/bold blue]")
    sched = make_schedule(n_steps)
    steps = ells or default_steps(n_steps)
    with spinner(f"{len(dims) * len(steps)} points..."):
        result = guidance_gap_experiment(
            dims, sched, RngStream(seed).child(_GAP_STREAM), steps, energy_scale, samples
        )
    path = result.save(out_dir(out) / "gap.csv")
    console.print(f"   ✅ slope vs d: {result.slope:.3f} (expected 0.5)")
    console.print(f"   ✅ exponent vs 1 - alpha_bar: {result.noise_exponent:.3f} (expected -0.5)")
    console.print(f"\n[bold green]✅ Gap table: {path}[/bold green]")


@cli.command()
@click.option("--input", "-i", "input_path", required=True, help="CSV written by another command")
@click.option(
    "--kind", "-k", type=click.Choice(sorted(PLOTTERS)), required=True, help="Figure type"
)
@click.option("--out", "-o", default=None, help="Output SVG path")
@handle_errors
def plot(input_path, kind, out):
    """Render an SVG figure from a CSV file."""
    target = Path(out) if out else default_output_dir() / f"{Path(input_path).stem}_{kind}.svg"
    path = render_plot(kind, input_path, target)
    console.print(f"[bold green]✅ Figure: {path}[/bold green]")


if __name__ == "__main__":
    cli()
