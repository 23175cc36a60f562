"""SVG figures rendered from the CSV files the other commands write."""

import csv
import io
import logging
import math
from pathlib import Path
from typing import Literal, Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from matplotlib.patches import Circle, Rectangle

from .checkpoint import atomic_write_bytes
from .errors import DataError
from .gap import CSV_COLUMNS as GAP_COLUMNS
from .maze import MAZES, MazeSpec

logger = logging.getLogger(__name__)

PlotKind = Literal["trajectory", "losses", "gap", "ablation"]

# stable element ids and no timestamp, so identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "subgoal-planner"
_SVG_METADATA = {"Date": None}


def read_csv(path: str | Path, required: Sequence[str], numeric: Sequence[str] = ()) -> list[dict]:
    """Rows of a CSV file with the ``numeric`` columns parsed as floats."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise DataError(f"{path} is empty")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path} is missing columns {missing}")
        rows = []
        for line, row in enumerate(reader, start=2):
            try:
                for c in numeric:
                    row[c] = float(row[c])
            except (TypeError, ValueError) as e:
                raise DataError(f"{path}, row {line}: bad value in column '{c}': {e}") from e
            rows.append(row)
    if not rows:
        raise DataError(f"{path} has a header but no data rows")
    return rows


def _save(fig: Figure, out: str | Path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata=_SVG_METADATA, bbox_inches="tight")
    return atomic_write_bytes(out, buf.getvalue())


def _draw_maze(ax, spec: MazeSpec):
    rows, cols = spec.shape
    cs = spec.cell_size
    for r in range(rows):
        for c in range(cols):
            if spec.grid[r, c]:
                ax.add_patch(Rectangle((c * cs, r * cs), cs, cs, color="0.25"))
    ax.set_xlim(0, cols * cs)
    ax.set_ylim(rows * cs, 0)
    ax.set_aspect("equal")


def plot_trajectory(path: str | Path, out: str | Path, episode: int | None = None) -> Path:
    """Maze walls, executed path, start, chosen subgoals and the goal disc."""
    rows = read_csv(
        path,
        ("episode", "maze_id", "t", "x", "y", "goal_x", "goal_y", "replan", "sub_x", "sub_y"),
        ("episode", "t", "x", "y", "goal_x", "goal_y", "replan", "sub_x", "sub_y"),
    )
    chosen = int(rows[0]["episode"]) if episode is None else episode
    rows = [r for r in rows if int(r["episode"]) == chosen]
    if not rows:
        raise DataError(f"{path} has no rows for episode {chosen}")
    maze_id = rows[0]["maze_id"]
    if maze_id not in MAZES:
        raise DataError(f"{path}: cannot draw unknown maze '{maze_id}'")
    spec = MazeSpec.named(maze_id)

    fig = Figure(figsize=(5, 5))
    ax = fig.add_subplot()
    _draw_maze(ax, spec)
    xs = [r["x"] for r in rows]
    ys = [r["y"] for r in rows]
    ax.plot(xs, ys, "-", color="tab:blue", lw=1.5, label="path")
    ax.plot(xs[0], ys[0], "o", color="tab:green", label="start")
    subs = [(r["sub_x"], r["sub_y"]) for r in rows if r["replan"] and not math.isnan(r["sub_x"])]
    if subs:
        sx, sy = zip(*subs)
        ax.plot(sx, sy, "x", color="tab:orange", label="subgoals")
    ax.add_patch(
        Circle((rows[0]["goal_x"], rows[0]["goal_y"]), spec.goal_radius, color="tab:red", alpha=0.5)
    )
    ax.plot([], [], "o", color="tab:red", alpha=0.5, label="goal")
    ax.set_title(f"{maze_id}, episode {chosen}")
    ax.legend(loc="upper right", fontsize="small")
    return _save(fig, out)


def plot_losses(path: str | Path, out: str | Path) -> Path:
    """One curve per loss column over epochs, log scale when all values are positive."""
    with Path(path).open(newline="", encoding="utf-8") as f:
        header = next(csv.reader(f), None)
    if not header:
        raise DataError(f"{path} is empty")
    columns = [c for c in header if c != "epoch"]
    rows = read_csv(path, ["epoch", *columns], ["epoch"])
    # a term missing from some epochs leaves a blank cell; matplotlib skips the NaN
    for line, row in enumerate(rows, start=2):
        for c in columns:
            try:
                row[c] = float(row[c]) if row[c] not in ("", None) else math.nan
            except ValueError as e:
                raise DataError(f"{path}, row {line}: bad value in column '{c}': {e}") from e
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    epochs = [r["epoch"] for r in rows]
    positive = True
    for c in columns:
        values = [r[c] for r in rows]
        positive = positive and all(v > 0 for v in values if not math.isnan(v))
        ax.plot(epochs, values, label=c)
    if positive:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize="small")
    return _save(fig, out)


def plot_gap(path: str | Path, out: str | Path) -> Path:
    """Log-log guidance gap against dimension, one series per diffusion step."""
    rows = read_csv(path, GAP_COLUMNS, GAP_COLUMNS)
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    for ell in sorted({int(r["ell"]) for r in rows}):
        series = sorted((r for r in rows if int(r["ell"]) == ell), key=lambda r: r["d"])
        d = np.array([r["d"] for r in series])
        delta = np.array([r["delta_ebm"] for r in series])
        err = np.array([r["stderr"] for r in series])
        line = ax.errorbar(d, delta, yerr=1.96 * err, fmt="o", ms=4, label=f"step {ell}")
        ax.plot(d, [r["analytic"] for r in series], "--", color=line[0].get_color(), lw=0.8)
        good = delta > 0
        if good.sum() >= 2:
            slope, intercept = np.polyfit(np.log(d[good]), np.log(delta[good]), 1)
            fit = np.exp(intercept) * d**slope
            ax.plot(d, fit, "-", color=line[0].get_color(), lw=1, alpha=0.7)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("latent dimension d")
    ax.set_ylabel("guidance gap")
    ax.legend(fontsize="small")
    return _save(fig, out)


def plot_ablation(path: str | Path, out: str | Path) -> Path:
    """Success-rate bars, one per ablation row."""
    rows = read_csv(path, ("name", "success_rate"), ("success_rate",))
    fig = Figure(figsize=(max(4, 0.8 * len(rows) + 2), 4))
    ax = fig.add_subplot()
    names = [r["name"] for r in rows]
    ax.bar(range(len(rows)), [r["success_rate"] for r in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)), names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("success rate")
    return _save(fig, out)


PLOTTERS = {
    "trajectory": plot_trajectory,
    "losses": plot_losses,
    "gap": plot_gap,
    "ablation": plot_ablation,
}


def render_plot(kind: PlotKind, path: str | Path, out: str | Path) -> Path:
    if kind not in PLOTTERS:
        raise ValueError(f"unknown plot kind '{kind}'")
    result = PLOTTERS[kind](path, out)
    logger.info("wrote %s plot to %s", kind, result)
    return result
