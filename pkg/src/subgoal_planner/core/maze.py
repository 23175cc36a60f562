"""2D point-mass maze, scripted expert and demonstration datasets.

World coordinates: x runs along grid columns, y along grid rows; cell
(row, col) covers [col*cs, (col+1)*cs] x [row*cs, (row+1)*cs]. A position is
free when it lies in the closed box of some open cell, so points on the face
between an open cell and a wall are legal.
"""

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
import numpy.typing as npt

from .checkpoint import atomic_write_text
from .errors import DataError, MazeError
from .linalg import RngStream

logger = logging.getLogger(__name__)

Randomization = Literal["low", "med", "high"]

# start/goal perturbation radius in cell units; None = anywhere open
RANDOMIZATION_RADIUS: dict[str, Optional[float]] = {"low": 0.1, "med": 0.3, "high": None}

STEP_GAIN = 0.25  # displacement per unit action, in cell units
WALL_MARGIN = 1e-6
MAX_PLACEMENT_TRIES = 1000
MAX_EPISODE_TRIES = 50
SUCCESS_NOISE = 0.05
FAILURE_NOISE = 0.5
TRUNCATION_RANGE = (0.2, 0.6)

DATASET_FORMAT = "maze-demos"
DATASET_VERSION = 1

# right, down, left, up in (drow, dcol)
_NEIGHBOURS = ((0, 1), (1, 0), (0, -1), (-1, 0))

MAZES: dict[str, tuple[str, ...]] = {
    "default8": (
        "S..#....",
        ".#.#.##.",
        ".#...#..",
        ".###.#.#",
        "...#....",
        "##.####.",
        "......#.",
        ".####..G",
    ),
    "corridor5": ("S...G",),
    "open4": (
        "S...",
        "....",
        "....",
        "...G",
    ),
}


@dataclass(frozen=True, eq=False)
class MazeSpec:
    grid: npt.NDArray[np.bool_]  # rows x cols, True = wall
    start_cell: tuple[int, int]
    goal_cell: tuple[int, int]
    cell_size: float = 1.0
    goal_radius: float = 0.3
    max_episode_length: int = 200
    randomization: Randomization = "low"
    maze_id: str = "default8"

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=bool)
        object.__setattr__(self, "grid", grid)
        for name in ("start_cell", "goal_cell"):
            r, c = getattr(self, name)
            if not (0 <= r < grid.shape[0] and 0 <= c < grid.shape[1]) or grid[r, c]:
                raise MazeError(f"{name} {(r, c)} is not an open cell")
        if self.goal_radius <= 0:
            raise MazeError("goal_radius must be positive")
        if self.max_episode_length < 1:
            raise MazeError("max_episode_length must be >= 1")
        if self.randomization not in RANDOMIZATION_RADIUS:
            raise MazeError(f"unknown randomization level '{self.randomization}'")

    @classmethod
    def from_layout(cls, layout: Sequence[str], maze_id: str = "custom", **kwargs) -> "MazeSpec":
        """Build from rows of '#' (wall), '.' (open), 'S' (start), 'G' (goal)."""
        rows = [list(r) for r in layout]
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise MazeError("maze layout must be a non-empty rectangle")
        grid = np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)
        start = goal = None
        for i, r in enumerate(rows):
            for j, ch in enumerate(r):
                if ch == "S":
                    start = (i, j)
                elif ch == "G":
                    goal = (i, j)
        if start is None:
            raise MazeError("maze layout has no start cell 'S'")
        return cls(grid=grid, start_cell=start, goal_cell=goal or start, maze_id=maze_id, **kwargs)

    @classmethod
    def named(cls, maze_id: str, **kwargs) -> "MazeSpec":
        if maze_id not in MAZES:
            raise MazeError(f"unknown maze '{maze_id}', choose from {sorted(MAZES)}")
        return cls.from_layout(MAZES[maze_id], maze_id=maze_id, **kwargs)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape  # type: ignore[return-value]

    @property
    def step_size(self) -> float:
        return STEP_GAIN * self.cell_size

    def layout(self) -> list[str]:
        rows = []
        for i, row in enumerate(self.grid):
            chars = ["#" if wall else "." for wall in row]
            if (i, self.goal_cell[1]) == self.goal_cell:
                chars[self.goal_cell[1]] = "G"
            if (i, self.start_cell[1]) == self.start_cell:
                chars[self.start_cell[1]] = "S"
            rows.append("".join(chars))
        return rows

    def cell_center(self, cell: tuple[int, int]) -> npt.NDArray[np.float64]:
        r, c = cell
        return np.array([(c + 0.5) * self.cell_size, (r + 0.5) * self.cell_size])

    def open_cells(self) -> list[tuple[int, int]]:
        return [(int(r), int(c)) for r, c in zip(*np.nonzero(~self.grid))]

    def to_dict(self) -> dict:
        return {
            "maze_id": self.maze_id,
            "layout": self.layout(),
            "start_cell": list(self.start_cell),
            "goal_cell": list(self.goal_cell),
            "cell_size": self.cell_size,
            "goal_radius": self.goal_radius,
            "max_episode_length": self.max_episode_length,
            "randomization": self.randomization,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MazeSpec":
        grid = np.array([[ch == "#" for ch in r] for r in data["layout"]], dtype=bool)
        return cls(
            grid=grid,
            start_cell=tuple(data["start_cell"]),
            goal_cell=tuple(data["goal_cell"]),
            cell_size=float(data["cell_size"]),
            goal_radius=float(data["goal_radius"]),
            max_episode_length=int(data["max_episode_length"]),
            randomization=data["randomization"],
            maze_id=data["maze_id"],
        )


@dataclass(frozen=True)
class EnvState:
    position: tuple[float, float]
    t: int = 0

    def array(self) -> npt.NDArray[np.float64]:
        return np.array(self.position, dtype=np.float64)


@dataclass(frozen=True)
class Action:
    """Velocity command, clipped to [-1, 1] per component on construction."""

    velocity: tuple[float, float]

    def __post_init__(self):
        vx, vy = (float(np.clip(v, -1.0, 1.0)) for v in self.velocity)
        object.__setattr__(self, "velocity", (vx, vy))

    @classmethod
    def from_array(cls, a) -> "Action":
        a = np.asarray(a, dtype=np.float64).ravel()
        return cls((a[0], a[1]))

    def array(self) -> npt.NDArray[np.float64]:
        return np.array(self.velocity, dtype=np.float64)


@dataclass
class Demonstration:
    observations: npt.NDArray[np.float64]  # (T+1, 2)
    actions: npt.NDArray[np.float64]  # (T, 2)
    success: bool
    goal: npt.NDArray[np.float64]
    seed: int = 0
    maze_id: str = "default8"
    mode: str = field(default="expert")

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64).reshape(-1, 2)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(-1, 2)
        self.goal = np.asarray(self.goal, dtype=np.float64).reshape(2)
        if len(self.observations) != len(self.actions) + 1:
            raise DataError(
                f"{len(self.observations)} observations for {len(self.actions)} actions"
            )

    @property
    def T(self) -> int:
        return len(self.actions)

    def to_record(self) -> dict:
        return {
            "maze_id": self.maze_id,
            "seed": self.seed,
            "success": self.success,
            "mode": self.mode,
            "T": self.T,
            "goal": self.goal.tolist(),
            "observations": self.observations.tolist(),
            "actions": self.actions.tolist(),
        }

    @classmethod
    def from_record(cls, data: dict) -> "Demonstration":
        demo = cls(
            observations=np.array(data["observations"], dtype=np.float64).reshape(-1, 2),
            actions=np.array(data["actions"], dtype=np.float64).reshape(-1, 2),
            success=bool(data["success"]),
            goal=np.array(data["goal"], dtype=np.float64),
            seed=int(data.get("seed", 0)),
            maze_id=data.get("maze_id", "default8"),
            mode=data.get("mode", "expert"),
        )
        if demo.T != int(data.get("T", demo.T)):
            raise DataError(f"record declares T={data['T']} but holds {demo.T} actions")
        return demo


def _span(f: float, n: int) -> list[int]:
    i = math.floor(f)
    idx = (i, i - 1) if f == i else (i,)
    return [j for j in idx if 0 <= j < n]


def is_free(spec: MazeSpec, x: float, y: float) -> bool:
    """True when (x, y) lies in the closed box of an open cell."""
    rows, cols = spec.shape
    cs = spec.cell_size
    if not (0.0 <= x <= cols * cs and 0.0 <= y <= rows * cs):
        return False
    return any(
        not spec.grid[r, c] for r in _span(y / cs, rows) for c in _span(x / cs, cols)
    )


def cell_of(spec: MazeSpec, position) -> tuple[int, int]:
    """Open cell containing ``position`` (floor cell preferred on faces)."""
    x, y = float(position[0]), float(position[1])
    rows, cols = spec.shape
    cs = spec.cell_size
    r_cands = sorted(_span(y / cs, rows), reverse=True)
    c_cands = sorted(_span(x / cs, cols), reverse=True)
    for r in r_cands:
        for c in c_cands:
            if not spec.grid[r, c]:
                return (r, c)
    raise MazeError(f"position {(x, y)} is inside a wall")


def _move_axis(spec: MazeSpec, pos: list[float], axis: int, delta: float) -> list[float]:
    if delta == 0.0:
        return pos
    target = list(pos)
    target[axis] = pos[axis] + delta
    if is_free(spec, *target):
        return target
    cs = spec.cell_size
    f = pos[axis] / cs
    if delta > 0:
        bound = max(pos[axis], math.ceil(f) * cs - WALL_MARGIN)
        target[axis] = min(pos[axis] + delta, bound)
    else:
        bound = min(pos[axis], math.floor(f) * cs + WALL_MARGIN)
        target[axis] = max(pos[axis] + delta, bound)
    return target


def env_step(spec: MazeSpec, state: EnvState, a: Action) -> EnvState:
    """Advance one step: move along x, then y, truncating at wall faces."""
    if state.t >= spec.max_episode_length:
        raise MazeError(f"episode finished at t={state.t}")
    vx, vy = a.velocity
    pos = list(state.position)
    pos = _move_axis(spec, pos, 0, spec.step_size * vx)
    pos = _move_axis(spec, pos, 1, spec.step_size * vy)
    return EnvState(position=(pos[0], pos[1]), t=state.t + 1)


def is_success(spec: MazeSpec, state: EnvState, goal) -> bool:
    gx, gy = float(goal[0]), float(goal[1])
    return math.hypot(state.position[0] - gx, state.position[1] - gy) <= spec.goal_radius


def _place(spec: MazeSpec, cell: tuple[int, int], rng: RngStream) -> npt.NDArray[np.float64]:
    radius = RANDOMIZATION_RADIUS[spec.randomization]
    rows, cols = spec.shape
    cs = spec.cell_size
    center = spec.cell_center(cell)
    for _ in range(MAX_PLACEMENT_TRIES):
        if radius is None:
            p = rng.uniform(0.0, 1.0, size=2) * np.array([cols * cs, rows * cs])
        else:
            u = rng.uniform(0.0, 1.0, size=2)
            rho = radius * cs * math.sqrt(u[0])
            theta = 2.0 * math.pi * u[1]
            p = center + rho * np.array([math.cos(theta), math.sin(theta)])
        if is_free(spec, p[0], p[1]):
            return p
    raise MazeError(f"no open placement found after {MAX_PLACEMENT_TRIES} samples")


def env_reset(spec: MazeSpec, rng: RngStream) -> tuple[EnvState, npt.NDArray[np.float64]]:
    """Perturbed start state and goal point for a new episode."""
    start = _place(spec, spec.start_cell, rng)
    goal = _place(spec, spec.goal_cell, rng)
    return EnvState(position=(float(start[0]), float(start[1])), t=0), goal


def bfs_distances(spec: MazeSpec, goal_cell: tuple[int, int]) -> npt.NDArray[np.int64]:
    """Cell-step distance to ``goal_cell`` (-1 for walls and unreachable cells)."""
    rows, cols = spec.shape
    dist = np.full((rows, cols), -1, dtype=np.int64)
    dist[goal_cell] = 0
    queue = deque([goal_cell])
    while queue:
        r, c = queue.popleft()
        for dr, dc in _NEIGHBOURS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < rows and 0 <= nc < cols and not spec.grid[nr, nc] and dist[nr, nc] < 0:
                dist[nr, nc] = dist[r, c] + 1
                queue.append((nr, nc))
    return dist


def scripted_expert(spec: MazeSpec, state: EnvState, goal) -> Action:
    """Velocity toward the next BFS waypoint (or the goal inside its cell)."""
    goal = np.asarray(goal, dtype=np.float64)
    goal_cell = cell_of(spec, goal)
    here = cell_of(spec, state.position)
    dist = bfs_distances(spec, goal_cell)
    if dist[here] < 0:
        raise MazeError(f"goal cell {goal_cell} unreachable from {here}")
    if here == goal_cell:
        target = goal
    else:
        rows, cols = spec.shape
        best = None
        for dr, dc in _NEIGHBOURS:
            nr, nc = here[0] + dr, here[1] + dc
            if 0 <= nr < rows and 0 <= nc < cols and dist[nr, nc] == dist[here] - 1:
                best = (nr, nc)
                break
        target = goal if best == goal_cell else spec.cell_center(best)
    return Action.from_array((target - state.array()) / spec.step_size)


def rollout_expert(
    spec: MazeSpec,
    state: EnvState,
    goal,
    rng: Optional[RngStream] = None,
    noise: float = 0.0,
    max_steps: Optional[int] = None,
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64], bool]:
    """Run the (optionally noisy) expert until success or the step limit."""
    limit = spec.max_episode_length
    if max_steps is not None:
        limit = min(max_steps, limit)
    observations = [state.array()]
    actions = []
    success = is_success(spec, state, goal)
    while not success and state.t < limit:
        a = scripted_expert(spec, state, goal).array()
        if noise > 0.0 and rng is not None:
            a = a + rng.normal(size=2, scale=noise)
        action = Action.from_array(a)
        state = env_step(spec, state, action)
        actions.append(action.array())
        observations.append(state.array())
        success = is_success(spec, state, goal)
    return np.array(observations), np.array(actions).reshape(-1, 2), success


def _success_demo(spec: MazeSpec, rng: RngStream) -> Demonstration:
    for attempt in range(MAX_EPISODE_TRIES):
        ep = rng.child(attempt)
        state, goal = env_reset(spec, ep)
        obs, acts, ok = rollout_expert(spec, state, goal, ep, noise=SUCCESS_NOISE)
        if ok:
            return Demonstration(obs, acts, True, goal, seed=ep.seed, maze_id=spec.maze_id)
    raise MazeError(f"no successful episode within {MAX_EPISODE_TRIES} attempts")


def _failure_demo(spec: MazeSpec, rng: RngStream, mode: str) -> Demonstration:
    for attempt in range(MAX_EPISODE_TRIES):
        ep = rng.child(attempt)
        state, goal = env_reset(spec, ep)
        obs, acts, ok = rollout_expert(spec, state, goal)
        if not ok or len(acts) < 2:
            continue
        if mode == "noise":
            obs, acts, ok = rollout_expert(
                spec, state, goal, ep, noise=FAILURE_NOISE, max_steps=len(acts)
            )
            if ok:
                continue
        else:
            frac = float(ep.uniform(*TRUNCATION_RANGE))
            cut = max(1, int(math.floor(frac * len(acts))))
            obs, acts = obs[: cut + 1], acts[:cut]
            if is_success(spec, EnvState(tuple(obs[-1])), goal):
                continue
        return Demonstration(obs, acts, False, goal, seed=ep.seed, maze_id=spec.maze_id, mode=mode)
    if mode == "noise":
        logger.info("heavy-noise expert kept succeeding; falling back to truncation")
        return _failure_demo(spec, rng.child(MAX_EPISODE_TRIES), "truncate")
    raise MazeError(f"no failed episode within {MAX_EPISODE_TRIES} attempts")


def generate_dataset(
    spec: MazeSpec, n_success: int, n_fail: int, rng: RngStream
) -> list[Demonstration]:
    """Successful noisy-expert episodes followed by failed ones.

    Failures alternate between truncated expert runs and heavy-noise runs
    capped at the clean expert's length.
    """
    demos = [_success_demo(spec, rng.child(i)) for i in range(n_success)]
    for j in range(n_fail):
        mode = "truncate" if j % 2 == 0 else "noise"
        demos.append(_failure_demo(spec, rng.child(n_success + j), mode))
    for d in demos:
        final = EnvState(tuple(d.observations[-1]))
        if is_success(spec, final, d.goal) != d.success:
            raise MazeError(f"label mismatch for demonstration seed {d.seed}")
    logger.info("generated %d successful and %d failed demonstrations", n_success, n_fail)
    return demos


def dataset_to_text(spec: MazeSpec, demos: Sequence[Demonstration]) -> str:
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "maze": spec.to_dict()}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(d.to_record(), sort_keys=True) for d in demos]
    return "\n".join(lines) + "\n"


def save_dataset(spec: MazeSpec, demos: Sequence[Demonstration], path: str | Path) -> Path:
    return atomic_write_text(path, dataset_to_text(spec, demos))


def load_dataset(path: str | Path) -> tuple[MazeSpec, list[Demonstration]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
        if header.get("format") != DATASET_FORMAT:
            raise DataError(f"{path} is not a maze demonstration file")
        if header.get("version") != DATASET_VERSION:
            raise DataError(f"unsupported dataset version {header.get('version')}")
        spec = MazeSpec.from_dict(header["maze"])
        demos = [Demonstration.from_record(json.loads(line)) for line in lines[1:] if line]
    except (json.JSONDecodeError, KeyError) as e:
        raise DataError(f"malformed dataset {path}: {e}") from e
    return spec, demos
