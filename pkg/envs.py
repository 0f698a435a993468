"""Desk-scale environments: a grid maze and a 2-D point-mass world.

Both are exposed to the training loop through small adapters (``MazeEnv``,
``PointMassEnv``) that share one duck-typed surface: discrete actions, an
integer state id for the Q-table and a continuous state point for rewards.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path

from errors import InvalidArgument, MazeParseError

logger = logging.getLogger(__name__)

BUNDLED_MAZE = Path(__file__).resolve().parent / "data" / "maze_20x20.txt"
DEFAULT_MAZE_STEPS = 700

Cell = Tuple[int, int]
Bounds = Tuple[Tuple[float, float], Tuple[float, float]]


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


_MOVES = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}


@dataclass(frozen=True)
class Maze:
    width: int
    height: int
    walls: np.ndarray
    start: Cell
    max_steps: int = DEFAULT_MAZE_STEPS

    def __post_init__(self):
        if self.walls.shape != (self.height, self.width):
            raise InvalidArgument(
                f"wall grid is {self.walls.shape}, expected {(self.height, self.width)}", field="walls"
            )
        if self.is_wall(self.start):
            raise InvalidArgument(f"start {self.start} is a wall", field="start")
        if self.max_steps < 1:
            raise InvalidArgument("max_steps must be >= 1", field="max_steps")

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def is_wall(self, cell: Cell) -> bool:
        return bool(self.walls[cell])

    def free_cells(self):
        return [tuple(int(v) for v in rc) for rc in np.argwhere(~self.walls)]


def maze_load(text: str, max_steps: int = DEFAULT_MAZE_STEPS) -> Maze:
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MazeParseError("maze is empty", 1, 1)

    width = len(lines[0])
    start = None
    walls = np.zeros((len(lines), width), dtype=bool)
    for r, line in enumerate(lines):
        if len(line) != width:
            raise MazeParseError(
                f"row has {len(line)} cells, expected {width}", r + 1, min(len(line), width) + 1
            )
        for c, ch in enumerate(line):
            if ch == "#":
                walls[r, c] = True
            elif ch == "S":
                if start is not None:
                    raise MazeParseError("more than one start cell", r + 1, c + 1)
                start = (r, c)
            elif ch != ".":
                raise MazeParseError(f"unexpected character {ch!r}", r + 1, c + 1)
    if start is None:
        raise MazeParseError("no start cell 'S'", 1, 1)

    walls.flags.writeable = False
    return Maze(width=width, height=len(lines), walls=walls, start=start, max_steps=max_steps)


def load_bundled_maze(path: Optional[Union[str, Path]] = None, max_steps: int = DEFAULT_MAZE_STEPS) -> Maze:
    path = Path(path) if path else BUNDLED_MAZE
    return maze_load(path.read_text(encoding="utf-8"), max_steps=max_steps)


def maze_step(m: Maze, cell: Cell, action: Union[Action, int]) -> Cell:
    cell = (int(cell[0]), int(cell[1]))
    if not m.in_bounds(cell) or m.is_wall(cell):
        raise InvalidArgument(f"cell {cell} is not a free cell", field="cell")
    dr, dc = _MOVES[Action(action)]
    target = (cell[0] + dr, cell[1] + dc)
    if m.in_bounds(target) and not m.is_wall(target):
        return target
    return cell


def maze_distances(m: Maze) -> np.ndarray:
    """Shortest-path step counts from start; -1 on walls and unreachable cells."""
    ids = np.arange(m.width * m.height).reshape(m.height, m.width)
    free = ~m.walls
    right = free[:, :-1] & free[:, 1:]
    down = free[:-1, :] & free[1:, :]
    rows = np.concatenate([ids[:, :-1][right], ids[:-1, :][down]])
    cols = np.concatenate([ids[:, 1:][right], ids[1:, :][down]])
    n = m.width * m.height
    adjacency = coo_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n)).tocsr()
    dist = shortest_path(adjacency, directed=False, unweighted=True, indices=int(ids[m.start]))
    out = np.where(np.isfinite(dist), dist, -1).astype(np.int64)
    return out.reshape(m.height, m.width)


@dataclass(frozen=True)
class PointMassConfig:
    accel_gain: float = 0.1
    dt: float = 1.0
    max_speed: float = 1.0
    reset_noise: float = 0.1
    episode_len: int = 1000
    bounds: Bounds = ((-1000.0, 1000.0), (-1000.0, 1000.0))
    coverage_bins: int = 100
    q_bins: int = 50

    def __post_init__(self):
        for name in ("accel_gain", "dt", "max_speed"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be > 0", field=name)
        if not self.reset_noise >= 0:
            raise InvalidArgument("reset_noise must be >= 0", field="reset_noise")
        for name in ("episode_len", "coverage_bins", "q_bins"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1", field=name)
        object.__setattr__(self, "bounds", tuple(tuple(float(v) for v in axis) for axis in self.bounds))
        _check_bounds(self.bounds)


@dataclass
class PointMassWorld:
    position: np.ndarray
    velocity: np.ndarray
    cfg: PointMassConfig = field(default_factory=PointMassConfig)
    clamped_actions: int = 0

    @property
    def max_speed(self) -> float:
        return self.cfg.max_speed

    @property
    def episode_len(self) -> int:
        return self.cfg.episode_len

    @property
    def reset_noise(self) -> float:
        return self.cfg.reset_noise


def pointmass_reset(cfg: PointMassConfig, rng: np.random.Generator) -> PointMassWorld:
    """Start at rest, uniformly inside the disc of radius reset_noise around the origin."""
    radius = cfg.reset_noise * math.sqrt(rng.random())
    angle = rng.uniform(0.0, 2.0 * math.pi)
    position = np.array([radius * math.cos(angle), radius * math.sin(angle)])
    return PointMassWorld(position=position, velocity=np.zeros(2), cfg=cfg)


def pointmass_step(w: PointMassWorld, action) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (2,):
        raise InvalidArgument(f"action must be a 2-vector, got shape {action.shape}", field="action")
    clipped = np.clip(action, -1.0, 1.0)
    if not np.array_equal(clipped, action):
        if w.clamped_actions == 0:
            logger.warning("point-mass action %s out of [-1, 1], clamping", action.tolist())
        w.clamped_actions += 1

    velocity = w.velocity + clipped * w.cfg.accel_gain
    speed = float(np.linalg.norm(velocity))
    if speed > w.cfg.max_speed:
        velocity = velocity * (w.cfg.max_speed / speed)
    w.velocity = velocity
    w.position = w.position + velocity * w.cfg.dt
    assert np.linalg.norm(w.velocity) <= w.cfg.max_speed * (1 + 1e-12)
    return w.position.copy()


def _check_bounds(bounds: Bounds):
    for lo, hi in bounds:
        if not hi > lo:
            raise InvalidArgument(f"degenerate bounds [{lo}, {hi}]", field="bounds")


def discretize(position, bounds: Bounds, bins: int) -> int:
    """Uniform bins×bins grid over ``bounds``; row follows y, column follows x."""
    if bins < 1:
        raise InvalidArgument(f"bins must be >= 1, got {bins}", field="bins")
    _check_bounds(bounds)
    (x_lo, x_hi), (y_lo, y_hi) = bounds
    x, y = float(position[0]), float(position[1])
    col = int(np.clip(math.floor((x - x_lo) / (x_hi - x_lo) * bins), 0, bins - 1))
    row = int(np.clip(math.floor((y - y_lo) / (y_hi - y_lo) * bins), 0, bins - 1))
    return row * bins + col


class MazeEnv:
    """Maze as seen by the training loop; an episode is ``max_steps`` moves from start."""

    n_actions = len(Action)

    def __init__(self, maze: Maze):
        self.maze = maze
        self.cell = maze.start
        self.coverage_bins = max(maze.width, maze.height)
        self.coverage_bounds = ((0.0, float(self.coverage_bins)), (0.0, float(self.coverage_bins)))

    @property
    def n_states(self) -> int:
        return self.maze.width * self.maze.height

    @property
    def episode_len(self) -> int:
        return self.maze.max_steps

    @property
    def state_dim(self) -> int:
        return 2

    def reset(self, rng: np.random.Generator):
        self.cell = self.maze.start

    def step(self, action: int):
        self.cell = maze_step(self.maze, self.cell, action)

    def cell_id(self, cell: Cell) -> int:
        return cell[0] * self.maze.width + cell[1]

    @property
    def state_id(self) -> int:
        return self.cell_id(self.cell)

    @property
    def state_point(self) -> np.ndarray:
        return np.array(self.cell, dtype=np.float64)

    @property
    def obs_dim(self) -> int:
        return 2

    @property
    def observation(self) -> np.ndarray:
        return self.state_point

    @property
    def coverage_position(self) -> Tuple[float, float]:
        return (self.cell[1] + 0.5, self.cell[0] + 0.5)

    def snapshot_cells(self):
        """Free cells as (state ids, state points), used for reward maps."""
        cells = self.maze.free_cells()
        return [self.cell_id(c) for c in cells], np.array(cells, dtype=np.float64)


# Eight compass directions, each component in [-1, 1].
_COMPASS = np.array(
    [[0, 1], [1, 1], [1, 0], [1, -1], [0, -1], [-1, -1], [-1, 0], [-1, 1]], dtype=np.float64
)


class PointMassEnv:
    n_actions = len(_COMPASS)

    def __init__(self, cfg: PointMassConfig):
        self.cfg = cfg
        self.world = PointMassWorld(position=np.zeros(2), velocity=np.zeros(2), cfg=cfg)
        self.coverage_bins = cfg.coverage_bins
        self.coverage_bounds = cfg.bounds

    @property
    def n_states(self) -> int:
        return self.cfg.q_bins * self.cfg.q_bins

    @property
    def episode_len(self) -> int:
        return self.cfg.episode_len

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def clamped_actions(self) -> int:
        return self.world.clamped_actions

    def reset(self, rng: np.random.Generator):
        clamped = self.world.clamped_actions
        self.world = pointmass_reset(self.cfg, rng)
        self.world.clamped_actions = clamped

    def step(self, action: int):
        pointmass_step(self.world, _COMPASS[action])

    @property
    def state_id(self) -> int:
        return discretize(self.world.position, self.cfg.bounds, self.cfg.q_bins)

    @property
    def state_point(self) -> np.ndarray:
        return self.world.position.copy()

    @property
    def obs_dim(self) -> int:
        return 4

    @property
    def observation(self) -> np.ndarray:
        """Position then velocity."""
        return np.concatenate([self.world.position, self.world.velocity])

    @property
    def coverage_position(self) -> Tuple[float, float]:
        return (float(self.world.position[0]), float(self.world.position[1]))

    def snapshot_cells(self):
        return None
