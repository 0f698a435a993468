"""Evaluation quantities and their file emission (run CSV, PGM heatmaps)."""

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from encoder import Episode
from entropy import EntropyValue, KernelConfig, renyi_matrix_entropy, subsample_evenly
from envs import Bounds, discretize
from errors import InvalidArgument

logger = logging.getLogger(__name__)

EVAL_ALPHA = 1.001
EVAL_SIGMA = 1.0
EVAL_MAX_STATES = 256

PathLike = Union[str, Path]


class CoverageCounter:
    """Unique visited cells on a bins×bins grid, plus per-cell visit counts."""

    def __init__(self, bins: int):
        if bins < 1:
            raise InvalidArgument(f"bins must be >= 1, got {bins}", field="bins")
        self.bins = bins
        self.visited = set()
        self.history: List[Tuple[int, int]] = []
        self.counts = np.zeros((bins, bins), dtype=np.int64)
        self._steps = 0

    @property
    def unique(self) -> int:
        return len(self.visited)

    def add(self, cell_id: int, step: Optional[int] = None) -> int:
        step = self._steps if step is None else step
        self._steps = step + 1
        self.counts[divmod(cell_id, self.bins)] += 1
        if cell_id not in self.visited:
            self.visited.add(cell_id)
            self.history.append((step, len(self.visited)))
        return len(self.visited)


def coverage_update(c: CoverageCounter, position, bounds: Bounds, step: Optional[int] = None) -> int:
    return c.add(discretize(position, bounds, c.bins), step)


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    steps: int
    entropy_eval: float
    mean_r_ep: float
    mean_r_l: float
    graph_size: int
    unique_cells: int


COLUMNS = [f.name for f in fields(EpisodeRecord)]


@dataclass
class RunArtifacts:
    """Everything a run produces besides the per-episode table."""

    coverage: Optional[CoverageCounter] = None
    memory: object = None
    endpoints: List[Tuple[float, float]] = field(default_factory=list)
    reward_maps: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    episode_rewards: Dict[int, np.ndarray] = field(default_factory=dict)
    batches: List[dict] = field(default_factory=list)
    clamped_actions: int = 0
    max_radius: float = 0.0


@dataclass
class RunLog:
    records: List[EpisodeRecord] = field(default_factory=list)
    artifacts: RunArtifacts = field(default_factory=RunArtifacts)

    def append(self, record: EpisodeRecord):
        if self.records:
            last = self.records[-1]
            if record.episode <= last.episode:
                raise InvalidArgument(f"episode {record.episode} after {last.episode}", field="episode")
            if record.graph_size < last.graph_size:
                raise InvalidArgument("graph size decreased", field="graph_size")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=COLUMNS)

    @property
    def coverage_history(self) -> List[Tuple[int, int]]:
        return [(r.steps, r.unique_cells) for r in self.records]


@dataclass(frozen=True)
class EvalConfig:
    eval_every: int = 1
    max_states: int = EVAL_MAX_STATES
    snapshot_episodes: Tuple[int, ...] = (5, 50, 300)
    log_every: int = 10

    def __post_init__(self):
        if self.eval_every < 1:
            raise InvalidArgument("eval_every must be >= 1", field="eval_every")
        if self.max_states < 1:
            raise InvalidArgument("max_states must be >= 1", field="max_states")
        if self.log_every < 1:
            raise InvalidArgument("log_every must be >= 1", field="log_every")
        object.__setattr__(self, "snapshot_episodes", tuple(int(e) for e in self.snapshot_episodes))
        if any(e < 1 for e in self.snapshot_episodes):
            raise InvalidArgument("snapshot episodes are 1-based", field="snapshot_episodes")


def eval_episode_entropy(ep: Episode, max_states: int = EVAL_MAX_STATES) -> EntropyValue:
    """Renyi matrix entropy with alpha 1.001 and sigma 1 over at most ``max_states`` evenly spaced states."""
    states = subsample_evenly(ep.states, max_states)
    return renyi_matrix_entropy(states, EVAL_ALPHA, KernelConfig(EVAL_SIGMA))


def _with_path(exc: OSError, path: PathLike) -> OSError:
    return type(exc)(exc.errno, f"{exc.strerror or exc}", str(path))


def emit_csv(log: RunLog, path: PathLike):
    try:
        log.to_frame().to_csv(path, index=False, float_format="%.17g")
    except OSError as exc:
        logger.error("Cannot write run log to %s: %s", path, exc)
        raise _with_path(exc, path) from exc
    logger.info("Wrote %d episode records to %s", len(log), path)


def read_csv(path: PathLike) -> RunLog:
    df = pd.read_csv(path)
    missing = [c for c in COLUMNS if c not in df.columns]
    if missing:
        raise InvalidArgument(f"{path} lacks columns {missing}", field="columns")
    log = RunLog()
    for row in df.itertuples(index=False):
        log.append(
            EpisodeRecord(
                episode=int(row.episode),
                steps=int(row.steps),
                entropy_eval=float(row.entropy_eval),
                mean_r_ep=float(row.mean_r_ep),
                mean_r_l=float(row.mean_r_l),
                graph_size=int(row.graph_size),
                unique_cells=int(row.unique_cells),
            )
        )
    return log


def heatmap_bytes(grid) -> bytes:
    grid = np.nan_to_num(np.asarray(grid, dtype=np.float64))
    if grid.ndim != 2:
        raise InvalidArgument(f"heatmap grid must be 2-D, got shape {grid.shape}", field="grid")
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        pixels = np.zeros(grid.shape, dtype=np.uint8)
    else:
        pixels = np.round((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)
    height, width = grid.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def emit_heatmap(grid, path: PathLike):
    data = heatmap_bytes(grid)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        logger.error("Cannot write heatmap to %s: %s", path, exc)
        raise _with_path(exc, path) from exc


def emit_endpoints(endpoints: Sequence[Tuple[float, float]], path: PathLike):
    df = pd.DataFrame(list(endpoints), columns=["x", "y"])
    df.insert(0, "episode", range(len(df)))
    try:
        df.to_csv(path, index=False, float_format="%.17g")
    except OSError as exc:
        raise _with_path(exc, path) from exc


def radial_extent(endpoints) -> float:
    """Mean distance of episode endpoints from the origin."""
    pts = np.asarray(endpoints, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(pts, axis=1).mean())


def angular_coverage(endpoints, bins: int = 36) -> float:
    """Fraction of ``bins`` equal angular sectors that hold at least one endpoint."""
    pts = np.asarray(endpoints, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return 0.0
    angles = np.arctan2(pts[:, 1], pts[:, 0])
    sectors = np.floor((angles + math.pi) / (2 * math.pi) * bins).astype(int) % bins
    return len(np.unique(sectors)) / bins


def reward_weighted_distance(grid, distances) -> float:
    """Mean start distance of reachable cells weighted by a nonnegative reward map."""
    grid = np.asarray(grid, dtype=np.float64)
    distances = np.asarray(distances)
    mask = distances >= 0
    weights = np.clip(grid[mask], 0.0, None)
    total = weights.sum()
    if total == 0:
        return 0.0
    return float((weights * distances[mask]).sum() / total)
