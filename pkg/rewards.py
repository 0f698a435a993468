"""Intrinsic reward assembly.

r = r_ep + beta * r_l, where r_ep redistributes an episode's state entropy over
its states and r_l measures how far a state is from lifelong memory.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from encoder import Episode, StatePoint, as_state_array
from entropy import Estimator, EntropyValue, EstimatorConfig, estimate
from errors import EmptyInput, InvalidArgument
from knn_graph import KnnGraph, SearchConfig, gnns_search_batch

logger = logging.getLogger(__name__)

# r_l for a state seen against an empty memory: log(1 + 1) at unit scale.
MAX_NOVELTY = math.log(2.0)


class Normalization(str, Enum):
    MINMAX_BATCH = "minmax_batch"
    NONE = "none"


class EpisodicMode(str, Enum):
    PER_EPISODE_CONSTANT = "per_episode_constant"
    TABULAR_RUNNING_MEAN = "tabular_running_mean"
    KNN_SMOOTHED = "knn_smoothed"


class LifelongMode(str, Enum):
    NORM = "norm"
    KTH = "kth"


class LifelongMemory(str, Enum):
    GRAPH = "graph"
    FIFO = "fifo"


def _check_choice(value, enum_cls, field):
    if value not in {e.value for e in enum_cls}:
        choices = ", ".join(e.value for e in enum_cls)
        raise InvalidArgument(f"'{value}' is not one of {choices}", field=field)


@dataclass(frozen=True)
class RewardConfig:
    beta: float = 0.5
    episodic_weight: float = 1.0
    k_lifelong: int = 3
    normalization: str = "minmax_batch"
    episodic_mode: str = "per_episode_constant"
    lifelong_mode: str = "norm"
    lifelong_memory: str = "graph"
    fifo_capacity: int = 10_000
    smoothing_k: int = 5
    empty_memory_reward: float = MAX_NOVELTY

    def __post_init__(self):
        if not self.beta >= 0:
            raise InvalidArgument(f"beta must be >= 0, got {self.beta}", field="beta")
        if not self.episodic_weight >= 0:
            raise InvalidArgument(f"episodic_weight must be >= 0, got {self.episodic_weight}", field="episodic_weight")
        if int(self.k_lifelong) != self.k_lifelong or self.k_lifelong < 1:
            raise InvalidArgument(f"k_lifelong must be a positive integer, got {self.k_lifelong}", field="k_lifelong")
        _check_choice(self.normalization, Normalization, "normalization")
        _check_choice(self.episodic_mode, EpisodicMode, "episodic_mode")
        _check_choice(self.lifelong_mode, LifelongMode, "lifelong_mode")
        _check_choice(self.lifelong_memory, LifelongMemory, "lifelong_memory")
        if self.fifo_capacity < 1:
            raise InvalidArgument(f"fifo_capacity must be >= 1, got {self.fifo_capacity}", field="fifo_capacity")
        if self.smoothing_k < 1:
            raise InvalidArgument(f"smoothing_k must be >= 1, got {self.smoothing_k}", field="smoothing_k")
        if not self.empty_memory_reward >= 0:
            raise InvalidArgument("empty_memory_reward must be >= 0", field="empty_memory_reward")


@dataclass(frozen=True)
class CombinedReward:
    r_ep: float
    r_l: float
    r_total: float


class EpisodicRewardTable:
    """Running mean of H/T over the episodes that contain each state key."""

    def __init__(self):
        self._count: Dict[Hashable, int] = {}
        self._mean: Dict[Hashable, float] = {}
        self._points: Dict[Hashable, np.ndarray] = {}

    def __len__(self):
        return len(self._count)

    def __contains__(self, key):
        return key in self._count

    def record(self, key: Hashable, value: float, point: Optional[np.ndarray] = None):
        n = self._count.get(key, 0) + 1
        mean = self._mean.get(key, 0.0)
        self._count[key] = n
        self._mean[key] = mean + (value - mean) / n
        if point is not None and key not in self._points:
            self._points[key] = np.asarray(point, dtype=np.float64)

    def count(self, key: Hashable) -> int:
        return self._count.get(key, 0)

    def value(self, key: Hashable) -> float:
        return self._mean[key]

    def get(self, key: Hashable, default: float = 0.0) -> float:
        return self._mean.get(key, default)

    def items(self):
        return self._mean.items()

    def recorded_points(self) -> Tuple[List[Hashable], np.ndarray]:
        keys = list(self._points)
        return keys, as_state_array([self._points[key] for key in keys]) if keys else np.empty((0, 0))


def episode_entropy(ep: Episode, estimator: EstimatorConfig) -> EntropyValue:
    minimum = 2 if estimator.name == Estimator.KNN.value else 1
    if ep.length < minimum:
        raise InvalidArgument(
            f"{estimator.name} needs at least {minimum} states, episode has {ep.length}", field="episode"
        )
    return estimate(ep.states, estimator)


def assign_episodic_rewards(
    ep: Episode,
    H: Union[EntropyValue, float],
    mode: str = EpisodicMode.PER_EPISODE_CONSTANT.value,
    table: Optional[EpisodicRewardTable] = None,
    smoothing_k: int = 5,
) -> np.ndarray:
    h = float(H)
    if not math.isfinite(h):
        raise InvalidArgument(f"episode entropy must be finite, got {h}", field="H")
    if ep.length == 0:
        raise EmptyInput("episode has no states")
    _check_choice(mode, EpisodicMode, "episodic_mode")
    scaled = h / ep.length

    if mode == EpisodicMode.PER_EPISODE_CONSTANT.value:
        return np.full(ep.length, scaled)

    if table is None:
        raise InvalidArgument(f"{mode} needs an EpisodicRewardTable", field="table")

    first_row = {}
    for t, key in enumerate(ep.keys):
        first_row.setdefault(key, t)
    for key, t in first_row.items():
        table.record(key, scaled, ep.states[t])

    if mode == EpisodicMode.TABULAR_RUNNING_MEAN.value:
        return np.array([table.value(key) for key in ep.keys])

    keys, points = table.recorded_points()
    k = min(smoothing_k, len(keys))
    means = np.array([table.value(key) for key in keys])
    _, idx = cKDTree(points).query(ep.states, k=k)
    idx = np.asarray(idx).reshape(ep.length, k)
    return means[idx].mean(axis=1)


class FifoMemory:
    """Last ``capacity`` states in insertion order, searched exactly."""

    def __init__(self, capacity: int, k: int):
        self.capacity = capacity
        self.k = k
        self._buffer: Optional[np.ndarray] = None
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def insert(self, point: StatePoint):
        point = np.asarray(point, dtype=np.float64).ravel()
        if self._buffer is None:
            self._buffer = np.zeros((self.capacity, point.shape[0]))
        self._buffer[self._next] = point
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    @property
    def points(self) -> np.ndarray:
        if self._buffer is None:
            return np.empty((0, 0))
        return self._buffer[: self._size]

    def neighbour_distances(self, queries: np.ndarray) -> np.ndarray:
        k = min(self.k, self._size)
        dists, _ = cKDTree(self.points).query(queries, k=k)
        return np.asarray(dists).reshape(queries.shape[0], k)


Memory = Union[KnnGraph, FifoMemory]


def _reward_from_distances(dists: np.ndarray, mode: str) -> np.ndarray:
    if mode == LifelongMode.KTH.value:
        return np.log(dists[:, -1] + 1.0)
    return np.log(np.linalg.norm(dists, axis=1) + 1.0)


def lifelong_reward_batch(
    memory: Memory,
    states,
    cfg: SearchConfig,
    mode: str = LifelongMode.NORM.value,
    empty_reward: float = MAX_NOVELTY,
) -> np.ndarray:
    """r_l = log(||(d_1..d_k)||_2 + 1) for every row of ``states``."""
    queries = as_state_array(states)
    if len(memory) == 0:
        return np.full(queries.shape[0], empty_reward)
    if isinstance(memory, FifoMemory):
        dists = memory.neighbour_distances(queries)
    else:
        _, dists = gnns_search_batch(memory, queries, cfg)
    return _reward_from_distances(dists, mode)


def lifelong_reward(
    g: Memory,
    s: StatePoint,
    cfg: SearchConfig,
    mode: str = LifelongMode.NORM.value,
    empty_reward: float = MAX_NOVELTY,
) -> float:
    query = np.asarray(s, dtype=np.float64).reshape(1, -1)
    return float(lifelong_reward_batch(g, query, cfg, mode, empty_reward)[0])


def minmax_normalize(values) -> np.ndarray:
    """Scale to [0, 1] over the batch; a constant batch maps to zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def combine_reward_arrays(r_ep, r_l, cfg: RewardConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    r_ep = np.asarray(r_ep, dtype=np.float64)
    r_l = np.asarray(r_l, dtype=np.float64)
    if r_ep.shape != r_l.shape:
        raise InvalidArgument(f"batch lengths differ: {r_ep.shape[0]} vs {r_l.shape[0]}", field="r_l_batch")
    if r_ep.size == 0:
        raise EmptyInput("reward batch is empty")
    if cfg.normalization == Normalization.MINMAX_BATCH.value:
        r_ep, r_l = minmax_normalize(r_ep), minmax_normalize(r_l)
    return r_ep, r_l, cfg.episodic_weight * r_ep + cfg.beta * r_l


def combine_rewards(r_ep_batch: Sequence[float], r_l_batch: Sequence[float], cfg: RewardConfig) -> List[CombinedReward]:
    r_ep, r_l, total = combine_reward_arrays(r_ep_batch, r_l_batch, cfg)
    return [CombinedReward(float(e), float(l), float(t)) for e, l, t in zip(r_ep, r_l, total)]


EpisodeWithEntropy = Tuple[Episode, Union[EntropyValue, float]]


def _rewards_for(ep: Episode, rewards: Mapping[Hashable, float]) -> np.ndarray:
    try:
        return np.array([rewards[key] for key in ep.keys], dtype=np.float64)
    except KeyError as exc:
        raise InvalidArgument(f"no reward for state {exc.args[0]!r}", field="rewards") from None


def decomposition_loss(rewards: Mapping[Hashable, float], episodes: Sequence[EpisodeWithEntropy]) -> float:
    if not episodes:
        raise EmptyInput("no episodes given")
    losses = [(float(H) - _rewards_for(ep, rewards).sum()) ** 2 for ep, H in episodes]
    return float(np.mean(losses))


def upper_bound_loss(rewards: Mapping[Hashable, float], episodes: Sequence[EpisodeWithEntropy]) -> float:
    """E_tau E_t (H(tau) - T r(s_t))^2 over fixed-length episodes.

    Equals decomposition_loss plus E_tau[T^2 Var_t r(s_t)].
    """
    if not episodes:
        raise EmptyInput("no episodes given")
    lengths = {ep.length for ep, _ in episodes}
    if len(lengths) > 1:
        raise InvalidArgument(f"episodes must share one length, got {sorted(lengths)}", field="episodes")
    T = lengths.pop()
    per_episode = [np.mean((float(H) - T * _rewards_for(ep, rewards)) ** 2) for ep, H in episodes]
    return float(np.mean(per_episode))


def optimal_reward_closed_form(
    episodes: Sequence[EpisodeWithEntropy],
    variable_length: bool = False,
    denominator_scale: float = 1.0,
) -> Dict[Hashable, float]:
    """Minimizer of upper_bound_loss, keyed by state.

    Fixed length: mean of H/T over the episodes containing the state.
    Variable length: sum(T * H) / sum(T^2) over those episodes.
    ``denominator_scale`` exists for fault injection and is 1 otherwise.
    """
    if not episodes:
        raise EmptyInput("no episodes given")
    numerator: Dict[Hashable, float] = defaultdict(float)
    denominator: Dict[Hashable, float] = defaultdict(float)
    for ep, H in episodes:
        h, T = float(H), ep.length
        for key in set(ep.keys):
            if variable_length:
                numerator[key] += T * h
                denominator[key] += T * T
            else:
                numerator[key] += h / T
                denominator[key] += 1.0
    return {key: numerator[key] / (denominator[key] * denominator_scale) for key in numerator}
