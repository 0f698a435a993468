"""Tabular Q-learning and the off-policy intrinsic-reward training loop."""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from encoder import Episode, FixedEncoder, encode_state
from entropy import Estimator, EstimatorConfig
from errors import DegenerateDistance, InvalidArgument, NumericalFailure
from knn_graph import SearchConfig, graph_insert, graph_new
from metrics import (
    CoverageCounter,
    EpisodeRecord,
    EvalConfig,
    RunLog,
    coverage_update,
    eval_episode_entropy,
)
from rewards import (
    EpisodicMode,
    EpisodicRewardTable,
    FifoMemory,
    LifelongMemory,
    RewardConfig,
    assign_episodic_rewards,
    combine_reward_arrays,
    episode_entropy,
    lifelong_reward_batch,
)

logger = logging.getLogger(__name__)


class QTable:
    """Action values over integer state ids; unvisited entries read as 0."""

    def __init__(self, n_states: int, n_actions: int, learning_rate: float = 0.1, gamma: float = 0.99):
        if not 0 < learning_rate <= 1:
            raise InvalidArgument(f"learning_rate must be in (0, 1], got {learning_rate}", field="learning_rate")
        if not 0 <= gamma < 1:
            raise InvalidArgument(f"gamma must be in [0, 1), got {gamma}", field="gamma")
        if n_actions < 1:
            raise InvalidArgument("action set is empty", field="n_actions")
        self.learning_rate = learning_rate
        self.gamma = gamma
        self.values = np.zeros((n_states, n_actions))

    @property
    def n_actions(self) -> int:
        return self.values.shape[1]

    def __getitem__(self, key):
        return self.values[key]


def q_update(q: QTable, s: int, a: int, r: float, s_next: int):
    if not math.isfinite(r):
        raise InvalidArgument(f"reward must be finite, got {r}", field="r")
    target = r + q.gamma * q.values[s_next].max()
    q.values[s, a] += q.learning_rate * (target - q.values[s, a])


def q_update_batch(q: QTable, s: np.ndarray, a: np.ndarray, r: np.ndarray, s_next: np.ndarray):
    """One Q-learning step per row; TD errors use the table as it was before the batch."""
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise InvalidArgument("batch contains non-finite rewards", field="r")
    td = r + q.gamma * q.values[s_next].max(axis=1) - q.values[s, a]
    np.add.at(q.values, (s, a), q.learning_rate * td)


def epsilon_greedy(q: QTable, s: int, epsilon: float, rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(q.n_actions))
    return int(np.argmax(q.values[s]))


@dataclass(frozen=True)
class ReplayBatch:
    index: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    next_points: np.ndarray
    r_ep: np.ndarray
    episode_ids: np.ndarray
    steps: np.ndarray


class ReplayBuffer:
    """FIFO ring of transitions (s, a, s', r_ep) tagged with their episode and step."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise InvalidArgument(f"capacity must be >= 1, got {capacity}", field="replay_capacity")
        self.capacity = capacity
        self._states = np.zeros(capacity, dtype=np.int64)
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._next_states = np.zeros(capacity, dtype=np.int64)
        self._next_points = np.zeros((capacity, state_dim))
        self._r_ep = np.zeros(capacity)
        self._episode_ids = np.zeros(capacity, dtype=np.int64)
        self._steps = np.zeros(capacity, dtype=np.int64)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add_episode(self, episode_id, states, actions, next_states, next_points, r_ep):
        n = len(states)
        if n > self.capacity:
            # only the newest transitions would survive anyway
            cut = n - self.capacity
            states, actions, next_states = states[cut:], actions[cut:], next_states[cut:]
            next_points, r_ep = next_points[cut:], r_ep[cut:]
            steps = np.arange(cut, n)
            n = self.capacity
        else:
            steps = np.arange(n)
        slots = (self._next + np.arange(n)) % self.capacity
        self._states[slots] = states
        self._actions[slots] = actions
        self._next_states[slots] = next_states
        self._next_points[slots] = next_points
        self._r_ep[slots] = r_ep
        self._episode_ids[slots] = episode_id
        self._steps[slots] = steps
        self._next = int((self._next + n) % self.capacity)
        self._size = min(self._size + n, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> ReplayBatch:
        if self._size == 0:
            raise InvalidArgument("cannot sample from an empty replay buffer", field="replay")
        idx = rng.integers(0, self._size, size=batch_size)
        return ReplayBatch(
            index=idx,
            states=self._states[idx],
            actions=self._actions[idx],
            next_states=self._next_states[idx],
            next_points=self._next_points[idx],
            r_ep=self._r_ep[idx],
            episode_ids=self._episode_ids[idx],
            steps=self._steps[idx],
        )


@dataclass(frozen=True)
class ScheduleConfig:
    U: int = 50_000
    T_u: int = 5_000
    total_steps: int = 200_000

    def __post_init__(self):
        for name in ("U", "T_u", "total_steps"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1", field=name)
        if self.T_u > self.U:
            raise InvalidArgument(f"T_u ({self.T_u}) must not exceed U ({self.U})", field="T_u")

    def in_update_window(self, t: int) -> bool:
        return t >= self.U and t % self.U < self.T_u


@dataclass(frozen=True)
class AgentConfig:
    learning_rate: float = 0.1
    gamma: float = 0.99
    epsilon_start: float = 0.1
    epsilon_end: float = 0.01
    batch_size: int = 64
    replay_capacity: int = 100_000
    updates_per_step: float = 1.0
    log_batches: bool = False

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise InvalidArgument("learning_rate must be in (0, 1]", field="learning_rate")
        if not 0 <= self.gamma < 1:
            raise InvalidArgument("gamma must be in [0, 1)", field="gamma")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidArgument(f"{name} must be in [0, 1]", field=name)
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1", field="batch_size")
        if self.replay_capacity < 1:
            raise InvalidArgument("replay_capacity must be >= 1", field="replay_capacity")
        if not self.updates_per_step >= 0:
            raise InvalidArgument("updates_per_step must be >= 0", field="updates_per_step")

    def epsilon(self, t: int, total_steps: int) -> float:
        frac = min(t / max(total_steps - 1, 1), 1.0)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


def _new_memory(reward_cfg: RewardConfig, seed: int):
    if reward_cfg.lifelong_memory == LifelongMemory.FIFO.value:
        return FifoMemory(reward_cfg.fifo_capacity, reward_cfg.k_lifelong)
    return graph_new(reward_cfg.k_lifelong, seed)


def _episode_entropy_or_zero(ep: Episode, estimator: EstimatorConfig, episode: int) -> float:
    if estimator.name == Estimator.KNN.value and ep.length < 2:
        logger.warning("Episode %d has %d state(s), too short for knn entropy; using 0", episode, ep.length)
        return 0.0
    try:
        return float(episode_entropy(ep, estimator))
    except DegenerateDistance as exc:
        logger.warning("Episode %d entropy skipped: %s", episode, exc)
        return 0.0


def _reward_maps(env, encoder, view: EpisodicRewardTable, memory, search_cfg, reward_cfg):
    cells = env.snapshot_cells()
    if cells is None:
        return None
    ids, points = cells
    encoded = np.array([encode_state(encoder, p, p) for p in points])
    r_l = lifelong_reward_batch(
        memory, encoded, search_cfg, reward_cfg.lifelong_mode, reward_cfg.empty_memory_reward
    )
    ep_grid = np.zeros(env.n_states)
    l_grid = np.zeros(env.n_states)
    for i, cell_id in enumerate(ids):
        ep_grid[cell_id] = view.get(cell_id, 0.0)
        l_grid[cell_id] = r_l[i]
    shape = (env.maze.height, env.maze.width)
    return ep_grid.reshape(shape), l_grid.reshape(shape)


def run_element(
    env,
    encoder: FixedEncoder,
    reward_cfg: RewardConfig,
    schedule: ScheduleConfig,
    estimator: EstimatorConfig,
    seed: int,
    agent_cfg: Optional[AgentConfig] = None,
    search_cfg: Optional[SearchConfig] = None,
    eval_cfg: Optional[EvalConfig] = None,
) -> RunLog:
    """Episodic entropy plus lifelong novelty, trained off-policy with tabular Q-learning.

    Per episode: act epsilon-greedily, insert encoded states into lifelong memory
    while the step is inside an update window, and at episode end score the
    episode's entropy and write its transitions to replay with their episodic
    rewards. Then run ``updates_per_step * T`` Q updates on replay batches
    whose lifelong rewards are recomputed against the current memory.
    """
    agent_cfg = agent_cfg or AgentConfig()
    search_cfg = search_cfg or SearchConfig()
    eval_cfg = eval_cfg or EvalConfig()

    rng = np.random.default_rng(seed)
    q = QTable(env.n_states, env.n_actions, agent_cfg.learning_rate, agent_cfg.gamma)
    replay = ReplayBuffer(agent_cfg.replay_capacity, encoder.state_dim)
    memory = _new_memory(reward_cfg, seed)
    table = None if reward_cfg.episodic_mode == EpisodicMode.PER_EPISODE_CONSTANT.value else EpisodicRewardTable()
    view = table if table is not None else EpisodicRewardTable()
    coverage = CoverageCounter(env.coverage_bins)

    log = RunLog()
    log.artifacts.coverage = coverage
    log.artifacts.memory = memory

    logger.info(
        "Run seed=%d: %d steps, beta=%s, estimator=%s, window U=%d T_u=%d",
        seed, schedule.total_steps, reward_cfg.beta, estimator.name, schedule.U, schedule.T_u,
    )

    t = 0
    episode = 0
    window_open = False
    while t < schedule.total_steps:
        env.reset(rng)
        T = min(env.episode_len, schedule.total_steps - t)
        states = np.empty(T, dtype=np.int64)
        actions = np.empty(T, dtype=np.int64)
        next_states = np.empty(T, dtype=np.int64)
        points = np.empty((T, encoder.state_dim))

        for i in range(T):
            s = env.state_id
            a = epsilon_greedy(q, s, agent_cfg.epsilon(t, schedule.total_steps), rng)
            env.step(a)
            states[i], actions[i], next_states[i] = s, a, env.state_id
            points[i] = encode_state(encoder, env.observation, env.state_point)
            coverage_update(coverage, env.coverage_position, env.coverage_bounds, t)
            log.artifacts.max_radius = max(log.artifacts.max_radius, math.hypot(*env.coverage_position))

            in_window = schedule.in_update_window(t)
            if in_window != window_open:
                logger.info("Graph update window %s at step %d (memory size %d)",
                            "opened" if in_window else "closed", t, len(memory))
                window_open = in_window
            if in_window:
                if isinstance(memory, FifoMemory):
                    memory.insert(points[i])
                else:
                    graph_insert(memory, points[i], search_cfg)
            t += 1

        ep = Episode(points, keys=tuple(int(x) for x in next_states))
        H = _episode_entropy_or_zero(ep, estimator, episode)
        r_ep = assign_episodic_rewards(ep, H, reward_cfg.episodic_mode, table, reward_cfg.smoothing_k)
        if table is None:
            for key in set(ep.keys):
                view.record(key, H / ep.length)
        replay.add_episode(episode, states, actions, next_states, points, r_ep)
        if agent_cfg.log_batches:
            log.artifacts.episode_rewards[episode] = r_ep.copy()

        r_l_total, r_l_count = 0.0, 0
        for _ in range(int(round(agent_cfg.updates_per_step * T))):
            batch = replay.sample(min(agent_cfg.batch_size, len(replay)), rng)
            r_l = lifelong_reward_batch(
                memory, batch.next_points, search_cfg, reward_cfg.lifelong_mode, reward_cfg.empty_memory_reward
            )
            _, _, total = combine_reward_arrays(batch.r_ep, r_l, reward_cfg)
            if not np.all(np.isfinite(total)):
                bad = int(np.flatnonzero(~np.isfinite(total))[0])
                logger.error(
                    "Non-finite reward at step %d, episode %d: r_ep=%r r_l=%r (transition from episode %d step %d)",
                    t, episode, batch.r_ep[bad], r_l[bad], batch.episode_ids[bad], batch.steps[bad],
                )
                raise NumericalFailure(f"non-finite training reward at step {t}, episode {episode}")
            q_update_batch(q, batch.states, batch.actions, total, batch.next_states)
            r_l_total += float(r_l.sum())
            r_l_count += r_l.shape[0]
            if agent_cfg.log_batches:
                log.artifacts.batches.append(
                    {
                        "episode": episode,
                        "episode_ids": batch.episode_ids,
                        "steps": batch.steps,
                        "r_ep": batch.r_ep,
                        "r_l": r_l,
                        "r_total": total,
                    }
                )

        if episode % eval_cfg.eval_every == 0:
            entropy_eval = float(eval_episode_entropy(ep, eval_cfg.max_states))
        else:
            entropy_eval = float("nan")
        log.append(
            EpisodeRecord(
                episode=episode,
                steps=t,
                entropy_eval=entropy_eval,
                mean_r_ep=float(r_ep.mean()),
                mean_r_l=r_l_total / r_l_count if r_l_count else float("nan"),
                graph_size=len(memory),
                unique_cells=coverage.unique,
            )
        )
        log.artifacts.endpoints.append(env.coverage_position)

        if episode + 1 in eval_cfg.snapshot_episodes:
            maps = _reward_maps(env, encoder, view, memory, search_cfg, reward_cfg)
            if maps is not None:
                log.artifacts.reward_maps[episode + 1] = maps

        if (episode + 1) % eval_cfg.log_every == 0:
            logger.info(
                "Episode %d: step %d, H_eval=%.4f, unique cells %d, memory %d",
                episode, t, entropy_eval, coverage.unique, len(memory),
            )
        episode += 1

    log.artifacts.clamped_actions = getattr(env, "clamped_actions", 0)
    logger.info("Run seed=%d finished: %d episodes, %d unique cells", seed, episode, coverage.unique)
    return log
