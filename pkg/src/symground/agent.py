"""Tabular multi-task control on the product of observations and task state.

The Q-table is keyed by (observation key, task machine hash, automaton state
shown to the agent), so one table serves every task in a dataset and every
machine-state combination. Episodes collected during training double as the
grounder's training data when labeling is learned rather than oracle-given.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .envs import DEFAULT_TIMEOUT, LEARNED_MODE, ORACLE_MODE, ProductEnv
from .nrm import (
    Episode,
    GrounderTrainConfig,
    GrounderTrainer,
    LinearGrounder,
    ReplayBuffers,
    TrainingLogRow,
)
from .taskgen import TaskDataset, TaskEntry

DEFAULT_GAMMA = 0.94
DEFAULT_ALPHA = 1.0
EPSILON_START = 1.0
EPSILON_FINAL = 0.05

QTABLE_MAGIC = b"NRQT"

StateKey = tuple[bytes, str, int]


def epsilon_at(episode_index: int, total_episodes: int,
               start: float = EPSILON_START, final: float = EPSILON_FINAL) -> float:
    """Linear decay from start to final over the first half of training,
    flat afterwards."""
    half = max(1, total_episodes // 2)
    if episode_index >= half:
        return final
    return start + (final - start) * (episode_index / half)


class QTable:
    """Dict-backed action values with Q-learning updates.

    Unseen keys read as zero vectors without being inserted; ties in the
    greedy argmax break uniformly at random from the caller's generator.
    """

    def __init__(self, n_actions: int, alpha: float = DEFAULT_ALPHA,
                 gamma: float = DEFAULT_GAMMA):
        if n_actions < 1:
            raise ValueError("n_actions must be positive")
        if not 0 < alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not 0 <= gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        self.n_actions = n_actions
        self.alpha = alpha
        self.gamma = gamma
        self._table: dict[StateKey, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, key: StateKey) -> bool:
        return key in self._table

    def keys(self):
        return self._table.keys()

    def values_of(self, key: StateKey) -> np.ndarray:
        row = self._table.get(key)
        if row is None:
            return np.zeros(self.n_actions)
        return row

    def max_value(self, key: StateKey) -> float:
        return float(self.values_of(key).max())

    def update(self, key: StateKey, action: int, reward: float,
               next_key: Optional[StateKey], terminal: bool) -> float:
        """One Q-learning backup; terminal transitions bootstrap to zero.
        Returns the new value of (key, action)."""
        row = self._table.get(key)
        if row is None:
            row = np.zeros(self.n_actions)
            self._table[key] = row
        if terminal or next_key is None:
            target = reward
        else:
            target = reward + self.gamma * self.max_value(next_key)
        row[action] += self.alpha * (target - row[action])
        return float(row[action])

    def greedy_action(self, key: StateKey, rng: np.random.Generator) -> int:
        values = self.values_of(key)
        winners = np.flatnonzero(values == values.max())
        return int(winners[int(rng.integers(len(winners)))])

    def epsilon_greedy(self, key: StateKey, rng: np.random.Generator,
                       epsilon: float) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(self.n_actions))
        return self.greedy_action(key, rng)


def q_update(table: QTable, key: StateKey, action: int, reward: float,
             next_key: Optional[StateKey], terminal: bool) -> float:
    return table.update(key, action, reward, next_key, terminal)


def save_qtable(table: QTable) -> bytes:
    """Little-endian binary snapshot; entry order follows insertion order,
    so identical training runs serialize identically."""
    out = bytearray()
    out += QTABLE_MAGIC
    out += struct.pack("<Idd", table.n_actions, table.alpha, table.gamma)
    out += struct.pack("<Q", len(table))
    for (obs_key, machine_hash, state), row in table._table.items():
        hash_bytes = machine_hash.encode("ascii")
        out += struct.pack("<I", len(obs_key))
        out += obs_key
        out += struct.pack("<H", len(hash_bytes))
        out += hash_bytes
        out += struct.pack("<I", state)
        out += np.asarray(row, dtype="<f8").tobytes()
    return bytes(out)


def load_qtable(data: bytes) -> QTable:
    if data[:4] != QTABLE_MAGIC:
        raise ValueError("bad magic, not a Q-table snapshot")
    offset = 4
    n_actions, alpha, gamma = struct.unpack_from("<Idd", data, offset)
    offset += struct.calcsize("<Idd")
    (count,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    table = QTable(n_actions, alpha, gamma)
    for _ in range(count):
        (obs_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        obs_key = data[offset:offset + obs_len]
        offset += obs_len
        (hash_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        machine_hash = data[offset:offset + hash_len].decode("ascii")
        offset += hash_len
        (state,) = struct.unpack_from("<I", data, offset)
        offset += 4
        row = np.frombuffer(data, dtype="<f8", count=n_actions, offset=offset)
        offset += 8 * n_actions
        table._table[(obs_key, machine_hash, state)] = row.copy()
    if offset != len(data):
        raise ValueError("trailing bytes in Q-table snapshot")
    return table


# ---------------------------------------------------------------------------
# Episode collection


@dataclass
class Rollout:
    """One product-env episode in NRM array form plus control history."""

    episode: Episode
    total_return: float
    discounted_return: float
    steps: int
    timed_out: bool


def collect_episode(
    penv: ProductEnv,
    entry: TaskEntry,
    rng: np.random.Generator,
    action_fn: Callable[[StateKey], int],
    table: Optional[QTable] = None,
    gamma: float = DEFAULT_GAMMA,
    learn: bool = False,
) -> Rollout:
    """Roll one episode, optionally applying Q-backups along the way.

    The NRM arrays follow the model's time convention: row 0 is a placeholder
    consumed by the initial-state slot, row t >= 1 holds the observation whose
    label moved the machine at that step. The reward list starts with the
    machine's initial output and stops at the first non-zero entry.
    """
    machine = entry.machine
    machine_id = machine.structural_hash()
    feature_dim = penv.base.observation_dim

    initial_out = machine.output(machine.initial)
    if initial_out != 0:
        # degenerate task: decided before any observation is consumed
        episode = Episode(
            observations=np.zeros((1, feature_dim)),
            rewards=np.array([initial_out]),
            formula=entry.formula,
            machine=machine,
            predicted_terminal=True,
        )
        return Rollout(episode, float(initial_out), float(initial_out), 0, False)

    observation, reward, done, info = penv.reset(rng)
    rows = [np.zeros(feature_dim), observation]
    rewards = [0, reward]
    total = float(reward)
    discounted = float(reward)
    discount = 1.0
    steps = 0

    key = (penv.observation_key(), machine_id, info["exposed_state"])
    while not done:
        action = action_fn(key)
        observation, reward, done, info = penv.step(action)
        steps += 1
        discount *= gamma
        rows.append(observation)
        rewards.append(reward)
        total += reward
        discounted += discount * reward
        next_key = (penv.observation_key(), machine_id, info["exposed_state"])
        if table is not None and learn:
            table.update(key, action, reward, next_key,
                         terminal=(reward != 0))
        key = next_key

    episode = Episode(
        observations=np.vstack(rows),
        rewards=np.asarray(rewards),
        formula=entry.formula,
        machine=machine,
        predicted_terminal=penv.exposed_hit_terminal,
    )
    timed_out = rewards[-1] == 0
    return Rollout(episode, total, discounted, steps, timed_out)


# ---------------------------------------------------------------------------
# Joint training


@dataclass
class JointConfig:
    episodes: int = 2000
    mode: str = LEARNED_MODE
    timeout: int = DEFAULT_TIMEOUT
    gamma: float = DEFAULT_GAMMA
    alpha: float = DEFAULT_ALPHA
    epsilon_start: float = EPSILON_START
    epsilon_final: float = EPSILON_FINAL
    grounder_every: int = 10  # episodes between grounder rounds
    grounder: GrounderTrainConfig = field(default_factory=GrounderTrainConfig)

    def __post_init__(self):
        if self.mode not in (ORACLE_MODE, LEARNED_MODE):
            raise ValueError(f"unknown labeling mode {self.mode!r}")
        if self.episodes < 1:
            raise ValueError("episodes must be positive")
        if self.grounder_every < 1:
            raise ValueError("grounder_every must be positive")


@dataclass
class JointResult:
    table: QTable
    grounder: Optional[LinearGrounder]
    grounder_log: list[TrainingLogRow]
    episode_returns: list[float]
    buffers: Optional[ReplayBuffers]


def train_joint(
    base,
    dataset: TaskDataset,
    config: JointConfig,
    rng: np.random.Generator,
    grounder: Optional[LinearGrounder] = None,
    accuracy_probe: Callable[[LinearGrounder], float] | None = None,
) -> JointResult:
    """Interleave Q-learning with grounder fitting on collected episodes.

    In oracle mode the grounder machinery is bypassed entirely. In learned
    mode every informative episode enters the replay buffers and one grounder
    round runs per `grounder_every` episodes once the train buffer is
    non-empty. The current (not best-so-far) grounder drives the exposed
    automaton state, so control always sees the newest grounding.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    table = QTable(base.n_actions, alpha=config.alpha, gamma=config.gamma)
    trainer: Optional[GrounderTrainer] = None
    buffers: Optional[ReplayBuffers] = None
    if config.mode == LEARNED_MODE:
        if grounder is None:
            grounder = LinearGrounder.zeros(base.observation_dim,
                                            len(base.alphabet))
        trainer = GrounderTrainer(grounder, config.grounder)
        buffers = ReplayBuffers.with_capacity(config.grounder.train_capacity,
                                              config.grounder.val_capacity)

    episode_returns: list[float] = []
    for index in range(config.episodes):
        epsilon = epsilon_at(index, config.episodes,
                             config.epsilon_start, config.epsilon_final)
        entry = dataset[int(rng.integers(len(dataset)))]
        active = trainer.work if trainer is not None else None
        penv = ProductEnv(base, entry.formula, entry.machine,
                          mode=config.mode, grounder=active,
                          timeout=config.timeout)
        rollout = collect_episode(
            penv, entry, rng,
            action_fn=lambda key: table.epsilon_greedy(key, rng, epsilon),
            table=table, gamma=config.gamma, learn=True,
        )
        episode_returns.append(rollout.total_return)
        if buffers is not None:
            buffers.route(rollout.episode)
            if ((index + 1) % config.grounder_every == 0
                    and len(buffers.train) > 0
                    and not trainer.should_stop):
                trainer.run_round(buffers, rng, accuracy_probe)

    if trainer is not None:
        final = trainer.best if trainer.rounds_run else trainer.work
        return JointResult(table, final, trainer.log, episode_returns, buffers)
    return JointResult(table, None, [], episode_returns, None)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalRow:
    distribution: str
    total_return: float
    discounted_return: float
    episodes: int
    seed: int


def evaluate(
    table: QTable,
    base,
    dataset: TaskDataset,
    distribution: str,
    episodes: int,
    seeds: Sequence[int],
    mode: str = ORACLE_MODE,
    grounder: Optional[LinearGrounder] = None,
    gamma: float = DEFAULT_GAMMA,
    timeout: int = DEFAULT_TIMEOUT,
) -> list[EvalRow]:
    """Greedy-policy rollouts; one row of averages per seed.

    total_return averages the episode return (equal to the terminal verdict);
    discounted_return applies gamma per action before the verdict lands.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        total = 0.0
        discounted = 0.0
        for _ in range(episodes):
            entry = dataset[int(rng.integers(len(dataset)))]
            penv = ProductEnv(base, entry.formula, entry.machine,
                              mode=mode, grounder=grounder, timeout=timeout)
            rollout = collect_episode(
                penv, entry, rng,
                action_fn=lambda key: table.greedy_action(key, rng),
                table=None, gamma=gamma, learn=False,
            )
            total += rollout.total_return
            discounted += rollout.discounted_return
        rows.append(EvalRow(
            distribution=distribution,
            total_return=total / episodes,
            discounted_return=discounted / episodes,
            episodes=episodes,
            seed=int(seed),
        ))
    return rows


def write_metrics_csv(path, rows: Iterable[EvalRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("distribution,total_return,discounted_return,episodes,seed\n")
        for row in rows:
            fh.write(f"{row.distribution},{row.total_return:.10g},"
                     f"{row.discounted_return:.10g},{row.episodes},{row.seed}\n")
