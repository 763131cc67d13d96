"""Differentiable probabilistic reward machine with a trainable grounder.

The task side (initial-state, transition, and reward logits) is frozen and
derived from a compiled machine; the only trainable component is a linear
softmax classifier from observation features to symbol distributions. The
forward model mixes machine transitions by the predicted symbol distribution
each step, and training backpropagates a cross-entropy on observed rewards
through the whole unrolled sequence.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .automata import MooreMachine
from .ltl import Formula

# Column order of every reward distribution and of the reward logits.
REWARD_VALUES = (0, 1, -1)
REWARD_COLUMN = {0: 0, 1: 1, -1: 2}

LOG_FLOOR = 1e-12

GROUNDER_MAGIC = b"NRMG"


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class NrmParams:
    """Frozen task parameters: logits for initial state, transitions, rewards.

    mu is softmax(theta_mu / tau); trans[p, q, :] and rew[q, :] are row
    softmaxes at the same temperature. The arrays are computed once and kept
    read-only; training never writes here.
    """

    def __init__(self, theta_mu: np.ndarray, theta_t: np.ndarray,
                 theta_r: np.ndarray, tau: float = 1.0):
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self.theta_mu = np.asarray(theta_mu, dtype=np.float64)
        self.theta_t = np.asarray(theta_t, dtype=np.float64)
        self.theta_r = np.asarray(theta_r, dtype=np.float64)
        self.tau = float(tau)
        n_states = self.theta_mu.shape[0]
        if self.theta_t.ndim != 3 or self.theta_t.shape[1:] != (n_states, n_states):
            raise ValueError("transition logits must have shape (P, Q, Q)")
        if self.theta_r.shape != (n_states, len(REWARD_VALUES)):
            raise ValueError("reward logits must have shape (Q, 3)")
        self.n_states = n_states
        self.n_symbols = self.theta_t.shape[0]
        self.mu = softmax(self.theta_mu / tau)
        self.trans = softmax(self.theta_t / tau, axis=-1)
        self.rew = softmax(self.theta_r / tau, axis=-1)
        for arr in (self.theta_mu, self.theta_t, self.theta_r,
                    self.mu, self.trans, self.rew):
            arr.setflags(write=False)


def init_from_machine(machine: MooreMachine, tau: float = 1.0,
                      magnitude: float = 10.0) -> NrmParams:
    """Knowledge-injection initialization: +magnitude logits where the
    deterministic machine puts its initial state, transitions, and outputs,
    zero elsewhere. For magnitude/tau >= 10 the argmax of every derived
    distribution equals the deterministic machine's value."""
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    n_states = machine.n_states
    n_symbols = len(machine.alphabet)
    theta_mu = np.zeros(n_states)
    theta_mu[machine.initial] = magnitude
    theta_t = np.zeros((n_symbols, n_states, n_states))
    for q in range(n_states):
        for p in range(n_symbols):
            theta_t[p, q, machine.transitions[q, p]] = magnitude
    theta_r = np.zeros((n_states, len(REWARD_VALUES)))
    for q in range(n_states):
        theta_r[q, REWARD_COLUMN[machine.output(q)]] = magnitude
    return NrmParams(theta_mu, theta_t, theta_r, tau)


class LinearGrounder:
    """Linear-softmax classifier from observation features to symbol
    distributions over the full alphabet (empty symbol included)."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError("weights must be (features, symbols), bias (symbols,)")

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, feature_dim: int, n_symbols: int) -> "LinearGrounder":
        return cls(np.zeros((feature_dim, n_symbols)), np.zeros(n_symbols))

    @classmethod
    def random(cls, feature_dim: int, n_symbols: int,
               rng: np.random.Generator, scale: float = 0.01) -> "LinearGrounder":
        return cls(rng.normal(0.0, scale, (feature_dim, n_symbols)),
                   np.zeros(n_symbols))

    def logits(self, observations: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        return obs @ self.weights + self.bias

    def predict(self, observations: np.ndarray) -> np.ndarray:
        """Symbol distribution per observation row."""
        return softmax(self.logits(observations), axis=-1)

    def argmax_symbols(self, observations: np.ndarray) -> np.ndarray:
        return self.logits(observations).argmax(axis=-1)

    def copy(self) -> "LinearGrounder":
        return LinearGrounder(self.weights.copy(), self.bias.copy())


@dataclass
class Episode:
    """One rollout: observation features s(0..T), the oracle-true rewards
    r(0..T), and the task the rewards were computed against.

    predicted_terminal records whether the grounder-argmax progression hit a
    +-1 state during collection (used by the informativeness filter).
    """

    observations: np.ndarray
    rewards: np.ndarray
    formula: Formula
    machine: MooreMachine
    predicted_terminal: bool = False
    informative: bool = field(init=False)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.int8)
        if self.observations.shape[0] != self.rewards.shape[0]:
            raise ValueError("one reward per observation required")
        nonzero = np.flatnonzero(self.rewards)
        if nonzero.size > 1 or (nonzero.size == 1
                                and nonzero[0] != len(self.rewards) - 1):
            raise ValueError("at most one non-zero reward, and it must be last")
        self.informative = is_informative(
            self.rewards, predicted_terminal=self.predicted_terminal
        )

    def __len__(self) -> int:
        return int(self.observations.shape[0])


def is_informative(rewards: Sequence[int] | np.ndarray,
                   predicted_terminal: bool) -> bool:
    """An episode is worth training on iff it carries a non-zero true reward,
    or the grounder-driven progression claimed a verdict while the true
    reward stayed zero (evidence the grounder is wrong)."""
    rewards = np.asarray(rewards)
    if np.any(rewards != 0):
        return True
    return bool(predicted_terminal)


# ---------------------------------------------------------------------------
# Forward / loss / backward


def _forward_cache(params: NrmParams, grounder: LinearGrounder,
                   observations: np.ndarray) -> dict:
    obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    length = obs.shape[0]
    p_probs = grounder.predict(obs)
    q_states = np.empty((length, params.n_states))
    q_states[0] = params.mu
    mix = np.empty((length, params.n_states, params.n_states))
    mix[0] = np.nan  # slot 0 never consumes an input
    for t in range(1, length):
        m_t = np.einsum("j,jqr->qr", p_probs[t], params.trans)
        mix[t] = m_t
        q_states[t] = q_states[t - 1] @ m_t
    r_dists = q_states @ params.rew
    return {
        "obs": obs,
        "p_probs": p_probs,
        "q_states": q_states,
        "mix": mix,
        "r_dists": r_dists,
    }


def forward(params: NrmParams, grounder: LinearGrounder,
            observations: np.ndarray, validate: bool = False) -> np.ndarray:
    """Predicted reward distributions, one row per observation.

    Row t is a distribution over (0, +1, -1). Row 0 depends only on the
    initial-state distribution; later rows mix machine transitions by the
    predicted symbol distribution of their own step.
    """
    cache = _forward_cache(params, grounder, observations)
    if validate:
        for name in ("p_probs", "q_states", "r_dists"):
            arr = cache[name]
            if not np.all(arr >= -1e-12):
                raise AssertionError(f"{name} has negative entries")
            if not np.allclose(arr.sum(axis=-1), 1.0, atol=1e-9):
                raise AssertionError(f"{name} rows do not sum to 1")
    return cache["r_dists"]


def _target_columns(targets: Sequence[int] | np.ndarray) -> np.ndarray:
    return np.array([REWARD_COLUMN[int(r)] for r in np.asarray(targets)],
                    dtype=np.intp)


def loss(predicted: np.ndarray, targets: Sequence[int] | np.ndarray,
         floor: float = LOG_FLOOR) -> float:
    """Mean over time steps of -log of the probability assigned to the true
    reward, floored before the log."""
    predicted = np.asarray(predicted, dtype=np.float64)
    cols = _target_columns(targets)
    if predicted.shape[0] != cols.shape[0]:
        raise ValueError("prediction/target length mismatch")
    picked = predicted[np.arange(len(cols)), cols]
    return float(-np.log(np.maximum(picked, floor)).mean())


def backward(params: NrmParams, grounder: LinearGrounder,
             observations: np.ndarray, targets: Sequence[int] | np.ndarray,
             floor: float = LOG_FLOOR) -> tuple[float, np.ndarray, np.ndarray]:
    """Exact reverse-mode gradient of loss(forward(...)) in the grounder's
    weights and bias. Task parameters receive no gradient by construction.

    Returns (loss value, d weights, d bias).
    """
    cache = _forward_cache(params, grounder, observations)
    obs = cache["obs"]
    p_probs = cache["p_probs"]
    q_states = cache["q_states"]
    mix = cache["mix"]
    r_dists = cache["r_dists"]
    length = obs.shape[0]
    cols = _target_columns(targets)
    if length != cols.shape[0]:
        raise ValueError("prediction/target length mismatch")

    picked = r_dists[np.arange(length), cols]
    loss_value = float(-np.log(np.maximum(picked, floor)).mean())

    # dL/dr: only the target column, zero where the probability was floored.
    g_r = np.zeros_like(r_dists)
    live = picked >= floor
    g_r[np.flatnonzero(live), cols[live]] = -1.0 / (length * picked[live])

    g_q = g_r @ params.rew.T
    g_p = np.zeros_like(p_probs)
    for t in range(length - 1, 0, -1):
        # q[t] = q[t-1] @ mix[t]; mix[t] = sum_j p[t,j] * trans[j]
        g_q[t - 1] += mix[t] @ g_q[t]
        v = np.einsum("q,jqr->jr", q_states[t - 1], params.trans)
        g_p[t] = v @ g_q[t]
    # slot 0 consumes no input, so p[0] gets no gradient

    dots = np.sum(g_p * p_probs, axis=-1, keepdims=True)
    g_z = p_probs * (g_p - dots)
    d_weights = obs.T @ g_z
    d_bias = g_z.sum(axis=0)
    return loss_value, d_weights, d_bias


# ---------------------------------------------------------------------------
# Replay buffers and training


class ReplayBuffer:
    """FIFO episode store with a hard capacity."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Episode] = deque(maxlen=capacity)

    def add(self, episode: Episode) -> None:
        self._items.append(episode)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def sample(self, rng: np.random.Generator, count: int) -> list[Episode]:
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self._items), size=count)
        return [self._items[int(i)] for i in idx]


@dataclass
class ReplayBuffers:
    """Train/validation episode stores; validation episodes never feed
    gradients. Capacities default to the gridworld training profile."""

    train: ReplayBuffer
    validation: ReplayBuffer
    _counter: int = 0

    @classmethod
    def with_capacity(cls, train: int, validation: int) -> "ReplayBuffers":
        return cls(ReplayBuffer(train), ReplayBuffer(validation))

    def route(self, episode: Episode) -> str:
        """Add an informative episode, sending every 5th to validation.
        Returns which buffer took it; uninformative episodes are dropped."""
        if not episode.informative:
            return "dropped"
        self._counter += 1
        if self._counter % 5 == 0:
            self.validation.add(episode)
            return "validation"
        self.train.add(episode)
        return "train"


@dataclass
class GrounderTrainConfig:
    """Hyperparameters of one grounder training run."""

    learning_rate: float = 0.001
    batch_size: int = 16
    accumulation: int = 4
    update_steps: int = 64
    patience: int = 250
    train_capacity: int = 2048
    val_capacity: int = 512
    tau: float = 1.0
    init_magnitude: float = 10.0
    max_rounds: int = 10_000
    floor: float = LOG_FLOOR

    @classmethod
    def gridworld_profile(cls) -> "GrounderTrainConfig":
        return cls()

    @classmethod
    def flatworld_profile(cls) -> "GrounderTrainConfig":
        return cls(accumulation=8, update_steps=128, patience=4000,
                   train_capacity=8192, val_capacity=2048)


class Adam:
    """Adam with the usual bias correction; operates on a list of arrays."""

    def __init__(self, shapes: Sequence[tuple[int, ...]], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params: Sequence[np.ndarray],
             grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        lr_t = self.learning_rate * (
            np.sqrt(1 - self.beta2 ** self.t) / (1 - self.beta1 ** self.t)
        )
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr_t * m / (np.sqrt(v) + self.eps)


@dataclass
class TrainingLogRow:
    round: int
    train_loss: float
    val_loss: float
    grounder_accuracy: float


def write_training_log(path, rows: Iterable[TrainingLogRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("round,train_loss,val_loss,grounder_accuracy\n")
        for row in rows:
            fh.write(f"{row.round},{row.train_loss:.10g},"
                     f"{row.val_loss:.10g},{row.grounder_accuracy:.10g}\n")


class _ParamsCache:
    """One frozen NRM per distinct task machine, shared across episodes."""

    def __init__(self, tau: float, magnitude: float):
        self.tau = tau
        self.magnitude = magnitude
        self._store: dict[MooreMachine, NrmParams] = {}

    def get(self, machine: MooreMachine) -> NrmParams:
        params = self._store.get(machine)
        if params is None:
            params = init_from_machine(machine, self.tau, self.magnitude)
            self._store[machine] = params
        return params


def episode_loss(grounder: LinearGrounder, episode: Episode,
                 cache: _ParamsCache, floor: float = LOG_FLOOR) -> float:
    params = cache.get(episode.machine)
    predicted = forward(params, grounder, episode.observations)
    return loss(predicted, episode.rewards, floor)


class GrounderTrainer:
    """Incremental grounder fitting with a persistent optimizer.

    One `run_round` call runs `update_steps` mini-batches; gradients are
    averaged over `accumulation` consecutive mini-batches before every
    optimizer step. Validation loss is tracked across rounds; `best` holds
    the snapshot with the lowest validation loss seen. Task parameters are
    rebuilt per machine from their compiled form and stay frozen.
    """

    def __init__(self, grounder: LinearGrounder, config: GrounderTrainConfig):
        self.config = config
        self.work = grounder.copy()
        self.best = grounder.copy()
        self.best_val = float("inf")
        self.rounds_since_best = 0
        self.rounds_run = 0
        self.log: list[TrainingLogRow] = []
        self._params_cache = _ParamsCache(config.tau, config.init_magnitude)
        self._optimizer = Adam(
            [self.work.weights.shape, self.work.bias.shape],
            config.learning_rate,
        )

    @property
    def should_stop(self) -> bool:
        return (self.rounds_since_best > self.config.patience
                or self.rounds_run >= self.config.max_rounds)

    def run_round(
        self,
        buffers: ReplayBuffers,
        rng: np.random.Generator,
        accuracy_probe: Callable[[LinearGrounder], float] | None = None,
    ) -> TrainingLogRow:
        if len(buffers.train) == 0:
            raise ValueError("train buffer is empty")
        config = self.config
        work = self.work
        round_losses = []
        grad_w = np.zeros_like(work.weights)
        grad_b = np.zeros_like(work.bias)
        accumulated = 0
        for _ in range(config.update_steps):
            batch = buffers.train.sample(rng, config.batch_size)
            batch_w = np.zeros_like(work.weights)
            batch_b = np.zeros_like(work.bias)
            batch_loss = 0.0
            for episode in batch:
                params = self._params_cache.get(episode.machine)
                value, d_w, d_b = backward(
                    params, work, episode.observations, episode.rewards,
                    config.floor,
                )
                batch_loss += value
                batch_w += d_w
                batch_b += d_b
            count = len(batch)
            round_losses.append(batch_loss / count)
            grad_w += batch_w / count
            grad_b += batch_b / count
            accumulated += 1
            if accumulated == config.accumulation:
                self._optimizer.step(
                    [work.weights, work.bias],
                    [grad_w / accumulated, grad_b / accumulated],
                )
                grad_w = np.zeros_like(work.weights)
                grad_b = np.zeros_like(work.bias)
                accumulated = 0
        if accumulated:
            self._optimizer.step(
                [work.weights, work.bias],
                [grad_w / accumulated, grad_b / accumulated],
            )

        if len(buffers.validation):
            val_loss = float(np.mean([
                episode_loss(work, ep, self._params_cache, config.floor)
                for ep in buffers.validation
            ]))
        else:
            val_loss = float(np.mean(round_losses))
        accuracy = float(accuracy_probe(work)) if accuracy_probe else float("nan")
        row = TrainingLogRow(
            round=self.rounds_run,
            train_loss=float(np.mean(round_losses)),
            val_loss=val_loss,
            grounder_accuracy=accuracy,
        )
        self.log.append(row)
        self.rounds_run += 1
        if val_loss < self.best_val - 1e-12:
            self.best_val = val_loss
            self.best = work.copy()
            self.rounds_since_best = 0
        else:
            self.rounds_since_best += 1
        return row


def train_grounder(
    buffers: ReplayBuffers,
    grounder: LinearGrounder,
    config: GrounderTrainConfig,
    rng: np.random.Generator,
    accuracy_probe: Callable[[LinearGrounder], float] | None = None,
) -> tuple[LinearGrounder, list[TrainingLogRow]]:
    """Fit the grounder on the train buffer, early-stopping on validation.

    Runs rounds until the patience or round cap trips; returns the grounder
    with the best validation loss seen plus the per-round log.
    """
    trainer = GrounderTrainer(grounder, config)
    while not trainer.should_stop:
        trainer.run_round(buffers, rng, accuracy_probe)
    return trainer.best, trainer.log


# ---------------------------------------------------------------------------
# Grounder checkpoints


def save_grounder(grounder: LinearGrounder) -> bytes:
    out = bytearray()
    out += GROUNDER_MAGIC
    out += struct.pack("<I", grounder.feature_dim)
    out += struct.pack("<I", grounder.n_symbols)
    out += grounder.weights.astype("<f8").tobytes(order="C")
    out += grounder.bias.astype("<f8").tobytes()
    return bytes(out)


def load_grounder(data: bytes) -> LinearGrounder:
    if data[:4] != GROUNDER_MAGIC:
        raise ValueError("bad magic, not a grounder checkpoint")
    if len(data) < 12:
        raise ValueError("truncated grounder checkpoint header")
    feature_dim, n_symbols = struct.unpack("<II", data[4:12])
    expected = 12 + 8 * (feature_dim * n_symbols + n_symbols)
    if len(data) != expected:
        raise ValueError(
            f"grounder checkpoint has {len(data)} bytes, expected {expected}"
        )
    body = np.frombuffer(data, dtype="<f8", offset=12)
    weights = body[: feature_dim * n_symbols].reshape(feature_dim, n_symbols)
    bias = body[feature_dim * n_symbols:]
    return LinearGrounder(weights.copy(), bias.copy())
