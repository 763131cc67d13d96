"""Experiment configuration, seed derivation, and run orchestration.

Every run is driven by one master seed. Purpose-specific generators are
derived from it with string labels, so adding a consumer never shifts the
draws of another. Runs write their artifacts into a caller-chosen directory:
the config, the task manifest and machines, the Q-table, the grounder, and
the CSV logs, none of which embed wall-clock state.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import kvconfig
from .agent import (
    DEFAULT_ALPHA,
    DEFAULT_GAMMA,
    EPSILON_FINAL,
    EPSILON_START,
    EvalRow,
    JointConfig,
    QTable,
    evaluate,
    load_qtable,
    save_qtable,
    train_joint,
    write_metrics_csv,
)
from .automata import MooreMachine, compile_formula
from .envs import (
    DEFAULT_TIMEOUT,
    Bootcamp,
    FlatWorld,
    GridWorld,
    LEARNED_MODE,
    ORACLE_MODE,
)
from .ltl import Alphabet, Formula, canonicalize, progress, verdict
from .nrm import (
    GrounderTrainConfig,
    LinearGrounder,
    load_grounder,
    save_grounder,
    write_training_log,
)
from .taskgen import (
    GLOBAL_AVOIDANCE,
    PARTIALLY_ORDERED,
    TaskConfig,
    TaskDataset,
    build_dataset,
    deeper_chains,
    load_dataset,
    more_chains,
    sample_task,
    save_dataset,
)

GRIDWORLD = "gridworld"
FLATWORLD = "flatworld"
BOOTCAMP = "bootcamp"
ENVIRONMENTS = (GRIDWORLD, FLATWORLD, BOOTCAMP)

RANDOM_LAYOUT = "random"
FIXED_LAYOUT = "fixed"

CONFIG_FILE = "config.txt"
TASKS_FILE = "tasks.tsv"
QTABLE_FILE = "qtable.nrqt"
GROUNDER_FILE = "grounder.nrmg"
TRAINING_LOG_FILE = "training_log.csv"
METRICS_FILE = "metrics.csv"

BASE_SPLIT = "base"
DEEPER_SPLIT = "+dep"
WIDER_SPLIT = "+conj"
SPLITS = (BASE_SPLIT, DEEPER_SPLIT, WIDER_SPLIT)


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator derived from a master seed and a label path.

    Labels are identified by their string form and hashed, so any mix of
    short strings and integers yields stable, independent streams.
    """
    spawn_key = tuple(
        int.from_bytes(hashlib.sha256(str(label).encode()).digest()[:4], "little")
        for label in labels
    )
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=spawn_key))


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete recipe for one training-plus-evaluation run."""

    environment: str = GRIDWORLD
    grid_size: int = 7
    n_props: int = 5
    n_zones: int = 3
    layout: str = FIXED_LAYOUT

    task_class: str = PARTIALLY_ORDERED
    min_sequences: int = 1
    max_sequences: int = 4
    min_length: int = 1
    max_length: int = 5
    disjunction_prob: float = 0.25
    n_tasks: int = 50
    state_cap: int = 10_000
    deeper_length: int = 15
    wider_sequences: int = 12

    mode: str = LEARNED_MODE
    seed: int = 0
    episodes: int = 10_000
    timeout: int = DEFAULT_TIMEOUT
    gamma: float = DEFAULT_GAMMA
    alpha: float = DEFAULT_ALPHA
    epsilon_start: float = EPSILON_START
    epsilon_final: float = EPSILON_FINAL
    grounder_every: int = 10

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

    eval_episodes: int = 100
    eval_seeds: int = 5

    def __post_init__(self):
        if self.environment not in ENVIRONMENTS:
            raise ValueError(f"unknown environment {self.environment!r}")
        if self.layout not in (RANDOM_LAYOUT, FIXED_LAYOUT):
            raise ValueError(f"unknown layout policy {self.layout!r}")
        if self.mode not in (ORACLE_MODE, LEARNED_MODE):
            raise ValueError(f"unknown labeling mode {self.mode!r}")

    # -- serialization ----------------------------------------------------

    def to_text(self) -> str:
        return kvconfig.dumps({f.name: getattr(self, f.name) for f in fields(self)})

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        pairs = kvconfig.loads(text)
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(pairs) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in pairs:
                continue
            raw = pairs[f.name]
            if f.type == "int":
                kwargs[f.name] = int(raw)
            elif f.type == "float":
                kwargs[f.name] = float(raw)
            elif f.type == "bool":
                kwargs[f.name] = kvconfig.parse_bool(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)

    # -- profiles ----------------------------------------------------------

    @classmethod
    def minecraft(cls, **overrides) -> "ExperimentConfig":
        return cls(**overrides)

    @classmethod
    def minecraft_avoidance(cls, **overrides) -> "ExperimentConfig":
        base = dict(task_class=GLOBAL_AVOIDANCE, max_sequences=2, max_length=3)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def flatworld(cls, **overrides) -> "ExperimentConfig":
        base = dict(
            environment=FLATWORLD,
            accumulation=8, update_steps=128, patience=4000,
            train_capacity=8192, val_capacity=2048,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def bootcamp(cls, **overrides) -> "ExperimentConfig":
        base = dict(environment=BOOTCAMP, mode=ORACLE_MODE)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "ExperimentConfig":
        """Small everything: a 5x5 world with 3 propositions and short tasks,
        sized so full runs finish in seconds."""
        base = dict(
            grid_size=5, n_props=3,
            max_sequences=2, max_length=2,
            n_tasks=12, episodes=3000, timeout=30,
            update_steps=8, grounder_every=10,
            deeper_length=3, wider_sequences=3,
            eval_episodes=50, eval_seeds=5,
        )
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# Builders


def build_alphabet(config: ExperimentConfig) -> Alphabet:
    if config.environment == FLATWORLD:
        from .envs import flatworld_alphabet

        return flatworld_alphabet(config.n_zones)
    from .envs import gridworld_alphabet

    return gridworld_alphabet(config.n_props)


def build_base_env(config: ExperimentConfig):
    """Instantiate the base world; fixed layouts come from the master seed."""
    if config.environment == GRIDWORLD:
        env = GridWorld(size=config.grid_size, n_props=config.n_props)
        if config.layout == FIXED_LAYOUT:
            layout = env.sample_layout(substream(config.seed, "layout"))
            env = GridWorld(size=config.grid_size, n_props=config.n_props,
                            layout=layout)
        return env
    if config.environment == FLATWORLD:
        env = FlatWorld(n_zones=config.n_zones)
        if config.layout == FIXED_LAYOUT:
            zones = env.sample_zones(substream(config.seed, "layout"))
            env = FlatWorld(n_zones=config.n_zones, layout=zones)
        return env
    return Bootcamp(build_alphabet(config))


def build_task_config(config: ExperimentConfig,
                      split: str = BASE_SPLIT) -> TaskConfig:
    base = TaskConfig(
        task_class=config.task_class,
        alphabet=build_alphabet(config),
        min_sequences=config.min_sequences,
        max_sequences=config.max_sequences,
        min_length=config.min_length,
        max_length=config.max_length,
        disjunction_prob=config.disjunction_prob,
    )
    if split == BASE_SPLIT:
        return base
    if split == DEEPER_SPLIT:
        return deeper_chains(base, config.deeper_length)
    if split == WIDER_SPLIT:
        return more_chains(base, config.wider_sequences)
    raise ValueError(f"unknown task split {split!r}")


def build_joint_config(config: ExperimentConfig) -> JointConfig:
    return JointConfig(
        episodes=config.episodes,
        mode=config.mode,
        timeout=config.timeout,
        gamma=config.gamma,
        alpha=config.alpha,
        epsilon_start=config.epsilon_start,
        epsilon_final=config.epsilon_final,
        grounder_every=config.grounder_every,
        grounder=GrounderTrainConfig(
            learning_rate=config.learning_rate,
            batch_size=config.batch_size,
            accumulation=config.accumulation,
            update_steps=config.update_steps,
            patience=config.patience,
            train_capacity=config.train_capacity,
            val_capacity=config.val_capacity,
            tau=config.tau,
            init_magnitude=config.init_magnitude,
            max_rounds=config.max_rounds,
        ),
    )


# ---------------------------------------------------------------------------
# Run orchestration


def run_train(config: ExperimentConfig, out_dir: str) -> dict:
    """Build the task dataset, train, and write all artifacts into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, CONFIG_FILE), "w", encoding="utf-8") as fh:
        fh.write(config.to_text())

    dataset = build_dataset(
        build_task_config(config), config.n_tasks,
        substream(config.seed, "tasks"), state_cap=config.state_cap,
    )
    save_dataset(dataset, os.path.join(out_dir, TASKS_FILE))

    base = build_base_env(config)
    result = train_joint(base, dataset, build_joint_config(config),
                         substream(config.seed, "train"))

    with open(os.path.join(out_dir, QTABLE_FILE), "wb") as fh:
        fh.write(save_qtable(result.table))
    if result.grounder is not None:
        with open(os.path.join(out_dir, GROUNDER_FILE), "wb") as fh:
            fh.write(save_grounder(result.grounder))
    write_training_log(os.path.join(out_dir, TRAINING_LOG_FILE),
                       result.grounder_log)

    returns = result.episode_returns
    tail = returns[-min(100, len(returns)):]
    return {
        "run_dir": out_dir,
        "episodes": len(returns),
        "table_entries": len(result.table),
        "grounder_rounds": len(result.grounder_log),
        "mean_return_tail": float(np.mean(tail)),
        "machine_states": [e.machine.n_states for e in dataset],
    }


def load_run(run_dir: str) -> tuple[ExperimentConfig, TaskDataset, QTable,
                                    Optional[LinearGrounder]]:
    with open(os.path.join(run_dir, CONFIG_FILE), "r", encoding="utf-8") as fh:
        config = ExperimentConfig.from_text(fh.read())
    dataset = load_dataset(os.path.join(run_dir, TASKS_FILE))
    with open(os.path.join(run_dir, QTABLE_FILE), "rb") as fh:
        table = load_qtable(fh.read())
    grounder = None
    grounder_path = os.path.join(run_dir, GROUNDER_FILE)
    if os.path.exists(grounder_path):
        with open(grounder_path, "rb") as fh:
            grounder = load_grounder(fh.read())
    return config, dataset, table, grounder


def run_eval(run_dir: str, splits: Sequence[str] = SPLITS,
             out_path: Optional[str] = None) -> list[EvalRow]:
    """Evaluate a finished run on the trained split and generalization splits.

    Generalization tasks are sampled fresh from the stretched grammars with
    seeds independent of training. Metrics are averaged per seed and written
    as one CSV."""
    config, dataset, table, grounder = load_run(run_dir)
    base = build_base_env(config)
    seeds = [config.seed + 1 + i for i in range(config.eval_seeds)]
    rows: list[EvalRow] = []
    for split in splits:
        if split == BASE_SPLIT:
            split_dataset = dataset
        else:
            split_dataset = build_dataset(
                build_task_config(config, split), config.n_tasks,
                substream(config.seed, "tasks", split),
                state_cap=config.state_cap,
            )
        rows.extend(evaluate(
            table, base, split_dataset, split,
            episodes=config.eval_episodes, seeds=seeds,
            mode=config.mode, grounder=grounder,
            gamma=config.gamma, timeout=config.timeout,
        ))
    metrics_path = out_path or os.path.join(run_dir, METRICS_FILE)
    write_metrics_csv(metrics_path, rows)
    return rows


# ---------------------------------------------------------------------------
# Progression/machine agreement checking


@dataclass
class VerifyReport:
    formulas: int
    traces: int
    mismatches: list[str]

    @property
    def ok(self) -> bool:
        return not self.mismatches


def verify_formula(formula: Formula, alphabet: Alphabet,
                   max_len: int, state_cap: int = 10_000) -> tuple[int, Optional[str]]:
    """Walk every symbol sequence up to max_len, comparing the compiled
    machine's outputs against iterated progression, pruning once both sides
    agree on a decided verdict. Returns (paths checked, first mismatch)."""
    machine = compile_formula(formula, alphabet, state_cap=state_cap)
    names = alphabet.names
    root = canonicalize(formula)
    checked = 0

    stack = [(root, machine.initial, ())]
    while stack:
        current, state, prefix = stack.pop()
        expected = verdict(current)
        got = machine.output(state)
        if expected != got:
            return checked, (f"{formula} over {list(prefix)}: machine {got}, "
                             f"progression {expected}")
        checked += 1
        if expected != 0 or len(prefix) >= max_len:
            continue
        for name in names:
            stack.append((progress(current, name),
                          machine.step(state, name),
                          prefix + (name,)))
    return checked, None


def run_verify(task_config: TaskConfig, n_formulas: int, max_len: int,
               seed: int, state_cap: int = 10_000) -> VerifyReport:
    rng = substream(seed, "verify")
    mismatches = []
    traces = 0
    for _ in range(n_formulas):
        formula = sample_task(task_config, rng)
        checked, mismatch = verify_formula(formula, task_config.alphabet,
                                           max_len, state_cap)
        traces += checked
        if mismatch:
            mismatches.append(mismatch)
    return VerifyReport(n_formulas, traces, mismatches)
