"""Random temporal-task generators and machine-backed task datasets.

Two task families over a shared alphabet:

* partially ordered: a conjunction of reach-sequences, each sequence a
  nested chain "eventually t1, then eventually t2, ...".  A chain step is
  a single atom or, with a configured probability, a disjunction of two
  distinct atoms.
* global avoidance: like the above, but every chain step also forbids one
  formula-wide hazard atom until the step's target is reached.  The hazard
  atom is drawn once per formula and never appears as a target.

A dataset pairs each sampled formula with its compiled minimal machine and
is stored as a tab-separated manifest plus one machine file per task.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kvconfig
from .automata import CompileError, MooreMachine, compile_formula, deserialize, serialize
from .ltl import (
    Alphabet,
    And,
    Atom,
    Eventually,
    Formula,
    Not,
    Or,
    Until,
    canonicalize,
    parse,
    progress,
    verdict,
)

PARTIALLY_ORDERED = "partially_ordered"
GLOBAL_AVOIDANCE = "global_avoidance"
TASK_CLASSES = (PARTIALLY_ORDERED, GLOBAL_AVOIDANCE)

MACHINE_DIR_SUFFIX = "_machines"
CONFIG_SUFFIX = ".config"


class TaskGenError(ValueError):
    pass


class DatasetVerificationError(RuntimeError):
    """A compiled machine disagreed with formula progression on some trace."""

    def __init__(self, formula_text: str, trace: tuple[str, ...], detail: str):
        self.formula_text = formula_text
        self.trace = trace
        super().__init__(f"machine/progression mismatch on {formula_text!r} over {trace}: {detail}")


@dataclass(frozen=True)
class TaskConfig:
    task_class: str
    alphabet: Alphabet
    min_sequences: int = 1
    max_sequences: int = 1
    min_length: int = 1
    max_length: int = 1
    disjunction_prob: float = 0.25

    def __post_init__(self):
        if self.task_class not in TASK_CLASSES:
            raise TaskGenError(f"unknown task class {self.task_class!r}")
        if not (1 <= self.min_sequences <= self.max_sequences):
            raise TaskGenError("sequence count range must satisfy 1 <= min <= max")
        if not (1 <= self.min_length <= self.max_length):
            raise TaskGenError("sequence length range must satisfy 1 <= min <= max")
        if not (0.0 <= self.disjunction_prob <= 1.0):
            raise TaskGenError("disjunction_prob must lie in [0, 1]")
        n_atoms = len(self.alphabet.non_empty)
        if self.task_class == GLOBAL_AVOIDANCE and n_atoms < 2:
            raise TaskGenError("global avoidance needs at least 2 non-empty symbols")
        if self.disjunction_prob > 0.0 and n_atoms < 2:
            raise TaskGenError("disjunctions need at least 2 non-empty symbols")

    def to_kv(self) -> dict[str, object]:
        return {
            "task_class": self.task_class,
            "alphabet": ",".join(s.name for s in self.alphabet.non_empty),
            "min_sequences": self.min_sequences,
            "max_sequences": self.max_sequences,
            "min_length": self.min_length,
            "max_length": self.max_length,
            "disjunction_prob": self.disjunction_prob,
        }

    @classmethod
    def from_kv(cls, pairs: dict[str, str]) -> "TaskConfig":
        try:
            return cls(
                task_class=pairs["task_class"],
                alphabet=Alphabet(tuple(pairs["alphabet"].split(","))),
                min_sequences=int(pairs["min_sequences"]),
                max_sequences=int(pairs["max_sequences"]),
                min_length=int(pairs["min_length"]),
                max_length=int(pairs["max_length"]),
                disjunction_prob=float(pairs["disjunction_prob"]),
            )
        except KeyError as exc:
            raise TaskGenError(f"task config missing key {exc.args[0]!r}") from None


def _sample_term(
    atoms: tuple[str, ...],
    disjunction_prob: float,
    rng: np.random.Generator,
    stats: Optional[dict],
) -> Formula:
    if stats is not None:
        stats["terms"] = stats.get("terms", 0) + 1
    if disjunction_prob > 0.0 and rng.random() < disjunction_prob:
        if stats is not None:
            stats["disjunctions"] = stats.get("disjunctions", 0) + 1
        i, j = rng.choice(len(atoms), size=2, replace=False)
        return Or((Atom(atoms[int(i)]), Atom(atoms[int(j)])))
    return Atom(atoms[int(rng.integers(len(atoms)))])


def sample_po(config: TaskConfig, rng: np.random.Generator, stats: Optional[dict] = None) -> Formula:
    """Sample one partially-ordered task as a canonical formula."""
    if config.task_class != PARTIALLY_ORDERED:
        raise TaskGenError(f"config is for {config.task_class}, not {PARTIALLY_ORDERED}")
    atoms = tuple(s.name for s in config.alphabet.non_empty)
    n_sequences = int(rng.integers(config.min_sequences, config.max_sequences + 1))
    sequences = []
    for _ in range(n_sequences):
        length = int(rng.integers(config.min_length, config.max_length + 1))
        terms = [_sample_term(atoms, config.disjunction_prob, rng, stats) for _ in range(length)]
        seq: Formula = Eventually(terms[-1])
        for term in reversed(terms[:-1]):
            seq = Eventually(And((term, seq)))
        sequences.append(seq)
    return canonicalize(And(tuple(sequences)) if len(sequences) > 1 else sequences[0])


def sample_ga(config: TaskConfig, rng: np.random.Generator) -> Formula:
    """Sample one global-avoidance task as a canonical formula."""
    if config.task_class != GLOBAL_AVOIDANCE:
        raise TaskGenError(f"config is for {config.task_class}, not {GLOBAL_AVOIDANCE}")
    atoms = tuple(s.name for s in config.alphabet.non_empty)
    hazard = atoms[int(rng.integers(len(atoms)))]
    targets = tuple(a for a in atoms if a != hazard)
    guard = Not(Atom(hazard))
    n_sequences = int(rng.integers(config.min_sequences, config.max_sequences + 1))
    sequences = []
    for _ in range(n_sequences):
        length = int(rng.integers(config.min_length, config.max_length + 1))
        picked = [Atom(targets[int(rng.integers(len(targets)))]) for _ in range(length)]
        seq: Formula = Until(guard, picked[-1])
        for target in reversed(picked[:-1]):
            seq = Until(guard, And((target, seq)))
        sequences.append(seq)
    return canonicalize(And(tuple(sequences)) if len(sequences) > 1 else sequences[0])


def sample_task(config: TaskConfig, rng: np.random.Generator, stats: Optional[dict] = None) -> Formula:
    if config.task_class == PARTIALLY_ORDERED:
        return sample_po(config, rng, stats)
    return sample_ga(config, rng)


@dataclass(frozen=True)
class TaskEntry:
    text: str
    machine: MooreMachine

    @property
    def formula(self) -> Formula:
        return parse(self.text, self.machine.alphabet)


@dataclass
class TaskDataset:
    config: TaskConfig
    entries: list[TaskEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, index: int) -> TaskEntry:
        return self.entries[index]


def spot_check(
    formula: Formula,
    machine: MooreMachine,
    rng: np.random.Generator,
    n_traces: int = 16,
    max_len: int = 8,
) -> None:
    """Compare machine outputs against iterated progression on random traces.

    Raises DatasetVerificationError on the first disagreement.
    """
    names = machine.alphabet.names
    text = str(formula)
    for _ in range(n_traces):
        length = int(rng.integers(1, max_len + 1))
        trace = tuple(names[int(i)] for i in rng.integers(len(names), size=length))
        current = canonicalize(formula)
        state = machine.initial
        for sigma in trace:
            expected = verdict(current)
            got = machine.output(state)
            if expected != got:
                raise DatasetVerificationError(text, trace, f"verdict {got} vs progression {expected}")
            if expected != 0:
                break
            current = progress(current, sigma)
            state = machine.step(state, sigma)
        else:
            if verdict(current) != machine.output(state):
                raise DatasetVerificationError(
                    text, trace, f"final verdict {machine.output(state)} vs {verdict(current)}"
                )


def build_dataset(
    config: TaskConfig,
    n_tasks: int,
    rng: np.random.Generator,
    state_cap: int = 10_000,
    verify_traces: int = 16,
    stats: Optional[dict] = None,
) -> TaskDataset:
    """Sample n_tasks formulae and compile each into a verified minimal machine.

    Duplicate formulae are kept; the dataset is a sample, not a set.  Any
    compilation failure (state cap included) aborts the build.
    """
    if n_tasks < 1:
        raise TaskGenError("n_tasks must be >= 1")
    entries = []
    for _ in range(n_tasks):
        formula = sample_task(config, rng, stats)
        try:
            machine = compile_formula(formula, config.alphabet, state_cap=state_cap)
        except CompileError as exc:
            raise CompileError(f"while compiling sampled task {formula}: {exc}") from exc
        if verify_traces > 0:
            spot_check(formula, machine, rng, n_traces=verify_traces)
        entries.append(TaskEntry(text=str(formula), machine=machine))
    return TaskDataset(config=config, entries=entries)


def _machine_dir_for(manifest_path: str) -> str:
    base, _ = os.path.splitext(manifest_path)
    return base + MACHINE_DIR_SUFFIX


def save_dataset(dataset: TaskDataset, manifest_path: str) -> None:
    """Write manifest lines "formula<TAB>machine-file" plus a machine dir.

    Machine files live in a sibling directory named after the manifest; the
    manifest stores bare file names, not paths.  A .config sidecar records
    the sampling configuration.
    """
    machine_dir = _machine_dir_for(manifest_path)
    os.makedirs(machine_dir, exist_ok=True)
    lines = []
    for i, entry in enumerate(dataset.entries):
        name = f"{i:06d}.nrmm"
        with open(os.path.join(machine_dir, name), "wb") as fh:
            fh.write(serialize(entry.machine))
        lines.append(f"{entry.text}\t{name}")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(manifest_path + CONFIG_SUFFIX, "w", encoding="utf-8") as fh:
        fh.write(kvconfig.dumps(dataset.config.to_kv()))


def load_dataset(manifest_path: str) -> TaskDataset:
    machine_dir = _machine_dir_for(manifest_path)
    config_path = manifest_path + CONFIG_SUFFIX
    with open(config_path, "r", encoding="utf-8") as fh:
        config = TaskConfig.from_kv(kvconfig.loads(fh.read()))
    entries = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise TaskGenError(f"{manifest_path}:{lineno}: expected formula<TAB>file")
            text, _, name = line.partition("\t")
            with open(os.path.join(machine_dir, name), "rb") as mf:
                machine = deserialize(mf.read())
            if machine.alphabet != config.alphabet:
                raise TaskGenError(f"{manifest_path}:{lineno}: machine alphabet differs from config")
            parse(text, machine.alphabet)  # reject stale or corrupted manifests early
            entries.append(TaskEntry(text=text, machine=machine))
    return TaskDataset(config=config, entries=entries)


# Sampling profiles for the bundled environments.  "dep" stretches chain
# depth past the training range at a fixed length; "conj" stretches the
# number of conjoined chains at the training length range.

def minecraft_po() -> TaskConfig:
    from .envs import gridworld_alphabet

    return TaskConfig(
        task_class=PARTIALLY_ORDERED,
        alphabet=gridworld_alphabet(),
        min_sequences=1,
        max_sequences=4,
        min_length=1,
        max_length=5,
    )


def minecraft_ga() -> TaskConfig:
    from .envs import gridworld_alphabet

    return TaskConfig(
        task_class=GLOBAL_AVOIDANCE,
        alphabet=gridworld_alphabet(),
        min_sequences=1,
        max_sequences=2,
        min_length=1,
        max_length=3,
    )


def flatworld_po() -> TaskConfig:
    from .envs import flatworld_alphabet

    return TaskConfig(
        task_class=PARTIALLY_ORDERED,
        alphabet=flatworld_alphabet(),
        min_sequences=1,
        max_sequences=4,
        min_length=1,
        max_length=5,
    )


def deeper_chains(config: TaskConfig, length: int = 15) -> TaskConfig:
    """Generalization split: same class, every chain at a fixed long length."""
    return replace(config, min_length=length, max_length=length)


def more_chains(config: TaskConfig, sequences: int = 12) -> TaskConfig:
    """Generalization split: same class, a fixed larger chain count."""
    return replace(config, min_sequences=sequences, max_sequences=sequences)
