"""Temporal-task toolkit: co-safe temporal formulas compiled to reward
machines, differentiable symbol grounding, simulators, and a tabular
multi-task agent."""

__version__ = "0.1.0"

from .agent import (
    EvalRow,
    JointConfig,
    JointResult,
    QTable,
    evaluate,
    load_qtable,
    save_qtable,
    train_joint,
    write_metrics_csv,
)
from .automata import (
    CompileError,
    MachineFormatError,
    MooreMachine,
    NotCosafeError,
    StateCapError,
    TraceRun,
    compile_formula,
    deserialize,
    minimize,
    serialize,
    to_dot,
)
from .envs import (
    Bootcamp,
    FlatWorld,
    GridWorld,
    LEARNED_MODE,
    ORACLE_MODE,
    ProductEnv,
    flatworld_alphabet,
    gridworld_alphabet,
    write_episode_log,
)
from .experiment import (
    ExperimentConfig,
    VerifyReport,
    run_eval,
    run_train,
    run_verify,
    substream,
    verify_formula,
)
from .ltl import (
    Alphabet,
    And,
    Atom,
    EMPTY_SYMBOL,
    Eventually,
    FALSE,
    Formula,
    Globally,
    LtlError,
    LtlSyntaxError,
    Next,
    Not,
    Or,
    Symbol,
    TRUE,
    UnknownSymbolError,
    Until,
    atoms_of,
    canonicalize,
    parse,
    progress,
    verdict,
)
from .nrm import (
    Episode,
    GrounderTrainConfig,
    GrounderTrainer,
    LinearGrounder,
    NrmParams,
    ReplayBuffer,
    ReplayBuffers,
    backward,
    forward,
    init_from_machine,
    load_grounder,
    save_grounder,
    train_grounder,
)
from .taskgen import (
    GLOBAL_AVOIDANCE,
    PARTIALLY_ORDERED,
    TaskConfig,
    TaskDataset,
    TaskEntry,
    build_dataset,
    load_dataset,
    sample_ga,
    sample_po,
    sample_task,
    save_dataset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
