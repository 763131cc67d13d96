"""Seedable simulators and the task-product wrapper.

Three worlds share one interface: ``reset(rng) -> state``, ``step(state,
action) -> state``, ``observation(state)``, ``observation_key(state)``, and an
oracle ``label(state)`` that names the proposition holding at the agent's
location (the reserved empty symbol when none does). The product wrapper
attaches a task machine, emits the three-valued prefix verdict as reward, and
tracks a second, possibly grounder-driven, automaton state for the agent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .automata import MooreMachine
from .ltl import Alphabet, Formula, Symbol
from .nrm import LinearGrounder

GRID_PROPS = ("pick", "lava", "door", "apple", "egg")
FLAT_PROPS = ("red", "green", "blue")

GRID_ACTIONS = ("N", "S", "E", "W")
_GRID_DELTAS = ((-1, 0), (1, 0), (0, 1), (0, -1))

CELLS_PER_PROP = 2


def gridworld_alphabet(n_props: int = 5) -> Alphabet:
    if not 1 <= n_props <= len(GRID_PROPS):
        raise ValueError(f"n_props must be in 1..{len(GRID_PROPS)}")
    return Alphabet(GRID_PROPS[:n_props])


def flatworld_alphabet(n_zones: int = 3) -> Alphabet:
    if not 1 <= n_zones <= len(FLAT_PROPS):
        raise ValueError(f"n_zones must be in 1..{len(FLAT_PROPS)}")
    return Alphabet(FLAT_PROPS[:n_zones])


# ---------------------------------------------------------------------------
# Gridworld


@dataclass(frozen=True)
class GridState:
    size: int
    cells: tuple[int, ...]  # row-major; -1 empty, otherwise proposition id
    agent: tuple[int, int]


class GridWorld:
    """Toroidal grid; each proposition occupies exactly two cells; the agent
    starts on an empty cell. The layout is resampled every episode unless a
    fixed layout is supplied."""

    def __init__(self, size: int = 7, n_props: int = 5,
                 layout: Sequence[int] | None = None):
        self.size = size
        self.n_props = n_props
        self.alphabet = gridworld_alphabet(n_props)
        if size * size <= n_props * CELLS_PER_PROP:
            raise ValueError("grid too small for the propositions")
        self._layout = tuple(layout) if layout is not None else None
        if self._layout is not None and len(self._layout) != size * size:
            raise ValueError("fixed layout has the wrong cell count")

    @property
    def n_actions(self) -> int:
        return len(GRID_ACTIONS)

    @property
    def observation_dim(self) -> int:
        return self.size * self.size * (self.n_props + 1)

    def sample_layout(self, rng: np.random.Generator) -> tuple[int, ...]:
        """Uniform placement of n_props * 2 distinct occupied cells."""
        total = self.size * self.size
        occupied = rng.choice(total, size=self.n_props * CELLS_PER_PROP,
                              replace=False)
        cells = [-1] * total
        for i, cell in enumerate(occupied):
            cells[int(cell)] = i // CELLS_PER_PROP
        return tuple(cells)

    def reset(self, rng: np.random.Generator) -> GridState:
        cells = self._layout if self._layout is not None else self.sample_layout(rng)
        empty = [i for i, c in enumerate(cells) if c == -1]
        start = int(empty[int(rng.integers(0, len(empty)))])
        return GridState(self.size, tuple(cells),
                         (start // self.size, start % self.size))

    def step(self, state: GridState, action: int | str) -> GridState:
        if isinstance(action, str):
            action = GRID_ACTIONS.index(action)
        dr, dc = _GRID_DELTAS[action]
        r = (state.agent[0] + dr) % state.size
        c = (state.agent[1] + dc) % state.size
        return GridState(state.size, state.cells, (r, c))

    def label(self, state: GridState) -> Symbol:
        prop = state.cells[state.agent[0] * state.size + state.agent[1]]
        return self.alphabet.empty if prop < 0 else self.alphabet.symbols[prop]

    def _ego_cells(self, state: GridState) -> np.ndarray:
        size = state.size
        grid = np.asarray(state.cells, dtype=np.int8).reshape(size, size)
        center = size // 2
        # roll the agent's cell onto the center; the view is translation
        # invariant on the torus
        return np.roll(grid, (center - state.agent[0], center - state.agent[1]),
                       axis=(0, 1))

    def observation(self, state: GridState) -> np.ndarray:
        ego = self._ego_cells(state)
        planes = np.zeros((self.n_props + 1, state.size, state.size))
        for p in range(self.n_props):
            planes[p] = ego == p
        planes[self.n_props] = ego == -1
        # plane-last layout: cell-major, then content channel
        return planes.transpose(1, 2, 0).reshape(-1).astype(np.float64)

    def observation_key(self, state: GridState) -> bytes:
        return self._ego_cells(state).tobytes()


# ---------------------------------------------------------------------------
# FlatWorld


@dataclass(frozen=True)
class FlatZone:
    center: tuple[float, float]
    radius: float
    symbol_id: int


@dataclass(frozen=True)
class FlatState:
    zones: tuple[FlatZone, ...]
    pos: tuple[float, float]


class FlatWorld:
    """Unit square with one disjoint circular zone per proposition and a
    velocity-controlled point agent."""

    MAX_SPEED = 0.1
    RADIUS_RANGE = (0.1, 0.2)
    MAX_LAYOUT_ATTEMPTS = 1000

    def __init__(self, n_zones: int = 3,
                 layout: tuple[FlatZone, ...] | None = None):
        self.n_zones = n_zones
        self.alphabet = flatworld_alphabet(n_zones)
        if layout is not None and len(layout) != n_zones:
            raise ValueError("fixed layout has the wrong zone count")
        self._layout = layout

    @property
    def n_actions(self) -> int:
        return len(self.discrete_actions())

    @property
    def observation_dim(self) -> int:
        return 2 + self.n_zones * (3 + self.n_zones)

    def discrete_actions(self) -> tuple[tuple[float, float], ...]:
        """Eight compass directions at max speed, for tabular control."""
        out = []
        for k in range(8):
            angle = k * math.pi / 4
            out.append((self.MAX_SPEED * math.cos(angle),
                        self.MAX_SPEED * math.sin(angle)))
        return tuple(out)

    def sample_zones(self, rng: np.random.Generator) -> tuple[FlatZone, ...]:
        lo, hi = self.RADIUS_RANGE
        for _ in range(self.MAX_LAYOUT_ATTEMPTS):
            zones = []
            for symbol_id in range(self.n_zones):
                radius = float(rng.uniform(lo, hi))
                cx = float(rng.uniform(radius, 1 - radius))
                cy = float(rng.uniform(radius, 1 - radius))
                zones.append(FlatZone((cx, cy), radius, symbol_id))
            if all(
                math.dist(a.center, b.center) > a.radius + b.radius
                for i, a in enumerate(zones)
                for b in zones[i + 1:]
            ):
                return tuple(zones)
        raise RuntimeError("could not sample a disjoint zone layout")

    def reset(self, rng: np.random.Generator) -> FlatState:
        zones = self._layout if self._layout is not None else self.sample_zones(rng)
        for _ in range(self.MAX_LAYOUT_ATTEMPTS):
            pos = (float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
            if all(math.dist(pos, z.center) > z.radius for z in zones):
                return FlatState(zones, pos)
        raise RuntimeError("could not sample an agent start outside all zones")

    def step(self, state: FlatState, action: Sequence[float] | int) -> FlatState:
        if isinstance(action, (int, np.integer)):
            velocity = np.asarray(self.discrete_actions()[int(action)])
        else:
            velocity = np.asarray(action, dtype=np.float64)
        speed = float(np.linalg.norm(velocity))
        if speed > self.MAX_SPEED:
            velocity = velocity * (self.MAX_SPEED / speed)
        x = min(max(state.pos[0] + float(velocity[0]), 0.0), 1.0)
        y = min(max(state.pos[1] + float(velocity[1]), 0.0), 1.0)
        return FlatState(state.zones, (x, y))

    def label(self, state: FlatState) -> Symbol:
        for zone in state.zones:
            if math.dist(state.pos, zone.center) <= zone.radius:
                return self.alphabet.symbols[zone.symbol_id]
        return self.alphabet.empty

    def observation(self, state: FlatState) -> np.ndarray:
        parts = [state.pos[0], state.pos[1]]
        for zone in sorted(state.zones, key=lambda z: z.symbol_id):
            parts.append(zone.center[0] - state.pos[0])
            parts.append(zone.center[1] - state.pos[1])
            parts.append(zone.radius)
            one_hot = [0.0] * self.n_zones
            one_hot[zone.symbol_id] = 1.0
            parts.extend(one_hot)
        return np.asarray(parts, dtype=np.float64)

    def observation_key(self, state: FlatState) -> bytes:
        gx = min(int(state.pos[0] * 10), 9)
        gy = min(int(state.pos[1] * 10), 9)
        return bytes((gx, gy))


# ---------------------------------------------------------------------------
# Bootcamp: actions are symbols, observations are empty


@dataclass(frozen=True)
class BootcampState:
    last_symbol: int  # id of the symbol emitted by the last action


class Bootcamp:
    """Degenerate world for exercising task machines: the agent's action IS
    the observed symbol. Starts on the empty symbol."""

    def __init__(self, alphabet: Alphabet):
        self.alphabet = alphabet

    @property
    def n_actions(self) -> int:
        return len(self.alphabet)

    @property
    def observation_dim(self) -> int:
        return 0

    def reset(self, rng: np.random.Generator) -> BootcampState:
        return BootcampState(self.alphabet.empty.id)

    def step(self, state: BootcampState, action: int) -> BootcampState:
        if not 0 <= int(action) < len(self.alphabet):
            raise ValueError(f"action {action} is not a symbol id")
        return BootcampState(int(action))

    def label(self, state: BootcampState) -> Symbol:
        return self.alphabet.symbols[state.last_symbol]

    def observation(self, state: BootcampState) -> np.ndarray:
        return np.zeros(0, dtype=np.float64)

    def observation_key(self, state: BootcampState) -> bytes:
        return b""


def oracle_label(env, state) -> Symbol:
    """Proposition holding at the agent's location; test/oracle use only."""
    return env.label(state)


# ---------------------------------------------------------------------------
# Product wrapper


DEFAULT_TIMEOUT = 75

ORACLE_MODE = "oracle"
LEARNED_MODE = "learned"


class ProductEnv:
    """Base environment plus one task.

    The reward is always the machine verdict over the oracle label trace.
    The automaton state exposed to the agent follows the labeling mode:
    the oracle's symbols, or the grounder's argmax symbols. The episode ends
    on a non-zero reward or at the step timeout.
    """

    def __init__(self, base, formula: Formula, machine: MooreMachine,
                 mode: str = ORACLE_MODE,
                 grounder: LinearGrounder | None = None,
                 timeout: int = DEFAULT_TIMEOUT):
        if mode not in (ORACLE_MODE, LEARNED_MODE):
            raise ValueError(f"unknown labeling mode {mode!r}")
        if mode == LEARNED_MODE and grounder is None:
            raise ValueError("learned mode needs a grounder")
        if timeout < 1:
            raise ValueError("timeout must be at least 1 step")
        if machine.alphabet != base.alphabet:
            raise ValueError("machine and environment alphabets differ")
        self.base = base
        self.formula = formula
        self.machine = machine
        self.mode = mode
        self.grounder = grounder
        self.timeout = timeout
        self._state = None
        self._true_q = machine.initial
        self._exposed_q = machine.initial
        self._steps = 0
        self._done = True
        self.exposed_hit_terminal = False

    @property
    def state(self):
        return self._state

    @property
    def done(self) -> bool:
        return self._done

    def _predict_symbol(self, observation: np.ndarray) -> int:
        assert self.grounder is not None
        return int(self.grounder.argmax_symbols(observation[None, :])[0])

    def _advance(self, observation: np.ndarray) -> tuple[int, int, int]:
        """Feed the current base state's labels to both automaton tracks."""
        oracle_id = self.base.label(self._state).id
        self._true_q = self.machine.step(self._true_q, oracle_id)
        if self.mode == LEARNED_MODE:
            predicted_id = self._predict_symbol(observation)
        else:
            predicted_id = oracle_id
        self._exposed_q = self.machine.step(self._exposed_q, predicted_id)
        if self.machine.output(self._exposed_q) != 0:
            self.exposed_hit_terminal = True
        reward = self.machine.output(self._true_q)
        return oracle_id, (predicted_id if self.mode == LEARNED_MODE else -1), reward

    def _pack_info(self, oracle_id: int, predicted_id: int) -> dict:
        return {
            "oracle_symbol": oracle_id,
            "predicted_symbol": predicted_id,
            "true_state": self._true_q,
            "exposed_state": self._exposed_q,
            "step": self._steps,
        }

    def reset(self, rng: np.random.Generator):
        """Start an episode; the initial cell's label is consumed immediately,
        so a trivially-true task terminates here with reward +1."""
        self._state = self.base.reset(rng)
        self._true_q = self.machine.initial
        self._exposed_q = self.machine.initial
        self._steps = 0
        self.exposed_hit_terminal = self.machine.output(self.machine.initial) != 0
        observation = self.base.observation(self._state)
        oracle_id, predicted_id, reward = self._advance(observation)
        self._done = reward != 0
        return observation, reward, self._done, self._pack_info(oracle_id,
                                                                predicted_id)

    def step(self, action):
        if self._done:
            raise RuntimeError("step after episode end")
        self._state = self.base.step(self._state, action)
        self._steps += 1
        observation = self.base.observation(self._state)
        oracle_id, predicted_id, reward = self._advance(observation)
        self._done = reward != 0 or self._steps >= self.timeout
        return observation, reward, self._done, self._pack_info(oracle_id,
                                                                predicted_id)

    def observation_key(self) -> bytes:
        return self.base.observation_key(self._state)


# ---------------------------------------------------------------------------
# Episode logging


def write_episode_log(path, env_name: str, seed: int, formula_text: str,
                      records: Iterable[dict]) -> None:
    """One CSV row per step: index, observation vector (semicolon-joined),
    action, oracle symbol id, grounder symbol id (-1 in oracle mode), true
    reward."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# environment={env_name},seed={seed},task={formula_text}\n")
        fh.write("step,observation,action,oracle_symbol,grounder_symbol,reward\n")
        for rec in records:
            obs = ";".join(f"{x:.10g}" for x in np.asarray(rec["observation"]).ravel())
            predicted = rec.get("grounder_symbol", rec.get("predicted_symbol", -1))
            fh.write(
                f"{rec['step']},{obs},{rec.get('action', '')},"
                f"{rec['oracle_symbol']},{predicted},"
                f"{rec['reward']}\n"
            )
