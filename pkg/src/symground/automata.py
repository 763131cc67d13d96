"""Reward Moore machines compiled from co-safe formulae.

A machine monitors one task: it reads one symbol per step and outputs +1 once
the observed prefix guarantees satisfaction, -1 once it guarantees violation,
and 0 while the verdict is open. States are built by progression expansion,
so each pre-minimization state is literally a canonical formula.
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .ltl import (
    EMPTY_SYMBOL,
    FALSE,
    TRUE,
    Alphabet,
    Formula,
    Symbol,
    atoms_of,
    canonicalize,
    is_syntactically_cosafe,
    progress,
)

MACHINE_MAGIC = b"NRMM"
MACHINE_VERSION = 1
DEFAULT_STATE_CAP = 10_000


class CompileError(ValueError):
    pass


class NotCosafeError(CompileError):
    pass


class StateCapError(CompileError):
    def __init__(self, cap: int):
        super().__init__(
            f"progression expansion exceeded the state cap of {cap} states"
        )
        self.cap = cap


class MachineFormatError(ValueError):
    """Malformed serialized machine; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TraceRun:
    """States visited and outputs emitted while reading a trace.

    outputs[0] is the initial state's output; the run stops consuming input
    after the first non-zero output (the episode is over at that point).
    """

    states: tuple[int, ...]
    outputs: tuple[int, ...]
    terminated_at: int | None


class MooreMachine:
    """Immutable total DFA with per-state outputs in {+1, 0, -1}.

    Invariants enforced at construction: transitions are total and in range;
    every +1/-1 state is absorbing; -1 states are exactly the non-final states
    from which no final state is reachable.
    """

    def __init__(self, alphabet: Alphabet, transitions: np.ndarray,
                 outputs: np.ndarray, initial: int):
        transitions = np.asarray(transitions, dtype=np.uint32)
        outputs = np.asarray(outputs, dtype=np.int8)
        n_states = transitions.shape[0] if transitions.ndim == 2 else 0
        if transitions.ndim != 2 or transitions.shape[1] != len(alphabet):
            raise ValueError("transition table shape does not match alphabet")
        if outputs.shape != (n_states,):
            raise ValueError("output vector length does not match state count")
        if n_states == 0:
            raise ValueError("machine needs at least one state")
        if not (0 <= initial < n_states):
            raise ValueError(f"initial state {initial} out of range")
        if transitions.size and transitions.max() >= n_states:
            raise ValueError("transition target out of range")
        if not np.isin(outputs, (-1, 0, 1)).all():
            raise ValueError("outputs must be in {-1, 0, +1}")
        self.alphabet = alphabet
        self.transitions = transitions
        self.outputs = outputs
        self.initial = int(initial)
        self.n_states = int(n_states)
        self.transitions.setflags(write=False)
        self.outputs.setflags(write=False)
        self.finals = frozenset(int(q) for q in np.flatnonzero(outputs == 1))
        self.deads = frozenset(int(q) for q in np.flatnonzero(outputs == -1))
        self._validate()
        self._hash: str | None = None

    def _validate(self) -> None:
        for q in self.finals | self.deads:
            if not (self.transitions[q] == q).all():
                raise ValueError(f"terminal state {q} is not absorbing")
        computed = dead_states(self.transitions, self.finals)
        if computed != self.deads:
            raise ValueError(
                "output map inconsistent: -1 states must be exactly the "
                "states that cannot reach a final state"
            )

    # -- queries ------------------------------------------------------------

    def output(self, state: int) -> int:
        return int(self.outputs[state])

    def step(self, state: int, symbol: Symbol | str | int) -> int:
        return int(self.transitions[state, self._symbol_id(symbol)])

    def _symbol_id(self, symbol: Symbol | str | int) -> int:
        if isinstance(symbol, Symbol):
            return symbol.id
        if isinstance(symbol, str):
            return self.alphabet.symbol(symbol).id
        return int(symbol)

    def run(self, trace: Iterable[Symbol | str | int]) -> TraceRun:
        """Read symbols until the first non-zero output or end of trace."""
        q = self.initial
        states = [q]
        outputs = [self.output(q)]
        if outputs[0] != 0:
            return TraceRun((q,), (outputs[0],), 0)
        for symbol in trace:
            q = self.step(q, symbol)
            states.append(q)
            outputs.append(self.output(q))
            if outputs[-1] != 0:
                return TraceRun(tuple(states), tuple(outputs), len(outputs) - 1)
        return TraceRun(tuple(states), tuple(outputs), None)

    def reward(self, trace: Iterable[Symbol | str | int]) -> int:
        """Three-valued verdict of a finite trace: +1 good prefix, -1 bad."""
        return self.run(trace).outputs[-1]

    def structural_hash(self) -> str:
        """Identity of the minimized machine; equal for isomorphic machines
        over the same alphabet."""
        if self._hash is None:
            canonical = minimize(self)
            digest = hashlib.sha256(serialize(canonical)).hexdigest()
            self._hash = digest[:32]
        return self._hash

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, MooreMachine)
            and self.alphabet == other.alphabet
            and self.initial == other.initial
            and np.array_equal(self.transitions, other.transitions)
            and np.array_equal(self.outputs, other.outputs)
        )

    def __hash__(self) -> int:
        return hash((self.alphabet, self.initial, self.transitions.tobytes(),
                     self.outputs.tobytes()))

    def __repr__(self) -> str:
        return (f"MooreMachine(states={self.n_states}, "
                f"finals={sorted(self.finals)}, deads={sorted(self.deads)})")


def dead_states(transitions: np.ndarray | Sequence[Sequence[int]],
                finals: Iterable[int]) -> frozenset[int]:
    """Non-final states from which no final state is reachable.

    Backward reachability from the finals over the transition relation; the
    complement of the live set.
    """
    transitions = np.asarray(transitions)
    n_states, n_symbols = transitions.shape
    predecessors: list[list[int]] = [[] for _ in range(n_states)]
    for q in range(n_states):
        for a in range(n_symbols):
            predecessors[int(transitions[q, a])].append(q)
    final_set = set(int(q) for q in finals)
    live = set(final_set)
    frontier = deque(live)
    while frontier:
        q = frontier.popleft()
        for p in predecessors[q]:
            if p not in live:
                live.add(p)
                frontier.append(p)
    return frozenset(q for q in range(n_states) if q not in live)


def compile_formula(f: Formula, alphabet: Alphabet,
                    state_cap: int = DEFAULT_STATE_CAP,
                    minimized: bool = True) -> MooreMachine:
    """Compile a co-safe formula into its reward Moore machine.

    States are the canonical formulae reachable by iterated progression over
    every alphabet symbol; the formula `true` is the unique final state and
    `false` the rejecting sink. Dead states (no path to a final) get output
    -1 and are made absorbing. The result is minimized unless told otherwise.
    """
    f0 = canonicalize(f)
    if not is_syntactically_cosafe(f0):
        raise NotCosafeError(f"not a co-safe formula: {f0}")
    known = set(alphabet.names) - {EMPTY_SYMBOL}
    stray = atoms_of(f0) - known
    if stray:
        raise CompileError(f"formula atoms not in alphabet: {sorted(stray)}")

    index: dict[Formula, int] = {f0: 0}
    order: list[Formula] = [f0]
    rows: list[list[int]] = []
    queue = deque([f0])
    while queue:
        g = queue.popleft()
        row = []
        for symbol in alphabet:
            h = progress(g, symbol)
            target = index.get(h)
            if target is None:
                if len(order) >= state_cap:
                    raise StateCapError(state_cap)
                target = len(order)
                index[h] = target
                order.append(h)
                queue.append(h)
            row.append(target)
        rows.append(row)

    transitions = np.array(rows, dtype=np.uint32)
    finals = {index[TRUE]} if TRUE in index else set()
    deads = dead_states(transitions, finals)
    outputs = np.zeros(len(order), dtype=np.int8)
    for q in finals:
        outputs[q] = 1
    for q in deads:
        outputs[q] = -1
    # Terminal states are absorbing: once the verdict is out nothing changes.
    for q in finals | set(deads):
        transitions[q, :] = q

    machine = MooreMachine(alphabet, transitions, outputs, initial=0)
    return minimize(machine) if minimized else machine


def _reachable(machine: MooreMachine) -> list[int]:
    seen = [machine.initial]
    seen_set = {machine.initial}
    frontier = deque(seen)
    while frontier:
        q = frontier.popleft()
        for a in range(len(machine.alphabet)):
            t = int(machine.transitions[q, a])
            if t not in seen_set:
                seen_set.add(t)
                seen.append(t)
                frontier.append(t)
    return seen


def minimize(machine: MooreMachine) -> MooreMachine:
    """Hopcroft partition refinement, initial partition by output value.

    Unreachable states are dropped first. The quotient machine is renumbered
    by breadth-first order from the initial state in symbol order, which makes
    the result canonical: two machines with the same trace behavior minimize
    to byte-identical serializations.
    """
    reachable = _reachable(machine)
    remap = {old: new for new, old in enumerate(reachable)}
    n = len(reachable)
    n_symbols = len(machine.alphabet)
    trans = np.array(
        [[remap[int(machine.transitions[old, a])] for a in range(n_symbols)]
         for old in reachable],
        dtype=np.uint32,
    )
    outs = np.array([machine.outputs[old] for old in reachable], dtype=np.int8)
    initial = remap[machine.initial]

    by_output: dict[int, set[int]] = {}
    for q in range(n):
        by_output.setdefault(int(outs[q]), set()).add(q)
    partition: list[set[int]] = [set(b) for b in by_output.values()]
    block_of = [0] * n
    for bi, block in enumerate(partition):
        for q in block:
            block_of[q] = bi

    predecessors: list[list[list[int]]] = [
        [[] for _ in range(n)] for _ in range(n_symbols)
    ]
    for q in range(n):
        for a in range(n_symbols):
            predecessors[a][int(trans[q, a])].append(q)

    work = deque((bi, a) for bi in range(len(partition)) for a in range(n_symbols))
    while work:
        bi, a = work.popleft()
        splitter = partition[bi]
        hits: dict[int, set[int]] = {}
        for target in splitter:
            for q in predecessors[a][target]:
                hits.setdefault(block_of[q], set()).add(q)
        for ci, hit in hits.items():
            block = partition[ci]
            if len(hit) == len(block):
                continue
            rest = block - hit
            # keep the larger half in place, spin off the smaller;
            # queueing only the small half keeps it O(n log n)
            small, large = (hit, rest) if len(hit) <= len(rest) else (rest, hit)
            partition[ci] = large
            ni = len(partition)
            partition.append(small)
            for q in small:
                block_of[q] = ni
            for s in range(n_symbols):
                work.append((ni, s))

    representative = [min(block) for block in partition]
    # canonical numbering: BFS from the initial block in symbol order
    bfs_order = [block_of[initial]]
    placed = {block_of[initial]}
    frontier = deque(bfs_order)
    while frontier:
        bi = frontier.popleft()
        rep = representative[bi]
        for a in range(n_symbols):
            tb = block_of[int(trans[rep, a])]
            if tb not in placed:
                placed.add(tb)
                bfs_order.append(tb)
                frontier.append(tb)
    new_id = {bi: i for i, bi in enumerate(bfs_order)}

    m = len(bfs_order)
    new_trans = np.zeros((m, n_symbols), dtype=np.uint32)
    new_outs = np.zeros(m, dtype=np.int8)
    for bi in bfs_order:
        i = new_id[bi]
        rep = representative[bi]
        new_outs[i] = outs[rep]
        for a in range(n_symbols):
            new_trans[i, a] = new_id[block_of[int(trans[rep, a])]]
    return MooreMachine(machine.alphabet, new_trans, new_outs, initial=0)


def run(machine: MooreMachine, trace: Iterable[Symbol | str | int]) -> TraceRun:
    return machine.run(trace)


def reward(machine: MooreMachine, trace: Iterable[Symbol | str | int]) -> int:
    return machine.reward(trace)


# ---------------------------------------------------------------------------
# Serialization

def serialize(machine: MooreMachine) -> bytes:
    out = bytearray()
    out += MACHINE_MAGIC
    out += struct.pack("<H", MACHINE_VERSION)
    out += struct.pack("<H", len(machine.alphabet))
    for name in machine.alphabet.names:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw))
        out += raw
    out += struct.pack("<I", machine.n_states)
    out += struct.pack("<I", machine.initial)
    out += machine.transitions.astype("<u4").tobytes(order="C")
    out += machine.outputs.astype("<i1").tobytes()
    return bytes(out)


def deserialize(data: bytes) -> MooreMachine:
    view = memoryview(data)
    offset = 0

    def take(count: int, what: str) -> memoryview:
        nonlocal offset
        if offset + count > len(view):
            raise MachineFormatError(f"truncated file while reading {what}", offset)
        chunk = view[offset:offset + count]
        offset += count
        return chunk

    if bytes(take(4, "magic")) != MACHINE_MAGIC:
        raise MachineFormatError("bad magic, not a machine file", 0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != MACHINE_VERSION:
        raise MachineFormatError(f"unsupported version {version}", offset - 2)
    (n_symbols,) = struct.unpack("<H", take(2, "alphabet size"))
    names = []
    for _ in range(n_symbols):
        (length,) = struct.unpack("<H", take(2, "symbol name length"))
        names.append(bytes(take(length, "symbol name")).decode("utf-8"))
    try:
        alphabet = Alphabet(names)
    except ValueError as exc:
        raise MachineFormatError(str(exc), offset) from exc
    if len(alphabet) != n_symbols:
        raise MachineFormatError("alphabet is missing the empty symbol", offset)
    (n_states,) = struct.unpack("<I", take(4, "state count"))
    (initial,) = struct.unpack("<I", take(4, "initial state"))
    if n_states == 0:
        raise MachineFormatError("machine has no states", offset - 8)
    trans_bytes = take(4 * n_states * n_symbols, "transition table")
    transitions = np.frombuffer(trans_bytes, dtype="<u4").reshape(
        n_states, n_symbols
    )
    out_bytes = take(n_states, "output vector")
    outputs = np.frombuffer(out_bytes, dtype="<i1").copy()
    if offset != len(view):
        raise MachineFormatError("trailing bytes after machine data", offset)
    try:
        return MooreMachine(alphabet, transitions.copy(), outputs, int(initial))
    except ValueError as exc:
        raise MachineFormatError(str(exc), offset) from exc


def to_dot(machine: MooreMachine) -> str:
    """DOT digraph; one node per state labeled with its output, one edge per
    (state, symbol) pair."""
    lines = ["digraph reward_machine {", "  rankdir=LR;"]
    for q in range(machine.n_states):
        out = machine.output(q)
        label = f"q{q} / {out:+d}" if out else f"q{q} / 0"
        shape = "doublecircle" if out > 0 else ("box" if out < 0 else "circle")
        marker = ", penwidth=2" if q == machine.initial else ""
        lines.append(f'  q{q} [label="{label}", shape={shape}{marker}];')
    for q in range(machine.n_states):
        for symbol in machine.alphabet:
            target = machine.step(q, symbol)
            lines.append(f'  q{q} -> q{target} [label="{symbol.name}"];')
    lines.append("}")
    return "\n".join(lines)
