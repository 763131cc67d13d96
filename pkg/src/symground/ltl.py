"""Co-safe linear temporal logic over finite, mutually-exclusive symbol alphabets.

Formulae are immutable trees with structural equality. Exactly one symbol is
observed per time step, so progression rewrites atoms directly against the
observed symbol. ``canonicalize`` produces the normal form every other module
operates on; two canonical trees are equal iff they are the same formula.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Iterator

EMPTY_SYMBOL = "_empty"

_IDENT_RE = re.compile(r"[a-z][a-z0-9_]*")


class LtlError(ValueError):
    pass


class LtlSyntaxError(LtlError):
    """Raised on malformed formula text; carries the offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownSymbolError(LtlError):
    """Raised when a formula mentions an atom missing from the alphabet."""

    def __init__(self, name: str, position: int | None = None):
        where = "" if position is None else f" (at position {position})"
        super().__init__(f"unknown symbol {name!r}{where}")
        self.name = name
        self.position = position


@dataclass(frozen=True)
class Symbol:
    """A proposition: machine-local numeric id plus identifier text."""

    id: int
    name: str

    def __str__(self) -> str:
        return self.name


class Alphabet:
    """Ordered symbol set. The reserved empty symbol is always a member.

    The empty symbol is what the labeling function emits when no proposition
    holds; it is appended last unless the caller already placed it.
    """

    def __init__(self, names: Iterable[str]):
        listed = list(names)
        if EMPTY_SYMBOL not in listed:
            listed.append(EMPTY_SYMBOL)
        seen = set()
        for name in listed:
            if name != EMPTY_SYMBOL and not _IDENT_RE.fullmatch(name):
                raise LtlError(f"invalid symbol name {name!r}")
            if name in seen:
                raise LtlError(f"duplicate symbol name {name!r}")
            seen.add(name)
        self.symbols: tuple[Symbol, ...] = tuple(
            Symbol(i, name) for i, name in enumerate(listed)
        )
        self._by_name = {s.name: s for s in self.symbols}

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.symbols)

    @property
    def empty(self) -> Symbol:
        return self._by_name[EMPTY_SYMBOL]

    @property
    def non_empty(self) -> tuple[Symbol, ...]:
        return tuple(s for s in self.symbols if s.name != EMPTY_SYMBOL)

    def symbol(self, name: str) -> Symbol:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownSymbolError(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __len__(self) -> int:
        return len(self.symbols)

    def __iter__(self) -> Iterator[Symbol]:
        return iter(self.symbols)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Alphabet) and self.names == other.names

    def __hash__(self) -> int:
        return hash(self.names)

    def __repr__(self) -> str:
        return f"Alphabet({list(self.names)!r})"


# ---------------------------------------------------------------------------
# Formula trees


class Formula:
    """Base class; subclasses are frozen dataclasses, safe to hash and share."""

    __slots__ = ()


@dataclass(frozen=True)
class TrueFormula(Formula):
    def __str__(self) -> str:
        return "true"


@dataclass(frozen=True)
class FalseFormula(Formula):
    def __str__(self) -> str:
        return "false"


TRUE = TrueFormula()
FALSE = FalseFormula()


@dataclass(frozen=True)
class Atom(Formula):
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Not(Formula):
    child: Formula

    def __str__(self) -> str:
        return f"!{self.child}"


@dataclass(frozen=True)
class And(Formula):
    children: tuple[Formula, ...]

    def __str__(self) -> str:
        return "(" + " & ".join(str(c) for c in self.children) + ")"


@dataclass(frozen=True)
class Or(Formula):
    children: tuple[Formula, ...]

    def __str__(self) -> str:
        return "(" + " | ".join(str(c) for c in self.children) + ")"


@dataclass(frozen=True)
class Next(Formula):
    child: Formula

    def __str__(self) -> str:
        return f"X {self.child}"


@dataclass(frozen=True)
class Until(Formula):
    left: Formula
    right: Formula

    def __str__(self) -> str:
        return f"({self.left} U {self.right})"


@dataclass(frozen=True)
class Eventually(Formula):
    child: Formula

    def __str__(self) -> str:
        return f"F {self.child}"


@dataclass(frozen=True)
class Globally(Formula):
    child: Formula

    def __str__(self) -> str:
        return f"G {self.child}"


def format_formula(f: Formula) -> str:
    """Render a formula in the concrete grammar. parse(format_formula(f)) == f
    for canonical f."""
    return str(f)


def atoms_of(f: Formula) -> set[str]:
    """Names of all atoms occurring in the formula."""
    out: set[str] = set()
    stack = [f]
    while stack:
        node = stack.pop()
        if isinstance(node, Atom):
            out.add(node.name)
        elif isinstance(node, (Not, Next, Eventually, Globally)):
            stack.append(node.child)
        elif isinstance(node, (And, Or)):
            stack.extend(node.children)
        elif isinstance(node, Until):
            stack.append(node.left)
            stack.append(node.right)
    return out


# ---------------------------------------------------------------------------
# Canonicalization

_RANK = {
    TrueFormula: 0,
    FalseFormula: 1,
    Atom: 2,
    Not: 3,
    Next: 4,
    Eventually: 5,
    Globally: 6,
    Until: 7,
    And: 8,
    Or: 9,
}

def _sort_key(f: Formula) -> tuple:
    rank = _RANK[type(f)]
    if isinstance(f, (TrueFormula, FalseFormula)):
        return (rank,)
    if isinstance(f, Atom):
        return (rank, f.name)
    if isinstance(f, (Not, Next, Eventually, Globally)):
        return (rank, _sort_key(f.child))
    if isinstance(f, Until):
        return (rank, _sort_key(f.left), _sort_key(f.right))
    assert isinstance(f, (And, Or))
    return (rank, tuple(_sort_key(c) for c in f.children))


def _absorb(children: list[Formula], wrapper: type) -> list[Formula]:
    # x | (x & y) -> x  (and the dual): drop a wrapped child whose child set
    # strictly contains another child (or another wrapped child's set).
    keep: list[Formula] = []
    sets = [
        frozenset(c.children) if isinstance(c, wrapper) else frozenset((c,))
        for c in children
    ]
    for i, c in enumerate(children):
        absorbed = any(j != i and sets[j] < sets[i] for j in range(len(children)))
        if not absorbed:
            keep.append(c)
    return keep


def _canon_nary(cls: type, children: Iterable[Formula], absorber: type,
                unit: Formula, zero: Formula) -> Formula:
    flat: list[Formula] = []
    for c in children:
        c = canonicalize(c)
        if c == zero:
            return zero
        if c == unit:
            continue
        if isinstance(c, cls):
            flat.extend(c.children)
        else:
            flat.append(c)
    unique = list(dict.fromkeys(flat))
    unique = _absorb(unique, absorber)
    unique.sort(key=_sort_key)
    if not unique:
        return unit
    if len(unique) == 1:
        return unique[0]
    return cls(tuple(unique))


def canonicalize(f: Formula) -> Formula:
    """Rewrite into the package-wide normal form.

    Applies constant propagation, double-negation elimination,
    flatten/sort/dedup and absorption for And/Or, and desugars F into
    Until(true, .). Idempotent; preserves the judged verdict of every trace.
    """
    if isinstance(f, (TrueFormula, FalseFormula, Atom)):
        return f
    if isinstance(f, Not):
        c = canonicalize(f.child)
        if c == TRUE:
            return FALSE
        if c == FALSE:
            return TRUE
        if isinstance(c, Not):
            return c.child
        return Not(c)
    if isinstance(f, And):
        return _canon_nary(And, f.children, Or, TRUE, FALSE)
    if isinstance(f, Or):
        return _canon_nary(Or, f.children, And, FALSE, TRUE)
    if isinstance(f, Next):
        c = canonicalize(f.child)
        if isinstance(c, (TrueFormula, FalseFormula)):
            return c
        return Next(c)
    if isinstance(f, Until):
        right = canonicalize(f.right)
        if isinstance(right, (TrueFormula, FalseFormula)):
            return right
        left = canonicalize(f.left)
        if left == FALSE:
            return right
        return Until(left, right)
    if isinstance(f, Eventually):
        return canonicalize(Until(TRUE, f.child))
    if isinstance(f, Globally):
        c = canonicalize(f.child)
        if isinstance(c, (TrueFormula, FalseFormula)):
            return c
        return Globally(c)
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# Co-safe fragment gate


def _nnf(f: Formula) -> Formula:
    if isinstance(f, (TrueFormula, FalseFormula, Atom)):
        return f
    if isinstance(f, Not):
        c = f.child
        if isinstance(c, TrueFormula):
            return FALSE
        if isinstance(c, FalseFormula):
            return TRUE
        if isinstance(c, Atom):
            return f
        if isinstance(c, Not):
            return _nnf(c.child)
        if isinstance(c, And):
            return Or(tuple(_nnf(Not(x)) for x in c.children))
        if isinstance(c, Or):
            return And(tuple(_nnf(Not(x)) for x in c.children))
        if isinstance(c, Next):
            return Next(_nnf(Not(c.child)))
        if isinstance(c, Eventually):
            return Globally(_nnf(Not(c.child)))
        if isinstance(c, Globally):
            return Eventually(_nnf(Not(c.child)))
        # No Release operator in the grammar, so a negated Until is stuck.
        return f
    if isinstance(f, (And, Or)):
        return type(f)(tuple(_nnf(c) for c in f.children))
    if isinstance(f, (Next, Eventually, Globally)):
        return type(f)(_nnf(f.child))
    if isinstance(f, Until):
        return Until(_nnf(f.left), _nnf(f.right))
    raise TypeError(f"not a formula: {f!r}")


def is_syntactically_cosafe(f: Formula) -> bool:
    """True iff, in negation normal form, negation applies only to atoms and
    the only temporal operators are Next, Until, Eventually."""
    stack = [_nnf(f)]
    while stack:
        node = stack.pop()
        if isinstance(node, Globally):
            return False
        if isinstance(node, Not):
            if not isinstance(node.child, Atom):
                return False
        elif isinstance(node, (Next, Eventually)):
            stack.append(node.child)
        elif isinstance(node, (And, Or)):
            stack.extend(node.children)
        elif isinstance(node, Until):
            stack.append(node.left)
            stack.append(node.right)
    return True


# ---------------------------------------------------------------------------
# Progression


def _prog(f: Formula, name: str) -> Formula:
    if isinstance(f, (TrueFormula, FalseFormula)):
        return f
    if isinstance(f, Atom):
        return TRUE if f.name == name else FALSE
    if isinstance(f, Not):
        return Not(_prog(f.child, name))
    if isinstance(f, And):
        return And(tuple(_prog(c, name) for c in f.children))
    if isinstance(f, Or):
        return Or(tuple(_prog(c, name) for c in f.children))
    if isinstance(f, Next):
        return f.child
    if isinstance(f, Until):
        return Or((_prog(f.right, name), And((_prog(f.left, name), f))))
    if isinstance(f, Eventually):
        return Or((_prog(f.child, name), f))
    if isinstance(f, Globally):
        raise LtlError("cannot progress a Globally formula (not co-safe)")
    raise TypeError(f"not a formula: {f!r}")


def progress(f: Formula, sigma: Symbol | str) -> Formula:
    """Advance a canonical formula by one observed symbol.

    Atoms rewrite to true iff they equal the observation (exactly one symbol
    holds per step); Not/And/Or are homomorphic; Next strips to its body;
    Until unfolds one step. The result is canonicalized.
    """
    name = sigma.name if isinstance(sigma, Symbol) else sigma
    return canonicalize(_prog(f, name))


def verdict(f: Formula) -> int:
    """Three-valued status of the remaining obligation: +1 satisfied,
    -1 violated, 0 undetermined."""
    if f == TRUE:
        return 1
    if f == FALSE:
        return -1
    return 0


# ---------------------------------------------------------------------------
# Parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<lparen>\()|(?P<rparen>\))|(?P<not>!)|(?P<and>&)|(?P<or>\|)"
    r"|(?P<op>[XFGU])|(?P<ident>[a-z][a-z0-9_]*))"
)


class _Parser:
    def __init__(self, text: str, alphabet: Alphabet | None):
        self.text = text
        self.alphabet = alphabet
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if m is None or m.end() == pos:
                stripped = text[pos:].lstrip()
                if not stripped:
                    break
                bad_at = len(text) - len(stripped)
                raise LtlSyntaxError(f"unexpected character {text[bad_at]!r}", bad_at)
            kind = m.lastgroup
            value = m.group(kind)
            start = m.start(kind)
            if kind == "op":
                kind = value
            elif kind == "ident" and value in ("true", "false"):
                kind = value
            self.tokens.append((kind, value, start))
            pos = m.end()
        self.i = 0

    def peek(self) -> str | None:
        return self.tokens[self.i][0] if self.i < len(self.tokens) else None

    def next(self) -> tuple[str, str, int]:
        if self.i >= len(self.tokens):
            raise LtlSyntaxError("unexpected end of input", len(self.text))
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def parse_or(self) -> Formula:
        parts = [self.parse_and()]
        while self.peek() == "or":
            self.next()
            parts.append(self.parse_and())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def parse_and(self) -> Formula:
        parts = [self.parse_until()]
        while self.peek() == "and":
            self.next()
            parts.append(self.parse_until())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def parse_until(self) -> Formula:
        left = self.parse_unary()
        if self.peek() == "U":
            self.next()
            return Until(left, self.parse_until())  # right-associative
        return left

    def parse_unary(self) -> Formula:
        kind = self.peek()
        if kind == "not":
            self.next()
            return Not(self.parse_unary())
        if kind in ("X", "F", "G"):
            self.next()
            wrap = {"X": Next, "F": Eventually, "G": Globally}[kind]
            return wrap(self.parse_unary())
        return self.parse_primary()

    def parse_primary(self) -> Formula:
        kind, value, pos = self.next()
        if kind == "true":
            return TRUE
        if kind == "false":
            return FALSE
        if kind == "ident":
            if self.alphabet is not None and value not in self.alphabet:
                raise UnknownSymbolError(value, pos)
            return Atom(value)
        if kind == "lparen":
            inner = self.parse_or()
            k, _, p = self.next()
            if k != "rparen":
                raise LtlSyntaxError("expected ')'", p)
            return inner
        raise LtlSyntaxError(f"unexpected token {value!r}", pos)


def parse(text: str, alphabet: Alphabet | None = None) -> Formula:
    """Parse formula text, validating atoms against the alphabet when given.
    Returns the canonicalized tree."""
    parser = _Parser(text, alphabet)
    tree = parser.parse_or()
    if parser.i != len(parser.tokens):
        _, value, pos = parser.tokens[parser.i]
        raise LtlSyntaxError(f"trailing input {value!r}", pos)
    return canonicalize(tree)
