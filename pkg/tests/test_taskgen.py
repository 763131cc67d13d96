"""Task grammar sampling, spot verification, and dataset persistence."""

import numpy as np
import pytest

from symground.automata import CompileError, compile_formula, serialize
from symground.ltl import Alphabet, And, Atom, Not, Or, TRUE, Until, parse
from symground.taskgen import (
    DatasetVerificationError,
    GLOBAL_AVOIDANCE,
    PARTIALLY_ORDERED,
    TASK_CLASSES,
    TaskConfig,
    TaskGenError,
    build_dataset,
    deeper_chains,
    flatworld_po,
    load_dataset,
    minecraft_ga,
    minecraft_po,
    more_chains,
    sample_ga,
    sample_po,
    sample_task,
    save_dataset,
    spot_check,
)

ABCD = Alphabet(("a", "b", "c", "d"))


def _po_config(**kw):
    base = dict(task_class=PARTIALLY_ORDERED, alphabet=ABCD,
                min_sequences=1, max_sequences=3,
                min_length=1, max_length=4)
    base.update(kw)
    return TaskConfig(**base)


def _ga_config(**kw):
    base = dict(task_class=GLOBAL_AVOIDANCE, alphabet=ABCD,
                min_sequences=1, max_sequences=2,
                min_length=1, max_length=3)
    base.update(kw)
    return TaskConfig(**base)


def _split_chains(f):
    """The sampled conjunction of chains, as a list of chain roots."""
    return list(f.children) if isinstance(f, And) else [f]


def _split_link(body):
    """An inner link is And(term, rest-of-chain) with canonically sorted
    children; the term is the non-Until child."""
    assert isinstance(body, And) and len(body.children) == 2
    first, second = body.children
    if isinstance(first, Until):
        return second, first
    assert isinstance(second, Until)
    return first, second


def _walk_po_chain(chain):
    """Yield the term of every link of a right-nested reach chain."""
    while True:
        assert isinstance(chain, Until) and chain.left == TRUE
        body = chain.right
        if isinstance(body, And):
            term, chain = _split_link(body)
            yield term
        else:
            yield body
            return


def _walk_ga_chain(chain, guard):
    while True:
        assert isinstance(chain, Until) and chain.left == guard
        body = chain.right
        if isinstance(body, And):
            term, chain = _split_link(body)
            yield term
        else:
            yield body
            return


class TestConfig:
    def test_validation(self):
        with pytest.raises(TaskGenError):
            TaskConfig(task_class="mystery", alphabet=ABCD)
        with pytest.raises(TaskGenError):
            _po_config(min_sequences=3, max_sequences=2)
        with pytest.raises(TaskGenError):
            _po_config(min_length=0)
        with pytest.raises(TaskGenError):
            _po_config(disjunction_prob=1.5)
        with pytest.raises(TaskGenError):
            _ga_config(alphabet=Alphabet(("a",)))

    def test_kv_roundtrip(self):
        cfg = _po_config(disjunction_prob=0.5)
        again = TaskConfig.from_kv(cfg.to_kv())
        assert again == cfg

    def test_classes(self):
        assert set(TASK_CLASSES) == {PARTIALLY_ORDERED, GLOBAL_AVOIDANCE}


class TestPartiallyOrdered:
    def test_shape(self):
        rng = np.random.default_rng(41)
        cfg = _po_config()
        for _ in range(50):
            f = sample_po(cfg, rng)
            chains = _split_chains(f)
            assert cfg.min_sequences <= len(chains) <= cfg.max_sequences
            for chain in chains:
                terms = list(_walk_po_chain(chain))
                assert cfg.min_length <= len(terms) <= cfg.max_length
                for term in terms:
                    if isinstance(term, Or):
                        a, b = term.children
                        assert isinstance(a, Atom) and isinstance(b, Atom)
                        assert a != b
                    else:
                        assert isinstance(term, Atom)
                    for atom in (term.children if isinstance(term, Or)
                                 else (term,)):
                        assert atom.name in ABCD.names[:-1]

    def test_no_disjunctions_when_disabled(self):
        rng = np.random.default_rng(2)
        cfg = _po_config(disjunction_prob=0.0, min_length=3, max_length=3)
        for _ in range(30):
            for chain in _split_chains(sample_po(cfg, rng)):
                assert all(isinstance(t, Atom) for t in _walk_po_chain(chain))

    def test_disjunction_frequency(self):
        rng = np.random.default_rng(7)
        cfg = _po_config(min_sequences=1, max_sequences=1,
                         min_length=4, max_length=4)
        stats = {}
        for _ in range(2500):
            sample_po(cfg, rng, stats)
        assert stats["terms"] == 10000
        rate = stats["disjunctions"] / stats["terms"]
        assert abs(rate - cfg.disjunction_prob) < 0.02

    def test_deterministic(self):
        cfg = _po_config()
        a = [str(sample_po(cfg, np.random.default_rng(99))) for _ in range(5)]
        b = [str(sample_po(cfg, np.random.default_rng(99))) for _ in range(5)]
        assert a == b


class TestGlobalAvoidance:
    def test_single_hazard_guards_every_link(self):
        rng = np.random.default_rng(13)
        cfg = _ga_config()
        for _ in range(50):
            f = sample_ga(cfg, rng)
            chains = _split_chains(f)
            guards = set()
            for chain in chains:
                assert isinstance(chain, Until)
                guards.add(chain.left)
            assert len(guards) == 1
            guard = guards.pop()
            assert isinstance(guard, Not) and isinstance(guard.child, Atom)
            hazard = guard.child.name
            for chain in chains:
                for term in _walk_ga_chain(chain, guard):
                    names = ([c.name for c in term.children]
                             if isinstance(term, Or) else [term.name])
                    assert hazard not in names

    def test_dispatch(self):
        rng = np.random.default_rng(3)
        f = sample_task(_ga_config(), rng)
        assert isinstance(f, (Until, And))
        g = sample_task(_po_config(), rng)
        chains = _split_chains(g)
        assert all(isinstance(c, Until) and c.left == TRUE for c in chains)


class TestSpotCheck:
    def test_accepts_correct_machine(self):
        f = parse("!b U (a & (!b U c))")
        m = compile_formula(f, ABCD)
        spot_check(f, m, np.random.default_rng(0))

    def test_rejects_wrong_machine(self):
        f = parse("!b U (a & (!b U c))")
        wrong = compile_formula(parse("F a"), ABCD)
        with pytest.raises(DatasetVerificationError) as err:
            spot_check(f, wrong, np.random.default_rng(0), n_traces=64)
        assert err.value.trace is not None


class TestDataset:
    def test_build(self):
        rng = np.random.default_rng(21)
        ds = build_dataset(_po_config(), 8, rng)
        assert len(ds) == 8
        for entry in ds:
            assert str(entry.formula) == entry.text
            assert entry.machine.alphabet.names == ABCD.names
            assert entry.machine.n_states >= 2
        assert ds[0].text == ds.entries[0].text

    def test_state_cap_propagates(self):
        rng = np.random.default_rng(2)
        cfg = _po_config(min_sequences=3, max_sequences=3,
                         min_length=3, max_length=3)
        with pytest.raises(CompileError, match="while compiling sampled task"):
            build_dataset(cfg, 4, rng, state_cap=4)

    def test_deterministic(self):
        a = build_dataset(_po_config(), 5, np.random.default_rng(77))
        b = build_dataset(_po_config(), 5, np.random.default_rng(77))
        assert [e.text for e in a] == [e.text for e in b]

    def test_save_load_roundtrip(self, tmp_path):
        ds = build_dataset(_ga_config(), 6, np.random.default_rng(5))
        manifest = tmp_path / "tasks.tsv"
        save_dataset(ds, str(manifest))
        assert manifest.exists()
        assert (tmp_path / "tasks_machines").is_dir()
        assert (tmp_path / "tasks.tsv.config").exists()
        again = load_dataset(str(manifest))
        assert again.config == ds.config
        assert [e.text for e in again] == [e.text for e in ds]
        for x, y in zip(again, ds):
            assert serialize(x.machine) == serialize(y.machine)

    def test_load_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(str(tmp_path / "nope.tsv"))


class TestProfiles:
    def test_minecraft(self):
        po = minecraft_po()
        assert po.task_class == PARTIALLY_ORDERED
        assert po.alphabet.names[-1] == "_empty"
        assert po.max_sequences == 4 and po.max_length == 5
        ga = minecraft_ga()
        assert ga.task_class == GLOBAL_AVOIDANCE
        assert ga.alphabet == po.alphabet

    def test_flatworld(self):
        fw = flatworld_po()
        assert fw.task_class == PARTIALLY_ORDERED
        assert "red" in fw.alphabet.names

    def test_generalization_variants(self):
        po = minecraft_po()
        deep = deeper_chains(po, length=15)
        assert deep.min_length == deep.max_length == 15
        assert deep.max_sequences == po.max_sequences
        wide = more_chains(po, sequences=12)
        assert wide.min_sequences == wide.max_sequences == 12
        assert wide.max_length == po.max_length
