"""Tabular control over product states: updates, persistence, convergence."""

import math

import numpy as np
import pytest

from symground.agent import (
    EPSILON_FINAL,
    EPSILON_START,
    EvalRow,
    JointConfig,
    QTable,
    collect_episode,
    epsilon_at,
    evaluate,
    load_qtable,
    q_update,
    save_qtable,
    train_joint,
    write_metrics_csv,
)
from symground.automata import compile_formula
from symground.envs import Bootcamp, GridWorld, ORACLE_MODE, ProductEnv, gridworld_alphabet
from symground.ltl import Alphabet, parse
from symground.taskgen import PARTIALLY_ORDERED, TaskConfig, TaskEntry, TaskDataset, build_dataset

from .oracles import policy_value, value_iteration


def _key(tag, q=0):
    return (tag.encode(), "h", q)


class TestEpsilonSchedule:
    def test_endpoints(self):
        assert epsilon_at(0, 100) == EPSILON_START
        assert epsilon_at(50, 100) == EPSILON_FINAL
        assert epsilon_at(99, 100) == EPSILON_FINAL

    def test_linear_in_first_half(self):
        assert math.isclose(epsilon_at(25, 100), (EPSILON_START + EPSILON_FINAL) / 2)
        eps = [epsilon_at(i, 100) for i in range(51)]
        assert all(a > b for a, b in zip(eps[:50], eps[1:50 + 1]))

    def test_tiny_budget(self):
        assert epsilon_at(0, 1) == EPSILON_START
        assert epsilon_at(1, 1) == EPSILON_FINAL


class TestQTable:
    def test_unseen_reads_zero_without_insertion(self):
        t = QTable(3)
        assert np.array_equal(t.values_of(_key("s")), np.zeros(3))
        assert len(t) == 0
        assert _key("s") not in t

    def test_update_with_full_alpha_overwrites(self):
        t = QTable(2, alpha=1.0, gamma=0.9)
        new = t.update(_key("s"), 0, 5.0, None, terminal=True)
        assert new == 5.0
        assert t.values_of(_key("s"))[0] == 5.0
        assert len(t) == 1

    def test_bootstrap_uses_next_max(self):
        t = QTable(2, alpha=1.0, gamma=0.5)
        t.update(_key("n"), 1, 8.0, None, terminal=True)
        t.update(_key("s"), 0, 1.0, _key("n"), terminal=False)
        assert t.values_of(_key("s"))[0] == 1.0 + 0.5 * 8.0

    def test_terminal_ignores_next(self):
        t = QTable(2, alpha=1.0, gamma=0.5)
        t.update(_key("n"), 0, 100.0, None, terminal=True)
        t.update(_key("s"), 0, 1.0, _key("n"), terminal=True)
        assert t.values_of(_key("s"))[0] == 1.0

    def test_partial_alpha_mixes(self):
        t = QTable(1, alpha=0.25, gamma=0.0)
        t.update(_key("s"), 0, 4.0, None, True)
        t.update(_key("s"), 0, 8.0, None, True)
        assert math.isclose(t.values_of(_key("s"))[0], 0.25 * 8 + 0.75 * 1.0)

    def test_greedy_tie_break_is_seeded(self):
        t = QTable(4)
        picks = {t.greedy_action(_key("s"), np.random.default_rng(7))
                 for _ in range(1)}
        again = {t.greedy_action(_key("s"), np.random.default_rng(7))
                 for _ in range(1)}
        assert picks == again
        spread = {t.greedy_action(_key("s"), np.random.default_rng(i))
                  for i in range(40)}
        assert spread == {0, 1, 2, 3}

    def test_greedy_prefers_max(self):
        t = QTable(3)
        t.update(_key("s"), 2, 1.0, None, True)
        rng = np.random.default_rng(0)
        assert all(t.greedy_action(_key("s"), rng) == 2 for _ in range(10))

    def test_epsilon_greedy_limits(self):
        t = QTable(3)
        t.update(_key("s"), 1, 1.0, None, True)
        rng = np.random.default_rng(5)
        greedy = [t.epsilon_greedy(_key("s"), rng, 0.0) for _ in range(20)]
        assert set(greedy) == {1}
        explore = [t.epsilon_greedy(_key("s"), rng, 1.0) for _ in range(200)]
        assert set(explore) == {0, 1, 2}

    def test_validation(self):
        with pytest.raises(ValueError):
            QTable(0)
        with pytest.raises(ValueError):
            QTable(2, alpha=0.0)
        with pytest.raises(ValueError):
            QTable(2, gamma=1.0)

    def test_q_update_wrapper(self):
        t = QTable(2, alpha=1.0, gamma=0.5)
        assert q_update(t, _key("s"), 0, 3.0, None, True) == 3.0


class TestPersistence:
    def test_roundtrip_preserves_order_and_values(self):
        t = QTable(3, alpha=0.5, gamma=0.9)
        keys = [(b"obs1", "aa", 0), (b"", "bb", 2), (b"\x00\xff", "aa", 1)]
        for i, k in enumerate(keys):
            t.update(k, i % 3, float(i + 1), None, True)
        data = save_qtable(t)
        again = load_qtable(data)
        assert list(again.keys()) == keys
        assert (again.n_actions, again.alpha, again.gamma) == (3, 0.5, 0.9)
        for k in keys:
            assert np.array_equal(again.values_of(k), t.values_of(k))
        assert save_qtable(again) == data

    def test_bad_magic(self):
        data = save_qtable(QTable(2))
        with pytest.raises(ValueError):
            load_qtable(b"QQQQ" + data[4:])

    def test_trailing_bytes(self):
        data = save_qtable(QTable(2))
        with pytest.raises(ValueError):
            load_qtable(data + b"\x00")


def _bootcamp_entry(text, names=("a", "b")):
    ab = Alphabet(names)
    f = parse(text)
    m = compile_formula(f, ab)
    return ab, Bootcamp(ab), TaskEntry(str(f), m)


class TestCollectEpisode:
    def test_episode_array_conventions(self):
        ab, base, entry = _bootcamp_entry("F a")
        penv = ProductEnv(base, entry.formula, entry.machine, timeout=10)
        actions = iter([ab.symbol("b").id, ab.symbol("a").id])
        rollout = collect_episode(penv, entry, np.random.default_rng(0),
                                  lambda key: next(actions))
        ep = rollout.episode
        # slot 0 is the unused placeholder row; rewards start with the
        # initial machine output
        assert ep.observations.shape[0] == len(ep.rewards) == 4
        assert np.array_equal(ep.observations[0], np.zeros(ep.observations.shape[1]))
        assert list(ep.rewards) == [0, 0, 0, 1]
        assert rollout.total_return == 1.0
        assert math.isclose(rollout.discounted_return, 0.94 ** 2)
        assert rollout.steps == 2
        assert not rollout.timed_out

    def test_timeout_flag(self):
        ab, base, entry = _bootcamp_entry("F a")
        penv = ProductEnv(base, entry.formula, entry.machine, timeout=3)
        rollout = collect_episode(penv, entry, np.random.default_rng(0),
                                  lambda key: ab.symbol("b").id)
        assert rollout.timed_out
        assert rollout.total_return == 0.0
        # placeholder row + reset consumption + 3 steps
        assert list(rollout.episode.rewards) == [0, 0, 0, 0, 0]

    def test_learning_updates_table(self):
        ab, base, entry = _bootcamp_entry("F a")
        penv = ProductEnv(base, entry.formula, entry.machine, timeout=10)
        table = QTable(base.n_actions, alpha=1.0, gamma=0.94)
        a_id = ab.symbol("a").id
        for _ in range(3):
            penv2 = ProductEnv(base, entry.formula, entry.machine, timeout=10)
            collect_episode(penv2, entry, np.random.default_rng(1),
                            lambda key: a_id, table=table, learn=True)
        assert len(table) >= 1
        key = next(iter(table.keys()))
        assert table.values_of(key)[a_id] == 1.0


def _grid_dataset(texts, ab):
    cfg = TaskConfig(task_class=PARTIALLY_ORDERED, alphabet=ab,
                     min_sequences=1, max_sequences=1,
                     min_length=1, max_length=1)
    entries = [TaskEntry(str(parse(t)), compile_formula(parse(t), ab))
               for t in texts]
    return TaskDataset(cfg, entries)


class TestJointTraining:
    def test_oracle_mode_learns_short_chain(self):
        # two-symbol bootcamp: press a, then the chain is done; optimal
        # discounted return from reset is gamma^0 after one step
        ab, base, entry = _bootcamp_entry("F a")
        ds = TaskDataset(
            TaskConfig(task_class=PARTIALLY_ORDERED, alphabet=ab,
                       min_sequences=1, max_sequences=1,
                       min_length=1, max_length=1),
            [entry],
        )
        cfg = JointConfig(episodes=300, mode=ORACLE_MODE, timeout=8,
                          grounder_every=10_000)
        result = train_joint(base, ds, cfg, np.random.default_rng(3))
        rows = evaluate(result.table, base, ds, "base", episodes=20,
                        seeds=[11, 12], mode=ORACLE_MODE, timeout=8)
        assert len(rows) == 2
        for row in rows:
            assert row.total_return == 1.0
            assert math.isclose(row.discounted_return, 0.94)

    def test_trivially_true_task_scores_one(self):
        ab, base, entry = _bootcamp_entry("a | !a", names=("a",))
        ds = TaskDataset(
            TaskConfig(task_class=PARTIALLY_ORDERED, alphabet=ab,
                       min_sequences=1, max_sequences=1,
                       min_length=1, max_length=1,
                       disjunction_prob=0.0),
            [entry],
        )
        table = QTable(base.n_actions)
        rows = evaluate(table, base, ds, "base", episodes=5, seeds=[1])
        assert rows[0].total_return == 1.0
        assert rows[0].discounted_return == 1.0

    def test_metrics_csv_format(self, tmp_path):
        rows = [EvalRow("base", 0.5, 0.25, 10, 7),
                EvalRow("+dep", 0.0, 0.0, 10, 7)]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0] == "distribution,total_return,discounted_return,episodes,seed"
        assert lines[1] == "base,0.5,0.25,10,7"
        assert lines[2] == "+dep,0,0,10,7"


class TestProductOptimality:
    """Q-learning with full sweeps must match exact value iteration."""

    def _enumerate_product(self, env, entry, timeout):
        """Deterministic product MDP over (grid position, machine state)."""
        from symground.envs import GridState

        size = env.size
        layout = None
        rng = np.random.default_rng(0)
        s0 = env.reset(rng)
        layout = s0.cells
        machine = entry.machine
        states = []
        index = {}
        for r in range(size):
            for c in range(size):
                for q in range(machine.n_states):
                    index[(r, c, q)] = len(states)
                    states.append((r, c, q))

        def next_state(i, a):
            r, c, q = states[i]
            gs = env.step(GridState(size, layout, (r, c)), a)
            q2 = machine.step(q, env.label(gs).id)
            return index[(gs.agent[0], gs.agent[1], q2)]

        def reward_fn(i, a):
            j = next_state(i, a)
            return float(machine.output(states[j][2]))

        def terminal_fn(i):
            return machine.output(states[i][2]) != 0

        return states, index, next_state, reward_fn, terminal_fn, layout

    def test_sweep_q_matches_value_iteration(self):
        ab = gridworld_alphabet(2)
        layout = [-1] * 25
        layout[6] = 0
        layout[7] = 0
        layout[18] = 1
        layout[19] = 1
        env = GridWorld(size=5, n_props=2, layout=layout)
        f = parse("F pick")
        entry = TaskEntry(str(f), compile_formula(f, ab))
        states, index, next_state, reward_fn, terminal_fn, _ = (
            self._enumerate_product(env, entry, timeout=75))
        gamma = 0.94
        v_star = value_iteration(len(states), env.n_actions, next_state,
                                 reward_fn, terminal_fn, gamma)

        table = QTable(env.n_actions, alpha=1.0, gamma=gamma)
        for _ in range(220):
            for i in range(len(states)):
                if terminal_fn(i):
                    continue
                for a in range(env.n_actions):
                    j = next_state(i, a)
                    key_i = (str(states[i]).encode(), "h", states[i][2])
                    key_j = (str(states[j]).encode(), "h", states[j][2])
                    table.update(key_i, a, reward_fn(i, a), key_j,
                                 terminal_fn(j))
        for i in range(len(states)):
            if terminal_fn(i):
                continue
            key = (str(states[i]).encode(), "h", states[i][2])
            assert abs(table.max_value(key) - v_star[i]) <= 1e-6

        # the greedy policy's exact evaluation also attains v*
        policy = [
            int(table.values_of((str(states[i]).encode(), "h",
                                 states[i][2])).argmax())
            for i in range(len(states))
        ]
        v_pi = policy_value(len(states), policy, next_state, reward_fn,
                            terminal_fn, gamma)
        for i in range(len(states)):
            assert abs(v_pi[i] - v_star[i]) <= 1e-6
