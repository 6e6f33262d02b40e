import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brlab.env import make_gridworld, policy_return, solve_optimal
from brlab.errors import ParameterError, ValidationError
from brlab.labeling import RewardLabeledDataset, binary_label
from brlab.links import LinkLossFunction
from brlab.offline import (
    ALGORITHMS, LearnerConfig, QTable, derived_rewards, fit_conservative_q_q, fit_oracle,
    fit_pessimistic_fqi, fit_pessimistic_fqi_q, fit_preference_bellman_q, fit_q, oracle_labels,
    preference_bellman_loss, project_bounded_rewards,
)
from brlab.prefdata import behavior_preset, generate_dataset
from brlab.theory import random_micro_dataset

from conftest import dataset, pair


def _tuples(rows, rewards=None):
    """RewardLabeledDataset from (s, a, r, s2) rows."""
    s, a, r, s2 = (np.array(c) for c in zip(*rows))
    n = len(rows)
    return RewardLabeledDataset(s, a, r, s2, tuple(f"p{i}" for i in range(n)),
                                ("chosen",) * n, np.zeros(n, dtype=int),
                                tuple(f"c{i}" for i in range(n)))


def _full_coverage(mdp, repeats=1):
    rows = []
    for s in range(mdp.state_count):
        for a in range(mdp.action_count):
            s2 = int(np.argmax(mdp.transition[s, a]))
            rows += [(s, a, float(mdp.reward[s, a]), s2)] * repeats
    return _tuples(rows)


@pytest.mark.parametrize("algorithm", ["pessimistic_fqi", "model_based_pessimistic"])
def test_full_coverage_recovers_optimal_policy(algorithm):
    mdp = make_gridworld(3, 3)
    data = _full_coverage(mdp, repeats=3)
    cfg = LearnerConfig(algorithm=algorithm, penalty=0.0)
    pi = fit_q(data, mdp.state_count, mdp.action_count, cfg).policy()
    assert policy_return(mdp, pi) == pytest.approx(mdp.optimal_return, abs=1e-6)


def test_two_state_chain_fqi():
    mdp = make_gridworld(2, 1, step_penalty=0.0)
    pi = fit_pessimistic_fqi(_full_coverage(mdp), 2, 4)
    assert pi.greedy_actions()[0] == solve_optimal(mdp).greedy_actions()[0]


def test_unseen_action_is_never_selected():
    # action 1 at state 0 is absent even though it would be best in the true MDP
    data = _tuples([(0, 0, -0.5, 1), (1, 0, 0.0, 1)])
    for algorithm in ("pessimistic_fqi", "conservative_q", "model_based_pessimistic"):
        qt = fit_q(data, 2, 2, LearnerConfig(algorithm=algorithm))
        assert qt.policy().greedy_actions()[0] == 0


def test_count_penalty_prefers_well_sampled_actions():
    # one lucky +1 against a well-sampled +0.8
    rows = [(0, 0, 0.8, 1)] * 25 + [(0, 1, 1.0, 1)] + [(1, 0, 0.0, 1)]
    data = _tuples(rows)
    assert fit_pessimistic_fqi(data, 2, 2).greedy_actions()[0] == 0
    loose = LearnerConfig(count_penalty=0.0)
    assert fit_pessimistic_fqi(data, 2, 2, loose).greedy_actions()[0] == 1


def test_cql_without_penalty_equals_plain_fqi():
    mdp = make_gridworld(3, 3, slip_probability=0.2)
    data = _full_coverage(mdp, repeats=2)
    cql = fit_conservative_q_q(data, 9, 4, LearnerConfig(algorithm="conservative_q", penalty=0.0))
    fqi = fit_pessimistic_fqi_q(data, 9, 4, LearnerConfig(count_penalty=0.0))
    assert np.allclose(cql.values, fqi.values, atol=1e-12)


def test_strong_cql_picks_the_most_frequent_action():
    rows = [(0, 0, -1.0, 1)] * 5 + [(0, 1, 1.0, 1)] + [(1, 0, 0.0, 1)]
    data = _tuples(rows)
    weak = fit_conservative_q_q(data, 2, 2, LearnerConfig(algorithm="conservative_q", penalty=0.0))
    strong = fit_conservative_q_q(data, 2, 2,
                                  LearnerConfig(algorithm="conservative_q", penalty=100.0))
    assert weak.policy().greedy_actions()[0] == 1
    assert strong.policy().greedy_actions()[0] == 0


def test_derived_rewards_definition():
    q = np.array([[1.0, 3.0], [2.0, -1.0]])
    r, best, has = derived_rewards(q, np.array([0, 1]), np.array([1, 0]), np.array([1, 0]), 0.5)
    assert r.tolist() == [3.0 - 0.5 * 2.0, 2.0 - 0.5 * 3.0]
    support = np.array([[True, False], [False, False]])
    r, _, has = derived_rewards(q, np.array([0]), np.array([0]), np.array([1]), 0.5, support)
    assert r.tolist() == [1.0] and has.tolist() == [True, False]


def test_preference_bellman_initial_loss():
    ds, S = random_micro_dataset(np.random.default_rng(0), max_pairs=3)
    F = LinkLossFunction()
    assert preference_bellman_loss(np.zeros((S, 2)), ds, F, 0.99) == pytest.approx(
        len(ds) * np.log(2.0))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_projection_bounds_derived_rewards(seed):
    ds, S = random_micro_dataset(np.random.default_rng(seed))
    ori = ds.oriented
    s, a, s2 = (ori[k].reshape(-1) for k in ("states", "actions", "next_states"))
    support = np.zeros((S, 2), dtype=bool)
    support[s, a] = True
    q = np.random.default_rng(seed).normal(0, 5, (S, 2))
    q = project_bounded_rewards(q, s, a, s2, 0.9, support, sweeps=2 * ds.clip_length + 1)
    r, _, _ = derived_rewards(q, s, a, s2, 0.9, support)
    assert np.all(np.abs(r) <= 1 + 1e-9)


def test_preference_bellman_recovers_binary_signs():
    ds, S = random_micro_dataset(np.random.default_rng(4), max_pairs=3, max_length=2)
    cfg = LearnerConfig(algorithm="preference_bellman", iterations=500, discount=0.9)
    qt = fit_preference_bellman_q(ds, S, 2, cfg)
    ori = ds.oriented
    r, _, _ = derived_rewards(qt.values, ori["states"], ori["actions"], ori["next_states"],
                              0.9, qt.support)
    gap = r[:, 0].sum(axis=1) - r[:, 1].sum(axis=1)
    assert np.all(gap > 0)
    assert preference_bellman_loss(qt.values, ds, cfg.F, 0.9, qt.support) < len(ds) * np.log(2)


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_learners_are_deterministic(algorithm, grid5):
    ds = generate_dataset(grid5, behavior_preset(grid5, "medium"), 20, 5, seed=0)
    data = ds if algorithm == "preference_bellman" else binary_label(ds)
    cfg = LearnerConfig(algorithm=algorithm, iterations=200)
    a = fit_q(data, 25, 4, cfg)
    b = fit_q(data, 25, 4, cfg)
    assert np.array_equal(a.values, b.values)


def test_qtable_json_round_trip(tmp_path):
    qt = QTable(np.array([[0.5, -1.0]]), 0.9, np.array([[True, False]]))
    qt.save(tmp_path / "q.json")
    back = QTable.load(tmp_path / "q.json")
    assert np.array_equal(back.values, qt.values) and np.array_equal(back.support, qt.support)
    assert back.discount == 0.9


def test_oracle_uses_true_rewards(grid5):
    ds = dataset([pair("p0", [(0, 1), (1, 1)], [(24, 0), (24, 0)], (1,))], 2)
    labeled = oracle_labels(grid5, ds)
    assert labeled.rewards.tolist() == [-0.01, -0.01, 1.0, 1.0]
    pi = fit_oracle(grid5, ds, LearnerConfig(algorithm="preference_bellman"))
    assert pi.table.shape == (25, 4)


def test_config_and_dispatch_errors():
    with pytest.raises(ParameterError):
        LearnerConfig(algorithm="bogus")
    with pytest.raises(ParameterError):
        LearnerConfig(penalty=-1.0)
    data = _tuples([(0, 0, 0.0, 0)])
    with pytest.raises(ParameterError):
        fit_q(data, 1, 1, LearnerConfig(algorithm="preference_bellman"))
    with pytest.raises(ValidationError):
        fit_pessimistic_fqi_q(data, 1, 0)
    ds = dataset([pair("p0", [(0, 0)], [(1, 0)], (1, 2))], 1)
    with pytest.raises(ValidationError):
        fit_preference_bellman_q(ds, 2, 1)
