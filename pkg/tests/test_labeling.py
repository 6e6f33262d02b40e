import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from brlab.errors import ParameterError, ParseError, SizeError, ValidationError
from brlab.labeling import (
    RewardLabeledDataset, binary_label, effective_rewards, multilabel_label, multilabel_targets,
    preference_objective, regularized_pair_loss, reward_gap, solve_optimal_labels,
)
from brlab.links import LinkFunction, LinkLossFunction, link_loss_registry
from brlab.theory import random_micro_dataset

from brlab.prefdata import PreferencePair

from conftest import clip, dataset, pair


def test_binary_labels_single_pair():
    ds = dataset([pair("p0", [(0, 0), (1, 0)], [(2, 0), (3, 0)], labels=(1,))], 2)
    out = binary_label(ds)
    assert out.rewards.tolist() == [1.0, 1.0, -1.0, -1.0]
    assert out.sides == ("chosen", "chosen", "rejected", "rejected")
    flipped = binary_label(dataset([pair("p0", [(0, 0), (1, 0)], [(2, 0), (3, 0)], (2,))], 2))
    assert flipped.rewards.tolist() == [-1.0, -1.0, 1.0, 1.0]


def test_binary_label_orientation_symmetry():
    p = pair("p0", [(0, 0), (1, 1)], [(2, 0), (3, 1)], labels=(1,))
    a = binary_label(dataset([p], 2))
    b = binary_label(dataset([p.swapped()], 2))
    key = lambda d: sorted(zip(d.states.tolist(), d.actions.tolist(), d.rewards.tolist()))
    assert key(a) == key(b)


def test_binary_label_rejects_multilabel():
    ds = dataset([pair("p0", [(0, 0)], [(1, 0)], labels=(1, 2))], 1)
    with pytest.raises(ValidationError):
        binary_label(ds)


def test_overlap_tie_takes_smallest_label():
    # the same (s, a) on both sides: every label gives gap 0
    ds = dataset([pair("p0", [(0, 0)], [(0, 0)])], 1)
    sol = solve_optimal_labels(ds, LinkLossFunction())
    assert sol.values == {(0, 0): -1.0}
    assert sol.objective == pytest.approx(np.log(2.0))


def test_shared_state_action_matches_exhaustive_search():
    # (1, 0) is chosen in one pair and rejected in the other
    ds = dataset([pair("p0", [(0, 0)], [(1, 0)], (1,)), pair("p1", [(1, 0)], [(2, 0)], (2,))], 1)
    F = LinkLossFunction()
    grid = np.linspace(-1, 1, 5)
    best = min(
        (F(a - b) + F(c - b), (a, b, c)) for a, b, c in itertools.product(grid, repeat=3))
    sol = solve_optimal_labels(ds, F)
    assert sol.exact
    assert sol.objective == pytest.approx(best[0], abs=1e-12)
    assert (sol.values[(0, 0)], sol.values[(1, 0)], sol.values[(2, 0)]) == best[1]
    assert preference_objective(ds, F, sol.values) == pytest.approx(sol.objective)


def test_solver_cap_and_grid_checks():
    big = dataset([pair("p0", [(i, 0) for i in range(7)], [(i, 1) for i in range(7)])], 7)
    with pytest.raises(SizeError):
        solve_optimal_labels(big, LinkLossFunction(), cap=12)
    with pytest.raises(ParameterError):
        solve_optimal_labels(big, LinkLossFunction(), grid_step=0.3)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), name=st.sampled_from(sorted(link_loss_registry())))
def test_no_overlap_optimum_is_binary(seed, name):
    ds, _ = random_micro_dataset(np.random.default_rng(seed))
    assert ds.no_overlap
    sol = solve_optimal_labels(ds, link_loss_registry()[name])
    assert np.array_equal(sol.as_dataset(ds).rewards, binary_label(ds).rewards)


def _multilabel_pair(ones, total, T=20):
    labels = (1,) * ones + (2,) * (total - ones)
    sa1 = [(t, 0) for t in range(T)]
    sa2 = [(t, 1) for t in range(T)]
    return dataset([pair("p0", sa1, sa2, labels)], T)


def test_multilabel_closed_form_value():
    ds = _multilabel_pair(19, 20)
    out = multilabel_label(ds)
    gap = np.log(0.95 / 0.05)
    assert gap == pytest.approx(2.944, abs=1e-3)
    assert np.allclose(out.rewards[:20], gap / 40)
    assert np.allclose(out.rewards[20:], -gap / 40)
    assert out.rewards[0] == pytest.approx(0.0736, abs=1e-4)


def test_multilabel_even_split_is_zero():
    assert np.all(multilabel_label(_multilabel_pair(10, 20)).rewards == 0.0)


def test_multilabel_unanimous_is_clamped():
    gap, p_bar, _ = multilabel_targets(_multilabel_pair(4, 4, T=2), LinkFunction())
    assert p_bar[0] == pytest.approx(1 - 1 / 8)
    assert gap[0] == pytest.approx(np.log(7.0))
    with pytest.raises(ParameterError):
        multilabel_targets(_multilabel_pair(4, 4, T=2), LinkFunction(), regularization=0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_multilabel_matches_numeric_minimizer(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 5))
    total = int(rng.integers(2, 30))
    ds = _multilabel_pair(int(rng.integers(0, total + 1)), total, T)
    link = LinkFunction()
    lam = 1e-6
    out = multilabel_label(ds, link, lam)
    _, p_bar, _ = multilabel_targets(ds, link, lam)
    ours = regularized_pair_loss(out.rewards[:T], out.rewards[T:], p_bar[0], link, lam)
    # labels live in [-1, 1], so the reference search is restricted there too
    def obj(r):
        r = np.clip(r, -1.0, 1.0)
        return regularized_pair_loss(r[:T], r[T:], p_bar[0], link, lam)

    best = min((minimize(obj, x0, method="Nelder-Mead",
                         options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000})
                for x0 in (np.zeros(2 * T), out.rewards, rng.uniform(-0.5, 0.5, 2 * T))),
               key=lambda r: r.fun)
    assert ours <= best.fun + 1e-6


def test_reward_gap_without_overlap_is_two():
    ds = dataset([pair(f"p{i}", [(2 * i, 0)], [(2 * i + 1, 0)], (1 + i % 2,)) for i in range(6)], 1)
    report = reward_gap(binary_label(ds))
    assert (report.mean_chosen, report.mean_rejected, report.gap) == (1.0, -1.0, 2.0)


def test_reward_gap_with_hub_clip():
    # one shared clip that wins three comparisons and loses one
    h = clip([(0, 0)], "hub")
    pairs = [PreferencePair(f"p{i}", h, clip([(i + 1, 0)], f"o{i}"), ((1,) if i < 3 else (2,)))
             for i in range(4)]
    labeled = binary_label(dataset(pairs, 1))
    eff = effective_rewards(labeled)
    assert np.allclose(eff[labeled.states == 0], 0.5)
    report = reward_gap(labeled)
    # chosen: 3 hub steps at 0.5 and one partner at 1; rejected: 3 partners at -1, one hub at 0.5
    assert report.gap == pytest.approx((1.5 + 1) / 4 - (-3 + 0.5) / 4)
    assert reward_gap(labeled, "none").gap == 2.0
    with pytest.raises(ParameterError):
        effective_rewards(labeled, "bogus")


def test_labeled_jsonl_round_trip(tmp_path):
    ds = dataset([pair("p0", [(0, 1), (1, 0)], [(2, 0), (3, 1)], (2,))], 2)
    out = binary_label(ds)
    out.save(tmp_path / "l.jsonl")
    back = RewardLabeledDataset.load(tmp_path / "l.jsonl")
    assert np.array_equal(back.rewards, out.rewards) and back.sides == out.sides
    (tmp_path / "bad.jsonl").write_text('{"s": 0}\n')
    with pytest.raises(ParseError):
        RewardLabeledDataset.load(tmp_path / "bad.jsonl")


def test_labels_must_be_bounded():
    ds = binary_label(dataset([pair("p0", [(0, 0)], [(1, 0)])], 1))
    with pytest.raises(ValidationError):
        ds.with_rewards([2.0, 0.0])
