import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brlab.env import Mdp, TrajectoryClip, make_gridworld, make_random_mdp
from brlab.errors import GenerationError, ParameterError, ParseError, ValidationError
from brlab.links import LinkFunction
from brlab.prefdata import (
    PreferenceDataset, PreferencePair, behavior_preset, dataset_lines, draw_labels,
    generate_dataset, generate_multilabel_dataset, generate_overlap_dataset, load_dataset,
    save_dataset, subsample,
)

from conftest import clip, dataset, pair


def _const_mdp(reward):
    return Mdp(np.ones((1, 1, 1)), np.array([[reward]]), np.ones(1))


def test_label_frequency_follows_link():
    # identical clips have gap 0, so the linear link yields its offset
    c = TrajectoryClip(tuple((0, 0, 0) for _ in range(5)), "c")
    rng = np.random.default_rng(0)
    n = 10_000
    labels = np.array(draw_labels(_const_mdp(0.1), c, c, LinkFunction("linear", 1.0, 0.7), n, rng))
    assert abs(np.mean(labels == 1) - 0.7) <= 3 * np.sqrt(0.7 * 0.3 / n)
    labels = np.array(draw_labels(_const_mdp(-0.1), c, c, LinkFunction(), n, rng))
    assert abs(np.mean(labels == 1) - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_sigmoid_label_frequency_on_grid():
    mdp = make_gridworld(3, 3)
    goal = mdp.state_count - 1
    # clip at the goal (return 2) versus clip elsewhere (return -0.02)
    good = TrajectoryClip(((goal, 0, goal), (goal, 0, goal)), "g")
    bad = TrajectoryClip(((0, 0, 0), (0, 0, 0)), "b")
    n = 10_000
    p = 1 / (1 + np.exp(-2.02))
    labels = np.array(draw_labels(mdp, good, bad, LinkFunction(), n, np.random.default_rng(3)))
    assert abs(np.mean(labels == 1) - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_huge_gap_is_always_preferred():
    # returns +20 and -20 give sigmoid(40); the wrong label has probability ~4e-18
    T = 20
    two = Mdp(np.eye(2)[:, None, :], np.array([[1.0], [-1.0]]), np.array([1.0, 0.0]))
    a = TrajectoryClip(tuple((0, 0, 0) for _ in range(T)), "a")
    b = TrajectoryClip(tuple((1, 0, 1) for _ in range(T)), "b")
    assert set(draw_labels(two, a, b, LinkFunction(), 1000, np.random.default_rng(0))) == {1}
    assert set(draw_labels(two, b, a, LinkFunction(), 1000, np.random.default_rng(0))) == {2}


def test_generation_is_byte_deterministic(grid5):
    beh = behavior_preset(grid5, "medium")
    a = list(dataset_lines(generate_dataset(grid5, beh, 40, 5, seed=7)))
    b = list(dataset_lines(generate_dataset(grid5, beh, 40, 5, seed=7)))
    c = list(dataset_lines(generate_dataset(grid5, beh, 40, 5, seed=8)))
    assert a == b and a != c


def test_generated_clips_are_rollout_windows(grid5):
    ds = generate_dataset(grid5, behavior_preset(grid5, "random"), 30, 6, seed=0)
    assert len(ds) == 30 and ds.clip_length == 6
    for p in ds.pairs:
        for c in (p.clip_1, p.clip_2):
            for s, a, s2 in c.steps:
                assert grid5.transition[s, a, s2] > 0


def test_small_dataset_avoids_overlap():
    mdp = make_random_mdp(30, 4, seed=0)
    ds = generate_dataset(mdp, behavior_preset(mdp, "random"), 5, 3, seed=1)
    assert ds.no_overlap


def test_require_uniqueness_raises_when_impossible():
    mdp = make_gridworld(2, 1)
    with pytest.raises(GenerationError):
        generate_dataset(mdp, behavior_preset(mdp, "random"), 3, 4, seed=0, uniqueness="require")


def test_overlap_layout(grid5):
    ds = generate_overlap_dataset(grid5, behavior_preset(grid5, "medium"), 100, 0.2, 4, 5, seed=0)
    assert len(ds) == 100
    hubs = {c for c, n in ds.overlap_manifest.items() if n > 1}
    assert len(hubs) == 20
    assert all(ds.overlap_manifest[h] == 4 for h in hubs)
    touching = sum(1 for p in ds.pairs if {p.clip_1.clip_id, p.clip_2.clip_id} & hubs)
    assert touching == 80


def test_zero_reuse_fraction_has_unit_manifest(grid5):
    ds = generate_overlap_dataset(grid5, behavior_preset(grid5, "medium"), 20, 0.0, 4, 5, seed=0)
    assert set(ds.overlap_manifest.values()) == {1}


def test_overlap_parameter_checks(grid5):
    beh = behavior_preset(grid5, "medium")
    with pytest.raises(ParameterError):
        generate_overlap_dataset(grid5, beh, 10, 0.5, 4, 5)
    with pytest.raises(ParameterError):
        generate_overlap_dataset(grid5, beh, 10, 0.1, 1, 5)
    with pytest.raises(ParameterError):
        generate_dataset(grid5, beh, 0, 5)


def test_multilabel_counts_are_binomial():
    two = Mdp(np.eye(2)[:, None, :], np.array([[0.1], [0.0]]), np.array([0.5, 0.5]))
    ds = generate_multilabel_dataset(two, behavior_preset(two, "random"), 300, 25, 2, seed=0,
                                     uniqueness="ignore")
    counts = ds.label_counts
    assert np.all(counts.sum(axis=1) == 25)
    # each pair's rate is Binomial(25, f(gap)) / 25
    gaps = np.array([sum(two.reward[s, a] for s, a, _ in p.clip_1.steps)
                     - sum(two.reward[s, a] for s, a, _ in p.clip_2.steps) for p in ds.pairs])
    p = 1 / (1 + np.exp(-gaps))
    z = (counts[:, 0] - 25 * p) / np.sqrt(25 * p * (1 - p))
    assert abs(z.mean()) <= 3 / np.sqrt(len(ds))
    assert z.var() == pytest.approx(1.0, abs=0.25)


def test_subsample():
    ds = dataset([pair(f"p{i}", [(i, 0)], [(i, 1)]) for i in range(10)], 1)
    half = subsample(ds, 0.5, seed=0)
    assert len(half) == 5
    ids = [p.pair_id for p in half.pairs]
    assert ids == sorted(ids, key=lambda x: int(x[1:]))
    assert subsample(ds, 1.0, seed=0) is ds
    with pytest.raises(ParameterError):
        subsample(ds, 0.0, seed=0)


def test_jsonl_round_trip(tmp_path, grid5):
    ds = generate_multilabel_dataset(grid5, behavior_preset(grid5, "medium"), 10, 3, 4, seed=2)
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    assert load_dataset(path) == ds
    first = json.loads(path.read_text().splitlines()[0])
    assert first["T"] == 4 and first["link_kind"] == "sigmoid"


def test_truncated_file_reports_last_line(tmp_path, grid5):
    ds = generate_dataset(grid5, behavior_preset(grid5, "medium"), 5, 3, seed=0)
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(ParseError) as info:
        load_dataset(path)
    assert info.value.line == 6


def test_bad_label_names_the_pair(tmp_path, grid5):
    ds = generate_dataset(grid5, behavior_preset(grid5, "medium"), 3, 3, seed=0)
    lines = list(dataset_lines(ds))
    rec = json.loads(lines[2])
    rec["labels"] = [3]
    lines[2] = json.dumps(rec)
    path = tmp_path / "d.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match=rec["pair_id"]):
        load_dataset(path)


def test_dataset_invariants():
    with pytest.raises(ValidationError):
        PreferencePair("x", clip([(0, 0)], "a"), clip([(1, 0), (2, 0)], "b"), (1,))
    with pytest.raises(ValidationError):
        PreferencePair("x", clip([(0, 0)], "a"), clip([(1, 0)], "b"), ())
    with pytest.raises(ValidationError):
        dataset([pair("p", [(0, 0)], [(1, 0)]), pair("p", [(2, 0)], [(3, 0)])], 1)
    with pytest.raises(ValidationError):
        dataset([pair("p", [(0, 0), (1, 0)], [(2, 0), (3, 0)])], 3)


def test_oriented_puts_chosen_first():
    ds = dataset([pair("p0", [(0, 0)], [(1, 1)], labels=(2,))], 1)
    assert ds.oriented["states"][0, 0, 0] == 1
    assert ds.arrays["states"][0, 0, 0] == 0


@pytest.mark.parametrize("name", ["random", "expert", "medium", "medium-expert", "medium-replay"])
def test_behavior_presets_generate(grid5, name):
    ds = generate_dataset(grid5, behavior_preset(grid5, name), 4, 3, seed=0)
    assert len(ds) == 4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 15), T=st.integers(1, 6))
def test_generated_datasets_validate_and_round_trip(tmp_path_factory, seed, n, T):
    mdp = make_random_mdp(6, 2, seed=seed)
    ds = generate_dataset(mdp, behavior_preset(mdp, "medium"), n, T, seed=seed)
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    save_dataset(ds, path)
    assert load_dataset(path) == ds
    assert all(len(p.labels) == 1 for p in ds.pairs)
