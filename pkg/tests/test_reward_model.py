import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brlab.env import make_gridworld, make_random_mdp
from brlab.errors import ParameterError, ValidationError
from brlab.labeling import binary_label
from brlab.links import LinkLossFunction, link_loss_registry
from brlab.prefdata import behavior_preset, generate_dataset
from brlab.reward_model import (
    TrainConfig, feature_matrix, grad_label_l1, grad_preference, label_with_model, load_model,
    loss_label_l1, loss_label_l1_linear, loss_preference, make_reward_model, save_model, train,
)
from brlab.theory import finite_difference_gradient

from conftest import dataset, pair


@pytest.fixture
def tiny():
    mdp = make_random_mdp(8, 2, seed=0)
    ds = dataset([pair("p0", [(0, 0), (1, 1)], [(2, 0), (3, 1)], (1,)),
                  pair("p1", [(4, 0), (5, 1)], [(6, 0), (7, 1)], (2,))], 2)
    return mdp, ds


def test_zero_model_losses(tiny):
    mdp, ds = tiny
    model = make_reward_model(mdp)
    assert loss_label_l1(model, binary_label(ds)) == 8.0
    assert loss_preference(model, ds, LinkLossFunction()) == pytest.approx(2 * np.log(2.0))


def test_zero_model_gradients_are_proportional(tiny):
    # at gap 0 the sigmoid NLL slope is -1/2, so grad L2 = grad L1 / 2 exactly
    mdp, ds = tiny
    model = make_reward_model(mdp)
    g1 = grad_label_l1(model, binary_label(ds))
    g2 = grad_preference(model, ds, LinkLossFunction())
    assert np.allclose(g2, 0.5 * g1, atol=1e-15)
    assert np.count_nonzero(g1) == 8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_linear_rewrite_of_label_loss(seed):
    mdp = make_random_mdp(8, 2, seed=0)
    ds = dataset([pair("p0", [(0, 0), (1, 1)], [(2, 0), (3, 1)], (1,)),
                  pair("p1", [(4, 0), (5, 1)], [(6, 0), (7, 1)], (2,))], 2)
    model = make_reward_model(mdp, seed=seed, init_scale=2.0)
    labeled = binary_label(ds)
    assert loss_label_l1(model, labeled) == pytest.approx(loss_label_l1_linear(model, labeled),
                                                          abs=1e-9)


def test_linear_rewrite_rejects_fractional_labels(tiny):
    mdp, ds = tiny
    labeled = binary_label(ds)
    with pytest.raises(ValidationError):
        loss_label_l1_linear(make_reward_model(mdp), labeled.with_rewards(labeled.rewards / 2))


@pytest.mark.parametrize("hidden", [None, 3])
@pytest.mark.parametrize("kind", ["tabular", "coords", "tabular+coords"])
def test_gradients_match_finite_differences(hidden, kind):
    mdp = make_gridworld(3, 3, slip_probability=0.1)
    ds = generate_dataset(mdp, behavior_preset(mdp, "random"), 6, 3, seed=1)
    model = make_reward_model(mdp, kind, seed=2, init_scale=0.3, hidden=hidden)
    for name, F in link_loss_registry().items():
        loss = lambda w: loss_preference(model.with_parameters(w), ds, F)  # noqa: E731
        fd = finite_difference_gradient(loss, model.parameters)
        assert np.allclose(grad_preference(model, ds, F), fd, rtol=1e-5, atol=1e-7), name


def test_training_recovers_label_signs():
    mdp = make_random_mdp(60, 4, seed=3)
    ds = generate_dataset(mdp, behavior_preset(mdp, "random"), 50, 2, seed=0)
    model, curve = train(make_reward_model(mdp), ds, TrainConfig(learning_rate=0.5, epochs=200))
    assert curve[-1] < curve[0]
    labeled = label_with_model(model, ds)
    truth = binary_label(ds)
    assert np.mean(np.sign(labeled.rewards) == truth.rewards) >= 0.95


def test_label_l1_training_and_minibatches():
    mdp = make_random_mdp(40, 2, seed=4)
    ds = generate_dataset(mdp, behavior_preset(mdp, "random"), 20, 2, seed=0)
    labeled = binary_label(ds)
    cfg = TrainConfig(learning_rate=0.5, epochs=50, batch_size=7, objective="label_l1")
    model, curve = train(make_reward_model(mdp), labeled, cfg)
    assert curve[-1] < curve[0]
    again, curve2 = train(make_reward_model(mdp), labeled, cfg)
    assert np.array_equal(model.parameters, again.parameters)
    assert np.array_equal(curve, curve2)


def test_zero_epochs_leaves_model_unchanged(tiny):
    mdp, ds = tiny
    start = make_reward_model(mdp, seed=1, init_scale=0.5)
    model, curve = train(start, ds, TrainConfig(epochs=0))
    assert np.array_equal(model.parameters, start.parameters)
    assert curve.shape == (1,)


def test_train_config_validation(tiny):
    mdp, ds = tiny
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ParameterError):
        TrainConfig(objective="mse")
    with pytest.raises(ParameterError):
        train(make_reward_model(mdp), ds, TrainConfig(objective="label_l1"))


def test_model_outputs_are_bounded():
    mdp = make_gridworld(3, 3)
    model = make_reward_model(mdp, "coords", seed=0, init_scale=50.0, hidden=4)
    out = model.predict(np.arange(mdp.state_count * mdp.action_count))
    assert np.all(np.abs(out) <= 1.0)


def test_model_json_round_trip(tmp_path):
    mdp = make_gridworld(3, 3)
    for hidden in (None, 2):
        model = make_reward_model(mdp, "coords", seed=5, init_scale=0.5, hidden=hidden)
        save_model(model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json", mdp)
        assert np.array_equal(back.parameters, model.parameters)
        assert type(back) is type(model)


def test_feature_kinds():
    phi = feature_matrix(2, 3, "tabular")
    assert np.array_equal(phi, np.eye(6))
    coords = np.array([[0.0, 0.0], [1.0, 0.5]])
    assert feature_matrix(2, 3, "coords", coords).shape == (6, 9)
    with pytest.raises(ParameterError):
        feature_matrix(2, 3, "coords")
