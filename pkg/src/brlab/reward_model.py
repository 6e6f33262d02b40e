"""Bounded parametric reward models with analytic gradients.

A model maps a flat state-action index ``s * A + a`` to a reward in (-1, 1)
through ``tanh``. Gradients are exposed as vector-Jacobian products so
losses never materialise a full Jacobian.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import Mdp
from .errors import ParameterError, TrainingError, ValidationError
from .labeling import RewardLabeledDataset, _flatten
from .links import LinkLossFunction
from .prefdata import PreferenceDataset

FEATURE_KINDS = ("tabular", "coords", "tabular+coords")


def feature_matrix(state_count: int, action_count: int, kind: str = "tabular",
                   coordinates: np.ndarray | None = None) -> np.ndarray:
    """Rows are phi(s, a) for the flat index s * A + a.

    ``tabular`` is one-hot(s) x one-hot(a). ``coords`` is [coords(s), 1] x one-hot(a),
    a low-dimensional embedding that generalises across neighbouring states.
    """
    if kind not in FEATURE_KINDS:
        raise ParameterError(f"unknown feature kind {kind!r}")
    blocks = []
    if kind in ("tabular", "tabular+coords"):
        blocks.append(np.eye(state_count * action_count))
    if kind in ("coords", "tabular+coords"):
        if coordinates is None:
            raise ParameterError("coordinate features need an MDP with coordinates")
        base = np.hstack([coordinates, np.ones((state_count, 1))])
        blocks.append(np.einsum("sk,ab->sakb", base, np.eye(action_count)).reshape(
            state_count * action_count, -1))
    return np.hstack(blocks)


@dataclass(frozen=True, eq=False)
class LinearRewardModel:
    """R(s, a) = tanh(phi(s, a) . w)."""

    features: np.ndarray
    parameters: np.ndarray
    action_count: int
    feature_kind: str = "tabular"

    def __post_init__(self):
        object.__setattr__(self, "parameters", np.array(self.parameters, dtype=float))
        if self.parameters.shape != (self.features.shape[1],):
            raise ValidationError("parameter vector does not match feature width")

    def with_parameters(self, w) -> "LinearRewardModel":
        return replace(self, parameters=np.array(w, dtype=float))

    @property
    def _one_hot(self) -> bool:
        return self.feature_kind == "tabular"

    def predict(self, sa: np.ndarray) -> np.ndarray:
        if self._one_hot:
            return np.tanh(self.parameters[sa])
        return np.tanh(self.features[sa] @ self.parameters)

    def vjp(self, sa: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """sum_k weights[k] * dR(sa[k]) / dw."""
        out = self.predict(sa)
        if self._one_hot:
            return np.bincount(sa, weights=weights * (1.0 - out**2),
                               minlength=self.parameters.size)
        return self.features[sa].T @ (weights * (1.0 - out**2))

    def jacobian(self, sa: np.ndarray) -> np.ndarray:
        out = self.predict(sa)
        return self.features[sa] * (1.0 - out**2)[:, None]


@dataclass(frozen=True, eq=False)
class MlpRewardModel:
    """One tanh hidden layer, tanh output: R = tanh(v . tanh(W phi + b) + c)."""

    features: np.ndarray
    parameters: np.ndarray
    action_count: int
    hidden: int = 4
    feature_kind: str = "tabular"

    def __post_init__(self):
        object.__setattr__(self, "parameters", np.array(self.parameters, dtype=float))
        d, h = self.features.shape[1], self.hidden
        if self.parameters.shape != (h * d + 2 * h + 1,):
            raise ValidationError("parameter vector does not match the MLP shape")

    @staticmethod
    def size(input_dim: int, hidden: int) -> int:
        return hidden * input_dim + 2 * hidden + 1

    def with_parameters(self, w) -> "MlpRewardModel":
        return replace(self, parameters=np.array(w, dtype=float))

    def _unpack(self):
        d, h = self.features.shape[1], self.hidden
        p = self.parameters
        W = p[: h * d].reshape(h, d)
        b = p[h * d: h * d + h]
        v = p[h * d + h: h * d + 2 * h]
        c = p[-1]
        return W, b, v, c

    def _forward(self, sa):
        W, b, v, c = self._unpack()
        x = self.features[sa]
        z = np.tanh(x @ W.T + b)
        return x, z, np.tanh(z @ v + c)

    def predict(self, sa: np.ndarray) -> np.ndarray:
        return self._forward(sa)[2]

    def jacobian(self, sa: np.ndarray) -> np.ndarray:
        W, b, v, c = self._unpack()
        x, z, out = self._forward(sa)
        g = (1.0 - out**2)[:, None]
        dz = g * v[None, :] * (1.0 - z**2)
        dW = (dz[:, :, None] * x[:, None, :]).reshape(len(sa), -1)
        return np.hstack([dW, dz, g * z, g])

    def vjp(self, sa: np.ndarray, weights: np.ndarray) -> np.ndarray:
        return self.jacobian(sa).T @ weights


RewardModel = LinearRewardModel | MlpRewardModel


def make_reward_model(mdp: Mdp, kind: str = "tabular", seed: int = 0, init_scale: float = 0.0,
                      hidden: int | None = None) -> RewardModel:
    """Build a model over ``mdp``'s state-actions; ``hidden`` selects the MLP variant."""
    phi = feature_matrix(mdp.state_count, mdp.action_count, kind, mdp.coordinates)
    rng = np.random.default_rng(seed)
    if hidden is None:
        return LinearRewardModel(phi, init_scale * rng.standard_normal(phi.shape[1]),
                                 mdp.action_count, kind)
    n = MlpRewardModel.size(phi.shape[1], hidden)
    return MlpRewardModel(phi, init_scale * rng.standard_normal(n), mdp.action_count, hidden, kind)


def save_model(model: RewardModel, path) -> None:
    doc = {"feature_map_kind": model.feature_kind, "w": model.parameters.tolist()}
    if isinstance(model, MlpRewardModel):
        doc["hidden"] = model.hidden
    Path(path).write_text(json.dumps(doc))


def load_model(path, mdp: Mdp) -> RewardModel:
    doc = json.loads(Path(path).read_text())
    phi = feature_matrix(mdp.state_count, mdp.action_count, doc["feature_map_kind"],
                         mdp.coordinates)
    if "hidden" in doc:
        return MlpRewardModel(phi, np.array(doc["w"]), mdp.action_count, int(doc["hidden"]),
                              doc["feature_map_kind"])
    return LinearRewardModel(phi, np.array(doc["w"]), mdp.action_count, doc["feature_map_kind"])


def _flat_index(model: RewardModel, states, actions) -> np.ndarray:
    return np.asarray(states) * model.action_count + np.asarray(actions)


# ---------------------------------------------------------------------------
# losses


def loss_label_l1(model: RewardModel, labeled: RewardLabeledDataset) -> float:
    """sum |R(s, a) - r| over labelled tuples."""
    sa = _flat_index(model, labeled.states, labeled.actions)
    return float(np.abs(model.predict(sa) - labeled.rewards).sum())


def grad_label_l1(model: RewardModel, labeled: RewardLabeledDataset) -> np.ndarray:
    """Subgradient with sign(0) = 0 at the kink."""
    sa = _flat_index(model, labeled.states, labeled.actions)
    return model.vjp(sa, np.sign(model.predict(sa) - labeled.rewards))


def loss_label_l1_linear(model: RewardModel, labeled: RewardLabeledDataset) -> float:
    """Bounded-output rewrite for +/-1 labels: n - sum_chosen R + sum_rejected R."""
    if not np.all(np.abs(labeled.rewards) == 1.0):
        raise ValidationError("the linear rewrite only holds for binary labels")
    sa = _flat_index(model, labeled.states, labeled.actions)
    return float(len(labeled) - np.sum(labeled.rewards * model.predict(sa)))


def _pair_terms(model: RewardModel, dataset: PreferenceDataset):
    arr = dataset.arrays
    sa = _flat_index(model, arr["states"], arr["actions"])  # (N, 2, T)
    counts = dataset.label_counts  # (N, 2)
    return sa, counts


def loss_preference(model: RewardModel, dataset: PreferenceDataset, F: LinkLossFunction,
                    ) -> float:
    """sum_i n1_i F(gap_i) + n2_i F(-gap_i), gap = sum_clip1 R - sum_clip2 R.

    With one label per pair this is sum_i F(sum_chosen R - sum_rejected R).
    """
    sa, counts = _pair_terms(model, dataset)
    r = model.predict(sa.reshape(-1)).reshape(sa.shape)
    gap = r[:, 0].sum(axis=1) - r[:, 1].sum(axis=1)
    return float(np.sum(counts[:, 0] * F(gap) + counts[:, 1] * F(-gap)))


def grad_preference(model: RewardModel, dataset: PreferenceDataset, F: LinkLossFunction,
                    ) -> np.ndarray:
    sa, counts = _pair_terms(model, dataset)
    r = model.predict(sa.reshape(-1)).reshape(sa.shape)
    gap = r[:, 0].sum(axis=1) - r[:, 1].sum(axis=1)
    coef = counts[:, 0] * F.derivative(gap) - counts[:, 1] * F.derivative(-gap)
    weights = np.empty(sa.shape)
    weights[:, 0, :] = coef[:, None]
    weights[:, 1, :] = -coef[:, None]
    return model.vjp(sa.reshape(-1), weights.reshape(-1))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 300
    batch_size: int | None = None
    seed: int = 0
    objective: str = "preference_F"
    F: LinkLossFunction = field(default_factory=LinkLossFunction)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.epochs < 0:
            raise ParameterError("epochs must be non-negative")
        if self.objective not in ("label_l1", "preference_F"):
            raise ParameterError(f"unknown objective {self.objective!r}")


def _subset_labeled(labeled: RewardLabeledDataset, idx) -> RewardLabeledDataset:
    return RewardLabeledDataset(
        labeled.states[idx], labeled.actions[idx], labeled.rewards[idx], labeled.next_states[idx],
        tuple(labeled.pair_ids[i] for i in idx), tuple(labeled.sides[i] for i in idx),
        labeled.steps[idx], tuple(labeled.clip_ids[i] for i in idx),
    )


def train(model: RewardModel, data, config: TrainConfig):
    """Plain (mini-)batch gradient descent on the mean per-item loss.

    ``data`` is a RewardLabeledDataset for ``label_l1`` and a
    PreferenceDataset for ``preference_F``. Returns the trained model and the
    loss curve (mean loss before each epoch, plus the final value).
    """
    if config.objective == "label_l1":
        if not isinstance(data, RewardLabeledDataset):
            raise ParameterError("label_l1 trains on a RewardLabeledDataset")
        size = len(data)
        loss = lambda m, d: loss_label_l1(m, d)  # noqa: E731
        grad = lambda m, d: grad_label_l1(m, d)  # noqa: E731
        subset = _subset_labeled
    else:
        if not isinstance(data, PreferenceDataset):
            raise ParameterError("preference_F trains on a PreferenceDataset")
        size = len(data)
        loss = lambda m, d: loss_preference(m, d, config.F)  # noqa: E731
        grad = lambda m, d: grad_preference(m, d, config.F)  # noqa: E731
        subset = lambda d, idx: PreferenceDataset(  # noqa: E731
            tuple(d.pairs[i] for i in idx), d.clip_length, d.link)
    if size == 0:
        raise ParameterError("cannot train on an empty dataset")

    rng = np.random.default_rng(config.seed)
    batch = config.batch_size or size
    curve = [loss(model, data) / size]
    for epoch in range(config.epochs):
        if batch >= size:
            chunks = [None]
        else:
            order = rng.permutation(size)
            chunks = [np.sort(order[i:i + batch]) for i in range(0, size, batch)]
        for chunk in chunks:
            part = data if chunk is None else subset(data, chunk)
            n = size if chunk is None else len(chunk)
            g = grad(model, part) / n
            if not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient", step=epoch)
            model = model.with_parameters(model.parameters - config.learning_rate * g)
        value = loss(model, data) / size
        if not np.isfinite(value):
            raise TrainingError(f"loss diverged to {value}", step=epoch)
        curve.append(value)
    return model, np.array(curve)


def label_with_model(model: RewardModel, dataset: PreferenceDataset) -> RewardLabeledDataset:
    """Label every step of every clip with R(s, a); provenance as in binary labelling."""
    arr = dataset.arrays
    sa = _flat_index(model, arr["states"], arr["actions"])
    rewards = model.predict(sa.reshape(-1)).reshape(sa.shape)
    first_chosen = dataset.label_counts[:, 0] >= dataset.label_counts[:, 1]
    return _flatten(dataset, rewards, first_chosen, {"method": "rm"})
