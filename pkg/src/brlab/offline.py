"""Tabular offline RL learners that consume reward-labelled tuples.

Every learner returns a greedy policy restricted to actions observed in the
data at each state, so out-of-data actions are never taken where the data
offers an alternative.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import DEFAULT_DISCOUNT, Mdp, Policy, greedy_from_q
from .errors import ParameterError, TrainingError, ValidationError
from .labeling import RewardLabeledDataset, binary_label
from .links import LinkLossFunction
from .prefdata import PreferenceDataset

ALGORITHMS = ("pessimistic_fqi", "conservative_q", "model_based_pessimistic", "preference_bellman")


@dataclass(frozen=True)
class LearnerConfig:
    algorithm: str = "pessimistic_fqi"
    penalty: float = 1.0
    count_penalty: float = 2.0
    iterations: int = 5000
    tolerance: float = 1e-8
    discount: float = DEFAULT_DISCOUNT
    seed: int = 0
    learning_rate: float = 1.0
    F: LinkLossFunction = field(default_factory=LinkLossFunction)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ParameterError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.penalty < 0 or self.count_penalty < 0:
            raise ParameterError("penalty weights must be >= 0")
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")


@dataclass(frozen=True, eq=False)
class QTable:
    values: np.ndarray
    discount: float
    support: np.ndarray  # (S, A) bool, actions observed in the data

    def policy(self) -> Policy:
        return greedy_from_q(self.values, self.support)

    def to_json(self) -> dict:
        return {"q": self.values.tolist(), "gamma": self.discount,
                "support": self.support.astype(int).tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "QTable":
        doc = json.loads(Path(path).read_text())
        return cls(np.array(doc["q"], dtype=float), float(doc["gamma"]),
                   np.array(doc["support"], dtype=bool))


@dataclass(frozen=True)
class EmpiricalModel:
    """Count-based statistics of a labelled dataset."""

    mean_reward: np.ndarray  # (S, A)
    counts: np.ndarray  # (S, A)
    transition: np.ndarray  # (S, A, S) MLE, zero rows where unseen

    @classmethod
    def from_data(cls, data: RewardLabeledDataset, state_count: int, action_count: int):
        if len(data) == 0:
            raise ParameterError("offline learners need a non-empty dataset")
        if data.states.max() >= state_count or data.next_states.max() >= state_count \
                or data.actions.max() >= action_count:
            raise ValidationError("dataset indices exceed the declared state/action spaces")
        # duplicate (s, a) rewards are averaged before any Bellman fitting
        mean, counts = data.state_action_means(state_count, action_count)
        trans = np.zeros((state_count, action_count, state_count))
        np.add.at(trans, (data.states, data.actions, data.next_states), 1.0)
        trans = np.divide(trans, counts[:, :, None], out=trans, where=counts[:, :, None] > 0)
        return cls(mean, counts, trans)

    @property
    def support(self) -> np.ndarray:
        return self.counts > 0


def _supported_max(q: np.ndarray, support: np.ndarray, floor: float) -> np.ndarray:
    """max over data-supported actions; ``floor`` where a state has none."""
    masked = np.where(support, q, -np.inf)
    v = masked.max(axis=1)
    return np.where(np.isfinite(v), v, floor)


def _q_min(discount: float) -> float:
    return -1.0 / (1.0 - discount)


def fit_pessimistic_fqi_q(data: RewardLabeledDataset, state_count: int, action_count: int,
                          config: LearnerConfig | None = None) -> QTable:
    """Fitted Q iteration on the empirical model with reward r - c / sqrt(n(s, a)).

    ``c`` is ``config.count_penalty``; the default of 2 is two standard
    errors of a mean of +/-1 labels, so a (s, a) seen a handful of times
    cannot outbid well-sampled ones on luck. Unvisited (s, a) are pinned at
    the smallest attainable value -1 / (1 - gamma).
    """
    config = config or LearnerConfig()
    model = EmpiricalModel.from_data(data, state_count, action_count)
    reward = model.mean_reward - config.count_penalty / np.sqrt(np.maximum(model.counts, 1.0))
    return _fqi(model, config, reward, penalty=None)


def _fqi(model: EmpiricalModel, config: LearnerConfig, reward, penalty) -> QTable:
    gamma = config.discount
    q_min = _q_min(gamma)
    support = model.support
    q = np.where(support, 0.0, q_min)
    for _ in range(config.iterations):
        v = _supported_max(q, support, q_min)
        target = reward + gamma * model.transition @ v
        new = target if penalty is None else penalty(q, target)
        new = np.where(support, new, q_min)
        delta = np.max(np.abs(new - q))
        q = new
        if delta <= config.tolerance:
            break
    return QTable(q, gamma, support)


def fit_pessimistic_fqi(data, state_count, action_count, config=None) -> Policy:
    return fit_pessimistic_fqi_q(data, state_count, action_count, config).policy()


def _cql_inner(alpha: float, counts: np.ndarray, support: np.ndarray):
    """Exact per-state solution of the soft conservative regulariser.

    For each state: minimise sum_a n_a/2 (Q_a - y_a)^2
    + alpha * n_s * (logsumexp_a Q_a - sum_a beta_a Q_a) over supported actions,
    where beta is the empirical action distribution. Newton's method;
    the objective is strongly convex.
    """
    n_s = counts.sum(axis=1)
    beta = np.divide(counts, n_s[:, None], out=np.zeros_like(counts), where=n_s[:, None] > 0)
    A = counts.shape[1]
    eye = np.eye(A)

    def solve(q0, y):
        q = np.where(support, q0, 0.0)
        for _ in range(50):
            z = np.where(support, q, -np.inf)
            zmax = np.max(z, axis=1, keepdims=True)
            zmax = np.where(np.isfinite(zmax), zmax, 0.0)
            e = np.where(support, np.exp(z - zmax), 0.0)
            tot = e.sum(axis=1, keepdims=True)
            p = np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)
            grad = counts * (q - y) + alpha * n_s[:, None] * (p - beta)
            grad = np.where(support, grad, 0.0)
            hess = (counts[:, :, None] * eye
                    + alpha * n_s[:, None, None] * (p[:, :, None] * eye - p[:, :, None] * p[:, None, :]))
            mask2 = support[:, :, None] & support[:, None, :]
            hess = np.where(mask2, hess, 0.0) + (~support)[:, :, None] * eye
            step = np.linalg.solve(hess, grad[:, :, None])[:, :, 0]
            q = q - step
            if np.max(np.abs(step)) < 1e-12:
                break
        return q

    return solve


def fit_conservative_q_q(data: RewardLabeledDataset, state_count: int, action_count: int,
                         config: LearnerConfig | None = None) -> QTable:
    """Fitted iteration with a conservative value penalty of weight ``config.penalty``.

    Each backup solves the tabular optimum of the squared Bellman error plus
    alpha * (softmax-pooled Q minus data-action Q); at alpha = 0 this is
    ``fit_pessimistic_fqi`` without its count penalty, and as alpha grows the greedy action
    tends to the most frequent data action.
    """
    config = config or LearnerConfig(algorithm="conservative_q")
    model = EmpiricalModel.from_data(data, state_count, action_count)
    if config.penalty == 0:
        return _fqi(model, config, model.mean_reward, penalty=None)
    solve = _cql_inner(config.penalty, model.counts, model.support)
    return _fqi(model, config, model.mean_reward, penalty=solve)


def fit_conservative_q(data, state_count, action_count, config=None) -> Policy:
    return fit_conservative_q_q(data, state_count, action_count, config).policy()


def fit_model_based_q(data: RewardLabeledDataset, state_count: int, action_count: int,
                      config: LearnerConfig | None = None) -> QTable:
    """Value iteration on the learned MDP with reward r - lambda / sqrt(n(s, a)).

    The reward model is the mean label per (s, a), the L1-optimal fit for
    +/-1 labels up to ties. Unseen (s, a) become absorbing self-loops with
    reward -1.
    """
    config = config or LearnerConfig(algorithm="model_based_pessimistic")
    model = EmpiricalModel.from_data(data, state_count, action_count)
    support = model.support
    safe = np.maximum(model.counts, 1.0)
    reward = np.where(support, model.mean_reward - config.penalty / np.sqrt(safe), -1.0)
    trans = model.transition.copy()
    s_idx, a_idx = np.nonzero(~support)
    trans[s_idx, a_idx, :] = 0.0
    trans[s_idx, a_idx, s_idx] = 1.0
    gamma = config.discount
    q = np.zeros((state_count, action_count))
    for _ in range(max(config.iterations, 1)):
        new = reward + gamma * trans @ q.max(axis=1)
        delta = np.max(np.abs(new - q))
        q = new
        if delta <= config.tolerance:
            break
    return QTable(q, gamma, support)


def fit_model_based(data, state_count, action_count, config=None) -> Policy:
    return fit_model_based_q(data, state_count, action_count, config).policy()


# ---------------------------------------------------------------------------
# Q-learning directly on preferences


def derived_rewards(q: np.ndarray, states, actions, next_states, discount: float,
                    support: np.ndarray | None = None):
    """r = Q(s, a) - gamma * max_a' Q(s', a'), with the maximising a' returned too.

    With ``support`` the max runs over data-supported actions only and
    states without support bootstrap from 0.
    """
    if support is None:
        support = np.ones_like(q, dtype=bool)
    masked = np.where(support, q, -np.inf)
    best = np.argmax(masked, axis=1)
    has = support.any(axis=1)
    v = np.where(has, masked[np.arange(q.shape[0]), best], 0.0)
    return q[states, actions] - discount * v[next_states], best, has


def preference_bellman_loss(q, dataset: PreferenceDataset, F: LinkLossFunction, discount: float,
                            support=None) -> float:
    """sum_i F(sum_chosen r - sum_rejected r) with r the Q-derived rewards."""
    ori = dataset.oriented
    r, _, _ = derived_rewards(q, ori["states"], ori["actions"], ori["next_states"], discount, support)
    return float(np.sum(F(r[:, 0].sum(axis=1) - r[:, 1].sum(axis=1))))


def preference_bellman_grad(q, dataset: PreferenceDataset, F: LinkLossFunction, discount: float,
                            support=None) -> np.ndarray:
    """Gradient with the argmax held fixed (piecewise-smooth objective)."""
    ori = dataset.oriented
    s, a, s2 = ori["states"], ori["actions"], ori["next_states"]
    r, best, has = derived_rewards(q, s, a, s2, discount, support)
    coef = F.derivative(r[:, 0].sum(axis=1) - r[:, 1].sum(axis=1))  # (N,)
    w = np.empty(s.shape)
    w[:, 0, :] = coef[:, None]
    w[:, 1, :] = -coef[:, None]
    grad = np.zeros_like(q, dtype=float)
    np.add.at(grad, (s.reshape(-1), a.reshape(-1)), w.reshape(-1))
    boot = has[s2].reshape(-1)
    np.add.at(grad, (s2.reshape(-1)[boot], best[s2].reshape(-1)[boot]),
              -discount * w.reshape(-1)[boot])
    return grad


def project_bounded_rewards(q: np.ndarray, states, actions, next_states, discount: float,
                            support: np.ndarray, sweeps: int = 5) -> np.ndarray:
    """Pull Q(s, a) into the band where every derived reward on data lies in [-1, 1].

    For each (s, a) the admissible band is the intersection over its data
    successors s' of [-1 + gamma V(s'), 1 + gamma V(s')]; an empty band
    takes its midpoint. V changes as Q moves, hence the repeated sweeps.
    """
    q = q.copy()
    S, A = q.shape
    flat = states * A + actions
    for _ in range(sweeps):
        masked = np.where(support, q, -np.inf)
        has = support.any(axis=1)
        v = np.where(has, masked.max(axis=1), 0.0)
        lo = np.full(S * A, -np.inf)
        hi = np.full(S * A, np.inf)
        np.maximum.at(lo, flat, -1.0 + discount * v[next_states])
        np.minimum.at(hi, flat, 1.0 + discount * v[next_states])
        lo, hi = lo.reshape(S, A), hi.reshape(S, A)
        seen = np.isfinite(lo)
        band_ok = lo <= hi
        mid = 0.5 * (np.where(seen, lo, 0.0) + np.where(seen, hi, 0.0))
        target = np.where(band_ok, np.clip(q, lo, hi), mid)
        new = np.where(seen, target, q)
        if np.max(np.abs(new - q)) < 1e-12:
            q = new
            break
        q = new
    return q


def fit_preference_bellman_q(dataset: PreferenceDataset, state_count: int, action_count: int,
                             config: LearnerConfig | None = None) -> QTable:
    """Gradient descent on the preference Bellman objective over a tabular Q.

    Each step is followed by ``project_bounded_rewards`` so that the rewards
    implied by Q stay in [-1, 1] on every data transition.
    """
    config = config or LearnerConfig(algorithm="preference_bellman")
    if not dataset.is_single_label:
        raise ValidationError("the preference Bellman learner needs one label per pair")
    ori = dataset.oriented
    s, a, s2 = (ori[k].reshape(-1) for k in ("states", "actions", "next_states"))
    support = np.zeros((state_count, action_count), dtype=bool)
    support[s, a] = True
    q = np.zeros((state_count, action_count))
    n = len(dataset)
    gamma = config.discount
    for step in range(config.iterations):
        g = preference_bellman_grad(q, dataset, config.F, gamma, support) / n
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", step=step)
        q = project_bounded_rewards(q - config.learning_rate * g, s, a, s2, gamma, support)
        if not np.all(np.isfinite(q)):
            raise TrainingError("Q table diverged", step=step)
    return QTable(q, gamma, support)


def fit_preference_bellman(dataset, state_count, action_count, config=None) -> Policy:
    return fit_preference_bellman_q(dataset, state_count, action_count, config).policy()


# ---------------------------------------------------------------------------


def fit_q(data, state_count: int, action_count: int, config: LearnerConfig) -> QTable:
    """Dispatch on ``config.algorithm``."""
    if config.algorithm == "preference_bellman":
        if not isinstance(data, PreferenceDataset):
            raise ParameterError("preference_bellman trains on a PreferenceDataset")
        return fit_preference_bellman_q(data, state_count, action_count, config)
    if not isinstance(data, RewardLabeledDataset):
        raise ParameterError(f"{config.algorithm} trains on a RewardLabeledDataset")
    fitter = {
        "pessimistic_fqi": fit_pessimistic_fqi_q,
        "conservative_q": fit_conservative_q_q,
        "model_based_pessimistic": fit_model_based_q,
    }[config.algorithm]
    return fitter(data, state_count, action_count, config)


def oracle_labels(mdp: Mdp, data) -> RewardLabeledDataset:
    """The same tuples relabelled with the environment's true rewards."""
    if isinstance(data, PreferenceDataset):
        data = binary_label(data) if data.is_single_label else _any_labels(data)
    return data.with_rewards(mdp.reward[data.states, data.actions], method="oracle")


def _any_labels(dataset: PreferenceDataset) -> RewardLabeledDataset:
    from .labeling import multilabel_label

    return multilabel_label(dataset)


def fit_oracle(mdp: Mdp, data, config: LearnerConfig) -> Policy:
    """Run the configured reward-based learner on true rewards over the same tuples."""
    if config.algorithm == "preference_bellman":
        config = LearnerConfig(**{**config.__dict__, "algorithm": "pessimistic_fqi"})
    labeled = oracle_labels(mdp, data)
    return fit_q(labeled, mdp.state_count, mdp.action_count, config).policy()
