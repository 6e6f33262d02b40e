"""Tabular MDPs, policies, rollouts and exact policy evaluation.

These environments are the ground truth everything else is checked
against, so evaluation here is exact (linear solves), never sampled.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ParameterError, ValidationError

DEFAULT_DISCOUNT = 0.99
DEFAULT_CLIP_LENGTH = 20

# gridworld action encoding, clockwise from north
UP, RIGHT, DOWN, LEFT = 0, 1, 2, 3
_MOVES = {UP: (0, -1), RIGHT: (1, 0), DOWN: (0, 1), LEFT: (-1, 0)}

_TIE_ATOL = 1e-9


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite MDP with rewards in [-1, 1].

    ``transition[s, a, s2]`` is P(s2 | s, a), ``reward[s, a]`` is R(s, a).
    ``coordinates`` is an optional (S, k) embedding used by parametric
    reward models; the gridworld fills it with normalised (x, y).
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_distribution: np.ndarray
    discount: float = DEFAULT_DISCOUNT
    coordinates: np.ndarray | None = None
    name: str = "mdp"

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "initial_distribution", _frozen(self.initial_distribution))
        if self.coordinates is not None:
            object.__setattr__(self, "coordinates", _frozen(self.coordinates))
        self.validate()

    def validate(self) -> None:
        P, R, mu = self.transition, self.reward, self.initial_distribution
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValidationError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A = P.shape[:2]
        if S < 1 or A < 1:
            raise ValidationError("state_count and action_count must be positive")
        if R.shape != (S, A):
            raise ValidationError(f"reward must have shape {(S, A)}, got {R.shape}")
        if mu.shape != (S,):
            raise ValidationError(f"initial_distribution must have shape {(S,)}")
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, rtol=0, atol=1e-9):
            raise ValidationError("every transition row must be a probability vector")
        if np.any(np.abs(R) > 1.0) or not np.all(np.isfinite(R)):
            raise ValidationError("rewards must lie in [-1, 1]")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-9:
            raise ValidationError("initial_distribution must sum to 1")
        if not 0.0 < self.discount < 1.0:
            raise ValidationError(f"discount must be in (0, 1), got {self.discount}")
        if self.coordinates is not None and self.coordinates.shape[0] != S:
            raise ValidationError("coordinates must have one row per state")

    @property
    def state_count(self) -> int:
        return self.transition.shape[0]

    @property
    def action_count(self) -> int:
        return self.transition.shape[1]

    @cached_property
    def transition_cdf(self) -> np.ndarray:
        return np.cumsum(self.transition, axis=2)

    @cached_property
    def initial_cdf(self) -> np.ndarray:
        return np.cumsum(self.initial_distribution)

    def state_features(self) -> np.ndarray:
        """One-hot state indicator followed by the coordinate embedding, if any."""
        eye = np.eye(self.state_count)
        if self.coordinates is None:
            return eye
        return np.hstack([eye, self.coordinates])

    @cached_property
    def optimal_policy(self) -> "Policy":
        return solve_optimal(self, tolerance=1e-10)

    @cached_property
    def optimal_return(self) -> float:
        return policy_return(self, self.optimal_policy)

    @cached_property
    def random_return(self) -> float:
        return policy_return(self, Policy.uniform(self.state_count, self.action_count))

    # -- serialization --------------------------------------------------

    def to_json(self) -> dict:
        doc = {
            "states": self.state_count,
            "actions": self.action_count,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "init": self.initial_distribution.tolist(),
            "gamma": self.discount,
        }
        if self.coordinates is not None:
            doc["coords"] = self.coordinates.tolist()
        doc["name"] = self.name
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Mdp":
        try:
            mdp = cls(
                transition=np.asarray(doc["transition"], dtype=float),
                reward=np.asarray(doc["reward"], dtype=float),
                initial_distribution=np.asarray(doc["init"], dtype=float),
                discount=float(doc["gamma"]),
                coordinates=None if doc.get("coords") is None else np.asarray(doc["coords"]),
                name=doc.get("name", "mdp"),
            )
        except KeyError as exc:
            raise ValidationError(f"missing MDP field {exc}") from None
        if mdp.state_count != doc["states"] or mdp.action_count != doc["actions"]:
            raise ValidationError("declared state/action counts disagree with tables")
        return mdp


def save_mdp(mdp: Mdp, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_json()))


def load_mdp(path) -> Mdp:
    return Mdp.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class Policy:
    """Stochastic policy table; row ``s`` is pi(. | s)."""

    table: np.ndarray

    def __post_init__(self):
        table = _frozen(self.table)
        if table.ndim != 2:
            raise ValidationError("policy table must be 2-D (S, A)")
        if np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValidationError("each policy row must sum to 1")
        object.__setattr__(self, "table", table)

    @classmethod
    def uniform(cls, state_count: int, action_count: int) -> "Policy":
        return cls(np.full((state_count, action_count), 1.0 / action_count))

    @classmethod
    def deterministic(cls, actions: Sequence[int], action_count: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        table = np.zeros((actions.size, action_count))
        table[np.arange(actions.size), actions] = 1.0
        return cls(table)

    @cached_property
    def cdf(self) -> np.ndarray:
        return np.cumsum(self.table, axis=1)

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.table, axis=1)

    def epsilon_greedy(self, epsilon: float) -> "Policy":
        """Mix with the uniform policy: (1 - eps) * self + eps * uniform."""
        if not 0.0 <= epsilon <= 1.0:
            raise ParameterError(f"epsilon must be in [0, 1], got {epsilon}")
        A = self.table.shape[1]
        return Policy((1.0 - epsilon) * self.table + epsilon / A)

    def __eq__(self, other):
        return isinstance(other, Policy) and np.array_equal(self.table, other.table)

    __hash__ = None

    def to_json(self) -> dict:
        return {"policy": self.table.tolist()}


@dataclass(frozen=True, eq=False)
class BehaviorMixture:
    """Trajectory-level mixture: each rollout picks one component policy."""

    components: tuple[tuple[float, Policy], ...]

    def __post_init__(self):
        weights = np.array([w for w, _ in self.components], dtype=float)
        if weights.size == 0 or np.any(weights < 0) or weights.sum() <= 0:
            raise ParameterError("mixture weights must be non-negative and not all zero")

    @cached_property
    def weights(self) -> np.ndarray:
        w = np.array([w for w, _ in self.components], dtype=float)
        return w / w.sum()

    def pick(self, rng: np.random.Generator) -> Policy:
        k = int(np.searchsorted(np.cumsum(self.weights), rng.random(), side="right"))
        return self.components[min(k, len(self.components) - 1)][1]


Behavior = Policy | BehaviorMixture


class Step(NamedTuple):
    state: int
    action: int
    next_state: int


@dataclass(frozen=True)
class TrajectoryClip:
    """Fixed-length chained sequence of (state, action, next_state) steps."""

    steps: tuple[Step, ...]
    clip_id: str

    def __post_init__(self):
        steps = tuple(Step(int(s), int(a), int(s2)) for s, a, s2 in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ValidationError(f"clip {self.clip_id} is empty")
        for t in range(len(steps) - 1):
            if steps[t].next_state != steps[t + 1].state:
                raise ValidationError(
                    f"clip {self.clip_id} breaks chaining at step {t}: "
                    f"next_state {steps[t].next_state} != state {steps[t + 1].state}"
                )

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def states(self) -> np.ndarray:
        return np.array([s.state for s in self.steps], dtype=int)

    @property
    def actions(self) -> np.ndarray:
        return np.array([s.action for s in self.steps], dtype=int)

    @property
    def next_states(self) -> np.ndarray:
        return np.array([s.next_state for s in self.steps], dtype=int)

    def state_actions(self) -> list[tuple[int, int]]:
        return [(s.state, s.action) for s in self.steps]


@dataclass(frozen=True)
class EvalReport:
    """Exact evaluation of a policy.

    ``episodes`` is 0 because returns come from a linear solve, not sampling.
    """

    mean_return: float
    std_return: float
    normalized_score: float
    episodes: int = 0


# ---------------------------------------------------------------------------
# constructors


def make_gridworld(
    width: int,
    height: int,
    goal_reward: float = 1.0,
    step_penalty: float = -0.01,
    slip_probability: float = 0.0,
    seed: int = 0,
    discount: float = DEFAULT_DISCOUNT,
    goal: tuple[int, int] | str | None = None,
) -> Mdp:
    """Grid with a single absorbing goal; the agent starts in the top-left cell.

    Moves that would leave the grid keep the agent in place. With
    ``slip_probability`` the move is replaced by one of the two perpendicular
    moves, chosen uniformly. Every action at the goal self-loops and earns
    ``goal_reward``; every other state-action earns ``step_penalty``.

    The layout is deterministic; ``seed`` is only consumed when
    ``goal="random"``.
    """
    if width < 1 or height < 1 or width * height < 2:
        raise ParameterError("gridworld needs width * height >= 2")
    for label, value in (("goal_reward", goal_reward), ("step_penalty", step_penalty)):
        if not -1.0 <= value <= 1.0:
            raise ParameterError(f"{label} must lie in [-1, 1], got {value}")
    if not 0.0 <= slip_probability <= 1.0:
        raise ParameterError(f"slip_probability must lie in [0, 1], got {slip_probability}")

    S, A = width * height, 4
    start = 0
    if goal is None:
        goal_state = S - 1
    elif goal == "random":
        rng = np.random.default_rng(seed)
        goal_state = int(rng.integers(1, S))
    else:
        gx, gy = goal
        goal_state = gy * width + gx
    if not 0 <= goal_state < S or goal_state == start:
        raise ParameterError("goal must be a grid cell distinct from the start")

    def move(x, y, a):
        dx, dy = _MOVES[a]
        nx, ny = x + dx, y + dy
        if 0 <= nx < width and 0 <= ny < height:
            return ny * width + nx
        return y * width + x

    P = np.zeros((S, A, S))
    R = np.full((S, A), float(step_penalty))
    for s in range(S):
        if s == goal_state:
            P[s, :, s] = 1.0
            R[s, :] = goal_reward
            continue
        x, y = s % width, s // width
        for a in range(A):
            P[s, a, move(x, y, a)] += 1.0 - slip_probability
            for side in ((a + 1) % 4, (a + 3) % 4):
                P[s, a, move(x, y, side)] += slip_probability / 2.0

    mu = np.zeros(S)
    mu[start] = 1.0
    xs = np.arange(S) % width / max(width - 1, 1)
    ys = np.arange(S) // width / max(height - 1, 1)
    return Mdp(P, R, mu, discount, np.column_stack([xs, ys]), name=f"grid{width}x{height}")


def make_random_mdp(
    state_count: int,
    action_count: int,
    seed: int,
    discount: float = DEFAULT_DISCOUNT,
    branching: int | None = None,
) -> Mdp:
    """Dense (or ``branching``-sparse) random MDP with uniform rewards in [-1, 1]."""
    if state_count < 1 or action_count < 1:
        raise ParameterError("state_count and action_count must be positive")
    rng = np.random.default_rng(seed)
    P = rng.random((state_count, action_count, state_count))
    if branching is not None and branching < state_count:
        for s in range(state_count):
            for a in range(action_count):
                keep = rng.choice(state_count, size=branching, replace=False)
                mask = np.zeros(state_count, dtype=bool)
                mask[keep] = True
                P[s, a, ~mask] = 0.0
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=(state_count, action_count))
    mu = np.full(state_count, 1.0 / state_count)
    return Mdp(P, R, mu, discount, name=f"random{state_count}x{action_count}")


# ---------------------------------------------------------------------------
# sampling


def _sample(cdf_row: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cdf_row, u, side="right")), cdf_row.size - 1)


def rollout(
    mdp: Mdp,
    policy: Policy,
    horizon: int,
    seed: int | np.random.Generator,
    start_state: int | None = None,
) -> list[Step]:
    """Sample ``horizon`` chained steps; reproducible for a fixed seed."""
    if horizon < 1:
        raise ParameterError(f"horizon must be >= 1, got {horizon}")
    if policy.table.shape != (mdp.state_count, mdp.action_count):
        raise ParameterError("policy shape does not match the MDP")
    rng = np.random.default_rng(seed)
    P_cdf, pi_cdf = mdp.transition_cdf, policy.cdf
    s = _sample(mdp.initial_cdf, rng.random()) if start_state is None else int(start_state)
    steps = []
    for _ in range(horizon):
        a = _sample(pi_cdf[s], rng.random())
        s2 = _sample(P_cdf[s, a], rng.random())
        steps.append(Step(s, a, s2))
        s = s2
    return steps


def monte_carlo_returns(
    mdp: Mdp, policy: Policy, episodes: int, horizon: int, seed: int
) -> np.ndarray:
    """Discounted returns of ``episodes`` independent truncated rollouts (vectorised)."""
    rng = np.random.default_rng(seed)
    P_cdf, pi_cdf = mdp.transition_cdf, policy.cdf
    s = np.minimum((mdp.initial_cdf[None, :] <= rng.random(episodes)[:, None]).sum(1),
                   mdp.state_count - 1)
    total = np.zeros(episodes)
    scale = 1.0
    for _ in range(horizon):
        a = np.minimum((pi_cdf[s] <= rng.random(episodes)[:, None]).sum(1), mdp.action_count - 1)
        total += scale * mdp.reward[s, a]
        s = np.minimum((P_cdf[s, a] <= rng.random(episodes)[:, None]).sum(1),
                       mdp.state_count - 1)
        scale *= mdp.discount
    return total


# ---------------------------------------------------------------------------
# exact planning and evaluation


def policy_matrices(mdp: Mdp, policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """State-to-state chain P_pi and expected one-step reward r_pi."""
    pi = policy.table
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.einsum("sa,sa->s", pi, mdp.reward)
    return P_pi, r_pi


def policy_values(mdp: Mdp, policy: Policy) -> np.ndarray:
    P_pi, r_pi = policy_matrices(mdp, policy)
    system = np.eye(mdp.state_count) - mdp.discount * P_pi
    return np.linalg.solve(system, r_pi)


def policy_return(mdp: Mdp, policy: Policy) -> float:
    return float(mdp.initial_distribution @ policy_values(mdp, policy))


def stationary_distribution(mdp: Mdp, policy: Policy) -> np.ndarray:
    """Stationary distribution of the state chain induced by ``policy``."""
    P_pi, _ = policy_matrices(mdp, policy)
    S = mdp.state_count
    lhs = np.vstack([P_pi.T - np.eye(S), np.ones((1, S))])
    rhs = np.zeros(S + 1)
    rhs[-1] = 1.0
    dist, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    return dist


def evaluate_policy(mdp: Mdp, policy: Policy) -> EvalReport:
    """Exact J(pi), its standard deviation, and the normalised score.

    The second moment of the discounted return solves
    M = E[R^2] + 2 gamma E[R (P V)] + gamma^2 P_pi M, so both moments are
    linear solves.
    """
    if policy.table.shape != (mdp.state_count, mdp.action_count):
        raise ParameterError("policy shape does not match the MDP")
    gamma, pi, R, P = mdp.discount, policy.table, mdp.reward, mdp.transition
    P_pi, r_pi = policy_matrices(mdp, policy)
    system = np.eye(mdp.state_count) - gamma * P_pi
    try:
        V = np.linalg.solve(system, r_pi)
        PV = P @ V
        first = np.einsum("sa,sa->s", pi, R**2 + 2 * gamma * R * PV)
        M = np.linalg.solve(np.eye(mdp.state_count) - gamma**2 * P_pi, first)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - impossible for gamma < 1
        raise RuntimeError(f"policy evaluation system is singular: {exc}") from exc
    mu = mdp.initial_distribution
    mean = float(mu @ V)
    var = max(float(mu @ M) - mean**2, 0.0)
    return EvalReport(mean, float(np.sqrt(var)), normalized_score(mdp, mean), 0)


def normalized_score(mdp: Mdp, value: float) -> float:
    """100 * (J - J_random) / (J_optimal - J_random)."""
    lo, hi = mdp.random_return, mdp.optimal_return
    if hi - lo <= 1e-12:
        return float("nan")
    return 100.0 * (value - lo) / (hi - lo)


def greedy_from_q(q: np.ndarray, allowed: np.ndarray | None = None) -> Policy:
    """Deterministic greedy policy; ties (within 1e-9) go to the lowest action.

    ``allowed`` masks the candidate actions per state; states with no allowed
    action fall back to considering every action.
    """
    q = np.asarray(q, dtype=float)
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool).copy()
        allowed[~allowed.any(axis=1)] = True
        q = np.where(allowed, q, -np.inf)
    best = q.max(axis=1, keepdims=True)
    tied = q >= best - _TIE_ATOL * np.maximum(1.0, np.abs(best))
    return Policy.deterministic(np.argmax(tied, axis=1), q.shape[1])


def q_from_values(mdp: Mdp, values: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.discount * mdp.transition @ values


def value_iteration(mdp: Mdp, tolerance: float, max_iterations: int = 1_000_000) -> np.ndarray:
    """Optimal state values to sup-norm residual <= ``tolerance``."""
    if tolerance <= 0:
        raise ParameterError("tolerance must be positive")
    V = np.zeros(mdp.state_count)
    for _ in range(max_iterations):
        V_new = q_from_values(mdp, V).max(axis=1)
        residual = np.max(np.abs(V_new - V))
        V = V_new
        if residual <= tolerance:
            break
    return V


def solve_optimal(mdp: Mdp, tolerance: float = 1e-8) -> Policy:
    """Greedy policy from value iteration; lowest action index wins ties."""
    V = value_iteration(mdp, tolerance)
    return greedy_from_q(q_from_values(mdp, V))


def clip_return(mdp: Mdp, clip: TrajectoryClip) -> float:
    """Undiscounted sum of true rewards along a clip."""
    return float(mdp.reward[clip.states, clip.actions].sum())
