"""Turning preference pairs into per-step reward labels.

``binary_label`` is the cheap labeller used by the pipeline: +1 on every step
of the preferred clip, -1 on the other. ``solve_optimal_labels`` is the
brute-force reference it is checked against on small datasets.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ParameterError, ParseError, ReportError, SizeError, ValidationError
from .links import LinkFunction, LinkLossFunction
from .prefdata import PreferenceDataset

CHOSEN, REJECTED = "chosen", "rejected"


@dataclass(frozen=True, eq=False)
class RewardLabeledDataset:
    """Flat (s, a, r, s2) tuples with provenance back to the preference pairs.

    Tuples are ordered pair by pair, ``clip_1`` steps before ``clip_2`` steps.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    pair_ids: tuple[str, ...]
    sides: tuple[str, ...]
    steps: np.ndarray
    clip_ids: tuple[str, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("states", "actions", "next_states", "steps"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=int))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=float))
        n = self.rewards.size
        lengths = {len(x) for x in (self.states, self.actions, self.next_states, self.pair_ids,
                                    self.sides, self.steps, self.clip_ids)}
        if lengths != {n}:
            raise ValidationError("tuple fields have inconsistent lengths")
        if not np.all(np.isfinite(self.rewards)) or np.any(np.abs(self.rewards) > 1.0):
            raise ValidationError("reward labels must lie in [-1, 1]")
        if any(side not in (CHOSEN, REJECTED) for side in self.sides):
            raise ValidationError("side must be 'chosen' or 'rejected'")

    def __len__(self) -> int:
        return self.rewards.size

    def with_rewards(self, rewards, **metadata) -> "RewardLabeledDataset":
        return RewardLabeledDataset(self.states, self.actions, rewards, self.next_states,
                                    self.pair_ids, self.sides, self.steps, self.clip_ids,
                                    {**self.metadata, **metadata})

    def state_action_means(self, state_count: int, action_count: int):
        """Mean reward and visit count per (s, a); unvisited entries have mean 0."""
        flat = self.states * action_count + self.actions
        counts = np.bincount(flat, minlength=state_count * action_count).astype(float)
        sums = np.bincount(flat, weights=self.rewards, minlength=state_count * action_count)
        means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
        return means.reshape(state_count, action_count), counts.reshape(state_count, action_count)

    # -- JSON Lines -----------------------------------------------------

    def lines(self):
        for i in range(len(self)):
            yield json.dumps({
                "s": int(self.states[i]), "a": int(self.actions[i]), "r": float(self.rewards[i]),
                "s2": int(self.next_states[i]), "pair_id": self.pair_ids[i],
                "side": self.sides[i], "t": int(self.steps[i]), "clip": self.clip_ids[i],
            })

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    @classmethod
    def load(cls, path) -> "RewardLabeledDataset":
        cols = {k: [] for k in ("s", "a", "r", "s2", "pair_id", "side", "t", "clip")}
        for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                for key in cols:
                    cols[key].append(rec[key] if key != "clip" else rec.get("clip", ""))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed labeled tuple ({exc})", line=number) from None
        return cls(cols["s"], cols["a"], cols["r"], cols["s2"], tuple(cols["pair_id"]),
                   tuple(cols["side"]), cols["t"], tuple(cols["clip"]))


def _flatten(dataset: PreferenceDataset, rewards: np.ndarray, chosen_first: np.ndarray,
             metadata: dict | None = None) -> RewardLabeledDataset:
    """Build tuples from (N, 2, T) rewards in clip_1/clip_2 order.

    ``chosen_first[i]`` says whether clip_1 of pair i is the chosen side.
    """
    arr = dataset.arrays
    N, T = len(dataset), dataset.clip_length
    sides = []
    pair_ids = []
    clip_ids = []
    for i, pair in enumerate(dataset.pairs):
        first, second = (CHOSEN, REJECTED) if chosen_first[i] else (REJECTED, CHOSEN)
        sides.extend([first] * T + [second] * T)
        pair_ids.extend([pair.pair_id] * (2 * T))
        clip_ids.extend([pair.clip_1.clip_id] * T + [pair.clip_2.clip_id] * T)
    steps = np.tile(np.arange(T), 2 * N)
    return RewardLabeledDataset(
        arr["states"].reshape(-1), arr["actions"].reshape(-1), np.asarray(rewards).reshape(-1),
        arr["next_states"].reshape(-1), tuple(pair_ids), tuple(sides), steps, tuple(clip_ids),
        metadata or {},
    )


def binary_label(dataset: PreferenceDataset) -> RewardLabeledDataset:
    """+1 on every step of the preferred clip, -1 on every step of the other.

    Repeated state-actions keep one tuple per occurrence, so any learner that
    averages per (s, a) sees the mean of their +/-1 labels.
    """
    if not dataset.is_single_label:
        raise ValidationError("binary_label needs one label per pair; use multilabel_label")
    first_chosen = np.array([p.labels[0] == 1 for p in dataset.pairs], dtype=bool)
    sign = np.where(first_chosen, 1.0, -1.0)
    rewards = np.empty((len(dataset), 2, dataset.clip_length))
    rewards[:, 0, :] = sign[:, None]
    rewards[:, 1, :] = -sign[:, None]
    return _flatten(dataset, rewards, first_chosen, {"method": "brl"})


# ---------------------------------------------------------------------------
# brute-force optimal labels


@dataclass(frozen=True)
class OptimalLabels:
    """Minimiser of the summed link-loss over one shared label per (s, a)."""

    values: dict[tuple[int, int], float]
    step_rewards: np.ndarray  # (N, 2, T), clip_1/clip_2 order
    objective: float
    exact: bool

    def as_dataset(self, dataset: PreferenceDataset) -> RewardLabeledDataset:
        first_chosen = np.array([p.labels[0] == 1 for p in dataset.pairs], dtype=bool)
        return _flatten(dataset, self.step_rewards, first_chosen, {"method": "optimal"})


def _components(sa_per_pair: list[set]) -> list[list[int]]:
    parent = list(range(len(sa_per_pair)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    owner: dict = {}
    for i, sas in enumerate(sa_per_pair):
        for sa in sas:
            if sa in owner:
                parent[find(i)] = find(owner[sa])
            else:
                owner[sa] = i
    groups: dict[int, list[int]] = {}
    for i in range(len(sa_per_pair)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def _objective(F: LinkLossFunction, coef: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return F(labels @ coef.T).sum(axis=-1)


def _enumerate(F, coef, grid, chunk=1 << 18):
    """Exact lexicographically-first grid minimiser of sum_i F(coef_i . r)."""
    k, G = coef.shape[1], grid.size
    total = G**k
    radix = G ** np.arange(k - 1, -1, -1)
    best_val, best_idx = np.inf, 0
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        digits = (idx[:, None] // radix) % G
        vals = _objective(F, coef, grid[digits])
        low = vals.min()
        tol = 1e-12 * max(1.0, abs(low))
        if low < best_val - tol:
            best_val = low
            best_idx = int(idx[np.argmax(vals <= low + tol)])
    digits = (best_idx // radix) % G
    return grid[digits], float(best_val)


def _coordinate_descent(F, coef, grid, restarts, rng):
    k = coef.shape[1]
    best_r, best_val = None, np.inf
    for r in range(restarts):
        digits = np.zeros(k, dtype=int) if r == 0 else rng.integers(0, grid.size, k)
        labels = grid[digits]
        current = _objective(F, coef, labels)
        improved = True
        while improved:
            improved = False
            for j in range(k):
                trial = np.repeat(labels[None, :], grid.size, axis=0)
                trial[:, j] = grid
                vals = _objective(F, coef, trial)
                m = int(np.argmin(vals))
                if vals[m] < current - 1e-12 * max(1.0, abs(current)):
                    labels, current, improved = trial[m], vals[m], True
        if current < best_val - 1e-12 * max(1.0, abs(best_val)):
            best_r, best_val = labels.copy(), float(current)
    return best_r, best_val


def solve_optimal_labels(
    dataset: PreferenceDataset,
    F: LinkLossFunction,
    grid_step: float = 0.5,
    cap: int = 12,
    max_points: int = 10**8,
    restarts: int = 16,
    seed: int = 0,
) -> OptimalLabels:
    """Grid minimiser of sum_i F(sum_t r_chosen - sum_t r_rejected), one label per (s, a).

    Pairs that share no state-action are independent, so the search runs per
    connected block of pairs; ``cap`` bounds the number of distinct
    state-actions in any one block. A block whose grid has more than
    ``max_points`` points is searched by multi-start coordinate descent and
    the result is flagged ``exact=False``. Exact ties resolve to the
    lexicographically smallest label vector, with (s, a) keys in sorted order.
    """
    if not dataset.is_single_label:
        raise ValidationError("optimal labels are defined for single-label datasets")
    if grid_step <= 0:
        raise ParameterError("grid_step must be positive")
    cells = 2.0 / grid_step
    if abs(cells - round(cells)) > 1e-9:
        raise ParameterError(f"grid_step {grid_step} does not divide 2 evenly")
    grid = np.linspace(-1.0, 1.0, int(round(cells)) + 1)

    ori = dataset.oriented
    chosen = list(zip(ori["states"][:, 0].tolist(), ori["actions"][:, 0].tolist()))
    rejected = list(zip(ori["states"][:, 1].tolist(), ori["actions"][:, 1].tolist()))
    pair_sas = [set(zip(cs, ca)) | set(zip(rs, ra)) for (cs, ca), (rs, ra) in zip(chosen, rejected)]

    values: dict[tuple[int, int], float] = {}
    objective = 0.0
    exact = True
    rng = np.random.default_rng(seed)
    for block in _components(pair_sas):
        keys = sorted(set().union(*(pair_sas[i] for i in block)))
        if len(keys) > cap:
            raise SizeError(
                f"{len(keys)} distinct state-actions in one block exceeds cap {cap}; "
                "use a reward model to approximate the optimal labels"
            )
        index = {sa: j for j, sa in enumerate(keys)}
        coef = np.zeros((len(block), len(keys)))
        for row, i in enumerate(block):
            for sa in zip(*chosen[i]):
                coef[row, index[sa]] += 1.0
            for sa in zip(*rejected[i]):
                coef[row, index[sa]] -= 1.0
        active = np.flatnonzero(np.any(coef != 0, axis=0))
        labels = np.full(len(keys), -1.0)  # irrelevant labels take the smallest grid value
        if active.size:
            sub = coef[:, active]
            if grid.size ** active.size <= max_points:
                sol, val = _enumerate(F, sub, grid)
            else:
                sol, val = _coordinate_descent(F, sub, grid, restarts, rng)
                exact = False
            labels[active] = sol
        else:
            val = float(_objective(F, coef, labels))
        objective += val
        values.update({sa: float(labels[j]) for sa, j in index.items()})

    arr = dataset.arrays
    step_rewards = np.vectorize(lambda s, a: values[(s, a)], otypes=[float])(
        arr["states"], arr["actions"])
    return OptimalLabels(values, step_rewards, objective, exact)


def preference_objective(dataset: PreferenceDataset, F: LinkLossFunction,
                         labels: dict[tuple[int, int], float]) -> float:
    """sum_i F(return gap) for a given per-(s, a) label assignment."""
    ori = dataset.oriented
    look = np.vectorize(lambda s, a: labels[(s, a)], otypes=[float])
    r = look(ori["states"], ori["actions"])
    return float(np.sum(F(r[:, 0].sum(axis=1) - r[:, 1].sum(axis=1))))


# ---------------------------------------------------------------------------
# multiple labels per pair


def multilabel_targets(dataset: PreferenceDataset, link: LinkFunction, regularization: float = 1e-6):
    """Per-pair target return gaps.

    Returns ``(gap, p_bar, saturated)`` arrays of length N. The empirical
    preference rate is clamped to [delta, 1 - delta] with
    delta = 1 / (2 * #labels) before inverting the link.
    """
    if regularization <= 0:
        raise ParameterError("regularization must be positive")
    T = dataset.clip_length
    counts = dataset.label_counts
    n = counts.sum(axis=1)
    delta = 1.0 / (2.0 * n)
    p_bar = np.clip(counts[:, 0] / n, delta, 1.0 - delta)
    raw = np.atleast_1d(link.inverse(p_bar))
    gap = np.clip(raw, -2.0 * T, 2.0 * T)
    saturated = raw != gap
    # uniform spread is optimal while the kink of |p - f| dominates the L2 pull
    for i in range(gap.size):
        slope = _link_slope(link, gap[i])
        if regularization * abs(gap[i]) / T > slope:
            gap[i] = _scalar_gap(link, p_bar[i], regularization, T, gap[i])
            saturated[i] = True
    return gap, p_bar, saturated


def _link_slope(link: LinkFunction, x: float) -> float:
    if link.kind == "sigmoid":
        p = link(x)
        return p * (1.0 - p)
    return link.slope if 0.0 < link.slope * x + link.offset < 1.0 else 0.0


def _scalar_gap(link, p_bar, lam, T, target):
    lo, hi = sorted((0.0, float(target)))
    if hi - lo < 1e-15:
        return 0.0
    res = minimize_scalar(lambda d: abs(p_bar - link(d)) + lam * d * d / (2 * T),
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    return float(res.x)


def multilabel_label(dataset: PreferenceDataset, link: LinkFunction | None = None,
                     regularization: float = 1e-6) -> RewardLabeledDataset:
    """Smallest-norm labels realising link^-1 of each pair's empirical preference rate.

    clip_1 steps get +gap/(2T) and clip_2 steps -gap/(2T). The chosen side is
    clip_1 when its empirical rate is at least 1/2.
    """
    link = link or dataset.link
    T = dataset.clip_length
    gap, p_bar, saturated = multilabel_targets(dataset, link, regularization)
    per_step = np.clip(gap / (2.0 * T), -1.0, 1.0)
    rewards = np.empty((len(dataset), 2, T))
    rewards[:, 0, :] = per_step[:, None]
    rewards[:, 1, :] = -per_step[:, None]
    meta = {
        "method": "multilabel",
        "regularization": regularization,
        "clamp_delta": "1/(2*labels)",
        "saturated_pairs": int(np.sum(saturated)),
    }
    return _flatten(dataset, rewards, p_bar >= 0.5, meta)


def regularized_pair_loss(r_first: np.ndarray, r_second: np.ndarray, p_bar: float,
                          link: LinkFunction, regularization: float) -> float:
    """|p_bar - f(sum r_first - sum r_second)| + lambda * ||r||^2 for one pair."""
    gap = np.sum(r_first) - np.sum(r_second)
    return abs(p_bar - link(gap)) + regularization * (np.sum(r_first**2) + np.sum(r_second**2))


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class RewardGapReport:
    mean_chosen: float
    mean_rejected: float
    gap: float


def effective_rewards(labeled: RewardLabeledDataset, aggregate: str = "clip") -> np.ndarray:
    """Per-tuple reward after averaging over repeated occurrences.

    ``clip`` averages tuples sharing (clip_id, t), i.e. the same clip step
    compared in several pairs. ``state_action`` averages over equal (s, a).
    ``none`` returns the raw labels.
    """
    if aggregate == "none":
        return labeled.rewards.copy()
    if aggregate == "clip":
        keys = [f"{c}#{t}" for c, t in zip(labeled.clip_ids, labeled.steps.tolist())]
    elif aggregate == "state_action":
        keys = list(zip(labeled.states.tolist(), labeled.actions.tolist()))
    else:
        raise ParameterError(f"unknown aggregate {aggregate!r}")
    _, inverse = np.unique(np.array([str(k) for k in keys]), return_inverse=True)
    sums = np.bincount(inverse, weights=labeled.rewards)
    counts = np.bincount(inverse)
    return sums[inverse] / counts[inverse]


def reward_gap(labeled: RewardLabeledDataset, aggregate: str = "clip") -> RewardGapReport:
    """Mean effective reward on chosen steps minus that on rejected steps."""
    r = effective_rewards(labeled, aggregate)
    sides = np.array(labeled.sides)
    chosen, rejected = r[sides == CHOSEN], r[sides == REJECTED]
    if chosen.size == 0 or rejected.size == 0:
        raise ReportError("reward gap needs both chosen and rejected tuples")
    mc, mr = float(chosen.mean()), float(rejected.mean())
    return RewardGapReport(mc, mr, mc - mr)
