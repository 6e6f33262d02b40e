"""Synthetic preference datasets over trajectory clips.

Clips are contiguous windows of behaviour-policy rollouts. Each pair is
labelled by Bernoulli trials with probability link(return_1 - return_2)
computed from the MDP's true (already bounded) rewards.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from .env import (
    DEFAULT_CLIP_LENGTH,
    Behavior,
    BehaviorMixture,
    Mdp,
    Policy,
    Step,
    TrajectoryClip,
    clip_return,
    rollout,
)
from .errors import GenerationError, ParameterError, ParseError, ValidationError
from .links import LinkFunction

FORMAT_VERSION = 1
UNIQUENESS_MODES = ("avoid", "require", "ignore")


@dataclass(frozen=True)
class PreferencePair:
    """Two clips and one or more labels; label 1 prefers ``clip_1``."""

    pair_id: str
    clip_1: TrajectoryClip
    clip_2: TrajectoryClip
    labels: tuple[int, ...]

    def __post_init__(self):
        if not self.labels:
            raise ValidationError(f"pair {self.pair_id} has no labels")
        bad = [x for x in self.labels if isinstance(x, bool) or x not in (1, 2)]
        if bad:
            raise ValidationError(f"pair {self.pair_id} has invalid label {bad[0]!r} (expected 1 or 2)")
        object.__setattr__(self, "labels", tuple(int(x) for x in self.labels))
        if len(self.clip_1) != len(self.clip_2):
            raise ValidationError(f"pair {self.pair_id} clips differ in length")

    @property
    def is_single_label(self) -> bool:
        return len(self.labels) == 1

    @property
    def preference_rate(self) -> float:
        """Fraction of labels preferring ``clip_1``."""
        return self.labels.count(1) / len(self.labels)

    def chosen_rejected(self) -> tuple[TrajectoryClip, TrajectoryClip]:
        if not self.is_single_label:
            raise ValidationError(f"pair {self.pair_id} carries {len(self.labels)} labels")
        if self.labels[0] == 1:
            return self.clip_1, self.clip_2
        return self.clip_2, self.clip_1

    def swapped(self) -> "PreferencePair":
        return PreferencePair(self.pair_id, self.clip_2, self.clip_1, tuple(3 - x for x in self.labels))


@dataclass(frozen=True, eq=False)
class PreferenceDataset:
    pairs: tuple[PreferencePair, ...]
    clip_length: int
    link: LinkFunction = field(default_factory=LinkFunction)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        self.validate()

    def validate(self) -> None:
        seen_ids = set()
        clips: dict[str, TrajectoryClip] = {}
        for pair in self.pairs:
            if pair.pair_id in seen_ids:
                raise ValidationError(f"duplicate pair_id {pair.pair_id}")
            seen_ids.add(pair.pair_id)
            for clip in (pair.clip_1, pair.clip_2):
                if len(clip) != self.clip_length:
                    raise ValidationError(
                        f"pair {pair.pair_id}: clip {clip.clip_id} has length {len(clip)}, "
                        f"expected {self.clip_length}"
                    )
                prior = clips.setdefault(clip.clip_id, clip)
                if prior.steps != clip.steps:
                    raise ValidationError(f"clip_id {clip.clip_id} reused with different steps")

    def __len__(self) -> int:
        return len(self.pairs)

    def __eq__(self, other):
        return (
            isinstance(other, PreferenceDataset)
            and self.pairs == other.pairs
            and self.clip_length == other.clip_length
            and self.link == other.link
        )

    __hash__ = None

    @cached_property
    def overlap_manifest(self) -> dict[str, int]:
        """clip_id -> number of pairs it occurs in."""
        counts = Counter()
        for pair in self.pairs:
            counts[pair.clip_1.clip_id] += 1
            counts[pair.clip_2.clip_id] += 1
        return dict(counts)

    @cached_property
    def duplicate_state_actions(self) -> dict[tuple[int, int], int]:
        counts = Counter()
        for pair in self.pairs:
            counts.update(pair.clip_1.state_actions())
            counts.update(pair.clip_2.state_actions())
        return {sa: n for sa, n in counts.items() if n > 1}

    @property
    def no_overlap(self) -> bool:
        """True when every (state, action) occurs exactly once in the dataset."""
        return not self.duplicate_state_actions

    @property
    def is_single_label(self) -> bool:
        return all(p.is_single_label for p in self.pairs)

    @cached_property
    def arrays(self) -> dict[str, np.ndarray]:
        """(N, 2, T) state/action/next-state arrays in clip_1/clip_2 order."""
        states = np.array([[p.clip_1.states, p.clip_2.states] for p in self.pairs], dtype=int)
        actions = np.array([[p.clip_1.actions, p.clip_2.actions] for p in self.pairs], dtype=int)
        nxt = np.array([[p.clip_1.next_states, p.clip_2.next_states] for p in self.pairs], dtype=int)
        shape = (len(self.pairs), 2, self.clip_length)
        return {
            "states": states.reshape(shape),
            "actions": actions.reshape(shape),
            "next_states": nxt.reshape(shape),
        }

    @cached_property
    def oriented(self) -> dict[str, np.ndarray]:
        """(N, 2, T) arrays with the chosen clip first; single-label datasets only."""
        if not self.is_single_label:
            raise ValidationError("orientation requires exactly one label per pair")
        flip = np.array([p.labels[0] == 2 for p in self.pairs], dtype=bool)
        out = {}
        for key, arr in self.arrays.items():
            arr = arr.copy()
            arr[flip] = arr[flip][:, ::-1]
            out[key] = arr
        return out

    @cached_property
    def label_counts(self) -> np.ndarray:
        """(N, 2) counts of labels preferring clip_1 and clip_2."""
        return np.array([[p.labels.count(1), p.labels.count(2)] for p in self.pairs], dtype=float)


# ---------------------------------------------------------------------------
# behaviour presets


BEHAVIOR_PRESETS = ("random", "expert", "medium", "medium-expert", "medium-replay")


def behavior_preset(mdp: Mdp, name: str) -> Behavior:
    """Discrete analogues of the D4RL dataset flavours."""
    opt = mdp.optimal_policy
    if name == "random":
        return Policy.uniform(mdp.state_count, mdp.action_count)
    if name == "expert":
        return opt
    if name == "medium":
        return opt.epsilon_greedy(0.5)
    if name == "medium-expert":
        return BehaviorMixture(((0.5, opt), (0.5, opt.epsilon_greedy(0.5))))
    if name == "medium-replay":
        return BehaviorMixture(tuple((0.25, opt.epsilon_greedy(e)) for e in (0.2, 0.5, 0.8, 1.0)))
    raise ParameterError(f"unknown behavior preset {name!r}; choose from {BEHAVIOR_PRESETS}")


# ---------------------------------------------------------------------------
# generation


def draw_labels(
    mdp: Mdp,
    clip_1: TrajectoryClip,
    clip_2: TrajectoryClip,
    link: LinkFunction,
    count: int,
    rng: np.random.Generator,
) -> tuple[int, ...]:
    p = link(clip_return(mdp, clip_1) - clip_return(mdp, clip_2))
    return tuple(np.where(rng.random(count) < p, 1, 2).tolist())


class _ClipSampler:
    """Draws windows from fresh rollouts, steering away from reused state-actions."""

    def __init__(self, mdp, behavior, clip_length, rollout_length, uniqueness, retry_budget,
                 expected_steps):
        if uniqueness not in UNIQUENESS_MODES:
            raise ParameterError(f"uniqueness must be one of {UNIQUENESS_MODES}")
        self.mdp = mdp
        self.behavior = behavior
        self.T = clip_length
        self.rollout_length = max(rollout_length or 2 * clip_length, clip_length)
        self.uniqueness = uniqueness
        self.retry_budget = retry_budget
        self.used: set[tuple[int, int]] = set()
        self.count = 0
        capacity = mdp.state_count * mdp.action_count
        # no point retrying when the dataset cannot fit in the state-action space
        self.try_unique = uniqueness == "require" or (
            uniqueness == "avoid" and expected_steps <= capacity
        )

    def _draw(self, rng) -> list[Step]:
        policy = self.behavior.pick(rng) if isinstance(self.behavior, BehaviorMixture) else self.behavior
        steps = rollout(self.mdp, policy, self.rollout_length, rng)
        start = int(rng.integers(0, self.rollout_length - self.T + 1))
        return steps[start:start + self.T]

    def _collision(self, steps) -> tuple[int, int] | None:
        seen = set()
        for s, a, _ in steps:
            sa = (s, a)
            if sa in self.used or sa in seen:
                return sa
            seen.add(sa)
        return None

    def sample(self, rng) -> TrajectoryClip:
        first = steps = self._draw(rng)
        if self.try_unique:
            attempts = 0
            while (hit := self._collision(steps)) is not None:
                attempts += 1
                if attempts > self.retry_budget:
                    if self.uniqueness == "require":
                        raise GenerationError(
                            f"retry budget {self.retry_budget} exhausted; state-action {hit} "
                            "collides with an earlier occurrence"
                        )
                    steps = first
                    break
                steps = self._draw(rng)
        self.used.update((s, a) for s, a, _ in steps)
        clip = TrajectoryClip(tuple(steps), f"c{self.count:06d}")
        self.count += 1
        return clip


def _check_common(n_pairs: int, clip_length: int) -> None:
    if n_pairs < 1:
        raise ParameterError(f"n_pairs must be >= 1, got {n_pairs}")
    if clip_length < 1:
        raise ParameterError(f"clip_length must be >= 1, got {clip_length}")


def _pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_multilabel_dataset(
    mdp: Mdp,
    behavior: Behavior,
    n_pairs: int,
    labels_per_pair: int,
    clip_length: int = DEFAULT_CLIP_LENGTH,
    link: LinkFunction | None = None,
    seed: int = 0,
    *,
    rollout_length: int | None = None,
    uniqueness: str = "avoid",
    retry_budget: int = 10,
) -> PreferenceDataset:
    """Pairs of fresh clips, each with ``labels_per_pair`` independent Bernoulli labels."""
    _check_common(n_pairs, clip_length)
    if labels_per_pair < 1:
        raise ParameterError(f"labels_per_pair must be >= 1, got {labels_per_pair}")
    link = link or LinkFunction()
    sampler = _ClipSampler(mdp, behavior, clip_length, rollout_length, uniqueness,
                           retry_budget, 2 * n_pairs * clip_length)
    pairs = []
    for i in range(n_pairs):
        rng = _pair_rng(seed, i)
        c1 = sampler.sample(rng)
        c2 = sampler.sample(rng)
        labels = draw_labels(mdp, c1, c2, link, labels_per_pair, rng)
        pairs.append(PreferencePair(f"p{i:06d}", c1, c2, labels))
    return PreferenceDataset(tuple(pairs), clip_length, link)


def generate_dataset(
    mdp: Mdp,
    behavior: Behavior,
    n_pairs: int,
    clip_length: int = DEFAULT_CLIP_LENGTH,
    link: LinkFunction | None = None,
    seed: int = 0,
    *,
    rollout_length: int | None = None,
    uniqueness: str = "avoid",
    retry_budget: int = 10,
) -> PreferenceDataset:
    """One Bernoulli label per pair.

    ``uniqueness`` controls state-action reuse: ``avoid`` resamples colliding
    clips up to ``retry_budget`` times and then keeps the overlap (retries
    are skipped outright when the MDP is too small to host a unique
    dataset), ``require`` raises instead, ``ignore`` never resamples.
    """
    return generate_multilabel_dataset(
        mdp, behavior, n_pairs, 1, clip_length, link, seed,
        rollout_length=rollout_length, uniqueness=uniqueness, retry_budget=retry_budget,
    )


def generate_overlap_dataset(
    mdp: Mdp,
    behavior: Behavior,
    pool_size: int,
    reuse_fraction: float,
    reuse_multiplier: int,
    clip_length: int = DEFAULT_CLIP_LENGTH,
    link: LinkFunction | None = None,
    seed: int = 0,
    *,
    rollout_length: int | None = None,
    uniqueness: str = "avoid",
    retry_budget: int = 10,
) -> PreferenceDataset:
    """Dataset of ``pool_size`` comparisons where some clips are compared repeatedly.

    ``round(reuse_fraction * pool_size)`` hub clips are each compared against
    ``reuse_multiplier`` distinct fresh partners; the remaining comparisons
    pair fresh clips. The share of pairs touching a hub is therefore
    ``reuse_fraction * reuse_multiplier`` (0.2 x 4 gives 80%).
    """
    _check_common(pool_size, clip_length)
    if not 0.0 <= reuse_fraction <= 1.0:
        raise ParameterError(f"reuse_fraction must lie in [0, 1], got {reuse_fraction}")
    if reuse_multiplier < 2:
        raise ParameterError(f"reuse_multiplier must be >= 2, got {reuse_multiplier}")
    hubs = int(round(reuse_fraction * pool_size))
    if hubs * reuse_multiplier > pool_size:
        raise ParameterError(
            f"pool of {pool_size} comparisons cannot host {hubs} clips x {reuse_multiplier} "
            "comparisons each"
        )
    link = link or LinkFunction()
    fresh_pairs = pool_size - hubs * reuse_multiplier
    total_clips = hubs + hubs * reuse_multiplier + 2 * fresh_pairs
    sampler = _ClipSampler(mdp, behavior, clip_length, rollout_length, uniqueness,
                           retry_budget, total_clips * clip_length)

    layout: list[tuple[TrajectoryClip, TrajectoryClip]] = []
    for h in range(hubs):
        rng = _pair_rng(seed, h)
        hub = sampler.sample(rng)
        for _ in range(reuse_multiplier):
            partner = sampler.sample(rng)
            layout.append((hub, partner) if rng.random() < 0.5 else (partner, hub))
    for j in range(fresh_pairs):
        rng = _pair_rng(seed, hubs + j)
        layout.append((sampler.sample(rng), sampler.sample(rng)))

    rng = np.random.default_rng([seed, pool_size, 1])
    order = rng.permutation(len(layout))
    pairs = []
    for i, k in enumerate(order):
        c1, c2 = layout[k]
        pairs.append(PreferencePair(f"p{i:06d}", c1, c2, draw_labels(mdp, c1, c2, link, 1, rng)))
    return PreferenceDataset(tuple(pairs), clip_length, link)


def subsample(dataset: PreferenceDataset, fraction: float, seed: int) -> PreferenceDataset:
    """Uniform subset of pairs in original order; ``fraction == 1`` returns every pair."""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(dataset)
    k = int(round(fraction * n))
    if k == 0:
        raise ParameterError(f"fraction {fraction} of {n} pairs leaves no pairs")
    if k == n:
        return dataset
    keep = np.sort(np.random.default_rng(seed).permutation(n)[:k])
    return PreferenceDataset(tuple(dataset.pairs[i] for i in keep), dataset.clip_length,
                             dataset.link)


# ---------------------------------------------------------------------------
# JSON Lines


def _clip_to_json(clip: TrajectoryClip) -> list[dict]:
    return [{"s": s, "a": a, "s2": s2} for s, a, s2 in clip.steps]


def dataset_lines(dataset: PreferenceDataset) -> Iterable[str]:
    header = {"version": FORMAT_VERSION, "T": dataset.clip_length,
              "link_kind": dataset.link.kind, "link": dataset.link.to_json()}
    yield json.dumps(header)
    for p in dataset.pairs:
        yield json.dumps({
            "pair_id": p.pair_id,
            "c1": p.clip_1.clip_id,
            "c2": p.clip_2.clip_id,
            "t1": _clip_to_json(p.clip_1),
            "t2": _clip_to_json(p.clip_2),
            "labels": list(p.labels),
        })


def save_dataset(dataset: PreferenceDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in dataset_lines(dataset):
            fh.write(line + "\n")


def _clip_from_json(steps, clip_id, pair_id) -> TrajectoryClip:
    try:
        return TrajectoryClip(tuple((d["s"], d["a"], d["s2"]) for d in steps), clip_id)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"pair {pair_id}: malformed step ({exc})") from None
    except ValidationError as exc:
        raise ValidationError(f"pair {pair_id}: {exc}") from None


def load_dataset(path) -> PreferenceDataset:
    """Parse a dataset file, validating every invariant on the way in."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append((number, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON ({exc.msg})", line=number) from None
    if not records:
        raise ParseError("empty dataset file", line=1)
    number, header = records[0]
    if not isinstance(header, dict) or "T" not in header or "version" not in header:
        raise ParseError("missing header record {version, T, link_kind}", line=number)
    if header["version"] != FORMAT_VERSION:
        raise ParseError(f"unsupported version {header['version']}", line=number)
    link = LinkFunction.from_json(header.get("link", {"kind": header.get("link_kind", "sigmoid")}))
    pairs = []
    for number, rec in records[1:]:
        try:
            pair_id = rec["pair_id"]
            t1, t2, labels = rec["t1"], rec["t2"], rec["labels"]
        except (KeyError, TypeError):
            raise ParseError("record lacks pair_id/t1/t2/labels", line=number) from None
        c1 = _clip_from_json(t1, rec.get("c1", f"{pair_id}/1"), pair_id)
        c2 = _clip_from_json(t2, rec.get("c2", f"{pair_id}/2"), pair_id)
        pairs.append(PreferencePair(pair_id, c1, c2, tuple(labels)))
    return PreferenceDataset(tuple(pairs), int(header["T"]), link)
