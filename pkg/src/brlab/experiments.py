"""Experiment pipelines: generate data, label it, fit a learner, evaluate, write CSV."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import re
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .env import Mdp, make_gridworld, make_random_mdp, evaluate_policy, save_mdp
from .errors import BrlabError, ParameterError
from .labeling import RewardLabeledDataset, binary_label, multilabel_label, reward_gap
from .links import LinkFunction, LinkLossFunction
from .offline import ALGORITHMS, LearnerConfig, fit_q, oracle_labels
from .prefdata import (
    PreferenceDataset,
    behavior_preset,
    generate_multilabel_dataset,
    generate_overlap_dataset,
    save_dataset,
    subsample,
)
from .reward_model import TrainConfig, label_with_model, make_reward_model, save_model, train

METHODS = ("brl", "rm", "multilabel", "oracle")
PREFERENCE_METHOD = "preference"  # method column for learners that consume preferences
OUTPUT_ROOT_ENV = "BRL_OUTPUT_ROOT"
CSV_COLUMNS = ("experiment", "method", "learner", "seed", "normalized_score", "reward_gap",
               "dataset_size", "wall_time", "config_hash", "error")


# ---------------------------------------------------------------------------
# environments


def make_environment(name: str) -> Mdp:
    """``gridN`` (N x N, slip 0.1), ``gridN-det`` (no slip) or ``randomS`` (S states, 4 actions)."""
    m = re.fullmatch(r"grid(\d+)(-det)?", name)
    if m:
        n = int(m.group(1))
        slip = 0.0 if m.group(2) else 0.1
        return make_gridworld(n, n, slip_probability=slip)
    m = re.fullmatch(r"random(\d+)", name)
    if m:
        return make_random_mdp(int(m.group(1)), 4, seed=0)
    raise ParameterError(f"unknown environment {name!r}; use gridN, gridN-det or randomS")


def parse_overlap(text: str | None) -> tuple[float, int] | None:
    """'0.2x4' -> (0.2, 4)."""
    if text in (None, "", "none"):
        return None
    m = re.fullmatch(r"\s*([0-9.]+)\s*[xX]\s*(\d+)\s*", text)
    if not m:
        raise ParameterError(f"overlap must look like 0.2x4, got {text!r}")
    return float(m.group(1)), int(m.group(2))


def parse_link(name: str) -> LinkFunction:
    if name == "sigmoid":
        return LinkFunction("sigmoid")
    m = re.fullmatch(r"linear(?::([0-9.eE+-]+))?", name)
    if m:
        return LinkFunction("linear", float(m.group(1) or 1.0 / 80.0), 0.5)
    raise ParameterError(f"unknown link {name!r}; use sigmoid or linear[:slope]")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "main"
    env: str = "grid5"
    behavior: str = "medium"
    n_pairs: int = 500
    clip_length: int = 20
    link: str = "sigmoid"
    overlap: str | None = None
    labels_per_pair: int = 1
    methods: tuple[str, ...] = ("oracle", "brl", "rm")
    learners: tuple[str, ...] = ("pessimistic_fqi",)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    fractions: tuple[float, ...] = (0.1, 0.5, 1.0)
    penalty: float = 1.0
    count_penalty: float = 2.0
    rm_epochs: int = 300
    rm_learning_rate: float = 0.1
    rm_features: str = "tabular"
    output_dir: str = "results"

    def __post_init__(self):
        for key in ("methods", "learners", "seeds", "fractions"):
            value = getattr(self, key)
            if isinstance(value, (str, int, float)):
                value = (value,)
            object.__setattr__(self, key, tuple(value))
        if not self.seeds:
            raise ParameterError("seeds must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ParameterError(f"unknown labelling methods {bad}; choose from {METHODS}")
        bad = [a for a in self.learners if a not in ALGORITHMS]
        if bad:
            raise ParameterError(f"unknown learners {bad}; choose from {ALGORITHMS}")
        if any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ParameterError("fractions must lie in (0, 1]")
        if self.n_pairs < 1 or self.clip_length < 1 or self.labels_per_pair < 1:
            raise ParameterError("n_pairs, clip_length and labels_per_pair must be >= 1")
        parse_overlap(self.overlap)
        parse_link(self.link)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config {path}: {exc}") from None
        return cls.from_dict(doc)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        doc = self.to_json()
        doc.pop("output_dir")
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def output_path(self) -> Path:
        """``output_dir`` resolved against the output-root environment variable."""
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        return out if out.is_absolute() or not root else Path(root) / out


@dataclass
class ResultRow:
    experiment: str
    method: str
    learner: str
    seed: int | str
    normalized_score: float | str
    reward_gap: float | str | None
    dataset_size: int
    wall_time: float | str
    config_hash: str
    error: str = ""

    def as_csv(self) -> list[str]:
        out = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(f"{v:.6f}")
            else:
                out.append(str(v))
        return out


# ---------------------------------------------------------------------------
# stages


def generate(config: ExperimentConfig, mdp: Mdp, seed: int) -> PreferenceDataset:
    behavior = behavior_preset(mdp, config.behavior)
    link = parse_link(config.link)
    overlap = parse_overlap(config.overlap)
    if overlap is not None:
        if config.labels_per_pair != 1:
            raise ParameterError("overlap datasets carry one label per pair")
        return generate_overlap_dataset(mdp, behavior, config.n_pairs, overlap[0], overlap[1],
                                        config.clip_length, link, seed)
    return generate_multilabel_dataset(mdp, behavior, config.n_pairs, config.labels_per_pair,
                                       config.clip_length, link, seed)


def fit_reward_model(config: ExperimentConfig, mdp: Mdp, dataset: PreferenceDataset, seed: int):
    model = make_reward_model(mdp, config.rm_features, seed=seed)
    tc = TrainConfig(learning_rate=config.rm_learning_rate, epochs=config.rm_epochs, seed=seed,
                     F=LinkLossFunction("sigmoid_nll"))
    model, _ = train(model, dataset, tc)
    return model


def label(config: ExperimentConfig, mdp: Mdp, dataset: PreferenceDataset, method: str,
          seed: int, artifacts: Path | None = None) -> RewardLabeledDataset:
    if method == "brl":
        return binary_label(dataset)
    if method == "multilabel":
        return multilabel_label(dataset)
    if method == "oracle":
        return oracle_labels(mdp, dataset)
    if method == "rm":
        model = fit_reward_model(config, mdp, dataset, seed)
        if artifacts is not None:
            save_model(model, artifacts / f"model_rm_seed{seed}.json")
        return label_with_model(model, dataset)
    raise ParameterError(f"unknown labelling method {method!r}")


def learner_config(config: ExperimentConfig, algorithm: str, seed: int) -> LearnerConfig:
    return LearnerConfig(algorithm=algorithm, penalty=config.penalty,
                         count_penalty=config.count_penalty, seed=seed)


def _jobs(config: ExperimentConfig):
    """(method, learner) combinations; preference-native learners skip labelling."""
    for learner in config.learners:
        if learner == "preference_bellman":
            yield PREFERENCE_METHOD, learner
        else:
            for method in config.methods:
                yield method, learner


def run_pipeline(config: ExperimentConfig, mdp: Mdp, dataset: PreferenceDataset, seed: int,
                 experiment: str, artifacts: Path | None = None) -> list[ResultRow]:
    """label -> fit -> evaluate for every (method, learner); failures become error rows."""
    rows = []
    labelled: dict[str, RewardLabeledDataset] = {}
    for method, learner in _jobs(config):
        start = time.perf_counter()
        gap = None
        try:
            if method == PREFERENCE_METHOD:
                data = dataset
            else:
                if method not in labelled:
                    labelled[method] = label(config, mdp, dataset, method, seed, artifacts)
                    if artifacts is not None:
                        labelled[method].save(artifacts / f"labels_{method}_seed{seed}.jsonl")
                data = labelled[method]
                if method in ("brl", "rm"):
                    gap = reward_gap(data).gap
            q = fit_q(data, mdp.state_count, mdp.action_count, learner_config(config, learner, seed))
            if artifacts is not None:
                q.save(artifacts / f"q_{method}_{learner}_seed{seed}.json")
            score = evaluate_policy(mdp, q.policy()).normalized_score
            error = ""
        except (BrlabError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            score, error = float("nan"), f"{type(exc).__name__}: {exc}"
        rows.append(ResultRow(experiment, method, learner, seed, score, gap, len(dataset),
                              time.perf_counter() - start, config.config_hash, error))
    return rows


def aggregate_rows(rows: list[ResultRow]) -> list[ResultRow]:
    """One 'mean ± std' row per (experiment, method, learner), std over seeds (ddof 0)."""
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.experiment, r.method, r.learner), []).append(r)
    out = []
    for (exp, method, learner), members in groups.items():
        ok = [r for r in members if not r.error]
        scores = np.array([r.normalized_score for r in ok], dtype=float)
        gaps = np.array([r.reward_gap for r in ok if r.reward_gap is not None], dtype=float)
        out.append(ResultRow(
            exp, method, learner, "aggregate",
            format_mean_std(scores) if ok else "",
            format_mean_std(gaps) if gaps.size else None,
            members[0].dataset_size,
            f"{sum(r.wall_time for r in members):.6f}",
            members[0].config_hash,
            f"{len(members) - len(ok)} failed" if len(ok) < len(members) else "",
        ))
    return out


def format_mean_std(values: np.ndarray) -> str:
    values = np.asarray(values, dtype=float)
    return f"{values.mean():.2f} ± {values.std():.2f}"


def write_csv(rows: list[ResultRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# experiments


def _prepare(config: ExperimentConfig, artifacts: Path | None):
    mdp = make_environment(config.env)
    if artifacts is not None:
        artifacts.mkdir(parents=True, exist_ok=True)
        save_mdp(mdp, artifacts / "mdp.json")
        (artifacts / "config.json").write_text(json.dumps(config.to_json(), indent=2,
                                                          sort_keys=True) + "\n")
    return mdp


def _dataset_for(config, mdp, seed, artifacts, dataset: PreferenceDataset | None):
    if dataset is not None:
        return dataset
    ds = generate(config, mdp, seed)
    if artifacts is not None:
        save_dataset(ds, artifacts / f"data_seed{seed}.jsonl")
    return ds


def run_experiment(config: ExperimentConfig, dataset: PreferenceDataset | None = None,
                   write: bool = True) -> list[ResultRow]:
    """Main comparison: per seed, one dataset (generated unless given) and every job.

    Returns per-seed rows followed by aggregate rows; with ``write`` the
    artifacts and ``results.csv`` land in the output directory.
    """
    out = config.output_path() if write else None
    mdp = _prepare(config, out)
    rows = []
    for seed in config.seeds:
        ds = _dataset_for(config, mdp, seed, out, dataset)
        rows += run_pipeline(config, mdp, ds, seed, config.name, out)
    rows += aggregate_rows(rows)
    if write:
        write_csv(rows, out / "results.csv")
    return rows


def ablate_size(config: ExperimentConfig, dataset: PreferenceDataset | None = None,
                write: bool = True) -> list[ResultRow]:
    """Score against dataset fraction; pairs are subsampled uniformly per seed."""
    out = config.output_path() if write else None
    mdp = _prepare(config, out)
    rows = []
    for seed in config.seeds:
        full = _dataset_for(config, mdp, seed, out, dataset)
        for fraction in config.fractions:
            ds = subsample(full, fraction, seed)
            rows += run_pipeline(config, mdp, ds, seed, f"{config.name}@{fraction:g}", None)
    rows += aggregate_rows(rows)
    if write:
        write_csv(rows, out / "ablate_size.csv")
    return rows


def ablate_learner(config: ExperimentConfig, dataset: PreferenceDataset | None = None,
                   write: bool = True) -> list[ResultRow]:
    """Every learner on the same datasets."""
    config = replace(config, learners=ALGORITHMS)
    out = config.output_path() if write else None
    mdp = _prepare(config, out)
    rows = []
    for seed in config.seeds:
        ds = _dataset_for(config, mdp, seed, out, dataset)
        rows += run_pipeline(config, mdp, ds, seed, config.name, None)
    rows += aggregate_rows(rows)
    if write:
        write_csv(rows, out / "ablate_learner.csv")
    return rows


def mean_scores(rows: list[ResultRow]) -> dict[tuple[str, str, str], float]:
    """Mean normalised score over successful per-seed rows, keyed by (experiment, method, learner)."""
    acc: dict[tuple, list[float]] = {}
    for r in rows:
        if r.seed == "aggregate" or r.error:
            continue
        acc.setdefault((r.experiment, r.method, r.learner), []).append(float(r.normalized_score))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def hash_tree(root, skip_columns: tuple[str, ...] = ("wall_time",)) -> dict[str, str]:
    """sha256 of every file under ``root``; CSV files drop ``skip_columns`` first."""
    root = Path(root)
    out = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if path.suffix == ".csv":
            rows = read_csv(path)
            keep = [c for c in CSV_COLUMNS if c not in skip_columns]
            blob = json.dumps([[r.get(c, "") for c in keep] for r in rows]).encode()
        else:
            blob = path.read_bytes()
        out[str(path.relative_to(root))] = hashlib.sha256(blob).hexdigest()
    return out

