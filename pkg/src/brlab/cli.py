"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import theory
from .errors import BrlabError, ParameterError
from .experiments import (
    METHODS,
    ExperimentConfig,
    ablate_learner,
    ablate_size,
    generate,
    label,
    make_environment,
    run_experiment,
)
from .offline import ALGORITHMS
from .prefdata import load_dataset, save_dataset

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage errors here are 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_list(kind):
    def parse(text):
        try:
            return tuple(kind(x) for x in text.split(",") if x.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--name")
    p.add_argument("--env", help="gridN, gridN-det or randomS (default grid5)")
    p.add_argument("--behavior", choices=("random", "medium", "medium-expert",
                                          "medium-replay", "expert"))
    p.add_argument("--pairs", dest="n_pairs", type=int)
    p.add_argument("--clip-length", dest="clip_length", type=int)
    p.add_argument("--link", help="sigmoid or linear[:slope]")
    p.add_argument("--overlap", help="clip reuse pattern such as 0.2x4")
    p.add_argument("--labels-per-pair", dest="labels_per_pair", type=int)
    p.add_argument("--methods", type=_csv_list(str), help=f"comma list from {METHODS}")
    p.add_argument("--learners", type=_csv_list(str), help=f"comma list from {ALGORITHMS}")
    p.add_argument("--seeds", type=_csv_list(int), help="comma list, default 0,1,2,3,4")
    p.add_argument("--penalty", type=float)
    p.add_argument("--count-penalty", dest="count_penalty", type=float)
    p.add_argument("--rm-epochs", dest="rm_epochs", type=int)
    p.add_argument("--output-dir", dest="output_dir")


_CONFIG_KEYS = ("name", "env", "behavior", "n_pairs", "clip_length", "link", "overlap",
                "labels_per_pair", "methods", "learners", "seeds", "penalty", "count_penalty",
                "rm_epochs", "output_dir")


def _config(args) -> ExperimentConfig:
    """Config file values with flag overrides; invalid settings are usage errors."""
    overrides = {k: getattr(args, k, None) for k in _CONFIG_KEYS}
    if getattr(args, "fractions", None) is not None:
        overrides["fractions"] = args.fractions
    try:
        base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        config = base.with_overrides(**overrides)
        make_environment(config.env)
    except ParameterError as exc:
        raise UsageError(f"brlab {args.command}: {exc}") from None
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="brlab", description="Preference-labelled offline RL experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a preference dataset (JSON Lines)")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output file (default <output-dir>/data_seed<seed>.jsonl)")

    p = sub.add_parser("label", help="turn a preference dataset into reward-labelled tuples")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=METHODS, default="brl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="label, fit and evaluate every method x learner x seed")
    _add_config_flags(p)
    p.add_argument("--data", help="use this dataset for every seed instead of generating")

    p = sub.add_parser("ablate-size", help="score against dataset fraction")
    _add_config_flags(p)
    p.add_argument("--data")
    p.add_argument("--fractions", type=_csv_list(float))

    p = sub.add_parser("ablate-learner", help="every learner on the same datasets")
    _add_config_flags(p)
    p.add_argument("--data")

    p = sub.add_parser("verify", help="numerical checks of the equivalence results")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--negative-controls", action="store_true",
                   help="also run checks that are expected to fail")
    p.add_argument("--out", help="JSON report path (default <output root>/verify.json)")
    return parser


def _print_rows(rows) -> None:
    for r in rows:
        if r.seed == "aggregate":
            gap = f"  gap {r.reward_gap}" if r.reward_gap else ""
            print(f"{r.experiment:<16} {r.method:<11} {r.learner:<24} {r.normalized_score}{gap}")
    failed = [r for r in rows if r.error and r.seed != "aggregate"]
    for r in failed:
        print(f"failed: {r.experiment} {r.method} {r.learner} seed {r.seed}: {r.error}",
              file=sys.stderr)


def cmd_gen_data(args) -> int:
    config = _config(args)
    mdp = make_environment(config.env)
    ds = generate(config, mdp, args.seed)
    out = Path(args.out) if args.out else config.output_path() / f"data_seed{args.seed}.jsonl"
    save_dataset(ds, out)
    dup = ds.duplicate_state_actions
    reused = sum(1 for n in ds.overlap_manifest.values() if n > 1)
    print(f"wrote {out}: {len(ds)} pairs, T={ds.clip_length}, "
          f"{reused} clips compared more than once, {len(dup)} repeated state-actions")
    return EXIT_OK


def cmd_label(args) -> int:
    config = _config(args)
    mdp = make_environment(config.env)
    ds = load_dataset(args.data)
    labelled = label(config, mdp, ds, args.method, args.seed)
    labelled.save(args.out)
    print(f"wrote {args.out}: {len(labelled)} tuples labelled by {args.method}")
    return EXIT_OK


def _experiment(fn, args) -> int:
    config = _config(args)
    ds = load_dataset(args.data) if getattr(args, "data", None) else None
    rows = fn(config, ds)
    _print_rows(rows)
    print(f"results in {config.output_path()}")
    return EXIT_RUNTIME if any(r.error for r in rows if r.seed != "aggregate") else EXIT_OK


def cmd_verify(args) -> int:
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    reports = theory.run_all(args.instances, args.seed, controls=args.negative_controls)
    for r in reports:
        print(r.line())
    if args.out:
        out = Path(args.out)
    else:
        out = ExperimentConfig(output_dir=".").output_path() / "verify.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps([r.to_json() for r in reports], indent=2) + "\n")
    print(f"report in {out}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


COMMANDS = {
    "gen-data": cmd_gen_data,
    "label": cmd_label,
    "run": lambda a: _experiment(run_experiment, a),
    "ablate-size": lambda a: _experiment(ablate_size, a),
    "ablate-learner": lambda a: _experiment(ablate_learner, a),
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (BrlabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
