"""``bcol`` command line: solve, gen-data, train, eval, sweep, ablate.

Exit codes: 0 when every check passed, 1 on a check failure (oracle
disagreement, divergence, failed sweep cells), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .data import DatasetFormatError
from .envs import ENVIRONMENTS
from .experiment import (
    ExperimentSpec,
    SpecError,
    cmd_ablate,
    cmd_eval,
    cmd_gen_data,
    cmd_solve,
    cmd_sweep,
    cmd_train,
)
from .inference import ABLATION_MODES
from .io import FormatError

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--spec", help="experiment spec (JSON); flags below override its fields")
    g.add_argument("--out", help="output directory (default: spec 'out', else ./results)")
    g.add_argument("--seed", type=int, help="master seed; data and training use it, evaluation uses seed + 1")
    g.add_argument("--workers", type=int, default=1, help="parallel sweep cells (default 1)")
    g.add_argument("--quiet", action="store_true", help="only report failures")
    g.add_argument("--timing", action="store_true", help="record wall time in result rows (breaks byte-identity)")
    g.add_argument("--env", choices=sorted(ENVIRONMENTS), help="built-in environment")
    return p


def _train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--budget", "-B", type=int, help="counterfactual budget B")
    p.add_argument("--omega", type=float, help="monotonicity penalty weight")
    p.add_argument("--steps", type=int, help="gradient steps T")
    p.add_argument("--eval-episodes", type=int, help="evaluation episodes")
    p.add_argument("--eval-horizon", type=int, help="evaluation horizon")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="bcol",
        description="Counterfactual-budgeting offline RL on finite MDPs: exact DP, oracles, training, evaluation.",
        epilog="ablation modes: " + ", ".join(ABLATION_MODES),
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="exact fixed point plus oracle cross-checks")
    p.add_argument("--budget", "-B", type=int, help="counterfactual budget B")

    p = sub.add_parser("gen-data", parents=[common], help="log an offline dataset under the behavior policy")
    p.add_argument("--episodes", type=int, help="episodes to log")
    p.add_argument("--horizon", type=int, help="decisions per episode (stores horizon - 1 transitions)")
    p.add_argument("--coverage", type=int, metavar="REPEATS", help="full-coverage data, REPEATS rows per (s, a)")
    p.add_argument("--file", help="dataset path (default OUT/dataset.tsv)")

    p = sub.add_parser("train", parents=[common], help="gen-data, train, evaluate; writes checkpoints and results.csv")
    _train_overrides(p)
    p.add_argument("--dataset", help="train on this dataset file instead of generating one")

    p = sub.add_parser("eval", parents=[common], help="evaluate a saved checkpoint")
    _train_overrides(p)
    p.add_argument("--checkpoint", help="directory holding q.json and logits.json (default OUT)")
    p.add_argument("--dataset", help="dataset for the behavior estimate (default: regenerate from --spec)")

    p = sub.add_parser("sweep", parents=[common], help="grid over (B, omega) with a ranked summary")
    _train_overrides(p)
    p.add_argument("--budgets", type=int, nargs="+", help="B grid (default 1 10 50)")
    p.add_argument("--omegas", type=float, nargs="+", help="omega grid (default 0 1 10 100)")

    p = sub.add_parser(
        "ablate", parents=[common],
        help="full BCOL against the budgeting ablations: " + ", ".join(ABLATION_MODES),
        description="Modes: no_budgeting (greedy unbudgeted Q every step), random_budget_unplanned "
                    "(B random steps greedy on the unbudgeted Q), random_budget_trained (B random steps "
                    "from the trained budgeted policy).",
    )
    _train_overrides(p)
    p.add_argument("--modes", nargs="+", choices=ABLATION_MODES, help="subset of modes (default all)")
    return parser


def resolve_spec(args) -> ExperimentSpec:
    base = ExperimentSpec.load(args.spec).to_dict() if args.spec else {}
    if args.env:
        if base.get("env") != args.env:
            base.pop("data", None)  # per-env data defaults follow the env
        base["env"] = args.env
    if args.seed is not None:
        base["seed"] = args.seed
    if args.out:
        base["out"] = args.out
    if args.timing:
        base["timing"] = True
    train = dict(base.get("train", {}))
    for key in ("budget", "omega", "steps"):
        if getattr(args, key, None) is not None:
            train[key] = getattr(args, key)
    base["train"] = train
    spec = ExperimentSpec.from_dict(base)
    if getattr(args, "eval_episodes", None) is not None:
        spec.eval.episodes = args.eval_episodes
    if getattr(args, "eval_horizon", None) is not None:
        spec.eval.horizon = args.eval_horizon
    if args.command == "gen-data":
        if args.coverage is not None:
            spec.data.kind, spec.data.repeats = "coverage", args.coverage
        elif args.episodes is not None or args.horizon is not None:
            spec.data.kind = "episodes"
        if args.episodes is not None:
            spec.data.episodes = args.episodes
        if args.horizon is not None:
            spec.data.horizon = args.horizon
        if args.seed is not None:
            spec.data.seed = args.seed
    if args.command == "sweep":
        if args.budgets:
            spec.budgets = args.budgets
        if args.omegas:
            spec.omegas = args.omegas
    if args.command == "ablate" and args.modes:
        spec.ablations = args.modes
    return spec


def run(args) -> int:
    spec = resolve_spec(args)
    if args.command == "solve":
        res = cmd_solve(spec)
    elif args.command == "gen-data":
        res = cmd_gen_data(spec, args.file)
    elif args.command == "train":
        res = cmd_train(spec, args.dataset)
    elif args.command == "eval":
        res = cmd_eval(spec, args.checkpoint, args.dataset)
    elif args.command == "sweep":
        res = cmd_sweep(spec, workers=args.workers)
    else:
        res = cmd_ablate(spec)
    if not res.ok or not args.quiet:
        stream = sys.stdout if res.ok else sys.stderr
        print(res.message, file=stream)
        for f in res.outputs:
            print(f"wrote {f}", file=stream)
    return EXIT_OK if res.ok else EXIT_CHECK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (SpecError, DatasetFormatError, FormatError) as exc:
        print(f"bcol {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
