"""``noisy-marl`` command line.

Exit codes: 0 success, 1 a check or seed failed, 2 bad usage or config.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from . import oracle
from .config import FIELD_TYPES, ConfigError, ExperimentConfig, config_from_mapping, infer_value, load_config
from .envs import ENV_NAMES, make_env

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# shorter spellings for the most used fields
ALIASES = {"steps": "total_steps"}

MATRIX_RUNS = (("nv-mappo", "matrix1"), ("nv-mappo", "matrix2"), ("qmix", "matrix1"), ("qmix", "matrix2"))


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'key = value' file; flags override it")
    group = p.add_argument_group("experiment settings")
    for name in FIELD_TYPES:
        flags = ["--" + name.replace("_", "-")]
        flags += ["--" + a for a, target in ALIASES.items() if target == name]
        group.add_argument(*flags, dest=f"cfg_{name}", default=None, metavar=FIELD_TYPES[name].split(" ")[0].upper())


def _config(args, resolve: bool = True) -> ExperimentConfig:
    overrides = {k[4:]: infer_value(v) for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} not found")
        cfg = load_config(args.config, overrides)
    else:
        cfg = config_from_mapping(overrides)
    return cfg.resolved() if resolve else cfg


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="noisy-marl", description="Noisy-critic multi-agent PPO on desk-scale games.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("train", help="train all seeds of one configuration")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-figures", action="store_true", help="skip the PNG learning curve")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="greedy return of a saved checkpoint")
    p.add_argument("--run", type=Path, required=True, help="run directory written by train")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--eval-seed", type=int, default=0)

    p = sub.add_parser("oracle", help="print enumeration tables for a one-step game")
    p.add_argument("--env", choices=ENV_NAMES, default="matrix1")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("reproduce-matrix", help="nv-mappo and qmix on both matrix games")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-figures", action="store_true")
    _add_config_flags(p)
    return parser


def cmd_train(args) -> int:
    from .experiment import run_experiment

    cfg = _config(args)
    result = run_experiment(cfg, args.out)
    steps, median = result.median_curve()
    if len(median):
        print(f"{cfg.algo} on {cfg.env}: {len(result.ok)}/{len(result.seeds)} seeds ok, "
              f"final median return {median[-1]:g} at step {steps[-1]}")
    if not args.no_figures and result.ok:
        from .report import plot_curve

        png = plot_curve(args.out / "aggregate.csv", args.out / "curve.png", f"{cfg.algo} / {cfg.env}")
        print(f"figure: {png}")
    for failed in result.failures:
        print(f"seed {failed.seed} failed; see {args.out / f'seed_{failed.seed}' / 'error.txt'}", file=sys.stderr)
    return EXIT_FAIL if result.failures else EXIT_OK


def cmd_eval(args) -> int:
    from .config import load_config
    from .experiment import load_learner
    from .trainer import evaluate

    cfg_path = args.run / "config.resolved"
    if not cfg_path.exists():
        raise ConfigError(f"{args.run} has no config.resolved")
    cfg = load_config(cfg_path)
    seeds = [args.seed] if args.seed is not None else cfg.seed_list()
    for seed in seeds:
        learner = load_learner(args.run, seed, cfg)
        ret = evaluate(learner, cfg.env, args.episodes, seed=args.eval_seed)
        print(f"seed {seed}: greedy return {ret:g} over {args.episodes} episodes")
    return EXIT_OK


def cmd_oracle(args) -> int:
    env = make_env(args.env)
    print(oracle.payoff_table(env))
    uniform = oracle.TabularPolicy.uniform(env.n_agents, env.n_actions)
    v = oracle.exact_value_function(env, uniform)
    print(f"expected return, uniform policies: {oracle.exact_expected_return(env, uniform):.6f}")
    print("marginal advantage under uniform play (exact V):")
    for i in range(env.n_agents):
        row = [oracle.marginal_advantage(env, uniform, i, a, v) for a in range(env.n_actions)]
        print(f"  agent {i + 1}: " + " ".join(f"{x:>9.4f}" for x in row))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seeds, args.tolerance)
    ok = True
    for name in dict.fromkeys(r.loss for r in results):
        rs = [r for r in results if r.loss == name]
        worst = max(r.max_rel_error for r in rs)
        passed = all(r.passed for r in rs)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: worst relative error {worst:.2e} over {len(rs)} seeds")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_reproduce_matrix(args) -> int:
    from .experiment import run_experiment
    from .report import matrix_verdicts, plot_curve, plot_matrix_pair

    base = _config(args, resolve=False)
    sigma = 1.0 if base.sigma is None else base.sigma
    runs, failed = {}, False
    for algo, env in MATRIX_RUNS:
        cfg = dataclasses.replace(base, algo=algo, env=env, sigma=sigma if algo.startswith("nv-") else None)
        out = args.out / f"{algo}-{env}"
        result = run_experiment(cfg.resolved(), out)
        failed |= bool(result.failures)
        runs[f"{algo}-{env}"] = out
        if not args.no_figures and result.ok:
            plot_curve(out / "aggregate.csv", out / "curve.png", f"{algo} / {env}")
    verdicts = matrix_verdicts(runs)
    with open(args.out / "verdicts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("check", "passed", "detail"))
        w.writerows((v.label, str(v.passed).lower(), v.detail) for v in verdicts)
    for v in verdicts:
        print(v.line())
    if not args.no_figures:
        print(f"figure: {plot_matrix_pair(runs, args.out / 'matrix_games.png')}")
    return EXIT_FAIL if failed or not all(v.passed for v in verdicts) else EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "gradcheck": cmd_gradcheck,
    "reproduce-matrix": cmd_reproduce_matrix,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"noisy-marl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
