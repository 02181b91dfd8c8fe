"""Command-line front end.

Verbs::

    continual-vla run      [--config FILE | --preset NAME] [overrides...]
    continual-vla compare  [--config FILE | --preset NAME] STRATEGY [STRATEGY ...]
    continual-vla metrics  RUN_DIR_OR_R_CSV
    continual-vla gradcheck

Exit codes: 0 success, 1 failed check, 2 bad config or usage,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as G
from . import metrics as M
from .config import PRESETS, STRATEGIES, ConfigError, ExperimentConfig
from .trainer import NumericalFailure, build_suite, collect_all_demos, run_sequence

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

SUMMARY_KEYS = ("auc", "fwt", "nbt", "faa", "aa")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors share the config exit code
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="JSON config file")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in config (default: ci)")
    p.add_argument("--seeds", type=int, nargs="+", help="override seeds")
    p.add_argument("--output", help="override output directory")
    p.add_argument("--base-iterations", type=int)
    p.add_argument("--incremental-iterations", type=int)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--parallel-eval", action="store_true", default=None, help="evaluate tasks in threads")
    p.add_argument("--no-checkpoints", action="store_true", help="skip per-stage checkpoints")


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = PRESETS[args.preset or "ci"]()
    return cfg.with_overrides(
        strategy=getattr(args, "strategy", None),
        seeds=args.seeds,
        output_dir=args.output,
        base_iterations=args.base_iterations,
        incremental_iterations=args.incremental_iterations,
        eval_episodes=args.eval_episodes,
        lr=args.lr,
        parallel_eval=args.parallel_eval,
        save_checkpoints=False if args.no_checkpoints else None,
    )


def _log(msg: str) -> None:
    print(msg, flush=True)


def _run_strategy(cfg: ExperimentConfig, strategy: str, demos_by_seed: dict | None = None) -> dict:
    """Run every seed of one strategy; returns per-seed metrics and the aggregate."""
    specs = build_suite(cfg)
    root = cfg.output_root() / strategy
    per_seed = {}
    for seed in cfg.seeds:
        demos = demos_by_seed.setdefault(seed, collect_all_demos(specs, cfg, seed)) if demos_by_seed is not None else None
        run_dir = root / f"seed{seed}"
        result = run_sequence(specs, cfg, strategy, seed, run_dir=run_dir, demos=demos, log=_log)
        per_seed[seed] = M.write_metrics_json(run_dir / "metrics.json", result.R)
        print(M.format_table(result.R, f"{strategy}/s{seed}"), flush=True)
    summary = {
        "strategy": strategy,
        "seeds": list(cfg.seeds),
        "mean": {k: float(np.mean([m[k] for m in per_seed.values()])) for k in SUMMARY_KEYS},
        "std": {k: float(np.std([m[k] for m in per_seed.values()])) for k in SUMMARY_KEYS},
        "per_seed": {str(s): {k: m[k] for k in SUMMARY_KEYS} for s, m in per_seed.items()},
    }
    M.write_atomic(root / "summary.json", json.dumps(summary, indent=2) + "\n")
    return summary


def _format_summary(summaries: list[dict]) -> str:
    head = f"{'strategy':<12}" + "".join(f"{k.upper():>16}" for k in SUMMARY_KEYS)
    lines = [head]
    for s in summaries:
        cells = "".join(f"{100 * s['mean'][k]:9.1f} ±{100 * s['std'][k]:5.1f}" for k in SUMMARY_KEYS)
        lines.append(f"{s['strategy']:<12}{cells}")
    return "\n".join(lines)


def ordering_checks(faa: dict[str, float]) -> list[tuple[str, bool]]:
    """Method-ordering assertions on mean FAA, for whichever strategies are present."""
    checks = []
    if {"infovla", "er"} <= faa.keys():
        checks.append(("FAA infovla >= er", faa["infovla"] >= faa["er"]))
    if {"er", "sequential"} <= faa.keys():
        checks.append(("FAA er >= sequential", faa["er"] >= faa["sequential"]))
    if {"infovla", "sequential"} <= faa.keys():
        checks.append(("FAA infovla - sequential >= 0.15", faa["infovla"] - faa["sequential"] >= 0.15))
    if "multitask" in faa and len(faa) > 1:
        checks.append(("FAA multitask is highest", faa["multitask"] >= max(faa.values())))
    return checks


# ------------------------------------------------------------------- verbs


def cmd_run(args) -> int:
    cfg = _load_config(args)
    summary = _run_strategy(cfg, cfg.strategy)
    print(_format_summary([summary]))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    demos_by_seed: dict = {}
    summaries = [_run_strategy(cfg.with_overrides(strategy=s), s, demos_by_seed) for s in args.strategies]
    print(_format_summary(summaries))
    faa = {s["strategy"]: s["mean"]["faa"] for s in summaries}
    checks = ordering_checks(faa)
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    report = {"summaries": summaries, "ordering": {n: ok for n, ok in checks}}
    M.write_atomic(cfg.output_root() / "compare.json", json.dumps(report, indent=2) + "\n")
    return EXIT_OK if all(ok for _, ok in checks) or not args.strict else EXIT_FAIL


def cmd_metrics(args) -> int:
    path = Path(args.path)
    csv_path = path / "R.csv" if path.is_dir() else path
    try:
        R = M.read_csv(csv_path)
    except OSError as e:
        print(f"error: cannot read {csv_path}: {e.strerror}", file=sys.stderr)
        return EXIT_USAGE
    except M.MetricsError as e:
        print(f"error: {csv_path}: {e}", file=sys.stderr)
        return EXIT_USAGE
    m = M.write_metrics_json(csv_path.with_name("metrics.json"), R)
    print(M.format_table(R, args.name or csv_path.parent.name))
    print("  ".join(f"{k.upper()} {m[k]:.4f}" for k in SUMMARY_KEYS))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = G.run_suite(instances=args.instances, seed=args.seed)
    width = max(len(k) for k in results)
    for name, err in results.items():
        flag = "ok" if err < G.TOLERANCE else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {flag}")
    bad = [k for k, v in results.items() if not v < G.TOLERANCE]
    print(f"{len(results) - len(bad)}/{len(results)} ops within {G.TOLERANCE:g}")
    return EXIT_OK if not bad else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="continual-vla", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run one strategy over every configured seed")
    _add_config_args(p)
    p.add_argument("--strategy", choices=STRATEGIES, help="override the config's strategy")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several strategies on identical suites and seeds")
    _add_config_args(p)
    p.add_argument("strategies", nargs="+", choices=STRATEGIES)
    p.add_argument("--strict", action="store_true", help="exit 1 if an ordering check fails")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("metrics", help="recompute metrics.json from an R.csv")
    p.add_argument("path", help="run directory or R.csv file")
    p.add_argument("--name", help="row label for the printed table")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and loss")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
