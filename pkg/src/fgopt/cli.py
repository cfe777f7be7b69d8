"""Command-line front-end: runs, partitioning, merge ablations and reports."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .core import module_from_json, taskset_from_json, to_json
from .llm import TokenLedger
from .merge import ClusteringMethod
from .optimize import Strategy
from .orchestrate import (ConfigError, RunConfig, RunError, build_client,
                          build_environment, evaluate_module,
                          merge_from_leaves, run_fgo, run_strategy)
from .optimize import EVALUATORS
from .partition import PartitionError, partition_category, partition_random
from .report import RunReport, emit_report, render_table

OUTPUT_DIR_ENV = "FGOPT_OUTPUT_DIR"
SEED_ENV = "FGOPT_SEED"


def _pick(flag_value, env_value, file_value, default):
    """Precedence: flags > env > config file > defaults."""
    if flag_value is not None:
        return flag_value, "flag"
    if env_value is not None:
        return env_value, "env"
    if file_value is not None:
        return file_value, "file"
    return default, "default"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgopt",
        description="Optimize text-defined agent modules: divide the training "
                    "set, optimize subsets in parallel, merge progressively.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a full training run")
    p_run.add_argument("--config", required=True, help="run config JSON file")
    p_run.add_argument("--strategy", required=True,
                       choices=[s.value for s in Strategy],
                       help="training strategy to execute")
    p_run.add_argument("--out", help=f"output directory (overrides config; env {OUTPUT_DIR_ENV})")
    p_run.add_argument("--seed", type=int, help=f"global seed (overrides config; env {SEED_ENV})")
    p_run.add_argument("--resume", action="store_true",
                       help="reuse completed leaf artifacts in the output directory")

    p_part = sub.add_parser("partition", help="split a task set into subset files")
    p_part.add_argument("--train", required=True, help="task set JSON file")
    p_part.add_argument("--mode", required=True, choices=["random", "category"],
                        help="partitioning strategy")
    p_part.add_argument("--n", type=int, default=1, help="subset count (random mode)")
    p_part.add_argument("--seed", type=int, default=0, help="shuffle seed (random mode)")
    p_part.add_argument("--out", help="directory for subset files (default: alongside input)")

    p_merge = sub.add_parser("merge", help="resume merging from persisted leaves")
    p_merge.add_argument("--leaves", required=True, help="leaves directory of a run")
    p_merge.add_argument("--config", help="run config (default: config.json next to leaves)")
    p_merge.add_argument("--threshold", type=int, help="cluster size threshold")
    p_merge.add_argument("--clustering",
                         choices=[c.value for c in ClusteringMethod],
                         help="clustering method for the merge recursion")
    p_merge.add_argument("--out", required=True, help="output directory for merge artifacts")

    p_eval = sub.add_parser("evaluate", help="score a module on a task set")
    p_eval.add_argument("--module", required=True, help="module JSON file")
    p_eval.add_argument("--tasks", required=True, help="task set JSON file")
    p_eval.add_argument("--config", required=True,
                        help="run config supplying environment and backend")
    p_eval.add_argument("--out", help="write the stats JSON here")

    p_rep = sub.add_parser("report", help="re-emit tables/series from run artifacts")
    p_rep.add_argument("--run", required=True, help="run directory")
    p_rep.add_argument("--csv", action="store_true", help="write report.csv series")
    p_rep.add_argument("--no-figures", action="store_true",
                       help="skip rendering figure PNGs")

    p_abl = sub.add_parser("ablate-subsets",
                           help="sweep the number of divided subsets")
    p_abl.add_argument("--config", required=True, help="run config JSON file")
    p_abl.add_argument("--n-list", required=True,
                       help="comma-separated subset counts, e.g. 3,4,6,8,12")
    p_abl.add_argument("--out", help="output directory for the sweep")
    return parser


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc

    out, out_src = _pick(args.out, os.environ.get(OUTPUT_DIR_ENV),
                         raw.get("output_dir"), None)
    if out is None:
        raise ConfigError("no output directory (use --out, "
                          f"{OUTPUT_DIR_ENV} or the config file)")
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            env_seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer: {exc}") from exc
    seed, seed_src = _pick(args.seed, env_seed, raw.get("seed"), 0)
    print(f"strategy = {args.strategy} (from flag)")
    print(f"output_dir = {out} (from {out_src})")
    print(f"seed = {seed} (from {seed_src})")

    raw = {**raw, "output_dir": str(out), "seed": int(seed)}
    cfg = RunConfig.from_dict(raw, base_dir=config_path.parent)
    report = run_strategy(cfg, Strategy(args.strategy), resume=args.resume)
    print()
    print(render_table(report), end="")
    return 0


def cmd_partition(args) -> int:
    train_path = Path(args.train)
    if not train_path.exists():
        raise ConfigError(f"task set file not found: {train_path}")
    ts = taskset_from_json(train_path.read_text(encoding="utf-8"))
    if args.mode == "random":
        parts = partition_random(ts, args.n, args.seed)
    else:
        parts = partition_category(ts)
    out_dir = Path(args.out) if args.out else train_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, part in enumerate(parts):
        path = out_dir / f"{train_path.stem}.part{i:02d}.json"
        path.write_text(to_json(part), encoding="utf-8")
        print(f"{path.name}: {len(part)} tasks")
    return 0


def cmd_merge(args) -> int:
    leaves_dir = Path(args.leaves)
    config_path = Path(args.config) if args.config else leaves_dir.parent / "config.json"
    cfg = RunConfig.from_file(config_path)
    merge_overrides = {}
    if args.threshold is not None:
        merge_overrides["threshold"] = args.threshold
    if args.clustering is not None:
        merge_overrides["clustering"] = ClusteringMethod(args.clustering)
    if merge_overrides:
        cfg.merge = dataclasses.replace(cfg.merge, **merge_overrides)
    result = merge_from_leaves(leaves_dir, cfg, args.out)
    summary = result.tree.summary()
    print(f"root module: {result.module.id}")
    print(f"root backtest: {result.stats.rate_text()}")
    for key in sorted(summary):
        print(f"{key}: {summary[key]}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = RunConfig.from_file(args.config)
    module = module_from_json(Path(args.module).read_text(encoding="utf-8"))
    tasks = taskset_from_json(Path(args.tasks).read_text(encoding="utf-8"))
    ledger = TokenLedger()
    env_factory, _, _ = build_environment(cfg.environment)
    client = build_client(cfg.backend, ledger)
    stats = evaluate_module(module, tasks, env_factory, cfg.rollout, client,
                            EVALUATORS[cfg.evaluator])
    print(f"success: {stats.rate_text()}")
    print(f"prompt tokens: {stats.prompt_tokens}")
    if args.out:
        Path(args.out).write_text(to_json(stats), encoding="utf-8")
        print(f"stats written to {args.out}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    report_path = run_dir / "report.json"
    if not report_path.exists():
        raise ConfigError(f"no report.json under {run_dir}")
    report = RunReport.from_json(report_path.read_text(encoding="utf-8"))
    emit_report(report, run_dir, csv_out=args.csv, figures=not args.no_figures)
    print(render_table(report), end="")
    return 0


def cmd_ablate_subsets(args) -> int:
    config_path = Path(args.config)
    cfg_check = RunConfig.from_file(config_path)  # validates paths early
    raw = json.loads(config_path.read_text(encoding="utf-8"))
    try:
        n_list = [int(x) for x in args.n_list.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --n-list: {exc}") from exc
    if not n_list:
        raise ConfigError("--n-list is empty")
    base_out = Path(args.out) if args.out else cfg_check.output_dir / "ablate-subsets"
    base_out.mkdir(parents=True, exist_ok=True)

    rows = []
    for n in n_list:
        sweep_raw = {**raw,
                     "partition": {"mode": "random", "n": n},
                     "output_dir": str(base_out / f"n{n:02d}")}
        cfg = RunConfig.from_dict(sweep_raw, base_dir=config_path.parent)
        report = run_fgo(cfg)
        assert report is not None
        s = report.strategies[Strategy.FINE_GRAINED.value]
        rows.append((n, float(s.test_rate()), s.total_prompt_tokens(),
                     s.wall_clock_ms))
        print(f"n={n}: test {float(s.test_rate()):.3f} "
              f"prompt_tokens={s.total_prompt_tokens()} wall_ms={s.wall_clock_ms}")

    csv_path = base_out / "ablation.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("n,test_rate,prompt_tokens,wall_clock_ms\n")
        for n, rate, tokens, wall in rows:
            fh.write(f"{n},{rate:.6f},{tokens},{wall}\n")
    _render_ablation_figure(rows, base_out / "ablation.png")
    print(f"sweep artifacts under {base_out}")
    return 0


def _render_ablation_figure(rows, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ns = [r[0] for r in rows]
    fig, ax1 = plt.subplots(figsize=(6.4, 4.8))
    ax1.plot(ns, [r[1] for r in rows], marker="o", label="test success rate")
    ax1.set_xlabel("number of subsets")
    ax1.set_ylabel("test success rate")
    ax1.set_ylim(-0.05, 1.05)
    ax2 = ax1.twinx()
    ax2.plot(ns, [r[3] for r in rows], marker="s", color="tab:orange",
             label="wall clock (ms)")
    ax2.set_ylabel("wall clock (ms)")
    ax1.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------

_COMMANDS = {
    "run": cmd_run,
    "partition": cmd_partition,
    "merge": cmd_merge,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "ablate-subsets": cmd_ablate_subsets,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, PartitionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RunError as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
