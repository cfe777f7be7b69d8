"""End-to-end pipeline: divide, optimize subsets in parallel, merge, score.

A run lives in one output directory:

    config.json            echo of the effective configuration
    ledger.jsonl           token-ledger event log (appended at phase ends)
    leaves/<i>/            per-subset artifacts: module/stats/tasks/meta
    modules/<id>.json      every module produced by merging
    merge_tree.json        the full merge tree with per-node backtests
    module.json            the final (root) module
    report.json/.txt/.csv  the run report plus rendered figures
    timings.json           real measured phase durations (informational only)

Everything that feeds report.json and merge_tree.json is deterministic under
the mock backend, so two runs of the same config produce identical bytes.
Real wall-clock phase timings are nondeterministic by nature and therefore go
to timings.json, outside the determinism guarantee; the wall-clock figures in
the report are ledger-derived per-call latencies.

A run killed after the leaves phase resumes into merging from the persisted
leaf artifacts (and re-loads the ledger), producing the same report as an
uninterrupted run.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .core import (Module, PerformanceStats, TaskSet, canonical_dumps,
                   canonical_loads, derive_seed, instruction_module,
                   module_from_json, stats_from_json, taskset_from_json,
                   to_json)
from .llm import (HttpBackend, LlmClient, ModelParams, ScopedClient,
                  TokenLedger)
from .merge import (ClusteringMethod, MergeConfig, MergeLeaf, MergeResult,
                    progressive_merge)
from .optimize import (BASELINE_RUNNERS, EVALUATORS, OptimizationResult,
                       OptimizerConfig, Strategy, TrimPolicy, optimize_subset,
                       rollout_and_evaluate, stats_from_pairs)
from .partition import partition_category, partition_random
from .report import RunReport, StrategyReport, emit_report
from .ruleworld import RuleWorldEnvironment, RuleWorldSpec
from .ruleworld import mock_backend as ruleworld_mock_backend
from .runtime import RolloutConfig
from .ubl import DEFAULT_EXTRACTION_INSTRUCTION, UblEnvironment

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid run configuration (exit code 2 at the CLI)."""


class RunError(RuntimeError):
    """A run failed; partial artifacts are preserved (exit code 3 at the CLI)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    environment: dict
    train_tasks: Path
    test_tasks: Path
    partition_mode: str
    partition_n: int
    optimizer: OptimizerConfig
    merge: MergeConfig
    rollout: RolloutConfig
    backend: dict
    evaluator: str
    output_dir: Path
    seed: int
    workers: int | None
    transcript: bool
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "RunConfig":
        base = base_dir or Path.cwd()

        def resolve(p: str) -> Path:
            path = Path(p)
            return path if path.is_absolute() else base / path

        try:
            environment = d["environment"]
            train_tasks = resolve(d["train_tasks"])
            test_tasks = resolve(d["test_tasks"])
            output_dir = resolve(d["output_dir"])
        except KeyError as exc:
            raise ConfigError(f"config missing required key: {exc}") from exc
        for path, label in ((train_tasks, "train_tasks"), (test_tasks, "test_tasks")):
            if not path.exists():
                raise ConfigError(f"{label} path does not exist: {path}")

        part = d.get("partition", {})
        partition_mode = part.get("mode", "random")
        if partition_mode not in ("random", "category"):
            raise ConfigError(f"unknown partition mode {partition_mode!r}")
        partition_n = int(part.get("n", 1))
        if partition_n < 1:
            raise ConfigError("partition n must be >= 1")

        opt = dict(d.get("optimizer", {}))
        template_file = opt.pop("prompt_template_file", None)
        if template_file:
            opt["optimizer_prompt_template"] = resolve(template_file).read_text(encoding="utf-8")
        if "trim_policy" in opt:
            opt["trim_policy"] = TrimPolicy(opt["trim_policy"])
        if "strategy" in opt:
            opt["strategy"] = Strategy(opt["strategy"])
        try:
            optimizer = OptimizerConfig(**opt)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad optimizer config: {exc}") from exc

        mrg = dict(d.get("merge", {}))
        merge_template_file = mrg.pop("prompt_template_file", None)
        if merge_template_file:
            mrg["merge_prompt_template"] = resolve(merge_template_file).read_text(encoding="utf-8")
        if "clustering" in mrg:
            mrg["clustering"] = ClusteringMethod(mrg["clustering"])
        try:
            merge_cfg = MergeConfig(**mrg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad merge config: {exc}") from exc

        try:
            rollout_cfg = RolloutConfig(**d.get("rollout", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad rollout config: {exc}") from exc

        evaluator = d.get("evaluator", "exact")
        if evaluator not in EVALUATORS:
            raise ConfigError(f"unknown evaluator {evaluator!r}")

        return cls(environment=environment, train_tasks=train_tasks,
                   test_tasks=test_tasks, partition_mode=partition_mode,
                   partition_n=partition_n, optimizer=optimizer,
                   merge=merge_cfg, rollout=rollout_cfg,
                   backend=d.get("backend", {"kind": "mock", "profile": "ruleworld"}),
                   evaluator=evaluator, output_dir=output_dir,
                   seed=int(d.get("seed", 0)), workers=d.get("workers"),
                   transcript=bool(d.get("transcript", False)), raw=d)

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if overrides:
            raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
        return cls.from_dict(raw, base_dir=path.parent)


# ---------------------------------------------------------------------------
# Environment and backend wiring
# ---------------------------------------------------------------------------

def build_environment(env_cfg: dict):
    """Returns (env_factory, metadata dict, seed module)."""
    kind = env_cfg.get("kind")
    if kind == "ruleworld":
        categories = env_cfg.get("categories")
        if not categories:
            raise ConfigError("ruleworld environment needs a 'categories' list")
        spec = RuleWorldSpec.generate(list(categories),
                                      seed=int(env_cfg.get("seed", 0)),
                                      decoy_len=int(env_cfg.get("decoy_len", 200)))
        metadata = {"kind": "ruleworld", "categories": spec.categories(),
                    "decoy_len": spec.decoy_len, "seed": spec.seed}
        default_instruction = ("Answer each task's challenge. Track any "
                               "passphrases you have learned per category.")
        factory = lambda: RuleWorldEnvironment(spec)  # noqa: E731
    elif kind == "ubl":
        docs_dir = env_cfg.get("docs_dir")
        metadata = {"kind": "ubl", "docs_dir": str(docs_dir)}
        default_instruction = DEFAULT_EXTRACTION_INSTRUCTION
        factory = lambda: UblEnvironment(docs_dir)  # noqa: E731
    else:
        raise ConfigError(f"unknown environment kind {kind!r}")
    seed_text = env_cfg.get("seed_instruction", default_instruction)
    return factory, metadata, instruction_module(seed_text)


def build_client(backend_cfg: dict, ledger: TokenLedger,
                 transcript_path: Path | None = None) -> LlmClient:
    kind = backend_cfg.get("kind", "mock")
    params = ModelParams(
        model_name=backend_cfg.get("model", "mock"),
        agent_temperature=float(backend_cfg.get("agent_temperature", 0.0)),
        optimizer_temperature=float(backend_cfg.get("optimizer_temperature", 0.7)),
        judge_temperature=float(backend_cfg.get("judge_temperature", 0.0)),
        max_output_tokens=int(backend_cfg.get("max_output_tokens", 2048)),
    )
    if kind == "mock":
        profile = backend_cfg.get("profile", "ruleworld")
        if profile != "ruleworld":
            raise ConfigError(f"unknown mock profile {profile!r}")
        retain = backend_cfg.get("optimizer_retain")
        backend = ruleworld_mock_backend(
            context_limit=backend_cfg.get("context_limit"),
            latency_ms=int(backend_cfg.get("latency_ms", 0)),
            delay_s=float(backend_cfg.get("delay_s", 0.0)),
            optimizer_retain=int(retain) if retain is not None else None)
    elif kind == "openai":
        backend = HttpBackend(endpoint=backend_cfg.get("endpoint"),
                              api_key=backend_cfg.get("api_key"),
                              timeout_s=float(backend_cfg.get("timeout_s", 120.0)))
    else:
        raise ConfigError(f"unknown backend kind {kind!r}")
    return LlmClient(backend, ledger=ledger, params=params,
                     transcript_path=transcript_path,
                     max_in_flight=int(backend_cfg.get("max_in_flight", 8)))


# ---------------------------------------------------------------------------
# Run directory layout
# ---------------------------------------------------------------------------

@dataclass
class RunPaths:
    root: Path

    @property
    def config(self) -> Path: return self.root / "config.json"
    @property
    def ledger(self) -> Path: return self.root / "ledger.jsonl"
    @property
    def leaves(self) -> Path: return self.root / "leaves"
    @property
    def merge_tree(self) -> Path: return self.root / "merge_tree.json"
    @property
    def modules(self) -> Path: return self.root / "modules"
    @property
    def root_module(self) -> Path: return self.root / "module.json"
    @property
    def report_json(self) -> Path: return self.root / "report.json"
    @property
    def timings(self) -> Path: return self.root / "timings.json"
    @property
    def transcript(self) -> Path: return self.root / "transcript.jsonl"

    def leaf_dir(self, index: int) -> Path:
        return self.leaves / f"{index:02d}"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _config_echo(cfg: RunConfig) -> dict:
    # Echo absolute paths so the persisted config stands on its own; a later
    # `merge --leaves <run>/leaves` must not depend on the original config
    # file's location or the working directory of the original run.
    return {**cfg.raw,
            "train_tasks": str(cfg.train_tasks.resolve()),
            "test_tasks": str(cfg.test_tasks.resolve()),
            "output_dir": str(cfg.output_dir.resolve())}


def _persist_leaf(paths: RunPaths, index: int, part: TaskSet,
                  result: OptimizationResult) -> None:
    leaf = paths.leaf_dir(index)
    _write(leaf / "module.json", to_json(result.module))
    _write(leaf / "stats.json", to_json(result.stats))
    _write(leaf / "tasks.json", to_json(part))
    _write(leaf / "meta.json", canonical_dumps({
        "optimizer_calls": result.optimizer_calls,
        "trimming_events": result.trimming_events,
        "kept_previous": result.kept_previous,
    }))


def _leaves_complete(paths: RunPaths, count: int) -> bool:
    for i in range(count):
        leaf = paths.leaf_dir(i)
        for name in ("module.json", "stats.json", "tasks.json", "meta.json"):
            if not (leaf / name).exists():
                return False
    return True


def load_leaves(leaves_dir: str | Path) -> tuple[list[MergeLeaf], dict]:
    """Load persisted leaves (sorted by directory name) plus summed telemetry."""
    leaves_dir = Path(leaves_dir)
    if not leaves_dir.is_dir():
        raise RunError(f"leaves directory not found: {leaves_dir}")
    meta_totals = {"optimizer_calls": 0, "trimming_events": 0, "kept_previous": 0}
    leaves = []
    for leaf_dir in sorted(p for p in leaves_dir.iterdir() if p.is_dir()):
        module = module_from_json((leaf_dir / "module.json").read_text(encoding="utf-8"))
        stats = stats_from_json((leaf_dir / "stats.json").read_text(encoding="utf-8"))
        tasks = taskset_from_json((leaf_dir / "tasks.json").read_text(encoding="utf-8"))
        leaves.append(MergeLeaf(module=module, tasks=tasks, stats=stats))
        meta_path = leaf_dir / "meta.json"
        if meta_path.exists():
            meta = canonical_loads(meta_path.read_text(encoding="utf-8"))
            for key in meta_totals:
                meta_totals[key] += int(meta.get(key, 0))
    if not leaves:
        raise RunError(f"no leaf artifacts under {leaves_dir}")
    return leaves, meta_totals


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def evaluate_module(module: Module, tasks: TaskSet, env_factory,
                    rollout_cfg: RolloutConfig, client, evaluator) -> PerformanceStats:
    """Score a module on a task set: one rollout + evaluation per task."""
    stats, _ = _score_module(module, tasks, env_factory, rollout_cfg, client, evaluator)
    return stats


def _score_module(module, tasks: TaskSet, env_factory, rollout_cfg, client, evaluator):
    if not tasks.tasks:
        raise ValueError("evaluation requires at least one task")
    scope = ScopedClient(client)
    pairs = rollout_and_evaluate(module, tasks.tasks, env_factory,
                                 rollout_cfg, scope, evaluator)
    return stats_from_pairs(module.id, pairs, scope), pairs


def _per_category(tasks: TaskSet, pairs) -> dict[str, list[int]] | None:
    by_id = {t.id: t.category for t in tasks.tasks}
    if all(c is None for c in by_id.values()):
        return None
    out: dict[str, list[int]] = {}
    for pair in pairs:
        category = by_id.get(pair.record.task_id) or "(uncategorized)"
        bucket = out.setdefault(category, [0, 0])
        bucket[0] += 1 if pair.record.success else 0
        bucket[1] += 1
    return out


# ---------------------------------------------------------------------------
# Pipeline runs
# ---------------------------------------------------------------------------

def _load_taskset(path: Path) -> TaskSet:
    return taskset_from_json(path.read_text(encoding="utf-8"))


def _partition(cfg: RunConfig, train: TaskSet) -> list[TaskSet]:
    if cfg.partition_mode == "category":
        return partition_category(train)
    return partition_random(train, cfg.partition_n,
                            derive_seed(cfg.seed, "partition"))


def _aggregate_train_stats(module_id: str, leaves: list[MergeLeaf]) -> dict:
    return PerformanceStats(
        module_id=module_id,
        task_ids=tuple(tid for l in leaves for tid in l.stats.task_ids),
        successes=sum(l.stats.successes for l in leaves),
        trials=sum(l.stats.trials for l in leaves),
        prompt_tokens=sum(l.stats.prompt_tokens for l in leaves),
        completion_tokens=sum(l.stats.completion_tokens for l in leaves),
        wall_clock_ms=sum(l.stats.wall_clock_ms for l in leaves),
    ).to_dict()


def _strategy_report(name: str, train: dict, test_stats: PerformanceStats,
                     ledger: TokenLedger, telemetry: dict,
                     merge_summary: dict | None,
                     per_category: dict | None) -> StrategyReport:
    tokens_by_tag = {tag: {"prompt_tokens": t.prompt_tokens,
                           "completion_tokens": t.completion_tokens,
                           "calls": t.calls,
                           "wall_clock_ms": t.wall_clock_ms}
                     for tag, t in ledger.totals_by_tag().items()}
    return StrategyReport(
        strategy=name, train=train, test=test_stats.to_dict(),
        tokens_by_tag=tokens_by_tag,
        wall_clock_ms=ledger.grand_totals().wall_clock_ms,
        optimizer_calls=telemetry.get("optimizer_calls", 0),
        trimming_events=telemetry.get("trimming_events", 0),
        kept_previous=telemetry.get("kept_previous", 0),
        merge=merge_summary, per_category=per_category)


def run_fgo(cfg: RunConfig, *, resume: bool = False,
            stop_after: str | None = None) -> RunReport | None:
    """Divide, optimize subsets concurrently, merge progressively, score.

    `stop_after="leaves"` halts after persisting the per-subset artifacts
    (simulating a killed run); a later call with `resume=True` picks the run
    up from those artifacts.
    """
    paths = RunPaths(cfg.output_dir)
    paths.root.mkdir(parents=True, exist_ok=True)
    echo = _config_echo(cfg)
    _write(paths.config, canonical_dumps(echo))

    ledger = TokenLedger()
    env_factory, env_meta, seed_module = build_environment(cfg.environment)
    client = build_client(cfg.backend, ledger,
                          paths.transcript if cfg.transcript else None)
    evaluator = EVALUATORS[cfg.evaluator]
    train = _load_taskset(cfg.train_tasks)
    test = _load_taskset(cfg.test_tasks)
    parts = _partition(cfg, train)

    timings: dict[str, int] = {}
    t_phase = time.monotonic()

    resumed = resume and _leaves_complete(paths, len(parts))
    if resumed:
        if paths.ledger.exists():
            ledger.load_jsonl(paths.ledger)
        leaves, telemetry = load_leaves(paths.leaves)
        log.info("resumed %d leaves from %s", len(leaves), paths.leaves)
    else:
        results: list[OptimizationResult | None] = [None] * len(parts)
        errors: list[tuple[int, Exception]] = []

        def work(index: int) -> None:
            subset_cfg = OptimizerConfig(
                epochs=cfg.optimizer.epochs, strategy=Strategy.FINE_GRAINED,
                batch_size=cfg.optimizer.batch_size,
                bootstrap_samples=cfg.optimizer.bootstrap_samples,
                optimizer_prompt_template=cfg.optimizer.optimizer_prompt_template,
                trim_policy=cfg.optimizer.trim_policy,
                seed=derive_seed(cfg.seed, f"subset-{index}"))
            try:
                result = optimize_subset(seed_module, parts[index], env_factory,
                                         subset_cfg, cfg.rollout, client, evaluator)
                results[index] = result
                _persist_leaf(paths, index, parts[index], result)
            except Exception as exc:  # noqa: BLE001 - preserved in `errors`
                errors.append((index, exc))

        max_workers = cfg.workers or len(parts)
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            list(pool.map(work, range(len(parts))))
        ledger.write_jsonl(paths.ledger)
        if errors:
            index, exc = sorted(errors, key=lambda e: e[0])[0]
            raise RunError(
                f"subset optimizer {index} failed: {exc}; partial artifacts "
                f"preserved under {paths.root}") from exc
        leaves = [MergeLeaf(module=r.module, tasks=parts[i], stats=r.stats)
                  for i, r in enumerate(results)]  # type: ignore[union-attr]
        telemetry = {
            "optimizer_calls": sum(r.optimizer_calls for r in results),
            "trimming_events": sum(r.trimming_events for r in results),
            "kept_previous": sum(r.kept_previous for r in results),
        }
    timings["optimize_phase_ms"] = int((time.monotonic() - t_phase) * 1000)

    if stop_after == "leaves":
        _write(paths.timings, canonical_dumps(timings))
        return None

    t_phase = time.monotonic()
    merge_cfg = MergeConfig(
        threshold=cfg.merge.threshold, clustering=cfg.merge.clustering,
        kmeans_max_iters=cfg.merge.kmeans_max_iters,
        kmeans_restarts=cfg.merge.kmeans_restarts,
        feature_kind=cfg.merge.feature_kind,
        seed=derive_seed(cfg.seed, "merge"),
        merge_prompt_template=cfg.merge.merge_prompt_template)
    merge_result = progressive_merge(leaves, env_factory, cfg.rollout, client,
                                     merge_cfg, evaluator)
    _persist_merge(paths, merge_result)
    ledger.write_jsonl(paths.ledger)
    timings["merge_phase_ms"] = int((time.monotonic() - t_phase) * 1000)

    t_phase = time.monotonic()
    test_stats, test_pairs = _score_module(merge_result.module, test, env_factory,
                                           cfg.rollout, client, evaluator)
    timings["test_phase_ms"] = int((time.monotonic() - t_phase) * 1000)

    strategy = _strategy_report(
        Strategy.FINE_GRAINED.value,
        _aggregate_train_stats(merge_result.module.id, leaves),
        test_stats, ledger, telemetry, merge_result.tree.summary(),
        _per_category(test, test_pairs))
    report = RunReport(
        strategies={Strategy.FINE_GRAINED.value: strategy},
        environment=env_meta, config=echo, seed=cfg.seed,
        train_task_count=len(train), test_task_count=len(test))

    ledger.write_jsonl(paths.ledger)
    if not ledger.verify_conservation():
        raise RunError("token ledger failed conservation check")
    emit_report(report, paths.root)
    _write(paths.timings, canonical_dumps(timings))
    return report


def _persist_merge(paths: RunPaths, merge_result: MergeResult) -> None:
    _write(paths.merge_tree, merge_result.tree.to_json())
    for module_id, module in sorted(merge_result.modules.items()):
        _write(paths.modules / f"{module_id}.json", to_json(module))
    _write(paths.root_module, to_json(merge_result.module))


def run_baseline(cfg: RunConfig, strategy: Strategy) -> RunReport:
    """One undivided-train-set strategy with the same reporting surface."""
    if strategy not in BASELINE_RUNNERS:
        raise ConfigError(f"{strategy.value} is not a baseline strategy")
    paths = RunPaths(cfg.output_dir)
    paths.root.mkdir(parents=True, exist_ok=True)
    echo = _config_echo(cfg)
    _write(paths.config, canonical_dumps(echo))

    ledger = TokenLedger()
    env_factory, env_meta, seed_module = build_environment(cfg.environment)
    client = build_client(cfg.backend, ledger,
                          paths.transcript if cfg.transcript else None)
    evaluator = EVALUATORS[cfg.evaluator]
    train = _load_taskset(cfg.train_tasks)
    test = _load_taskset(cfg.test_tasks)

    timings: dict[str, int] = {}
    t_phase = time.monotonic()
    runner = BASELINE_RUNNERS[strategy]
    base_cfg = OptimizerConfig(
        epochs=cfg.optimizer.epochs, strategy=strategy,
        batch_size=cfg.optimizer.batch_size,
        bootstrap_samples=cfg.optimizer.bootstrap_samples,
        optimizer_prompt_template=cfg.optimizer.optimizer_prompt_template,
        trim_policy=cfg.optimizer.trim_policy,
        seed=derive_seed(cfg.seed, f"baseline-{strategy.value}"))
    try:
        result = runner(seed_module, train, env_factory, base_cfg, cfg.rollout,
                        client, evaluator)
    except Exception as exc:
        ledger.write_jsonl(paths.ledger)
        raise RunError(f"{strategy.value} run failed: {exc}; partial artifacts "
                       f"preserved under {paths.root}") from exc
    timings["optimize_phase_ms"] = int((time.monotonic() - t_phase) * 1000)
    _write(paths.root_module, to_json(result.module))
    _write(paths.root / "train_stats.json", to_json(result.stats))

    t_phase = time.monotonic()
    test_stats, test_pairs = _score_module(result.module, test, env_factory,
                                           cfg.rollout, client, evaluator)
    timings["test_phase_ms"] = int((time.monotonic() - t_phase) * 1000)

    strategy_report = _strategy_report(
        strategy.value, result.stats.to_dict(), test_stats, ledger,
        {"optimizer_calls": result.optimizer_calls,
         "trimming_events": result.trimming_events,
         "kept_previous": result.kept_previous},
        None, _per_category(test, test_pairs))
    report = RunReport(
        strategies={strategy.value: strategy_report},
        environment=env_meta, config=echo, seed=cfg.seed,
        train_task_count=len(train), test_task_count=len(test))

    ledger.write_jsonl(paths.ledger)
    if not ledger.verify_conservation():
        raise RunError("token ledger failed conservation check")
    emit_report(report, paths.root)
    _write(paths.timings, canonical_dumps(timings))
    return report


def run_strategy(cfg: RunConfig, strategy: Strategy, *,
                 resume: bool = False) -> RunReport:
    if strategy is Strategy.FINE_GRAINED:
        report = run_fgo(cfg, resume=resume)
        assert report is not None
        return report
    return run_baseline(cfg, strategy)


# ---------------------------------------------------------------------------
# Merge-only entry point (ablation driver over persisted leaves)
# ---------------------------------------------------------------------------

def merge_from_leaves(leaves_dir: str | Path, cfg: RunConfig,
                      out_dir: str | Path) -> MergeResult:
    """Resume merging from persisted leaf artifacts into `out_dir`."""
    leaves, _ = load_leaves(leaves_dir)
    out_paths = RunPaths(Path(out_dir))
    out_paths.root.mkdir(parents=True, exist_ok=True)
    ledger = TokenLedger()
    env_factory, _, _ = build_environment(cfg.environment)
    client = build_client(cfg.backend, ledger)
    evaluator = EVALUATORS[cfg.evaluator]
    merge_cfg = MergeConfig(
        threshold=cfg.merge.threshold, clustering=cfg.merge.clustering,
        kmeans_max_iters=cfg.merge.kmeans_max_iters,
        kmeans_restarts=cfg.merge.kmeans_restarts,
        feature_kind=cfg.merge.feature_kind,
        seed=derive_seed(cfg.seed, "merge"),
        merge_prompt_template=cfg.merge.merge_prompt_template)
    result = progressive_merge(leaves, env_factory, cfg.rollout, client,
                               merge_cfg, evaluator)
    _persist_merge(out_paths, result)
    ledger.write_jsonl(out_paths.ledger)
    return result
