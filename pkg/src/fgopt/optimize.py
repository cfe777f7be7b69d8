"""The explore / evaluate / optimize epoch loop and the training strategies.

One epoch rolls the current module out on every task, evaluates each
trajectory into a verdict-plus-critique record, and hands the whole history to
an LLM optimizer that replies with a complete replacement module. Strategies
differ only in how tasks are fed to that loop:

* all-at-once: the entire set, one optimizer call per epoch;
* batch-wise: fixed contiguous batches, one optimizer call per batch,
  module carried forward sequentially;
* bootstrapping: batches sampled with replacement (seeded), carried forward;
* fine-grained: `optimize_subset` applied independently per partition subset
  (driven by the orchestration layer, which then merges the results).

When the optimizer prompt overflows the backend context, history pairs are
dropped one at a time (oldest first by default) and the call retried, until it
fits or the history is exhausted.
"""
from __future__ import annotations

import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

from .core import (EvaluationRecord, Module, ModuleKind, ModuleOrigin,
                   PerformanceStats, Task, TaskSet, ToolSpec, Trajectory,
                   canonical_loads, module_content_id)
from .llm import ContextWindowExceeded, RequestTag, ScopedClient
from .runtime import RolloutConfig, RolloutError, render_transcript, rollout

log = logging.getLogger(__name__)


class Strategy(str, Enum):
    ALL_AT_ONCE = "all-at-once"
    BATCH_WISE = "batch-wise"
    BOOTSTRAPPING = "bootstrapping"
    FINE_GRAINED = "fgo"


class TrimPolicy(str, Enum):
    DROP_OLDEST = "drop_oldest"
    DROP_LONGEST = "drop_longest"


DEFAULT_OPTIMIZER_TEMPLATE = """You are improving an agent module based on recorded task attempts.

Current module ({kind}):
```module
{payload}
```

{attempts}

Analyze the attempts and their critiques. Write an improved module that fixes
the observed failures and keeps what already works. Reply with the complete
new module inside one fenced code block tagged "module" (a line with
three backticks followed by the word module, the content, then a closing
three-backtick line)."""


@dataclass(frozen=True)
class OptimizerConfig:
    epochs: int = 3
    strategy: Strategy = Strategy.FINE_GRAINED
    batch_size: int = 6
    bootstrap_samples: int = 4
    optimizer_prompt_template: str = DEFAULT_OPTIMIZER_TEMPLATE
    trim_policy: TrimPolicy = TrimPolicy.DROP_OLDEST
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.bootstrap_samples < 1:
            raise ValueError("bootstrap_samples must be >= 1")


@dataclass(frozen=True)
class HistoryPair:
    trajectory: Trajectory
    record: EvaluationRecord

    def __post_init__(self) -> None:
        if self.trajectory.task_id != self.record.task_id:
            raise ValueError("trajectory and record must reference the same task")


class OptimizationError(Exception):
    """Hard failure of a strategy run (e.g. nothing fits the context window)."""


@dataclass
class OptimizationResult:
    """A trained module plus the telemetry reports need."""

    module: Module
    stats: PerformanceStats
    module_chain: tuple[Module, ...]
    optimizer_calls: int
    trimming_events: int
    kept_previous: int
    drawn_batches: tuple[tuple[str, ...], ...] = ()


# ---------------------------------------------------------------------------
# Prompt rendering and reply parsing
# ---------------------------------------------------------------------------

def render_optimizer_prompt(module: Module, history: list[HistoryPair],
                            template: str = DEFAULT_OPTIMIZER_TEMPLATE,
                            queries: dict[str, str] | None = None) -> str:
    """Deterministic optimizer prompt: module block, then per-task attempt
    blocks in task-id order, then the output-format instruction."""
    blocks = []
    for pair in sorted(history, key=lambda p: p.record.task_id):
        blocks.append(_attempt_block(pair, queries))
    attempts = "\n\n".join(blocks) if blocks else "(no task attempts recorded)"
    return template.format(kind=module.kind.value,
                           payload=module.payload_text(),
                           attempts=attempts)


def _attempt_block(pair: HistoryPair, queries: dict[str, str] | None = None) -> str:
    record = pair.record
    verdict = "SUCCESS" if record.success else "FAILURE"
    query_line = ""
    if queries and record.task_id in queries:
        query_line = f"Query: {queries[record.task_id]}\n"
    return (f"## Task {record.task_id}\n"
            f"{query_line}"
            f"Trajectory:\n{render_transcript(pair.trajectory)}\n"
            f"Verdict: {verdict} (score {record.score:g})\n"
            f"Critique: {record.critique}")


_MODULE_REPLY_RE = re.compile(r"```module\n(.*?)\n```", re.DOTALL)


def parse_module_reply(reply: str, kind: ModuleKind) -> str | tuple[ToolSpec, ...] | None:
    """Extract the replacement payload from an optimizer/merger reply.

    The last fenced module block wins (models tend to restate before
    finalizing). Returns None when no usable block is present.
    """
    blocks = _MODULE_REPLY_RE.findall(reply)
    if not blocks:
        return None
    text = blocks[-1]
    if kind is ModuleKind.INSTRUCTION:
        return text if text.strip() else None
    try:
        raw = canonical_loads(text)
        if not isinstance(raw, list):
            return None
        return tuple(ToolSpec.from_dict(t) for t in raw)
    except Exception:
        return None


# ---------------------------------------------------------------------------
# Rollout + evaluation fan-out
# ---------------------------------------------------------------------------

def rollout_and_evaluate(module: Module, tasks, env_factory, rollout_cfg: RolloutConfig,
                         client, evaluator, *, max_workers: int = 16) -> list[HistoryPair]:
    """Roll `module` out on each task concurrently and evaluate each trajectory.

    Results come back in task order. A rollout that dies on an environment
    fault is evaluated from its partial trajectory, i.e. counted as a failure.
    """
    tasks = list(tasks)

    def one(task: Task) -> HistoryPair:
        env = env_factory()
        try:
            trajectory = rollout(module, task, env, rollout_cfg, client)
        except RolloutError as exc:
            log.warning("rollout failed on task %s: %s", task.id, exc)
            trajectory = exc.trajectory
        return HistoryPair(trajectory, evaluator(trajectory, task, client, env))

    if len(tasks) <= 1:
        return [one(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=min(len(tasks), max_workers)) as pool:
        return list(pool.map(one, tasks))


def stats_from_pairs(module_id: str, pairs: list[HistoryPair],
                     scope: ScopedClient | None = None) -> PerformanceStats:
    totals = scope.scope.grand_totals() if scope is not None else None
    return PerformanceStats(
        module_id=module_id,
        task_ids=tuple(p.record.task_id for p in pairs),
        successes=sum(1 for p in pairs if p.record.success),
        trials=len(pairs),
        prompt_tokens=totals.prompt_tokens if totals else 0,
        completion_tokens=totals.completion_tokens if totals else 0,
        wall_clock_ms=totals.wall_clock_ms if totals else 0,
    )


# Evaluator adapters: uniform signature (trajectory, task, client, env).

def exact_evaluator(trajectory, task, client, env) -> EvaluationRecord:
    from .runtime import evaluate_exact
    return evaluate_exact(trajectory, task)


def llm_evaluator(trajectory, task, client, env) -> EvaluationRecord:
    from .runtime import evaluate_llm
    return evaluate_llm(trajectory, task, client)


def oracle_evaluator(trajectory, task, client, env) -> EvaluationRecord:
    from .runtime import evaluate_environment
    return evaluate_environment(trajectory, task, env)


EVALUATORS = {
    "exact": exact_evaluator,
    "llm": llm_evaluator,
    "environment": oracle_evaluator,
}


# ---------------------------------------------------------------------------
# The optimizer step (with context trimming)
# ---------------------------------------------------------------------------

def trim_history(history: list[HistoryPair], policy: TrimPolicy) -> list[HistoryPair]:
    """Drop exactly one pair according to `policy`."""
    if not history:
        return history
    if policy is TrimPolicy.DROP_OLDEST:
        return history[1:]
    sizes = [len(_attempt_block(p)) for p in history]
    drop = max(range(len(history)), key=lambda i: (sizes[i], -i))
    return history[:drop] + history[drop + 1:]


def _optimizer_step(client, cfg: OptimizerConfig, module: Module,
                    history: list[HistoryPair],
                    queries: dict[str, str] | None = None) -> tuple[Module, int, bool]:
    """One optimizer call; returns (new module, trim count, kept-previous flag)."""
    working = list(history)
    trims = 0
    while True:
        prompt = render_optimizer_prompt(module, working,
                                         cfg.optimizer_prompt_template, queries)
        try:
            reply = client.ask(RequestTag.OPTIMIZE, prompt).content
            break
        except ContextWindowExceeded:
            if not working:
                raise OptimizationError(
                    "optimizer prompt exceeds the context window even with an "
                    "empty history")
            working = trim_history(working, cfg.trim_policy)
            trims += 1
            if not working:
                raise OptimizationError(
                    "history exhausted by trimming; no optimizer prompt fits "
                    "the context window")

    payload = parse_module_reply(reply, module.kind)
    if payload is None:
        try:
            reply = client.ask(
                RequestTag.OPTIMIZE,
                prompt + "\n\nYour previous reply did not contain a fenced "
                         "module block. Reply again with only the module block.",
            ).content
            payload = parse_module_reply(reply, module.kind)
        except ContextWindowExceeded:
            payload = None
    if payload is None:
        log.warning("unparseable optimizer reply; keeping previous module %s", module.id)
        return module, trims, True

    new_module = Module(id=module_content_id(module.kind, payload),
                        kind=module.kind, payload=payload,
                        lineage=(module.id,), origin=ModuleOrigin.OPTIMIZED)
    return new_module, trims, False


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------

def optimize_subset(seed_module: Module, subset: TaskSet, env_factory,
                    cfg: OptimizerConfig, rollout_cfg: RolloutConfig,
                    client, evaluator) -> OptimizationResult:
    """Run the epoch loop on one task set; the fine-grained worker unit."""
    if not subset.tasks:
        raise OptimizationError("cannot optimize an empty subset")
    module = seed_module
    chain = [seed_module]
    calls = trims = kept = 0
    queries = {t.id: t.query for t in subset.tasks}
    stats: PerformanceStats | None = None

    for _ in range(cfg.epochs):
        scope = ScopedClient(client)
        pairs = rollout_and_evaluate(module, subset.tasks, env_factory,
                                     rollout_cfg, scope, evaluator)
        module, step_trims, step_kept = _optimizer_step(client, cfg, module,
                                                        pairs, queries)
        calls += 1
        trims += step_trims
        kept += 1 if step_kept else 0
        chain.append(module)
        stats = stats_from_pairs(module.id, pairs, scope)

    assert stats is not None
    return OptimizationResult(module=module, stats=stats,
                              module_chain=tuple(chain), optimizer_calls=calls,
                              trimming_events=trims, kept_previous=kept)


def run_all_at_once(seed_module: Module, full: TaskSet, env_factory,
                    cfg: OptimizerConfig, rollout_cfg: RolloutConfig,
                    client, evaluator) -> OptimizationResult:
    """The whole training set in one optimizer prompt per epoch. On large
    corpora this is exactly the configuration that trips context trimming."""
    return optimize_subset(seed_module, full, env_factory, cfg, rollout_cfg,
                           client, evaluator)


def _chunks(tasks: tuple[Task, ...], size: int) -> list[list[Task]]:
    return [list(tasks[i:i + size]) for i in range(0, len(tasks), size)]


def run_batch_wise(seed_module: Module, full: TaskSet, env_factory,
                   cfg: OptimizerConfig, rollout_cfg: RolloutConfig,
                   client, evaluator) -> OptimizationResult:
    """Fixed contiguous batches, one optimizer call per batch, carried forward."""
    if not full.tasks:
        raise OptimizationError("cannot optimize an empty task set")
    module = seed_module
    chain = [seed_module]
    calls = trims = kept = 0
    queries = {t.id: t.query for t in full.tasks}
    stats: PerformanceStats | None = None

    for _ in range(cfg.epochs):
        scope = ScopedClient(client)
        epoch_pairs: list[HistoryPair] = []
        for batch in _chunks(full.tasks, cfg.batch_size):
            pairs = rollout_and_evaluate(module, batch, env_factory,
                                         rollout_cfg, scope, evaluator)
            module, step_trims, step_kept = _optimizer_step(client, cfg, module,
                                                            pairs, queries)
            calls += 1
            trims += step_trims
            kept += 1 if step_kept else 0
            chain.append(module)
            epoch_pairs.extend(pairs)
        stats = stats_from_pairs(module.id, epoch_pairs, scope)

    assert stats is not None
    return OptimizationResult(module=module, stats=stats,
                              module_chain=tuple(chain), optimizer_calls=calls,
                              trimming_events=trims, kept_previous=kept)


def draw_bootstrap_batches(task_count: int, batch_size: int, samples: int,
                           rng: random.Random) -> list[list[int]]:
    """Sample `samples` batches of indices uniformly with replacement."""
    return [[rng.randrange(task_count) for _ in range(batch_size)]
            for _ in range(samples)]


def run_bootstrapping(seed_module: Module, full: TaskSet, env_factory,
                      cfg: OptimizerConfig, rollout_cfg: RolloutConfig,
                      client, evaluator) -> OptimizationResult:
    """Batches drawn with replacement from a seeded stream, carried forward."""
    if not full.tasks:
        raise OptimizationError("cannot optimize an empty task set")
    rng = random.Random(cfg.seed)
    module = seed_module
    chain = [seed_module]
    calls = trims = kept = 0
    queries = {t.id: t.query for t in full.tasks}
    drawn: list[tuple[str, ...]] = []
    stats: PerformanceStats | None = None

    for _ in range(cfg.epochs):
        scope = ScopedClient(client)
        epoch_pairs: list[HistoryPair] = []
        for idxs in draw_bootstrap_batches(len(full.tasks), cfg.batch_size,
                                           cfg.bootstrap_samples, rng):
            batch = [full.tasks[i] for i in idxs]
            drawn.append(tuple(t.id for t in batch))
            pairs = rollout_and_evaluate(module, batch, env_factory,
                                         rollout_cfg, scope, evaluator)
            module, step_trims, step_kept = _optimizer_step(client, cfg, module,
                                                            pairs, queries)
            calls += 1
            trims += step_trims
            kept += 1 if step_kept else 0
            chain.append(module)
            epoch_pairs.extend(pairs)
        stats = stats_from_pairs(module.id, epoch_pairs, scope)

    assert stats is not None
    return OptimizationResult(module=module, stats=stats,
                              module_chain=tuple(chain), optimizer_calls=calls,
                              trimming_events=trims, kept_previous=kept,
                              drawn_batches=tuple(drawn))


BASELINE_RUNNERS = {
    Strategy.ALL_AT_ONCE: run_all_at_once,
    Strategy.BATCH_WISE: run_batch_wise,
    Strategy.BOOTSTRAPPING: run_bootstrapping,
}


def expected_optimizer_calls(strategy: Strategy, cfg: OptimizerConfig,
                             task_count: int, subset_count: int = 1) -> int:
    """Closed-form optimizer-call count per strategy; asserted against the
    ledger to enforce comparable optimization budgets across strategies."""
    if strategy is Strategy.ALL_AT_ONCE:
        return cfg.epochs
    if strategy is Strategy.BATCH_WISE:
        return cfg.epochs * -(-task_count // cfg.batch_size)
    if strategy is Strategy.BOOTSTRAPPING:
        return cfg.epochs * cfg.bootstrap_samples
    return cfg.epochs * subset_count
