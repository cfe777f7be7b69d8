from __future__ import annotations

import math
from pathlib import Path

import pytest

from fgopt.core import (PerformanceStats, Task, TaskSet, instruction_module,
                        Module, ModuleKind, ModuleOrigin, module_content_id)
from fgopt.merge import MergeLeaf

DATA_DIR = Path(__file__).parent / "data"
UBL_DIR = DATA_DIR / "ubl"
SAMPLE_INVOICE = UBL_DIR / "sample_invoice.xml"


@pytest.fixture
def sample_invoice_bytes() -> bytes:
    return SAMPLE_INVOICE.read_bytes()


def make_tasks(n: int, *, prefix: str = "t", category=None) -> TaskSet:
    tasks = tuple(Task(id=f"{prefix}{i:03d}", query=f"query {i}", label=f"label {i}",
                       category=category(i) if callable(category) else category)
                  for i in range(n))
    return TaskSet(name=f"{prefix}set", tasks=tasks)


def stub_merge_fn(members):
    """Deterministic merge stub: concatenates payload texts."""
    payload = "\n".join(m.payload for m, _ in members)
    module = Module(id=module_content_id(ModuleKind.INSTRUCTION, payload),
                    kind=ModuleKind.INSTRUCTION, payload=payload,
                    lineage=tuple(m.id for m, _ in members),
                    origin=ModuleOrigin.MERGED)
    return module, None


def stub_backtest_fn(module, tasks):
    return PerformanceStats(module_id=module.id,
                            task_ids=tuple(t.id for t in tasks),
                            successes=len(tasks), trials=len(tasks))


def write_ruleworld_setup(tmp_path: Path, *, categories, train_per_cat: int,
                          test_total: int, env_seed: int = 7,
                          decoy_len: int = 60, run_seed: int = 42,
                          partition=None, optimizer=None, merge=None,
                          rollout=None, backend=None, out_name: str = "run") -> dict:
    """Write train/test task files for a rule world and return a config dict."""
    from fgopt.core import to_json
    from fgopt.ruleworld import RuleWorldSpec, build_taskset, spread_counts

    spec = RuleWorldSpec.generate(list(categories), seed=env_seed,
                                  decoy_len=decoy_len)
    train = build_taskset(spec, "train", {c: train_per_cat for c in categories})
    test = build_taskset(spec, "test", spread_counts(list(categories), test_total),
                         id_prefix="v")
    (tmp_path / "train.json").write_text(to_json(train), encoding="utf-8")
    (tmp_path / "test.json").write_text(to_json(test), encoding="utf-8")
    return {
        "environment": {"kind": "ruleworld", "categories": list(categories),
                        "seed": env_seed, "decoy_len": decoy_len},
        "train_tasks": str(tmp_path / "train.json"),
        "test_tasks": str(tmp_path / "test.json"),
        "partition": partition or {"mode": "category"},
        "optimizer": optimizer or {"epochs": 2},
        "merge": merge or {"threshold": 3},
        "rollout": rollout or {"max_steps": 2, "max_prompt_tokens": 100000},
        "backend": backend or {"kind": "mock", "profile": "ruleworld"},
        "evaluator": "exact",
        "output_dir": str(tmp_path / out_name),
        "seed": run_seed,
    }


def hierarchical_stub_leaves(n: int, t: int) -> list[MergeLeaf]:
    """Leaves whose payload tokens encode a nested grouping that mirrors the
    k = floor(sqrt(m)) subdivision, so clustering recovers balanced clusters
    at every recursion level."""
    paths: list[list[str]] = [[] for _ in range(n)]

    def rec(indices, prefix):
        m = len(indices)
        if m <= t:
            return
        k = max(1, math.isqrt(m))
        if k < 2:
            return
        size = -(-m // k)
        for g in range(k):
            chunk = indices[g * size:(g + 1) * size]
            for idx in chunk:
                paths[idx].append(f"{prefix}g{g}")
            rec(chunk, f"{prefix}g{g}_")

    rec(list(range(n)), "L")
    leaves = []
    for i in range(n):
        tokens = []
        for level, lab in enumerate(paths[i]):
            tokens.extend([lab] * (2 ** (len(paths[i]) - level + 1)))
        tokens.append(f"unit{i:04d}")
        module = instruction_module(" ".join(tokens))
        task = Task(id=f"task{i:04d}", query="q", label="x")
        leaves.append(MergeLeaf(
            module=module,
            tasks=TaskSet(name=f"leaf{i}", tasks=(task,)),
            stats=PerformanceStats(module_id=module.id, task_ids=(task.id,),
                                   successes=1, trials=1)))
    return leaves
