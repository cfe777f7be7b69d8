"""Task-set partitioning: split a training set into disjoint subsets.

Two strategies are provided. Random partitioning shuffles with a caller seed
and deals near-equal slices (remainders go to the lowest-indexed subsets so the
size skew is at most one). Category partitioning groups by task category tag
and emits subsets in lexicographic category order for reproducible reports.
"""
from __future__ import annotations

import random

from .core import Task, TaskSet


class PartitionError(ValueError):
    """Invalid partition request (bad subset count or missing categories)."""


def partition_random(ts: TaskSet, n: int, seed: int) -> list[TaskSet]:
    """Split `ts` into `n` disjoint subsets, deterministic for a given seed."""
    if n < 1:
        raise PartitionError(f"subset count must be >= 1, got {n}")
    if n > len(ts):
        raise PartitionError(
            f"cannot split {len(ts)} tasks into {n} subsets")
    order = list(range(len(ts)))
    random.Random(seed).shuffle(order)
    base, extra = divmod(len(ts), n)
    parts: list[TaskSet] = []
    cursor = 0
    for i in range(n):
        size = base + (1 if i < extra else 0)
        chunk = sorted(order[cursor:cursor + size])
        cursor += size
        tasks = tuple(ts.tasks[j] for j in chunk)
        parts.append(TaskSet(name=f"{ts.name}.part{i:02d}", tasks=tasks))
    return parts


def partition_category(ts: TaskSet) -> list[TaskSet]:
    """Split `ts` into one subset per distinct category tag."""
    missing = [t.id for t in ts.tasks if t.category is None]
    if missing:
        raise PartitionError(
            "tasks missing a category tag: " + ", ".join(missing))
    groups: dict[str, list[Task]] = {}
    for task in ts.tasks:
        groups.setdefault(task.category, []).append(task)  # type: ignore[arg-type]
    parts = []
    for category in sorted(groups):
        parts.append(TaskSet(name=f"{ts.name}.{category}",
                             tasks=tuple(groups[category])))
    return parts


def verify_partition(original: TaskSet, parts: list[TaskSet]) -> bool:
    """True iff `parts` are pairwise disjoint and exactly cover `original`."""
    seen: set[str] = set()
    total = 0
    for part in parts:
        for task in part.tasks:
            if task.id in seen:
                return False
            seen.add(task.id)
            total += 1
    return total == len(original) and seen == set(original.task_ids())
