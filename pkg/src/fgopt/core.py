"""Shared domain types: optimizable modules, tasks, trajectories and run statistics.

Everything here is an immutable value object. Construction performs the cheap
structural checks; `validate_module` reports the full invariant set without
raising, because callers need to inspect partially-built modules (e.g. text
coming back from an optimizer reply).

Serialization is canonical JSON: UTF-8, sorted keys, two-space indent, one
trailing newline. Identical values always produce identical bytes, which keeps
golden files diffable and lets runs be compared byte-for-byte.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Any


class ModuleKind(str, Enum):
    INSTRUCTION = "instruction"
    TOOLSET = "toolset"


class ModuleOrigin(str, Enum):
    SEED = "seed"
    OPTIMIZED = "optimized"
    MERGED = "merged"


class EvaluatorKind(str, Enum):
    EXACT_MATCH = "exact_match"
    LLM_JUDGE = "llm_judge"
    ENVIRONMENT = "environment"


class ParseError(ValueError):
    """Malformed serialized input. The message names the first offending field."""


_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def canonical_dumps(obj: Any) -> str:
    """Render canonical JSON text (sorted keys, stable whitespace)."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def derive_seed(base: int, label: str) -> int:
    """Fan a global seed out to a per-component seed via a labeled hash.

    Adding a new labeled component never shifts the streams of existing ones.
    """
    digest = hashlib.sha256(f"{base}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def canonical_loads(text: str | bytes) -> Any:
    try:
        return json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc


def _need(d: dict, key: str, ctx: str) -> Any:
    if not isinstance(d, dict):
        raise ParseError(f"{ctx}: expected object")
    if key not in d:
        raise ParseError(f"{ctx}: missing field '{key}'")
    return d[key]


def _need_str(d: dict, key: str, ctx: str) -> str:
    v = _need(d, key, ctx)
    if not isinstance(v, str):
        raise ParseError(f"{ctx}: field '{key}' must be a string")
    return v

def _need_int(d: dict, key: str, ctx: str) -> int:
    v = _need(d, key, ctx)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"{ctx}: field '{key}' must be an integer")
    return v


def _need_bool(d: dict, key: str, ctx: str) -> bool:
    v = _need(d, key, ctx)
    if not isinstance(v, bool):
        raise ParseError(f"{ctx}: field '{key}' must be a boolean")
    return v


def _need_list(d: dict, key: str, ctx: str) -> list:
    v = _need(d, key, ctx)
    if not isinstance(v, list):
        raise ParseError(f"{ctx}: field '{key}' must be a list")
    return v


def _opt_str(d: dict, key: str, ctx: str) -> str | None:
    v = _need(d, key, ctx)
    if v is None:
        return None
    if not isinstance(v, str):
        raise ParseError(f"{ctx}: field '{key}' must be a string or null")
    return v


def _need_enum(d: dict, key: str, enum_cls, ctx: str):
    v = _need_str(d, key, ctx)
    try:
        return enum_cls(v)
    except ValueError:
        raise ParseError(f"{ctx}: field '{key}' has unknown value {v!r}") from None


# ---------------------------------------------------------------------------
# Tool specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToolSpec:
    """One tool made available to the agent: a name, docs and a text body."""

    name: str
    description: str
    signature: tuple[tuple[str, str], ...] = ()
    body: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "signature": [[p, d] for p, d in self.signature],
            "body": self.body,
        }

    @classmethod
    def from_dict(cls, d: dict, ctx: str = "ToolSpec") -> "ToolSpec":
        name = _need_str(d, "name", ctx)
        description = _need_str(d, "description", ctx)
        sig_raw = _need_list(d, "signature", ctx)
        sig = []
        for entry in sig_raw:
            if (not isinstance(entry, list) or len(entry) != 2
                    or not all(isinstance(x, str) for x in entry)):
                raise ParseError(f"{ctx}: field 'signature' entries must be [name, description] pairs")
            sig.append((entry[0], entry[1]))
        body = _need_str(d, "body", ctx)
        return cls(name=name, description=description, signature=tuple(sig), body=body)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Module:
    """An optimizable unit: either an instruction text or an ordered toolset.

    Ids are content-addressed (hash of kind + payload), so modules with equal
    content collapse to the same id during merging. Lineage and origin live
    outside the hash: they describe how this particular value was produced.
    """

    id: str
    kind: ModuleKind
    payload: str | tuple[ToolSpec, ...]
    lineage: tuple[str, ...] = ()
    origin: ModuleOrigin = ModuleOrigin.SEED

    def payload_text(self) -> str:
        """Textual form of the payload (toolsets render as canonical JSON)."""
        if self.kind is ModuleKind.INSTRUCTION:
            return self.payload  # type: ignore[return-value]
        return canonical_dumps([t.to_dict() for t in self.payload]).rstrip("\n")

    def to_dict(self) -> dict:
        payload: Any
        if self.kind is ModuleKind.INSTRUCTION:
            payload = self.payload
        else:
            payload = [t.to_dict() for t in self.payload]
        return {
            "id": self.id,
            "kind": self.kind.value,
            "payload": payload,
            "lineage": list(self.lineage),
            "origin": self.origin.value,
        }

    @classmethod
    def from_dict(cls, d: dict, ctx: str = "Module") -> "Module":
        mod_id = _need_str(d, "id", ctx)
        kind = _need_enum(d, "kind", ModuleKind, ctx)
        raw_payload = _need(d, "payload", ctx)
        payload: str | tuple[ToolSpec, ...]
        if kind is ModuleKind.INSTRUCTION:
            if not isinstance(raw_payload, str):
                raise ParseError(f"{ctx}: field 'payload' must be a string for instruction modules")
            payload = raw_payload
        else:
            if not isinstance(raw_payload, list):
                raise ParseError(f"{ctx}: field 'payload' must be a list for toolset modules")
            payload = tuple(ToolSpec.from_dict(t, f"{ctx}.payload[{i}]") for i, t in enumerate(raw_payload))
        lineage_raw = _need_list(d, "lineage", ctx)
        if not all(isinstance(x, str) for x in lineage_raw):
            raise ParseError(f"{ctx}: field 'lineage' must be a list of strings")
        origin = _need_enum(d, "origin", ModuleOrigin, ctx)
        return cls(id=mod_id, kind=kind, payload=payload,
                   lineage=tuple(lineage_raw), origin=origin)


def module_content_id(kind: ModuleKind, payload: str | tuple[ToolSpec, ...]) -> str:
    if kind is ModuleKind.INSTRUCTION:
        blob = payload.encode("utf-8")  # type: ignore[union-attr]
    else:
        blob = canonical_dumps([t.to_dict() for t in payload]).encode("utf-8")
    h = hashlib.sha256(kind.value.encode("utf-8") + b"\x00" + blob)
    return h.hexdigest()[:16]


def instruction_module(text: str, *, lineage: tuple[str, ...] = (),
                       origin: ModuleOrigin = ModuleOrigin.SEED) -> Module:
    return Module(id=module_content_id(ModuleKind.INSTRUCTION, text),
                  kind=ModuleKind.INSTRUCTION, payload=text,
                  lineage=lineage, origin=origin)


def toolset_module(tools: tuple[ToolSpec, ...] | list[ToolSpec], *,
                   lineage: tuple[str, ...] = (),
                   origin: ModuleOrigin = ModuleOrigin.SEED) -> Module:
    tools = tuple(tools)
    return Module(id=module_content_id(ModuleKind.TOOLSET, tools),
                  kind=ModuleKind.TOOLSET, payload=tools,
                  lineage=lineage, origin=origin)


def validate_module(m: Module) -> list[str]:
    """Report every invariant violation of `m` in a stable order.

    Total function: never raises; an empty list means the module is valid.
    """
    violations: list[str] = []
    if m.kind is ModuleKind.INSTRUCTION:
        if not isinstance(m.payload, str) or not m.payload.strip():
            violations.append("payload empty")
    else:
        tools = m.payload if isinstance(m.payload, tuple) else ()
        if not tools and m.origin is not ModuleOrigin.SEED:
            violations.append("toolset empty for non-seed module")
        seen: set[str] = set()
        for tool in tools:
            if tool.name in seen:
                violations.append(f"duplicate tool name: {tool.name}")
            seen.add(tool.name)
        for tool in tools:
            if not _IDENT_RE.match(tool.name):
                violations.append(f"invalid tool name: {tool.name}")
    expected_origin = {0: ModuleOrigin.SEED, 1: ModuleOrigin.OPTIMIZED}.get(
        len(m.lineage), ModuleOrigin.MERGED)
    if m.origin is not expected_origin:
        violations.append("origin/lineage mismatch")
    if m.id != module_content_id(m.kind, m.payload):
        violations.append("id/content mismatch")
    return violations


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Task:
    """One query/label pair, optionally tagged with a category and a payload file."""

    id: str
    query: str
    label: str
    category: str | None = None
    payload_path: str | None = None

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError(f"task {self.id!r}: label must be nonempty")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "query": self.query,
            "label": self.label,
            "category": self.category,
            "payload_path": self.payload_path,
        }

    @classmethod
    def from_dict(cls, d: dict, ctx: str = "Task") -> "Task":
        task_id = _need_str(d, "id", ctx)
        query = _need_str(d, "query", ctx)
        label = _need_str(d, "label", ctx)
        if not label:
            raise ParseError(f"{ctx}: field 'label' must be nonempty")
        category = _opt_str(d, "category", ctx)
        payload_path = _opt_str(d, "payload_path", ctx)
        return cls(id=task_id, query=query, label=label,
                   category=category, payload_path=payload_path)


@dataclass(frozen=True)
class TaskSet:
    name: str
    tasks: tuple[Task, ...]

    def __post_init__(self) -> None:
        ids = [t.id for t in self.tasks]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"task set {self.name!r}: duplicate task ids {dupes}")

    def __len__(self) -> int:
        return len(self.tasks)

    def task_ids(self) -> tuple[str, ...]:
        return tuple(t.id for t in self.tasks)

    def to_dict(self) -> dict:
        return {"name": self.name, "tasks": [t.to_dict() for t in self.tasks]}

    @classmethod
    def from_dict(cls, d: dict, ctx: str = "TaskSet") -> "TaskSet":
        name = _need_str(d, "name", ctx)
        raw = _need_list(d, "tasks", ctx)
        tasks = tuple(Task.from_dict(t, f"{ctx}.tasks[{i}]") for i, t in enumerate(raw))
        try:
            return cls(name=name, tasks=tasks)
        except ValueError as exc:
            raise ParseError(f"{ctx}: {exc}") from exc


# ---------------------------------------------------------------------------
# Trajectories and evaluations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Ordered observation/action record of one rollout.

    `steps` may be empty only when the rollout failed before the first
    observation; that case travels inside a RolloutError, not as a result.
    """

    task_id: str
    steps: tuple[tuple[str, str], ...]
    final_answer: str | None = None
    truncated: bool = False

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "steps": [{"observation": o, "action": a} for o, a in self.steps],
            "final_answer": self.final_answer,
            "truncated": self.truncated,
        }

    @classmethod
    def from_dict(cls, d: dict, ctx: str = "Trajectory") -> "Trajectory":
        task_id = _need_str(d, "task_id", ctx)
        raw = _need_list(d, "steps", ctx)
        steps = []
        for i, entry in enumerate(raw):
            sctx = f"{ctx}.steps[{i}]"
            obs = _need_str(entry, "observation", sctx) if isinstance(entry, dict) else None
            if obs is None:
                raise ParseError(f"{sctx}: expected object")
            act = _need_str(entry, "action", sctx)
            steps.append((obs, act))
        final_answer = _opt_str(d, "final_answer", ctx)
        truncated = _need_bool(d, "truncated", ctx)
        return cls(task_id=task_id, steps=tuple(steps),
                   final_answer=final_answer, truncated=truncated)


@dataclass(frozen=True)
class EvaluationRecord:
    """Verdict plus textual critique for one trajectory.

    The critique is the optimization signal: on failure it describes what went
    wrong so the optimizer can steer the next module revision.
    """

    task_id: str
    success: bool
    score: float
    critique: str
    evaluator_kind: EvaluatorKind

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.evaluator_kind is EvaluatorKind.EXACT_MATCH and self.success and self.score != 1.0:
            raise ValueError("exact-match success requires score 1.0")
        if (self.evaluator_kind is EvaluatorKind.LLM_JUDGE and not self.success
                and not self.critique):
            raise ValueError("failed judge evaluations must carry a critique")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "success": self.success,
            "score": self.score,
            "critique": self.critique,
            "evaluator_kind": self.evaluator_kind.value,
        }

    @classmethod
    def from_dict(cls, d: dict, ctx: str = "EvaluationRecord") -> "EvaluationRecord":
        task_id = _need_str(d, "task_id", ctx)
        success = _need_bool(d, "success", ctx)
        score = _need(d, "score", ctx)
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise ParseError(f"{ctx}: field 'score' must be a number")
        critique = _need_str(d, "critique", ctx)
        kind = _need_enum(d, "evaluator_kind", EvaluatorKind, ctx)
        try:
            return cls(task_id=task_id, success=success, score=float(score),
                       critique=critique, evaluator_kind=kind)
        except ValueError as exc:
            raise ParseError(f"{ctx}: {exc}") from exc


# ---------------------------------------------------------------------------
# Performance statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerformanceStats:
    """Success counts plus token/time cost of evaluating one module.

    The rate is stored as the (successes, trials) pair and derived on read as
    an exact fraction, so comparisons between modules never suffer float drift.
    """

    module_id: str
    task_ids: tuple[str, ...]
    successes: int
    trials: int
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_clock_ms: int = 0

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0 <= self.successes <= self.trials:
            raise ValueError(f"successes {self.successes} outside [0, {self.trials}]")
        if self.prompt_tokens < 0 or self.completion_tokens < 0 or self.wall_clock_ms < 0:
            raise ValueError("token and time counts must be nonnegative")

    @property
    def success_rate(self) -> Fraction:
        return Fraction(self.successes, self.trials)

    def rate_text(self) -> str:
        return f"{self.successes}/{self.trials} ({float(self.success_rate):.3f})"

    def to_dict(self) -> dict:
        return {
            "module_id": self.module_id,
            "task_ids": list(self.task_ids),
            "successes": self.successes,
            "trials": self.trials,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "wall_clock_ms": self.wall_clock_ms,
        }

    @classmethod
    def from_dict(cls, d: dict, ctx: str = "PerformanceStats") -> "PerformanceStats":
        module_id = _need_str(d, "module_id", ctx)
        raw_ids = _need_list(d, "task_ids", ctx)
        if not all(isinstance(x, str) for x in raw_ids):
            raise ParseError(f"{ctx}: field 'task_ids' must be a list of strings")
        successes = _need_int(d, "successes", ctx)
        trials = _need_int(d, "trials", ctx)
        prompt_tokens = _need_int(d, "prompt_tokens", ctx)
        completion_tokens = _need_int(d, "completion_tokens", ctx)
        wall_clock_ms = _need_int(d, "wall_clock_ms", ctx)
        try:
            return cls(module_id=module_id, task_ids=tuple(raw_ids),
                       successes=successes, trials=trials,
                       prompt_tokens=prompt_tokens,
                       completion_tokens=completion_tokens,
                       wall_clock_ms=wall_clock_ms)
        except ValueError as exc:
            raise ParseError(f"{ctx}: {exc}") from exc


# ---------------------------------------------------------------------------
# Merge tree nodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MergeNode:
    """One node of the bottom-up merge tree.

    Leaves carry per-subset optimized modules (no backtest stats of their own;
    their training stats live with the leaf artifacts). Internal nodes always
    carry the backtest of their merged module over the covered task union.
    """

    node_id: str
    module_id: str
    children: tuple[str, ...]
    covered_task_ids: frozenset[str]
    backtest: PerformanceStats | None
    depth: int

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.children and self.backtest is None:
            raise ValueError("internal nodes must carry backtest stats")
        if not self.children and self.backtest is not None:
            raise ValueError("leaf nodes must not carry backtest stats")

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "module_id": self.module_id,
            "children": list(self.children),
            "covered_task_ids": sorted(self.covered_task_ids),
            "backtest": self.backtest.to_dict() if self.backtest else None,
            "depth": self.depth,
        }

    @classmethod
    def from_dict(cls, d: dict, ctx: str = "MergeNode") -> "MergeNode":
        node_id = _need_str(d, "node_id", ctx)
        module_id = _need_str(d, "module_id", ctx)
        children_raw = _need_list(d, "children", ctx)
        if not all(isinstance(x, str) for x in children_raw):
            raise ParseError(f"{ctx}: field 'children' must be a list of strings")
        covered_raw = _need_list(d, "covered_task_ids", ctx)
        if not all(isinstance(x, str) for x in covered_raw):
            raise ParseError(f"{ctx}: field 'covered_task_ids' must be a list of strings")
        backtest_raw = _need(d, "backtest", ctx)
        backtest = (PerformanceStats.from_dict(backtest_raw, f"{ctx}.backtest")
                    if backtest_raw is not None else None)
        depth = _need_int(d, "depth", ctx)
        try:
            return cls(node_id=node_id, module_id=module_id,
                       children=tuple(children_raw),
                       covered_task_ids=frozenset(covered_raw),
                       backtest=backtest, depth=depth)
        except ValueError as exc:
            raise ParseError(f"{ctx}: {exc}") from exc


# ---------------------------------------------------------------------------
# Generic serialization entry points
# ---------------------------------------------------------------------------

def to_json(value) -> str:
    """Canonical JSON text for any core type."""
    return canonical_dumps(value.to_dict())


def module_from_json(text: str | bytes) -> Module:
    return Module.from_dict(canonical_loads(text))


def task_from_json(text: str | bytes) -> Task:
    return Task.from_dict(canonical_loads(text))


def taskset_from_json(text: str | bytes) -> TaskSet:
    return TaskSet.from_dict(canonical_loads(text))


def trajectory_from_json(text: str | bytes) -> Trajectory:
    return Trajectory.from_dict(canonical_loads(text))


def evaluation_from_json(text: str | bytes) -> EvaluationRecord:
    return EvaluationRecord.from_dict(canonical_loads(text))


def stats_from_json(text: str | bytes) -> PerformanceStats:
    return PerformanceStats.from_dict(canonical_loads(text))


def merge_node_from_json(text: str | bytes) -> MergeNode:
    return MergeNode.from_dict(canonical_loads(text))
