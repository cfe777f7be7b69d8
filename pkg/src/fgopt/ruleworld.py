"""A synthetic passphrase world whose behavior is a pure function of the module.

Each task category owns a secret rule token of the form RULE-<category>-<hex>.
A rollout succeeds exactly when the module payload contains the token for the
task's category: the scripted mock agent can only echo tokens it finds in its
prompt, and the task text itself never contains any (the decoy filler is drawn
from a token-free word list). That makes the whole divide/optimize/merge
pipeline measurable and byte-reproducible without any live model.

The module also ships the scripted mock responders (agent, optimizer, merger)
that drive deterministic end-to-end runs via the mock backend.
"""
from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass

from .core import Task, TaskSet, Trajectory
from .llm import ChatRequest, MockBackend, MockRule, RequestTag
from .runtime import Environment, EnvironmentFault

TOKEN_RE = re.compile(r"RULE-([a-z][a-z0-9_]*)-([0-9a-f]{4})")

_DECOY_WORDS = (
    "ledger manifest pallet courier depot waybill customs transit harbor "
    "freight carton gauge routing berth cargo tariff axle chassis gantry "
    "quay stevedore drayage hopper spur siding bulkhead lading tonnage"
).split()


def _token_for(category: str, seed: int) -> str:
    digest = hashlib.sha256(f"{seed}:{category}".encode("utf-8")).hexdigest()
    return f"RULE-{category}-{digest[:4]}"


@dataclass(frozen=True)
class RuleWorldSpec:
    """Category-to-secret mapping plus decoy sizing for generated tasks."""

    rules: tuple[tuple[str, str], ...]
    decoy_len: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        tokens = [t for _, t in self.rules]
        if len(tokens) != len(set(tokens)):
            raise ValueError("rule tokens must be pairwise distinct")
        for token in tokens:
            if not TOKEN_RE.fullmatch(token):
                raise ValueError(f"malformed rule token {token!r}")

    @classmethod
    def generate(cls, categories: list[str], *, seed: int = 0,
                 decoy_len: int = 200) -> "RuleWorldSpec":
        rules = tuple((c, _token_for(c, seed)) for c in sorted(categories))
        return cls(rules=rules, decoy_len=decoy_len, seed=seed)

    def token_for(self, category: str) -> str:
        for cat, token in self.rules:
            if cat == category:
                return token
        raise KeyError(category)

    def categories(self) -> list[str]:
        return [c for c, _ in self.rules]

    def to_dict(self) -> dict:
        return {"rules": [[c, t] for c, t in self.rules],
                "decoy_len": self.decoy_len, "seed": self.seed}


def _decoy_text(task_key: str, length: int, seed: int) -> str:
    rng = random.Random(f"{seed}:{task_key}")
    words = []
    size = 0
    while size < length:
        word = rng.choice(_DECOY_WORDS)
        words.append(word)
        size += len(word) + 1
    return " ".join(words)


def build_taskset(spec: RuleWorldSpec, name: str, per_category: dict[str, int],
                  *, id_prefix: str = "t") -> TaskSet:
    """Generate tasks grouped by category, in the spec's category order."""
    tasks = []
    index = 0
    for category in spec.categories():
        for _ in range(per_category.get(category, 0)):
            task_id = f"{id_prefix}{index:04d}"
            decoy = _decoy_text(f"{name}:{task_id}", spec.decoy_len, spec.seed)
            tasks.append(Task(
                id=task_id,
                query=(f"Category: {category}. State this category's secret "
                       f"passphrase. Notes: {decoy}"),
                label=spec.token_for(category),
                category=category,
            ))
            index += 1
    return TaskSet(name=name, tasks=tuple(tasks))


def spread_counts(categories: list[str], total: int) -> dict[str, int]:
    """Distribute `total` tasks over categories, earliest categories first."""
    base, extra = divmod(total, len(categories))
    return {c: base + (1 if i < extra else 0)
            for i, c in enumerate(sorted(categories))}


class RuleWorldEnvironment(Environment):
    """One-shot challenge: the observation is the task text; the episode ends
    after the agent's single reply."""

    def __init__(self, spec: RuleWorldSpec) -> None:
        self.spec = spec
        self._task: Task | None = None
        self._done = False

    def reset(self, task: Task) -> str:
        if task.category is None:
            raise EnvironmentFault(f"task {task.id} has no category")
        self._task = task
        self._done = False
        return task.query

    def step(self, action: str) -> tuple[str, bool]:
        if self._task is None:
            raise EnvironmentFault("step before reset")
        if self._done:
            raise EnvironmentFault("step after terminal state")
        self._done = True
        expected = self.spec.token_for(self._task.category)  # type: ignore[arg-type]
        if expected in action:
            return ("passphrase accepted", True)
        return ("passphrase rejected", True)

    def oracle_check(self, trajectory: Trajectory, label: str) -> bool | None:
        if trajectory.final_answer is not None:
            return label in trajectory.final_answer
        if trajectory.steps:
            return label in trajectory.steps[-1][1]
        return False


# ---------------------------------------------------------------------------
# Scripted mock responders
# ---------------------------------------------------------------------------

_CATEGORY_RE = re.compile(r"Category:\s*([a-z][a-z0-9_]*)")
_MODULE_BLOCK_RE = re.compile(r"```module\n(.*?)\n```", re.DOTALL)


def agent_responder(req: ChatRequest, prompt: str) -> str:
    """Echo the rule token for the observed category if the prompt carries it.

    This is intentionally the only way a mock rollout can succeed: the token
    must already be present in the module section of the prompt.
    """
    categories = _CATEGORY_RE.findall(prompt)
    category = categories[-1] if categories else None
    for cat, suffix in TOKEN_RE.findall(prompt):
        if cat == category:
            return f"final answer: RULE-{cat}-{suffix}"
    return "I do not know the passphrase yet."


def _seed_line(prompt: str) -> str:
    blocks = _MODULE_BLOCK_RE.findall(prompt)
    if blocks:
        return blocks[0].splitlines()[0] if blocks[0] else ""
    return "Answer each task."


def _module_tokens(prompt: str) -> list[str]:
    """Tokens inside the current-module block, in order, deduplicated."""
    blocks = _MODULE_BLOCK_RE.findall(prompt)
    if not blocks:
        return []
    return _dedupe(["RULE-%s-%s" % m for m in TOKEN_RE.findall(blocks[0])])


def _critique_tokens(prompt: str) -> list[str]:
    """Tokens mentioned after the module block (i.e. quoted in critiques)."""
    m = _MODULE_BLOCK_RE.search(prompt)
    tail = prompt[m.end():] if m else prompt
    return _dedupe(["RULE-%s-%s" % t for t in TOKEN_RE.findall(tail)])


def _dedupe(items: list[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for item in items:
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


def _render_module_payload(seed_line: str, tokens: list[str]) -> str:
    payload = seed_line
    if tokens:
        payload += "\nKnown passphrases: " + " ".join(tokens)
    return f"```module\n{payload}\n```"


def make_optimizer_responder(retain: int | None = None):
    """Scripted optimizer: appends rule tokens quoted in visible critiques.

    With `retain=None` the optimizer keeps every token already in the module
    (a well-behaved accumulator). With an integer it keeps only the `retain`
    most recent prior tokens plus the current critiques' tokens, modeling an
    optimizer that overwrites previously learned patterns.
    """

    def respond(req: ChatRequest, prompt: str) -> str:
        old = _module_tokens(prompt)
        new = _critique_tokens(prompt)
        if retain is not None:
            old = old[-retain:] if retain > 0 else []
        tokens = _dedupe(old + [t for t in new if t not in old])
        return _render_module_payload(_seed_line(prompt), tokens)

    return respond


def merge_responder(req: ChatRequest, prompt: str) -> str:
    """Scripted merger: union of all member tokens, first-seen order."""
    blocks = _MODULE_BLOCK_RE.findall(prompt)
    tokens: list[str] = []
    for block in blocks:
        tokens.extend("RULE-%s-%s" % m for m in TOKEN_RE.findall(block))
    first = blocks[0].splitlines()[0] if blocks and blocks[0] else "Answer each task."
    return _render_module_payload(first, _dedupe(tokens))


def judge_responder(req: ChatRequest, prompt: str) -> str:
    """Scripted judge mirroring the oracle: PASS iff the expected token shows
    up in the final answer section of the transcript."""
    expected_m = re.search(r"Expected outcome:\n(\S+)", prompt)
    answer_m = re.search(r"Final answer: (.*)", prompt)
    expected = expected_m.group(1) if expected_m else ""
    answer = answer_m.group(1) if answer_m else ""
    if expected and expected in answer:
        return "VERDICT: PASS\nCritique: the answer carries the expected passphrase"
    return (f"VERDICT: FAIL\nCritique: the reply never stated the expected "
            f"passphrase {expected}")


def mock_backend(*, context_limit: int | None = None, latency_ms: int = 0,
                 delay_s: float = 0.0, optimizer_retain: int | None = None,
                 seed: int = 0) -> MockBackend:
    """Full scripted stack for deterministic end-to-end runs."""
    rules = [
        MockRule(tag=RequestTag.AGENT_STEP, reply=agent_responder),
        MockRule(tag=RequestTag.OPTIMIZE,
                 reply=make_optimizer_responder(retain=optimizer_retain)),
        MockRule(tag=RequestTag.MERGE, reply=merge_responder),
        MockRule(tag=RequestTag.EVALUATE, reply=judge_responder),
    ]
    return MockBackend(rules, context_limit=context_limit,
                       latency_ms=latency_ms, delay_s=delay_s, seed=seed)
