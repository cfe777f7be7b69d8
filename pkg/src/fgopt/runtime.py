"""Agent execution: roll a module out against an environment, then evaluate.

An environment is anything implementing the reset/step protocol below. The
rollout loop feeds the module, the pinned task statement, the transcript so
far and the current observation to the agent backend, one completion per step,
until the agent emits a final answer, the environment terminates, or a budget
(steps or prompt tokens) is hit.
"""
from __future__ import annotations

import re
from abc import ABC, abstractmethod
from dataclasses import dataclass

from .core import EvaluationRecord, EvaluatorKind, Module, Task, Trajectory
from .llm import ContextWindowExceeded, LlmClient, RequestTag, estimate_tokens


class EnvironmentFault(Exception):
    """The environment itself failed (bad state transition, missing file, ...)."""


class Environment(ABC):
    """Plugin interface for task environments.

    Contract: `reset` must be called before `step`; stepping after a terminal
    transition is a fault. `oracle_check` may return a deterministic verdict
    for a finished trajectory, or None when the environment has no oracle.
    """

    @abstractmethod
    def reset(self, task: Task) -> str:
        """Start an episode for `task` and return the first observation."""

    @abstractmethod
    def step(self, action: str) -> tuple[str, bool]:
        """Apply `action`; return (next observation, terminal flag)."""

    def oracle_check(self, trajectory: Trajectory, label: str) -> bool | None:
        return None


DEFAULT_AGENT_TEMPLATE = """{module}

{history}

Observation:
{observation}

Respond with your next action. When you have the answer, reply with a line
"final answer: [your answer]"."""


@dataclass(frozen=True)
class RolloutConfig:
    max_steps: int = 30
    max_prompt_tokens: int = 8192
    agent_prompt_template: str = DEFAULT_AGENT_TEMPLATE

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


class RolloutError(Exception):
    """Environment fault during a rollout; carries the partial trajectory."""

    def __init__(self, message: str, trajectory: Trajectory) -> None:
        super().__init__(message)
        self.trajectory = trajectory


_FINAL_ANSWER_RE = re.compile(r"^\s*final answer:\s*(.*?)\s*$",
                              re.IGNORECASE | re.MULTILINE)


def extract_final_answer(text: str) -> str | None:
    """Last line of `text` matching the mandated "final answer:" format."""
    matches = _FINAL_ANSWER_RE.findall(text)
    if not matches:
        return None
    answer = matches[-1]
    # The answer format brackets are presentation, not content.
    if answer.startswith("[") and answer.endswith("]"):
        answer = answer[1:-1]
    return answer


def render_agent_prompt(module: Module, task: Task,
                        steps: list[tuple[str, str]], observation: str,
                        cfg: RolloutConfig) -> str:
    """Render the agent prompt, dropping oldest steps to fit the token budget.

    The task statement stays pinned at the top of the history block no matter
    how much of the transcript gets dropped.
    """
    window = list(steps)
    while True:
        lines = [f"Task: {task.query}"]
        for i, (obs, act) in enumerate(window, start=1):
            lines.append(f"[{i}] observation: {obs}")
            lines.append(f"[{i}] action: {act}")
        history = "\n".join(lines)
        prompt = cfg.agent_prompt_template.format(
            module=module.payload_text(), history=history, observation=observation)
        if estimate_tokens(prompt) <= cfg.max_prompt_tokens or not window:
            return prompt
        window.pop(0)


def rollout(module: Module, task: Task, env: Environment,
            cfg: RolloutConfig, client: LlmClient) -> Trajectory:
    """Run one episode of `module` on `task`. Every agent call is tagged
    `agent_step` in the ledger. A context overflow mid-episode truncates the
    trajectory instead of failing the rollout."""
    steps: list[tuple[str, str]] = []
    final_answer: str | None = None
    truncated = False

    try:
        observation = env.reset(task)
    except Exception as exc:
        raise RolloutError(f"environment reset failed: {exc}",
                           Trajectory(task.id, (), None, False)) from exc

    for _ in range(cfg.max_steps):
        prompt = render_agent_prompt(module, task, steps, observation, cfg)
        try:
            resp = client.ask(RequestTag.AGENT_STEP, prompt)
        except ContextWindowExceeded:
            truncated = True
            break
        action = resp.content
        steps.append((observation, action))
        final_answer = extract_final_answer(action)
        if final_answer is not None:
            break
        try:
            observation, done = env.step(action)
        except EnvironmentFault as exc:
            raise RolloutError(
                f"environment fault on task {task.id}: {exc}",
                Trajectory(task.id, tuple(steps), None, False)) from exc
        if done:
            break
    else:
        truncated = True

    return Trajectory(task_id=task.id, steps=tuple(steps),
                      final_answer=final_answer, truncated=truncated)


# ---------------------------------------------------------------------------
# Evaluators
# ---------------------------------------------------------------------------

def normalize_answer(text: str) -> str:
    """Trim the ends and collapse internal whitespace runs to single spaces."""
    return " ".join(text.split())


def evaluate_exact(trajectory: Trajectory, task: Task) -> EvaluationRecord:
    """Exact-match verdict under whitespace normalization."""
    answer = trajectory.final_answer
    if answer is not None and normalize_answer(answer) == normalize_answer(task.label):
        return EvaluationRecord(task_id=task.id, success=True, score=1.0,
                                critique="answer matched the expected label",
                                evaluator_kind=EvaluatorKind.EXACT_MATCH)
    got = repr(normalize_answer(answer)) if answer is not None else "<no final answer>"
    return EvaluationRecord(
        task_id=task.id, success=False, score=0.0,
        critique=f"expected {normalize_answer(task.label)!r}, got {got}",
        evaluator_kind=EvaluatorKind.EXACT_MATCH)


def evaluate_environment(trajectory: Trajectory, task: Task,
                         env: Environment) -> EvaluationRecord:
    """Use the environment's deterministic oracle as the verdict."""
    verdict = env.oracle_check(trajectory, task.label)
    if verdict is None:
        raise EvaluationError(f"environment provides no oracle for task {task.id}")
    critique = ("oracle accepted the trajectory" if verdict
                else f"oracle rejected the trajectory; expected {task.label!r}")
    return EvaluationRecord(task_id=task.id, success=verdict,
                            score=1.0 if verdict else 0.0, critique=critique,
                            evaluator_kind=EvaluatorKind.ENVIRONMENT)


class EvaluationError(Exception):
    """The judge reply could not be parsed even after a reprompt."""


_VERDICT_RE = re.compile(r"^\s*VERDICT:\s*(PASS|FAIL)\s*$",
                         re.IGNORECASE | re.MULTILINE)

JUDGE_PROMPT_TEMPLATE = """You are evaluating whether an agent solved a task.

Task query:
{query}

Expected outcome:
{label}

Agent trajectory:
{transcript}

Final answer: {final_answer}

Analyze the trajectory: determine correctness, identify failures and patterns,
and point out areas for improvement. Reply with a line "VERDICT: PASS" or
"VERDICT: FAIL", then a line starting with "Critique:" and your analysis."""


def render_transcript(trajectory: Trajectory, *, clip: int = 2000) -> str:
    if not trajectory.steps:
        return "(no steps recorded)"
    lines = []
    for i, (obs, act) in enumerate(trajectory.steps, start=1):
        lines.append(f"[{i}] observation: {_clip(obs, clip)}")
        lines.append(f"[{i}] action: {_clip(act, clip)}")
    if trajectory.truncated:
        lines.append("(trajectory truncated by budget)")
    return "\n".join(lines)


def _clip(text: str, limit: int) -> str:
    if len(text) <= limit:
        return text
    half = limit // 2
    return text[:half] + " ... " + text[-half:]


def evaluate_llm(trajectory: Trajectory, task: Task,
                 client: LlmClient) -> EvaluationRecord:
    """Post-hoc LLM judge; the reply must carry a mandated VERDICT line.

    One reprompt is attempted on an unparseable reply; a second failure raises
    instead of silently scoring.
    """
    prompt = JUDGE_PROMPT_TEMPLATE.format(
        query=task.query, label=task.label,
        transcript=render_transcript(trajectory),
        final_answer=trajectory.final_answer or "(none)")
    reply = client.ask(RequestTag.EVALUATE, prompt).content
    verdict = _parse_verdict(reply)
    if verdict is None:
        reply = client.ask(
            RequestTag.EVALUATE,
            prompt + '\n\nYour previous reply lacked the mandatory verdict line. '
                     'Reply again with "VERDICT: PASS" or "VERDICT: FAIL" '
                     'followed by "Critique: ..."').content
        verdict = _parse_verdict(reply)
        if verdict is None:
            raise EvaluationError(
                f"judge reply for task {task.id} carried no VERDICT line after reprompt")
    success = verdict
    critique = _parse_critique(reply)
    if not critique and not success:
        critique = "judge gave a FAIL verdict without further critique"
    return EvaluationRecord(task_id=task.id, success=success,
                            score=1.0 if success else 0.0, critique=critique,
                            evaluator_kind=EvaluatorKind.LLM_JUDGE)


def _parse_verdict(reply: str) -> bool | None:
    m = _VERDICT_RE.search(reply)
    if not m:
        return None
    return m.group(1).upper() == "PASS"


def _parse_critique(reply: str) -> str:
    marker = re.search(r"^\s*Critique:\s*", reply, re.IGNORECASE | re.MULTILINE)
    if marker:
        return reply[marker.end():].strip()
    return _VERDICT_RE.sub("", reply).strip()
