"""Hindsight judging: prompt rendering, response parsing, scripted and remote judges.

One judge call covers a whole trajectory and returns per-step
(q_value, experience) pairs. Experience-search steps are never judged.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterable, Literal, Mapping, Sequence

import httpx

from expbank.core import Trajectory
from expbank.errors import (
    ConfigError,
    DuplicateStep,
    GroundTruthLeak,
    InconsistentOutcome,
    JudgeFailure,
    JudgementError,
    MissingScriptEntry,
    OutOfRangeScore,
    StepOutOfRange,
    UnparseableJudgement,
)

logger = logging.getLogger(__name__)

JUDGE_URL_ENV = "EXPBANK_JUDGE_URL"
PROMPT_VERSION = "v1"
Q_MIN, Q_MAX = 0.0, 10.0


@dataclass(frozen=True)
class StepJudgement:
    step: int
    q_value: float
    experience_text: str

    def __post_init__(self):
        if isinstance(self.step, bool) or not isinstance(self.step, int) or self.step < 0:
            raise JudgementError(f"step must be a non-negative integer, got {self.step!r}")
        q = float(self.q_value)
        if not (math.isfinite(q) and Q_MIN <= q <= Q_MAX):
            raise OutOfRangeScore(self.step, self.q_value)
        object.__setattr__(self, "q_value", q)
        if not isinstance(self.experience_text, str) or not self.experience_text.strip():
            raise JudgementError(f"step {self.step}: experience text must be non-empty")


@dataclass(frozen=True)
class JudgeConfig:
    mode: Literal["remote", "scripted"] = "scripted"
    model_name: str = "gpt-4o"
    max_retries: int = 2
    concurrency: int = 4

    def __post_init__(self):
        if self.mode not in ("remote", "scripted"):
            raise ConfigError(f"unknown judge mode {self.mode!r}")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")


@dataclass
class JudgeResult:
    judgements: list[StepJudgement]
    rejected: list[JudgementError] = field(default_factory=list)


def judged_steps(trajectory: Trajectory) -> list[int]:
    """Indices of the steps a judge should score (everything but experience search)."""
    return [t for t, s in enumerate(trajectory.steps) if s.action.kind != "experience_search"]


# ---------------------------------------------------------------------------
# prompt rendering

_PLACEHOLDER = re.compile(r"\{(question|ground_truth|traj_text|images_note|type_line|tools_section)\}")


def load_template(correct: bool, version: str = PROMPT_VERSION) -> str:
    name = f"hindsight_{'correct' if correct else 'incorrect'}.{version}.txt"
    return resources.files("expbank").joinpath("prompts", name).read_text(encoding="utf-8")


def fill_template(template: str, values: Mapping[str, str]) -> str:
    # single pass, so placeholder-looking text inside values is left alone
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(1), m.group(0)), template)


def render_trajectory_text(trajectory: Trajectory) -> str:
    blocks = []
    for t in judged_steps(trajectory):
        step = trajectory.steps[t]
        a = step.action
        call = "answer" if a.kind == "answer" else a.name
        blocks.append(f"State {t}:\nAction: {call}({a.params})\nObservation: {step.observation}")
    return "\n\n".join(blocks)


def _images_note(trajectory: Trajectory) -> str:
    refs = trajectory.initial_state.visual_refs
    if not refs:
        return "No images are attached to this task."
    parts = [r.id if r.caption is None else f"{r.id} ({r.caption})" for r in refs]
    return "Images: " + "; ".join(parts)


def _tools_section(trajectory: Trajectory, tools: Sequence[str] | None) -> str:
    if tools is None:
        seen: dict[str, None] = {}
        for s in trajectory.steps:
            if s.action.kind == "tool":
                seen.setdefault(s.action.name)
        tools = list(seen)
    return "Available tools: " + (", ".join(tools) if tools else "none")


def build_hindsight_prompt(trajectory: Trajectory, tools: Sequence[str] | None = None) -> str:
    outcome = trajectory.outcome
    if not outcome.correct and outcome.ground_truth is None:
        raise InconsistentOutcome(f"trajectory {trajectory.id!r} is incorrect but has no ground_truth")
    d = trajectory.initial_state.task_descriptor
    values = {
        "question": trajectory.initial_state.instruction,
        "ground_truth": outcome.ground_truth or "",
        "traj_text": render_trajectory_text(trajectory),
        "images_note": _images_note(trajectory),
        "type_line": f"(Task type: {d})" if d else "",
        "tools_section": _tools_section(trajectory, tools),
    }
    return fill_template(load_template(outcome.correct), values)


# ---------------------------------------------------------------------------
# response parsing

_FENCE = re.compile(r"```[a-zA-Z0-9_-]*\n?|```")
_DECODER = json.JSONDecoder()


def _shape_ok(item: object) -> bool:
    if not isinstance(item, dict):
        return False
    state, q, exp = item.get("state"), item.get("q_value"), item.get("experience")
    if isinstance(state, bool) or not isinstance(state, int):
        return False
    if isinstance(q, bool) or not isinstance(q, (int, float)):
        return False
    return isinstance(exp, str) and bool(exp.strip())


def _find_array(raw: str) -> list[dict]:
    text = _FENCE.sub("\n", raw)
    pos = text.find("[")
    while pos != -1:
        try:
            value, _ = _DECODER.raw_decode(text, pos)
        except json.JSONDecodeError:
            value = None
        if isinstance(value, list) and all(_shape_ok(v) for v in value):
            return value
        pos = text.find("[", pos + 1)
    raise UnparseableJudgement("no well-formed judgement array found in judge output")


def leaks_ground_truth(text: str, ground_truth: str | None) -> bool:
    if not ground_truth or not ground_truth.strip():
        return False
    needle = re.escape(ground_truth.strip())
    return re.search(rf"(?<!\w){needle}(?!\w)", text) is not None


def parse_judgement_lenient(
    raw: str,
    length: int,
    ground_truth: str | None = None,
    allowed_steps: Iterable[int] | None = None,
) -> JudgeResult:
    """Parse judge output, dropping (not clamping) invalid steps.

    Raises UnparseableJudgement only when no array is found at all; every
    per-step problem is returned in `rejected`.
    """
    items = _find_array(raw)
    allowed = set(range(length)) if allowed_steps is None else set(allowed_steps) & set(range(length))
    counts: dict[int, int] = {}
    for item in items:
        counts[item["state"]] = counts.get(item["state"], 0) + 1

    accepted: dict[int, StepJudgement] = {}
    rejected: list[JudgementError] = []
    reported_dupes: set[int] = set()
    for item in items:
        step, q, text = item["state"], item["q_value"], item["experience"]
        if counts[step] > 1:
            if step not in reported_dupes:
                rejected.append(DuplicateStep(step))
                reported_dupes.add(step)
            continue
        if step not in allowed:
            rejected.append(StepOutOfRange(step, length))
            continue
        if not (math.isfinite(q) and Q_MIN <= q <= Q_MAX):
            rejected.append(OutOfRangeScore(step, q))
            continue
        if leaks_ground_truth(text, ground_truth):
            rejected.append(GroundTruthLeak(step))
            continue
        accepted[step] = StepJudgement(step, float(q), text)
    return JudgeResult([accepted[s] for s in sorted(accepted)], rejected)


def parse_judgement(raw: str, length: int, ground_truth: str | None = None) -> list[StepJudgement]:
    """Strict parse: any rejected step raises its error."""
    result = parse_judgement_lenient(raw, length, ground_truth)
    if result.rejected:
        raise result.rejected[0]
    return result.judgements


def render_judgements(judgements: Iterable[StepJudgement]) -> str:
    return json.dumps(
        [{"state": j.step, "q_value": j.q_value, "experience": j.experience_text} for j in judgements],
        ensure_ascii=False,
    )


# ---------------------------------------------------------------------------
# judges

Script = Mapping[int, tuple[float, str]]


def scripted_judge(
    trajectory: Trajectory, script: Script, default: tuple[float, str] | None = None
) -> list[StepJudgement]:
    out = []
    for t in judged_steps(trajectory):
        if t in script:
            q, text = script[t]
        elif default is not None:
            q, text = default
        else:
            raise MissingScriptEntry(f"trajectory {trajectory.id!r}: no script entry for step {t}")
        out.append(StepJudgement(t, q, text))
    return out


class ScriptedJudge:
    """Deterministic judge driven by a rule or a per-trajectory script table."""

    def __init__(
        self,
        rule: Callable[[Trajectory, int], tuple[float, str]] | None = None,
        scripts: Mapping[str, Script] | None = None,
        default: tuple[float, str] | None = None,
    ):
        self.rule = rule
        self.scripts = dict(scripts or {})
        self.default = default

    @classmethod
    def from_json(cls, data: Mapping) -> ScriptedJudge:
        """Script file layout: {"default": [q, text]?, "trajectories": {id: {step: [q, text]}}}."""
        scripts = {
            tid: {int(k): (float(v[0]), str(v[1])) for k, v in steps.items()}
            for tid, steps in data.get("trajectories", {}).items()
        }
        default = data.get("default")
        return cls(scripts=scripts, default=(float(default[0]), str(default[1])) if default else None)

    def judge(self, trajectory: Trajectory) -> JudgeResult:
        if self.rule is not None:
            return JudgeResult([StepJudgement(t, *self.rule(trajectory, t)) for t in judged_steps(trajectory)])
        return JudgeResult(scripted_judge(trajectory, self.scripts.get(trajectory.id, {}), self.default))


class RemoteJudge:
    """Chat-completion judge over HTTP POST /v1/chat.

    Each trajectory gets at most ``max_retries + 1`` transport attempts; an
    unparseable reply consumes one attempt.
    """

    def __init__(
        self,
        url: str,
        config: JudgeConfig = JudgeConfig(mode="remote"),
        timeout: float = 120.0,
        backoff: float = 0.05,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url.rstrip("/")
        self.config = config
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def judge(self, trajectory: Trajectory) -> JudgeResult:
        prompt = build_hindsight_prompt(trajectory)
        gt = None if trajectory.outcome.correct else trajectory.outcome.ground_truth
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            try:
                resp = self._client.post(self.url + "/v1/chat", json={"model": self.config.model_name, "prompt": prompt})
                resp.raise_for_status()
                text = resp.json()["text"]
                return parse_judgement_lenient(text, len(trajectory), gt, judged_steps(trajectory))
            except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
                # UnparseableJudgement is a ValueError
                last = exc
                logger.warning("judge call for %s failed (attempt %d): %s", trajectory.id, attempt + 1, exc)
                if attempt < self.config.max_retries:
                    time.sleep(self.backoff * 2**attempt)
        raise JudgeFailure(f"judge failed for trajectory {trajectory.id!r}: {last}")


def judge_from_env(config: JudgeConfig) -> RemoteJudge:
    url = os.environ.get(JUDGE_URL_ENV)
    if not url:
        raise JudgeFailure(f"{JUDGE_URL_ENV} is not set")
    return RemoteJudge(url, config)
