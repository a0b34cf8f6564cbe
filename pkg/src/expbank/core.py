"""Domain model: states, actions, trajectories and their line-delimited record form.

All types are frozen dataclasses holding tuples, so they can be shared freely
between threads once constructed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Iterator, Literal

from expbank.errors import InconsistentOutcome, MalformedRecord

ActionKind = Literal["tool", "answer", "experience_search"]
ACTION_KINDS: tuple[str, ...] = ("tool", "answer", "experience_search")
SEARCH_TOOL_NAME = "search_experiences"


@dataclass(frozen=True)
class VisualRef:
    id: str
    caption: str | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise MalformedRecord("visual ref id must be a non-empty string")
        if self.caption == "":
            object.__setattr__(self, "caption", None)


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    name: str
    params: str = ""
    raw: str | None = None

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise MalformedRecord(f"unknown action kind {self.kind!r}")
        if self.kind == "answer" and self.name != "answer":
            raise MalformedRecord("answer actions must be named 'answer'")
        if not self.name:
            raise MalformedRecord("action name must be non-empty")
        if not isinstance(self.params, str):
            raise MalformedRecord("action params must be pre-serialized text")

    @classmethod
    def tool(cls, name: str, params: str = "", raw: str | None = None) -> Action:
        return cls("tool", name, params, raw)

    @classmethod
    def answer(cls, text: str, raw: str | None = None) -> Action:
        return cls("answer", "answer", text, raw)

    @classmethod
    def search(cls, params: str = "", raw: str | None = None) -> Action:
        return cls("experience_search", SEARCH_TOOL_NAME, params, raw)

    def summary(self) -> str:
        return f"{self.kind}:{self.name}({self.params})"


@dataclass(frozen=True)
class HistoryEntry:
    step: int
    action: Action
    observation: str


@dataclass(frozen=True)
class State:
    instruction: str
    visual_refs: tuple[VisualRef, ...] = ()
    task_descriptor: str | None = None
    history: tuple[HistoryEntry, ...] = ()

    def __post_init__(self):
        if not isinstance(self.instruction, str) or not self.instruction.strip():
            raise MalformedRecord("instruction must be non-empty")
        object.__setattr__(self, "visual_refs", tuple(self.visual_refs))
        object.__setattr__(self, "history", tuple(self.history))
        ids = [v.id for v in self.visual_refs]
        if len(set(ids)) != len(ids):
            raise MalformedRecord("visual ref ids must be unique within a state")
        if self.task_descriptor == "":
            object.__setattr__(self, "task_descriptor", None)
        for i, entry in enumerate(self.history):
            if entry.step != i:
                raise MalformedRecord(f"history entry {i} carries step {entry.step}")

    def extend(self, action: Action, observation: str) -> State:
        entry = HistoryEntry(len(self.history), action, observation)
        return replace(self, history=self.history + (entry,))


@dataclass(frozen=True)
class Transition:
    trajectory_id: str
    step: int
    state_before: State
    action: Action
    state_after: State


@dataclass(frozen=True)
class Step:
    action: Action
    observation: str


@dataclass(frozen=True)
class Outcome:
    correct: bool
    ground_truth: str | None = None


@dataclass(frozen=True)
class Trajectory:
    id: str
    initial_state: State
    steps: tuple[Step, ...]
    outcome: Outcome = field(default_factory=lambda: Outcome(True))

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.id:
            raise MalformedRecord("trajectory id must be non-empty")
        if not self.steps:
            raise MalformedRecord(f"trajectory {self.id!r} has no steps")
        if self.initial_state.history:
            raise MalformedRecord("initial state must have an empty history")
        if not self.outcome.correct and self.outcome.ground_truth is None:
            raise InconsistentOutcome(f"trajectory {self.id!r} is incorrect but has no ground_truth")

    def __len__(self) -> int:
        return len(self.steps)


def decompose(trajectory: Trajectory) -> list[Transition]:
    """Split a trajectory into its T atomic (s_t, a_t, s_{t+1}) transitions."""
    out = []
    state = trajectory.initial_state
    for t, step in enumerate(trajectory.steps):
        after = state.extend(step.action, step.observation)
        out.append(Transition(trajectory.id, t, state, step.action, after))
        state = after
    return out


# ---------------------------------------------------------------------------
# record (dict) <-> object conversion


def _require(rec: dict, key: str, kind: type | tuple[type, ...], where: str) -> Any:
    if not isinstance(rec, dict) or key not in rec:
        raise MalformedRecord(f"{where}: missing field {key!r}")
    value = rec[key]
    if not isinstance(value, kind):
        raise MalformedRecord(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def _opt_str(rec: dict, key: str, where: str) -> str | None:
    value = rec.get(key)
    if value is not None and not isinstance(value, str):
        raise MalformedRecord(f"{where}: field {key!r} must be text or null")
    return value


def action_from_record(rec: Any, where: str = "action") -> Action:
    kind = _require(rec, "kind", str, where)
    name = _require(rec, "name", str, where)
    params = rec.get("params", "")
    if not isinstance(params, str):
        # tolerate structured arguments by canonicalising them
        params = json.dumps(params, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return Action(kind, name, params, _opt_str(rec, "raw", where))


def action_to_record(action: Action) -> dict:
    return {"kind": action.kind, "name": action.name, "params": action.params, "raw": action.raw}


def _visual_refs_from_records(value: Any, where: str) -> tuple[VisualRef, ...]:
    if not isinstance(value, list):
        raise MalformedRecord(f"{where}: visual_refs must be a list")
    refs = []
    for v in value:
        if isinstance(v, str):
            refs.append(VisualRef(v))
        else:
            refs.append(VisualRef(_require(v, "id", str, where), _opt_str(v, "caption", where)))
    return tuple(refs)


def _visual_refs_to_records(refs: Iterable[VisualRef]) -> list[dict]:
    return [{"id": v.id, "caption": v.caption} for v in refs]


def state_from_record(rec: Any) -> State:
    where = "state"
    instruction = _require(rec, "instruction", str, where)
    refs = _visual_refs_from_records(rec.get("visual_refs", []), where)
    history = []
    for i, h in enumerate(rec.get("history", []) or []):
        step = h.get("step", i) if isinstance(h, dict) else i
        if step != i:
            raise MalformedRecord(f"{where}: history entry {i} carries step {step}")
        obs = _require(h, "observation", str, where)
        history.append(HistoryEntry(i, action_from_record(_require(h, "action", dict, where)), obs))
    return State(instruction, refs, _opt_str(rec, "task_descriptor", where), tuple(history))


def state_to_record(state: State) -> dict:
    return {
        "instruction": state.instruction,
        "visual_refs": _visual_refs_to_records(state.visual_refs),
        "task_descriptor": state.task_descriptor,
        "history": [
            {"step": h.step, "action": action_to_record(h.action), "observation": h.observation}
            for h in state.history
        ],
    }


def validate_trajectory(raw_record: Any) -> Trajectory:
    """Build a Trajectory from one parsed record, enforcing every invariant.

    Raises MalformedRecord for missing fields or bad step ordering and
    InconsistentOutcome when an incorrect trajectory lacks ground truth.
    """
    if not isinstance(raw_record, dict):
        raise MalformedRecord("trajectory record must be an object")
    tid = _require(raw_record, "id", str, "trajectory")
    where = f"trajectory {tid!r}"
    instruction = _require(raw_record, "instruction", str, where)
    refs = _visual_refs_from_records(raw_record.get("visual_refs", []), where)
    state = State(instruction, refs, _opt_str(raw_record, "task_descriptor", where))

    steps = []
    for i, s in enumerate(_require(raw_record, "steps", list, where)):
        if not isinstance(s, dict):
            raise MalformedRecord(f"{where}: step {i} must be an object")
        if "step" in s and s["step"] != i:
            raise MalformedRecord(f"{where}: step at position {i} is indexed {s['step']!r}")
        action = action_from_record(_require(s, "action", dict, where), where)
        steps.append(Step(action, _require(s, "observation", str, where)))

    out = _require(raw_record, "outcome", dict, where)
    correct = _require(out, "correct", bool, where)
    gt = out.get("ground_truth")
    if gt is not None and not isinstance(gt, str):
        gt = json.dumps(gt)
    return Trajectory(tid, state, tuple(steps), Outcome(correct, gt))


def trajectory_to_record(trajectory: Trajectory) -> dict:
    s = trajectory.initial_state
    return {
        "id": trajectory.id,
        "instruction": s.instruction,
        "visual_refs": _visual_refs_to_records(s.visual_refs),
        "task_descriptor": s.task_descriptor,
        "steps": [{"action": action_to_record(st.action), "observation": st.observation} for st in trajectory.steps],
        "outcome": {"correct": trajectory.outcome.correct, "ground_truth": trajectory.outcome.ground_truth},
    }


def dumps_trajectory(trajectory: Trajectory) -> str:
    return json.dumps(trajectory_to_record(trajectory), ensure_ascii=False, separators=(",", ":"))


@dataclass
class ReadReport:
    trajectories: list[Trajectory]
    skipped: int = 0
    errors: list[str] = field(default_factory=list)


def iter_records(path: str | Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line


def read_trajectories(path: str | Path, strict: bool = False) -> ReadReport:
    """Load a trajectory file; bad records are skipped and counted unless strict."""
    report = ReadReport([])
    for lineno, line in iter_records(path):
        try:
            record = json.loads(line)
            report.trajectories.append(validate_trajectory(record))
        except json.JSONDecodeError as exc:
            if strict:
                raise MalformedRecord(f"invalid JSON: {exc}", line=lineno) from exc
            report.skipped += 1
            report.errors.append(f"line {lineno}: invalid JSON: {exc}")
        except (MalformedRecord, InconsistentOutcome) as exc:
            if strict:
                raise
            report.skipped += 1
            report.errors.append(f"line {lineno}: {exc}")
    return report


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trajectories:
            fh.write(dumps_trajectory(t) + "\n")
