"""Deterministic agent loop over a synthetic two-family arithmetic task set.

Each task shows two operands on a worksheet image. One of two toy tools
(sum or product, both backed by the `calc` evaluator) gives the right answer,
and which one depends on the task family. Without experience the policy
guesses; with a bank it reads retrieved guidance that names the tool for its
family.
"""

from __future__ import annotations

import ast
import json
import operator
import random
import re
from dataclasses import dataclass, field
from fractions import Fraction

from expbank.abstract import AbstractionConfig, build_bank
from expbank.core import Action, Outcome, State, Step, Trajectory, VisualRef
from expbank.embed import Embedder, HashEmbedder
from expbank.index import ExperienceBank
from expbank.judge import ScriptedJudge
from expbank.search import SearchParams, deep_wide_search, format_guidance
from expbank.viewpoint import VIEWPOINT_IDS

FAMILIES = ("arith_a", "arith_b")
TOOLS = ("tool_alpha", "tool_beta")
_TOOL_EXPR = {"tool_alpha": "{x}+{y}", "tool_beta": "{x}*{y}"}
_OPERANDS = re.compile(r"showing (-?\d+) and (-?\d+)")
_RULE = re.compile(r"\bfamily\s+(arith_[ab])\b.*?\b(tool_alpha|tool_beta)\b", re.IGNORECASE | re.DOTALL)


# ---------------------------------------------------------------------------
# calculator

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv}
_UNARY = {ast.UAdd: operator.pos, ast.USub: operator.neg}


def _eval(node: ast.AST) -> Fraction:
    if isinstance(node, ast.Expression):
        return _eval(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return Fraction(str(node.value))
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval(node.left), _eval(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
        return _UNARY[type(node.op)](_eval(node.operand))
    raise ValueError("unsupported expression")


def calc(expression: str) -> str:
    """Evaluate + - * / and parentheses exactly; returns the result as text."""
    expr = expression.replace("×", "*").replace("÷", "/").replace("−", "-")
    if len(expr) > 200:
        return "error: expression too long"
    try:
        value = _eval(ast.parse(expr, mode="eval"))
    except ZeroDivisionError:
        return "error: division by zero"
    except (SyntaxError, ValueError):
        return "error: invalid expression"
    if value.denominator == 1:
        return str(value.numerator)
    return repr(float(value))


# ---------------------------------------------------------------------------
# tasks


@dataclass(frozen=True)
class SyntheticTask:
    id: str
    instruction: str
    family: str
    hidden_rule: str
    correct_answer: str
    operands: tuple[int, int]

    def initial_state(self) -> State:
        x, y = self.operands
        return State(
            self.instruction,
            (VisualRef("img_0", f"worksheet showing {x} and {y}"),),
            self.family,
        )


def family_rules(seed: int) -> dict[str, str]:
    rng = random.Random(f"rules:{seed}")
    tools = list(TOOLS)
    rng.shuffle(tools)
    return dict(zip(FAMILIES, tools))


def _instruction(family: str) -> str:
    return f"Combine the two numbers shown in img_0 using the {family} rule and report the result."


def generate_tasks(n: int, seed: int) -> tuple[list[SyntheticTask], list[SyntheticTask]]:
    if n < 2 or n % 2:
        raise ValueError("n must be an even integer >= 2")
    rules = family_rules(seed)
    rng = random.Random(f"tasks:{seed}")
    splits = []
    for split in ("explore", "eval"):
        tasks = []
        for i in range(n // 2):
            family = FAMILIES[i % 2]
            x, y = rng.randint(3, 20), rng.randint(3, 20)
            tool = rules[family]
            tasks.append(
                SyntheticTask(
                    id=f"{split}-{i:04d}",
                    instruction=_instruction(family),
                    family=family,
                    hidden_rule=tool,
                    correct_answer=calc(_TOOL_EXPR[tool].format(x=x, y=y)),
                    operands=(x, y),
                )
            )
        splits.append(tasks)
    return splits[0], splits[1]


def run_tool(name: str, state: State, params: str) -> str:
    if name not in _TOOL_EXPR:
        return f"error: unknown tool {name}"
    image = json.loads(params).get("image")
    ref = next((r for r in state.visual_refs if r.id == image), None)
    m = _OPERANDS.search(ref.caption or "") if ref else None
    if m is None:
        return f"error: no operands found in {image}"
    return calc(_TOOL_EXPR[name].format(x=m.group(1), y=m.group(2)))


# ---------------------------------------------------------------------------
# policy and episodes


@dataclass
class ScriptedPolicy:
    seed: int
    viewpoint_rotation: tuple[str, ...] = VIEWPOINT_IDS

    def params(self, k: int, rounds: int) -> SearchParams:
        seq = tuple(self.viewpoint_rotation[j % len(self.viewpoint_rotation)] for j in range(rounds))
        return SearchParams(k=k, rounds=rounds, viewpoint_sequence=seq)

    def choose_tool(self, task_id: str, family: str | None, guidance: list[str]) -> str:
        for text in guidance:
            m = _RULE.search(text)
            if m and m.group(1).lower() == family:
                return m.group(2).lower()
        return random.Random(f"policy:{self.seed}:{task_id}").choice(TOOLS)


@dataclass
class EpisodeLog:
    trajectory: Trajectory
    retrieved_sizes: list[int] = field(default_factory=list)


def run_episode(
    task: SyntheticTask,
    bank: ExperienceBank | None,
    params: SearchParams,
    seed: int,
    embedder: Embedder | None = None,
) -> EpisodeLog:
    embedder = embedder or HashEmbedder(bank.dim if bank is not None else 64)
    policy = ScriptedPolicy(seed)
    params = policy.params(params.k, params.rounds)
    initial = task.initial_state()
    state = initial
    steps: list[Step] = []
    sizes: list[int] = []
    guidance: list[str] = []

    if bank is not None:
        found = deep_wide_search(bank, state, params, embedder)
        sizes.append(len(found))
        guidance = [it.guidance for it in found.items]
        search = Action.search(json.dumps({"k": params.k, "viewpoints": list(params.viewpoint_sequence)}))
        observation = format_guidance(found)
        steps.append(Step(search, observation))
        state = state.extend(search, observation)

    tool = policy.choose_tool(task.id, task.family, guidance)
    call = Action.tool(tool, json.dumps({"image": "img_0"}))
    result = run_tool(tool, state, call.params)
    steps.append(Step(call, result))
    state = state.extend(call, result)

    steps.append(Step(Action.answer(result), "final answer submitted"))
    outcome = Outcome(result == task.correct_answer, task.correct_answer)
    return EpisodeLog(Trajectory(task.id, initial, tuple(steps), outcome), sizes)


def hindsight_rule(trajectory: Trajectory, t: int) -> tuple[float, str]:
    """Scripted judge: 9 for a step that produced the right value, 1 otherwise."""
    step = trajectory.steps[t]
    family = trajectory.initial_state.task_descriptor
    truth = trajectory.outcome.ground_truth
    if step.action.kind == "tool":
        if step.observation == truth:
            return 9.0, f"For family {family} tasks, call {step.action.name} on the worksheet image."
        return 1.0, f"Calling {step.action.name} gave a value that did not solve this kind of task."
    if trajectory.outcome.correct:
        return 9.0, "Once the tool has returned a value, answer with it directly."
    return 1.0, "Do not submit a tool value without checking that the tool fits the task."


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchmarkReport:
    tasks: int
    seed: int
    with_experience: bool
    exploration_accuracy: float
    bank_size: int
    evaluation_tasks: int
    correct: int
    mean_retrieved: float

    @property
    def accuracy(self) -> float:
        return self.correct / self.evaluation_tasks

    def render(self) -> str:
        return "\n".join(
            [
                f"tasks={self.tasks}",
                f"seed={self.seed}",
                f"with_experience={'true' if self.with_experience else 'false'}",
                f"exploration_accuracy={self.exploration_accuracy:.4f}",
                f"bank_size={self.bank_size}",
                f"evaluation_tasks={self.evaluation_tasks}",
                f"correct={self.correct}",
                f"accuracy={self.accuracy:.4f}",
                f"mean_retrieved={self.mean_retrieved:.4f}",
            ]
        )


def run_benchmark(
    n: int,
    seed: int,
    with_experience: bool = True,
    params: SearchParams | None = None,
    config: AbstractionConfig | None = None,
) -> BenchmarkReport:
    params = params or SearchParams()
    config = config or AbstractionConfig()
    embedder = HashEmbedder(config.dim)
    explore, evaluate = generate_tasks(n, seed)

    explored = [run_episode(t, None, params, seed, embedder).trajectory for t in explore]
    bank, _ = build_bank(explored, config, ScriptedJudge(rule=hindsight_rule), embedder)

    logs = [run_episode(t, bank if with_experience else None, params, seed, embedder) for t in evaluate]
    sizes = [s for log in logs for s in log.retrieved_sizes]
    return BenchmarkReport(
        tasks=n,
        seed=seed,
        with_experience=with_experience,
        exploration_accuracy=sum(t.outcome.correct for t in explored) / len(explored),
        bank_size=len(bank),
        evaluation_tasks=len(evaluate),
        correct=sum(log.trajectory.outcome.correct for log in logs),
        mean_retrieved=sum(sizes) / len(sizes) if sizes else 0.0,
    )
