"""Viewpoint registry and canonical state rendering.

Each viewpoint pairs the instruction with one other state component. The
rendering is line framed and `|` delimited with field escaping, so distinct
included components always give distinct text.
"""

from __future__ import annotations

from dataclasses import dataclass

from expbank.core import State
from expbank.errors import UnknownViewpoint

COMPONENTS = ("instruction", "visual_refs", "task_descriptor", "history")
_HEADERS = {
    "instruction": "INSTRUCTION:",
    "visual_refs": "VISUALS:",
    "task_descriptor": "TASK:",
    "history": "HISTORY:",
}
EMPTY = "-"


@dataclass(frozen=True)
class ViewpointSpec:
    id: str
    included_components: frozenset[str]

    def includes(self, component: str) -> bool:
        return component in self.included_components


_REGISTRY: tuple[ViewpointSpec, ...] = (
    ViewpointSpec("v_visual", frozenset({"instruction", "visual_refs"})),
    ViewpointSpec("v_task", frozenset({"instruction", "task_descriptor"})),
    ViewpointSpec("v_history", frozenset({"instruction", "history"})),
)
_BY_ID = {spec.id: spec for spec in _REGISTRY}
VIEWPOINT_IDS: tuple[str, ...] = tuple(spec.id for spec in _REGISTRY)


def list_viewpoints() -> list[ViewpointSpec]:
    return list(_REGISTRY)


def get_viewpoint(viewpoint: str) -> ViewpointSpec:
    try:
        return _BY_ID[viewpoint]
    except (KeyError, TypeError):
        raise UnknownViewpoint(viewpoint) from None


def check_viewpoint(viewpoint: str) -> str:
    get_viewpoint(viewpoint)
    return viewpoint


def escape_field(value: str) -> str:
    # a bare "-" would read as a missing component
    if value == EMPTY:
        return "\\-"
    return value.replace("\\", "\\\\").replace("|", "\\|").replace("\n", "\\n")


def _visual_lines(state: State) -> list[str]:
    lines = []
    for ref in state.visual_refs:
        if ref.caption is None:
            lines.append(escape_field(ref.id) + "|")
        else:
            lines.append(escape_field(ref.id) + "|" + escape_field(ref.caption))
    return lines


def _history_lines(state: State) -> list[str]:
    return [
        "|".join(
            (
                str(h.step),
                h.action.kind,
                escape_field(h.action.name),
                escape_field(h.action.params),
                escape_field(h.observation),
            )
        )
        for h in state.history
    ]


def project(state: State, viewpoint: str) -> str:
    """Render the components of `state` that `viewpoint` includes as canonical text."""
    spec = get_viewpoint(viewpoint)
    out: list[str] = []
    for component in COMPONENTS:
        if not spec.includes(component):
            continue
        out.append(_HEADERS[component])
        if component == "instruction":
            body = [escape_field(state.instruction)]
        elif component == "visual_refs":
            body = _visual_lines(state)
        elif component == "task_descriptor":
            body = [] if state.task_descriptor is None else [escape_field(state.task_descriptor)]
        else:
            body = _history_lines(state)
        out.extend(body or [EMPTY])
    return "\n".join(out)
