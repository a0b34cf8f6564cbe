"""Wide, Deep and unified Deep-and-Wide retrieval plus guidance rendering.

All three searches read one bank snapshot, so a concurrent ingestion is
either fully visible to a search or not at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from expbank.core import State
from expbank.embed import Embedder
from expbank.errors import ConfigError
from expbank.index import BankSnapshot, ExperienceBank, ScoredExperience
from expbank.viewpoint import VIEWPOINT_IDS, check_viewpoint, project

DEDUP_POLICY = "first-occurrence"
EMPTY_GUIDANCE = "NO RELEVANT EXPERIENCE FOUND"


def round_robin(rounds: int, order: Sequence[str] = VIEWPOINT_IDS) -> tuple[str, ...]:
    return tuple(order[j % len(order)] for j in range(rounds))


@dataclass(frozen=True)
class SearchParams:
    k: int = 3
    rounds: int = 3
    viewpoint_sequence: tuple[str, ...] = ()

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        seq = tuple(self.viewpoint_sequence) or round_robin(self.rounds)
        if len(seq) != self.rounds:
            raise ConfigError(f"viewpoint_sequence has {len(seq)} entries for {self.rounds} rounds")
        for vp in seq:
            check_viewpoint(vp)
        object.__setattr__(self, "viewpoint_sequence", seq)


@dataclass(frozen=True)
class GuidanceItem:
    scored: ScoredExperience
    rank: int
    guidance: str
    action_summary: str


@dataclass(frozen=True)
class GuidanceSet:
    items: tuple[GuidanceItem, ...] = ()
    dedup: str = DEDUP_POLICY

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> list[str]:
        return [it.scored.experience_id for it in self.items]

    def to_records(self) -> list[dict]:
        return [
            {
                "experience_id": it.scored.experience_id,
                "score": it.scored.score,
                "viewpoint": it.scored.viewpoint,
                "round": it.scored.round,
                "guidance": it.guidance,
                "action_summary": it.action_summary,
            }
            for it in self.items
        ]


def _snap(bank: ExperienceBank | BankSnapshot) -> BankSnapshot:
    return bank.snapshot() if isinstance(bank, ExperienceBank) else bank


class _QueryCache:
    """Embeds each viewpoint projection of one state at most once."""

    def __init__(self, state: State, embedder: Embedder):
        self.state = state
        self.embedder = embedder
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, viewpoint: str) -> np.ndarray:
        if viewpoint not in self._cache:
            vids = [r.id for r in self.state.visual_refs] if viewpoint == "v_visual" else []
            self._cache[viewpoint] = self.embedder.embed(project(self.state, viewpoint), vids)
        return self._cache[viewpoint]


def _collect(snap: BankSnapshot, rounds: list[list[ScoredExperience]]) -> GuidanceSet:
    items = []
    seen: set[str] = set()
    for j, hits in enumerate(rounds, start=1):
        for r, hit in enumerate(hits, start=1):
            if hit.experience_id in seen:
                continue
            seen.add(hit.experience_id)
            e = snap.get(hit.experience_id)
            scored = ScoredExperience(hit.experience_id, hit.score, hit.viewpoint, j)
            items.append(GuidanceItem(scored, r, e.guidance, e.action.summary()))
    return GuidanceSet(tuple(items))


def wide_search(
    bank: ExperienceBank | BankSnapshot, state: State, viewpoint: str, k: int, embedder: Embedder
) -> GuidanceSet:
    """Top-K experiences under a single viewpoint."""
    check_viewpoint(viewpoint)
    snap = _snap(bank)
    query = _QueryCache(state, embedder)(viewpoint)
    return _collect(snap, [snap.top_k(viewpoint, query, k)])


def deep_search(
    bank: ExperienceBank | BankSnapshot, state: State, viewpoint_sequence: Sequence[str], embedder: Embedder
) -> GuidanceSet:
    """Union of the top-1 experience of each round, one viewpoint per round."""
    for vp in viewpoint_sequence:
        check_viewpoint(vp)
    if not viewpoint_sequence:
        raise ConfigError("deep search needs at least one round")
    snap = _snap(bank)
    query = _QueryCache(state, embedder)
    rounds = [snap.top_k(vp, query(vp), 1) for vp in viewpoint_sequence]
    return _collect(snap, rounds)


def deep_wide_search(
    bank: ExperienceBank | BankSnapshot, state: State, params: SearchParams, embedder: Embedder
) -> GuidanceSet:
    """Top-K per round over the round's viewpoint, merged with first-occurrence dedup."""
    snap = _snap(bank)
    query = _QueryCache(state, embedder)
    rounds = []
    for vp in params.viewpoint_sequence:
        rounds.append(snap.top_k(vp, query(vp), params.k))
    return _collect(snap, rounds)


def _one_line(text: str) -> str:
    return " ".join(text.split())


def format_guidance(g: GuidanceSet) -> str:
    if not g.items:
        return EMPTY_GUIDANCE
    return "\n".join(
        f"[{it.scored.round}.{it.rank}] ({it.scored.viewpoint}, {it.scored.score:.4f}) {_one_line(it.guidance)}"
        for it in g.items
    )
