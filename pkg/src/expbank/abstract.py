"""Trajectories -> judged transitions -> quality filter -> multi-viewpoint embeddings -> bank."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from expbank.core import Action, State, Trajectory, decompose
from expbank.embed import DEFAULT_DIM, Embedder, HashEmbedder, RemoteEmbedder, provider_from_env
from expbank.errors import ConfigError, DuplicateTrajectoryId, JudgeFailure
from expbank.index import ExperienceBank
from expbank.judge import JudgeConfig, JudgeResult, judged_steps
from expbank.viewpoint import VIEWPOINT_IDS, project

logger = logging.getLogger(__name__)


class Judge(Protocol):
    def judge(self, trajectory: Trajectory) -> JudgeResult: ...


@dataclass(frozen=True, eq=False)
class Experience:
    id: str
    trajectory_id: str
    step: int
    state: State
    action: Action
    guidance: str
    q_value: float
    source_outcome: bool
    embeddings: Mapping[str, np.ndarray]

    @staticmethod
    def make_id(trajectory_id: str, step: int) -> str:
        return f"{trajectory_id}#{step}"

    def same_as(self, other: Experience) -> bool:
        """Structural equality with bit-exact embeddings."""
        if not isinstance(other, Experience):
            return False
        plain = [f.name for f in fields(self) if f.name != "embeddings"]
        if any(getattr(self, n) != getattr(other, n) for n in plain):
            return False
        if set(self.embeddings) != set(other.embeddings):
            return False
        return all(
            self.embeddings[vp].dtype == other.embeddings[vp].dtype
            and self.embeddings[vp].tobytes() == other.embeddings[vp].tobytes()
            for vp in self.embeddings
        )


@dataclass(frozen=True)
class AbstractionConfig:
    threshold: float = 5.0
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    embed_provider: str = "hash"
    dim: int = DEFAULT_DIM
    viewpoints: tuple[str, ...] = VIEWPOINT_IDS

    def __post_init__(self):
        if not (0.0 <= self.threshold <= 10.0):
            raise ConfigError(f"threshold must lie in [0, 10], got {self.threshold}")
        if self.embed_provider not in ("hash", "remote"):
            raise ConfigError(f"unknown embedding provider {self.embed_provider!r}")


@dataclass
class AbstractionStats:
    trajectories: int = 0
    total: int = 0
    judged: int = 0
    admitted: int = 0
    rejected_low_q: int = 0
    unjudged: int = 0
    errors: int = 0
    failed_trajectories: int = 0
    excluded_search: int = 0

    def __iadd__(self, other: AbstractionStats) -> AbstractionStats:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


def make_embedder(config: AbstractionConfig) -> Embedder:
    if config.embed_provider == "hash":
        return HashEmbedder(config.dim)
    emb = provider_from_env(config.dim)
    if not isinstance(emb, RemoteEmbedder):
        raise ConfigError("remote embedding requested but EXPBANK_EMBED_URL is not set")
    return emb


def _admit(
    trajectory: Trajectory,
    result: JudgeResult,
    config: AbstractionConfig,
    embedder: Embedder,
) -> tuple[list[Experience], AbstractionStats]:
    judgeable = judged_steps(trajectory)
    stats = AbstractionStats(
        trajectories=1,
        total=len(judgeable),
        excluded_search=len(trajectory) - len(judgeable),
        errors=len(result.rejected),
    )
    allowed = set(judgeable)
    by_step = {j.step: j for j in result.judgements if j.step in allowed}
    rejected_steps = {r.step for r in result.rejected if r.step in allowed}
    stats.judged = len(by_step)
    stats.unjudged = len(allowed - set(by_step) - rejected_steps)

    transitions = decompose(trajectory)
    keep = []
    for t in sorted(by_step):
        j = by_step[t]
        if j.q_value >= config.threshold:
            keep.append((transitions[t], j))
        else:
            stats.rejected_low_q += 1

    # one batched call per trajectory; any failure propagates before anything is built
    states = [tr.state_before for tr, _ in keep]
    vps = config.viewpoints
    texts = [project(s, vp) for s in states for vp in vps]
    vids = [[r.id for r in s.visual_refs] if vp == "v_visual" else [] for s in states for vp in vps]
    vectors = embedder.embed_many(texts, vids) if texts else []

    out = []
    for i, (tr, j) in enumerate(keep):
        embs = dict(zip(vps, vectors[i * len(vps) : (i + 1) * len(vps)]))
        out.append(
            Experience(
                id=Experience.make_id(trajectory.id, tr.step),
                trajectory_id=trajectory.id,
                step=tr.step,
                state=tr.state_before,
                action=tr.action,
                guidance=j.experience_text,
                q_value=j.q_value,
                source_outcome=trajectory.outcome.correct,
                embeddings=embs,
            )
        )
    stats.admitted = len(out)
    return out, stats


def abstract_trajectory(
    trajectory: Trajectory,
    config: AbstractionConfig,
    judge: Judge,
    embedder: Embedder | None = None,
) -> tuple[list[Experience], AbstractionStats]:
    """Judge one trajectory and turn every step with q >= threshold into an Experience.

    Raises JudgeFailure if the judge gives up and EmbedderUnavailable if any
    embedding cannot be computed.
    """
    embedder = embedder or make_embedder(config)
    return _admit(trajectory, judge.judge(trajectory), config, embedder)


def _judge_all(trajectories: Sequence[Trajectory], judge: Judge, workers: int) -> list[JudgeResult | JudgeFailure]:
    def run(t: Trajectory) -> JudgeResult | JudgeFailure:
        try:
            return judge.judge(t)
        except JudgeFailure as exc:
            return exc

    if workers <= 1 or len(trajectories) <= 1:
        return [run(t) for t in trajectories]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, trajectories))


def ingest(
    bank: ExperienceBank,
    trajectories: Iterable[Trajectory],
    config: AbstractionConfig,
    judge: Judge,
    embedder: Embedder | None = None,
    known_ids: set[str] | None = None,
) -> AbstractionStats:
    """Abstract a batch into `bank`. The batch is inserted atomically at the end."""
    batch = list(trajectories)
    seen = set(known_ids or ())
    for t in batch:
        if t.id in seen:
            raise DuplicateTrajectoryId(t.id)
        seen.add(t.id)
    embedder = embedder or make_embedder(config)
    workers = config.judge.concurrency if config.judge.mode == "remote" else 1

    stats = AbstractionStats()
    new: list[Experience] = []
    for t, result in zip(batch, _judge_all(batch, judge, workers)):
        if isinstance(result, JudgeFailure):
            logger.warning("skipping trajectory %s: %s", t.id, result)
            n = len(judged_steps(t))
            stats += AbstractionStats(
                trajectories=1, total=n, unjudged=n, errors=1, failed_trajectories=1,
                excluded_search=len(t) - n,
            )
            continue
        exps, s = _admit(t, result, config, embedder)
        new.extend(exps)
        stats += s
    bank.extend(new)
    if known_ids is not None:
        known_ids.update(t.id for t in batch)
    return stats


def new_bank(config: AbstractionConfig, embedder: Embedder) -> ExperienceBank:
    dim = embedder.dim if embedder.dim is not None else config.dim
    return ExperienceBank(dim, config.threshold, embedder.tag, config.viewpoints)


def build_bank(
    trajectories: Iterable[Trajectory],
    config: AbstractionConfig,
    judge: Judge,
    embedder: Embedder | None = None,
) -> tuple[ExperienceBank, AbstractionStats]:
    embedder = embedder or make_embedder(config)
    batch = list(trajectories)
    seen: set[str] = set()
    for t in batch:
        if t.id in seen:
            raise DuplicateTrajectoryId(t.id)
        seen.add(t.id)
    if embedder.dim is None and batch:
        # remote providers learn their dimension from the first response
        embedder.embed("INSTRUCTION:\n-")
    bank = new_bank(config, embedder)
    stats = ingest(bank, batch, config, judge, embedder)
    return bank, stats
