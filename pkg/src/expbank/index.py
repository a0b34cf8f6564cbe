"""Exact multi-viewpoint vector index over the experience bank.

Vectors are stored as float32 rows. A query is scored with one float32
matrix-vector product; every row whose float32 score could still reach the
top-K (given the worst-case float32 rounding error) is re-scored with float64
accumulation, and the final order is (score desc, id asc). The result is
therefore exactly the top-K of the float64 scores while the full scan stays in
float32.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from expbank.embed import HASH_PROVIDER_TAG, NORM_TOL, check_unit
from expbank.errors import DimensionMismatch, DuplicateId, MissingViewpointEmbedding, UnknownViewpoint
from expbank.viewpoint import VIEWPOINT_IDS

if TYPE_CHECKING:
    from expbank.abstract import Experience

_U32 = 2.0**-24
_RESCORE_BLOCK = 4096


def _f32_dot_error_bound(dim: int) -> float:
    """Worst-case |fl32(x.q) - x.q| for vectors with norm <= 1 + NORM_TOL."""
    n_u = dim * _U32
    gamma = n_u / (1.0 - n_u)
    return gamma * (1.0 + NORM_TOL) ** 2


def _rescore(rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    """float64 scores that depend only on each row's contents.

    float32 products are exact in float64, and the per-row reduction always
    runs the same pairwise sum, so identical rows get identical scores. A BLAS
    matrix-vector product does not promise that (it may block rows
    differently), which would break id tie-breaks.
    """
    q = query.astype(np.float64)
    if rows.ndim == 1:
        return (rows.astype(np.float64) * q).sum()
    out = np.empty(rows.shape[0], dtype=np.float64)
    for i in range(0, rows.shape[0], _RESCORE_BLOCK):
        block = rows[i : i + _RESCORE_BLOCK]
        out[i : i + len(block)] = (block.astype(np.float64) * q).sum(axis=1)
    return out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"cannot compare vectors of shape {a.shape} and {b.shape}")
    s = float(_rescore(a, b))
    return min(1.0, max(-1.0, s))


def exact_top_k(matrix: np.ndarray, ids: Sequence[str], query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Rows of `matrix` with the k highest float64 dot products against `query`.

    Returns (row, score) pairs ordered by score descending, then id ascending.
    """
    n, dim = matrix.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if query.shape != (dim,):
        raise DimensionMismatch(f"query has shape {query.shape}, index dimension is {dim}")
    if n == 0:
        return []
    k = min(k, n)
    q32 = query.astype(np.float32, copy=False)
    if k < n:
        approx = matrix @ q32
        kth = np.partition(approx, n - k)[n - k]
        margin = 2.0 * _f32_dot_error_bound(dim) + 1e-12
        cand = np.flatnonzero(approx >= kth - margin)
    else:
        cand = np.arange(n)
    exact = _rescore(matrix[cand], q32)
    ranked = sorted(zip(exact.tolist(), cand.tolist()), key=lambda p: (-p[0], ids[p[1]]))[:k]
    return [(row, min(1.0, max(-1.0, score))) for score, row in ranked]


class FlatIndex:
    """Append-only table of unit vectors keyed by string id."""

    def __init__(self, dim: int, capacity: int = 16):
        self.dim = dim
        self._buf = np.zeros((max(capacity, 1), dim), dtype=np.float32)
        self._ids: list[str] = []
        self._n = 0
        self._published = (self._buf, 0)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self._published[1]

    def _reserve(self, extra: int) -> np.ndarray:
        need = self._n + extra
        if need <= self._buf.shape[0]:
            return self._buf
        cap = self._buf.shape[0]
        while cap < need:
            cap *= 2
        grown = np.zeros((cap, self.dim), dtype=np.float32)
        grown[: self._n] = self._buf[: self._n]
        return grown

    def add_many(self, ids: Sequence[str], vectors: np.ndarray) -> None:
        """Append rows; callers are responsible for id uniqueness and norms."""
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim or vectors.shape[0] != len(ids):
            raise DimensionMismatch(f"expected ({len(ids)}, {self.dim}) rows, got {vectors.shape}")
        with self._lock:
            buf = self._reserve(len(ids))
            buf[self._n : self._n + len(ids)] = vectors
            self._ids.extend(ids)
            self._buf = buf
            self._n += len(ids)
            self._published = (buf, self._n)

    def add(self, id: str, vector: np.ndarray) -> None:
        self.add_many([id], np.asarray(vector, dtype=np.float32)[None, :])

    def view(self) -> tuple[np.ndarray, list[str]]:
        buf, n = self._published
        return buf[:n], self._ids

    def top_k(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        matrix, ids = self.view()
        return [(ids[r], s) for r, s in exact_top_k(matrix, ids, check_unit(query, self.dim, "query"), k)]


@dataclass(frozen=True)
class ScoredExperience:
    experience_id: str
    score: float
    viewpoint: str
    round: int = 1


@dataclass(frozen=True)
class BankConfig:
    threshold: float
    dim: int
    provider: str
    viewpoints: tuple[str, ...] = VIEWPOINT_IDS


@dataclass(frozen=True)
class _Published:
    n: int
    tables: dict[str, np.ndarray]


class BankSnapshot:
    """Immutable view of the first `n` experiences of a bank."""

    def __init__(self, bank: ExperienceBank, published: _Published):
        self.config = bank.config
        self.dim = bank.dim
        self.viewpoints = bank.viewpoints
        self._n = published.n
        self._tables = {vp: t[: published.n] for vp, t in published.tables.items()}
        self._exps = bank._exps
        self._ids = bank._ids
        self._rows = bank._rows

    def __len__(self) -> int:
        return self._n

    @property
    def experiences(self) -> list[Experience]:
        return self._exps[: self._n]

    @property
    def ids(self) -> list[str]:
        return self._ids[: self._n]

    def table(self, viewpoint: str) -> np.ndarray:
        try:
            return self._tables[viewpoint]
        except KeyError:
            raise UnknownViewpoint(viewpoint) from None

    def get(self, experience_id: str) -> Experience:
        row = self._rows.get(experience_id)
        if row is None or row >= self._n:
            raise KeyError(experience_id)
        return self._exps[row]

    def top_k(self, viewpoint: str, query: np.ndarray, k: int) -> list[ScoredExperience]:
        table = self.table(viewpoint)
        q = check_unit(query, None, "query")
        if q.shape[0] != self.dim:
            raise DimensionMismatch(f"query has dimension {q.shape[0]}, bank dimension is {self.dim}")
        hits = exact_top_k(table, self._ids, q, k)
        return [ScoredExperience(self._ids[r], s, viewpoint) for r, s in hits]


class ExperienceBank:
    """Append-only experience collection with one aligned vector table per viewpoint.

    Many concurrent readers, one writer. Readers work on snapshots; an insert
    becomes visible only once all of its rows are written.
    """

    def __init__(
        self,
        dim: int,
        threshold: float = 5.0,
        provider: str = HASH_PROVIDER_TAG,
        viewpoints: Sequence[str] = VIEWPOINT_IDS,
    ):
        self.dim = dim
        self.viewpoints = tuple(viewpoints)
        self.config = BankConfig(float(threshold), dim, provider, self.viewpoints)
        self._exps: list[Experience] = []
        self._ids: list[str] = []
        self._rows: dict[str, int] = {}
        self._buffers = {vp: np.zeros((16, dim), dtype=np.float32) for vp in self.viewpoints}
        self._published = _Published(0, dict(self._buffers))
        self._write_lock = threading.Lock()

    def __len__(self) -> int:
        return self._published.n

    def __contains__(self, experience_id: str) -> bool:
        row = self._rows.get(experience_id)
        return row is not None and row < self._published.n

    @property
    def experiences(self) -> list[Experience]:
        return self.snapshot().experiences

    def snapshot(self) -> BankSnapshot:
        return BankSnapshot(self, self._published)

    def _validate(self, e: Experience, seen: set[str]) -> dict[str, np.ndarray]:
        if e.id in self._rows or e.id in seen:
            raise DuplicateId(f"experience {e.id!r} already in bank")
        rows = {}
        for vp in self.viewpoints:
            if vp not in e.embeddings:
                raise MissingViewpointEmbedding(f"experience {e.id!r} has no {vp} embedding")
            rows[vp] = check_unit(e.embeddings[vp], self.dim, f"{e.id} {vp} embedding")
        extra = set(e.embeddings) - set(self.viewpoints)
        if extra:
            raise MissingViewpointEmbedding(f"experience {e.id!r} has embeddings for unknown viewpoints {sorted(extra)}")
        return rows

    def extend(self, experiences: Iterable[Experience]) -> None:
        """Insert a batch atomically: either every experience lands or none."""
        batch = list(experiences)
        with self._write_lock:
            seen: set[str] = set()
            rows = []
            for e in batch:
                rows.append(self._validate(e, seen))
                seen.add(e.id)
            if not batch:
                return
            n = self._published.n
            need = n + len(batch)
            buffers = {}
            for vp, buf in self._buffers.items():
                if need > buf.shape[0]:
                    cap = buf.shape[0]
                    while cap < need:
                        cap *= 2
                    grown = np.zeros((cap, self.dim), dtype=np.float32)
                    grown[:n] = buf[:n]
                    buf = grown
                buf[n:need] = np.stack([r[vp] for r in rows])
                buffers[vp] = buf
            for i, e in enumerate(batch):
                self._exps.append(e)
                self._ids.append(e.id)
                self._rows[e.id] = n + i
            self._buffers = buffers
            self._published = _Published(need, dict(buffers))

    def insert(self, e: Experience) -> None:
        self.extend([e])

    def top_k(self, viewpoint: str, query: np.ndarray, k: int) -> list[ScoredExperience]:
        return self.snapshot().top_k(viewpoint, query, k)

    def get(self, experience_id: str) -> Experience:
        return self.snapshot().get(experience_id)

    def stats(self) -> dict:
        snap = self.snapshot()
        hist = [0] * 11
        outcomes = {"correct": 0, "incorrect": 0}
        for e in snap.experiences:
            hist[min(10, int(e.q_value))] += 1
            outcomes["correct" if e.source_outcome else "incorrect"] += 1
        return {
            "experience_count": len(snap),
            "dim": self.dim,
            "viewpoints": list(self.viewpoints),
            "delta": self.config.threshold,
            "q_histogram": hist,
            "source_outcome_counts": outcomes,
        }
