"""Embedding providers: canonical viewpoint text -> unit-norm float32 vector.

`HashEmbedder` is a deterministic stand-in for a neural embedder: FNV-1a 64 of
the UTF-8 bytes seeds a SplitMix64 stream whose outputs become coordinates.
`RemoteEmbedder` speaks a small JSON protocol over HTTP POST /v1/embed.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from typing import Protocol, Sequence

import httpx
import numpy as np

from expbank.errors import DimensionMismatch, EmbedderUnavailable, NonUnitNorm, ZeroNorm

logger = logging.getLogger(__name__)

NORM_TOL = 1e-6
DEFAULT_DIM = 64
HASH_PROVIDER_TAG = "hash-fnv1a64-splitmix64"
EMBED_URL_ENV = "EXPBANK_EMBED_URL"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)


class Embedder(Protocol):
    dim: int
    tag: str

    def embed(self, content: str, visual_ids: Sequence[str] = ()) -> np.ndarray: ...

    def embed_many(self, contents: Sequence[str], visual_ids: Sequence[Sequence[str]] | None = None) -> list[np.ndarray]: ...


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def splitmix64_block(seed: int, n: int) -> np.ndarray:
    """First n outputs of SplitMix64 seeded with `seed`, as uint64.

    The generator state after i+1 steps is seed + (i+1) * gamma, so the whole
    block is computed at once instead of one call at a time.
    """
    with np.errstate(over="ignore"):
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(seed) + steps * _GOLDEN_GAMMA
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def unit_normalize(values: np.ndarray | Sequence[float]) -> np.ndarray:
    """L2-normalize in float64 and return a read-only float32 vector."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DimensionMismatch(f"expected a non-empty vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("embedding contains non-finite values")
    norm = float(np.sqrt(np.dot(x, x)))
    if norm == 0.0:
        raise ZeroNorm("cannot normalize a zero vector")
    out = (x / norm).astype(np.float32)
    out.flags.writeable = False
    return out


def check_unit(v: np.ndarray, dim: int | None = None, what: str = "embedding") -> np.ndarray:
    """Validate a stored/query embedding: float32, 1-D, finite, unit norm."""
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{what} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(f"{what} has dimension {arr.shape[0]}, expected {dim}")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise NonUnitNorm(f"{what} has non-finite values")
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    if abs(norm - 1.0) > NORM_TOL:
        raise NonUnitNorm(f"{what} has norm {norm!r}")
    return arr


def hash_embed(content: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    if dim < 2:
        raise ValueError("dim must be >= 2")
    bits = splitmix64_block(fnv1a64(content.encode("utf-8")), dim)
    u = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return unit_normalize(2.0 * u - 1.0)


class HashEmbedder:
    """Deterministic local provider; visual ids are ignored."""

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim
        self.tag = HASH_PROVIDER_TAG

    def embed(self, content: str, visual_ids: Sequence[str] = ()) -> np.ndarray:
        if not content:
            raise ValueError("content must be non-empty")
        return hash_embed(content, self.dim)

    def embed_many(self, contents, visual_ids=None):
        return [self.embed(c) for c in contents]

    def __repr__(self) -> str:
        return f"HashEmbedder(dim={self.dim})"


class RemoteEmbedder:
    """Client for a remote embedding service.

    The first successful response fixes the dimension unless `dim` is given up
    front; any later vector of another length raises DimensionMismatch.
    Transport failures and 5xx responses are retried up to `max_retries` times.
    """

    def __init__(
        self,
        url: str,
        model: str = "default",
        dim: int | None = None,
        max_retries: int = 2,
        concurrency: int = 8,
        timeout: float = 30.0,
        backoff: float = 0.05,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url.rstrip("/")
        self.model = model
        self.dim = dim
        self.max_retries = max_retries
        self.backoff = backoff
        self.tag = f"remote:{model}"
        self._slots = threading.BoundedSemaphore(concurrency)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _post(self, body: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                with self._slots:
                    resp = self._client.post(self.url + "/v1/embed", json=body)
                if resp.status_code >= 500:
                    raise httpx.HTTPStatusError(f"status {resp.status_code}", request=resp.request, response=resp)
                resp.raise_for_status()
                return resp.json()
            except (httpx.TransportError, httpx.HTTPStatusError, ValueError) as exc:
                last = exc
                if isinstance(exc, httpx.HTTPStatusError) and exc.response.status_code < 500:
                    break
                logger.warning("embed request failed (attempt %d): %s", attempt + 1, exc)
                if attempt < self.max_retries:
                    time.sleep(self.backoff * 2**attempt)
        raise EmbedderUnavailable(f"embedding service at {self.url} failed: {last}")

    def embed_many(self, contents: Sequence[str], visual_ids: Sequence[Sequence[str]] | None = None) -> list[np.ndarray]:
        if any(not c for c in contents):
            raise ValueError("content must be non-empty")
        if not contents:
            return []
        vids = [list(v) for v in visual_ids] if visual_ids is not None else [[] for _ in contents]
        payload = self._post({"model": self.model, "inputs": list(contents), "visual_ids": vids})
        try:
            dim = int(payload["dim"])
            vectors = payload["vectors"]
        except (KeyError, TypeError, ValueError) as exc:
            raise EmbedderUnavailable(f"malformed embedding response: {exc}") from exc
        if self.dim is None:
            self.dim = dim
        if dim != self.dim:
            raise DimensionMismatch(f"service reports dim {dim}, expected {self.dim}")
        if len(vectors) != len(contents):
            raise EmbedderUnavailable(f"service returned {len(vectors)} vectors for {len(contents)} inputs")
        out = []
        for v in vectors:
            if len(v) != self.dim:
                raise DimensionMismatch(f"service returned a {len(v)}-vector, expected {self.dim}")
            out.append(unit_normalize(v))
        return out

    def embed(self, content: str, visual_ids: Sequence[str] = ()) -> np.ndarray:
        return self.embed_many([content], [list(visual_ids)])[0]


def provider_from_env(dim: int = DEFAULT_DIM, model: str = "default") -> Embedder:
    url = os.environ.get(EMBED_URL_ENV)
    if url:
        return RemoteEmbedder(url, model=model)
    return HashEmbedder(dim)


def provider_for_bank(tag: str, dim: int) -> Embedder:
    """Pick the query-side provider matching a bank's recorded provider."""
    if tag == HASH_PROVIDER_TAG:
        return HashEmbedder(dim)
    url = os.environ.get(EMBED_URL_ENV)
    if tag.startswith("remote:") and url:
        return RemoteEmbedder(url, model=tag.split(":", 1)[1], dim=dim)
    raise EmbedderUnavailable(f"no embedding provider available for bank provider {tag!r}")
