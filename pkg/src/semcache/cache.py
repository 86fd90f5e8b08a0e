"""A query -> answer cache that hits on semantic similarity above a threshold.

Lookup embeds the query, takes the ``top_k_candidates`` nearest entries from
the vector store, rescores them with a pluggable SimilarityScorer and hits iff
the best score reaches the threshold. Cache logic never reads ``group_id``;
it is provenance for the evaluation harness only.
"""

import asyncio
import itertools
import os
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Iterator, Literal, Optional, Sequence, Union

import httpx
import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from semcache.embedding import API_KEY_ENV, Embedder, Embedding, cosine_similarity
from semcache.errors import ContractViolationError, SemcacheError
from semcache.transport import RetryPolicy, Sleep, call_with_retry, post_json
from semcache.vector_store import VectorStore


class CacheEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    entry_id: str
    query_text: str
    embedding: Embedding
    answer: str
    group_id: Optional[str] = Field(None, description="Ground-truth provenance; opaque to the cache")
    sequence: int = Field(..., ge=0, description="Insertion order")


class SimilarityScorer(ABC):
    """Second-stage scorer; scores are positional with ``candidates`` and lie in [0, 1]."""

    name: str

    @abstractmethod
    async def score(
        self, query_text: str, query_embedding: Embedding, candidates: Sequence[CacheEntry]
    ) -> list[float]:
        """Score every candidate against the query."""

    async def aclose(self) -> None:
        return None


class CosineScorer(SimilarityScorer):
    """Raw cosine c in [-1, 1] rescaled to (c + 1) / 2."""

    name = "cosine"

    async def score(self, query_text, query_embedding, candidates):
        return [
            min(1.0, max(0.0, (cosine_similarity(query_embedding, c.embedding) + 1.0) / 2.0))
            for c in candidates
        ]


class ScriptedScorer(SimilarityScorer):
    """Table-driven scorer for tests: (query, candidate query) -> score, else ``default``."""

    name = "scripted"

    def __init__(self, table: dict[tuple[str, str], float], default: float = 0.0):
        for value in [default, *table.values()]:
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"scripted score {value} outside [0, 1]")
        self.table = dict(table)
        self.default = default

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScriptedScorer":
        """Load a YAML table of ``pairs: [{query, candidate, score}]`` plus an optional ``default``."""
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        table = {(p["query"], p["candidate"]): float(p["score"]) for p in loaded.get("pairs", [])}
        return cls(table, default=float(loaded.get("default", 0.0)))

    async def score(self, query_text, query_embedding, candidates):
        return [self.table.get((query_text, c.query_text), self.default) for c in candidates]


class RemotePairScorer(SimilarityScorer):
    """Client for a pairwise scoring service: POST ``{endpoint}/score``."""

    name = "remote_pair"

    def __init__(
        self,
        endpoint_url: str,
        timeout_ms: int = 30_000,
        max_retries: int = 3,
        api_key: Optional[str] = None,
        client: Optional[httpx.AsyncClient] = None,
        policy: Optional[RetryPolicy] = None,
        sleep: Sleep = asyncio.sleep,
    ):
        self.url = f"{endpoint_url.rstrip('/')}/score"
        self.timeout_ms = timeout_ms
        self.max_retries = max_retries
        self.api_key = api_key if api_key is not None else os.getenv(API_KEY_ENV)
        self._client = client or httpx.AsyncClient()
        self._owns_client = client is None
        self.policy = policy
        self._sleep = sleep

    async def score(self, query_text, query_embedding, candidates):
        if not candidates:
            return []
        texts = [c.query_text for c in candidates]

        async def post() -> list[float]:
            body = await post_json(
                self._client,
                self.url,
                {"query": query_text, "candidates": texts},
                api_key=self.api_key,
                timeout=self.timeout_ms / 1000,
            )
            scores = body.get("scores") if isinstance(body, dict) else None
            if not isinstance(scores, list) or len(scores) != len(texts):
                raise ContractViolationError(f"{self.url} returned no positional scores list")
            values = [float(s) for s in scores]
            if any(not 0.0 <= s <= 1.0 for s in values):
                raise ContractViolationError(f"{self.url} returned a score outside [0, 1]")
            return values

        return await call_with_retry(
            post, max_retries=self.max_retries, policy=self.policy, sleep=self._sleep, label="pair scorer"
        )

    async def aclose(self) -> None:
        if self._owns_client:
            await self._client.aclose()


class ScorerConfig(BaseModel):
    kind: Literal["cosine", "remote_pair", "scripted"] = "cosine"
    endpoint_url: Optional[str] = None
    script_path: Optional[str] = None
    timeout_ms: int = Field(30_000, gt=0)
    max_retries: int = Field(3, ge=0)

    @model_validator(mode="after")
    def _required_fields(self) -> "ScorerConfig":
        if self.kind == "remote_pair" and not self.endpoint_url:
            raise ValueError("remote_pair scorer needs endpoint_url")
        if self.kind == "scripted" and not self.script_path:
            raise ValueError("scripted scorer needs script_path")
        return self


def make_scorer(config: ScorerConfig, policy: Optional[RetryPolicy] = None) -> SimilarityScorer:
    """Build the scorer named by ``config.kind``.

    Args:
        config: Scorer section of the run configuration.
        policy: Backoff shared with the other remote providers; only the remote_pair scorer uses it.

    Returns:
        A cosine, scripted or remote pair scorer.
    """
    if config.kind == "remote_pair":
        return RemotePairScorer(config.endpoint_url, config.timeout_ms, config.max_retries, policy=policy)
    if config.kind == "scripted":
        return ScriptedScorer.from_file(config.script_path)
    return CosineScorer()


class CacheConfig(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    threshold: float = Field(0.9, ge=0.0, le=1.0)
    top_k_candidates: int = Field(5, ge=1)
    capacity: Optional[int] = Field(None, gt=0, description="None means unbounded")
    scorer: SimilarityScorer = Field(default_factory=CosineScorer)


class LookupResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    hit: bool
    entry: Optional[CacheEntry] = None
    score: Optional[float] = None
    nearest_score: Optional[float] = Field(
        None, description="Best scorer value among candidates, hit or not; None for an empty cache"
    )
    query_embedding: Optional[Embedding] = None

    @model_validator(mode="after")
    def _hit_consistent(self) -> "LookupResult":
        if self.hit != (self.entry is not None) or self.hit != (self.score is not None):
            raise ValueError("hit, entry and score must be present together")
        return self


class SemanticCache:
    """Single-writer / multi-reader semantic cache with LRU eviction."""

    def __init__(self, embedder: Embedder, config: Optional[CacheConfig] = None):
        self.embedder = embedder
        self.config = config or CacheConfig()
        self._store = VectorStore(embedder.dim)
        self._entries: dict[str, CacheEntry] = {}
        self._last_access: dict[str, int] = {}
        self._clock = itertools.count(1)
        self._sequence = itertools.count()
        self._hits = 0
        self._misses = 0
        self._evictions = 0

    @property
    def threshold(self) -> float:
        return self.config.threshold

    @property
    def scorer(self) -> SimilarityScorer:
        return self.config.scorer

    def size(self) -> int:
        """Number of live entries."""
        return len(self._entries)

    def __len__(self) -> int:
        return self.size()

    def entries(self) -> Iterator[CacheEntry]:
        """Live entries in insertion order."""
        return iter(sorted(self._entries.values(), key=lambda e: e.sequence))

    def last_access(self, entry_id: str) -> int:
        """Logical clock value of the entry's last insert or hit."""
        return self._last_access[entry_id]

    async def lookup(self, query_text: str) -> LookupResult:
        """Find the best cached entry for ``query_text``.

        The top ``top_k_candidates`` neighbours by cosine are rescored by the
        scorer; the best one is served when its score reaches the threshold.

        Args:
            query_text: The incoming question; must not be blank.

        Returns:
            LookupResult with the served entry on a hit. ``nearest_score`` and
            ``query_embedding`` are filled in on misses too.
        """
        if not query_text.strip():
            raise SemcacheError("query text is empty")
        query_embedding = await self.embedder.embed_one(query_text)
        neighbors = self._store.top_k(query_embedding, self.config.top_k_candidates)
        if not neighbors:
            self._misses += 1
            return LookupResult(hit=False, query_embedding=query_embedding)

        candidates = [self._entries[n.entry_id] for n in neighbors]
        scores = await self.scorer.score(query_text, query_embedding, candidates)
        if len(scores) != len(candidates):
            raise ContractViolationError(f"scorer {self.scorer.name} returned {len(scores)} scores")

        # Equal scores fall back to higher raw cosine, then earlier insertion.
        best = max(
            range(len(candidates)),
            key=lambda i: (
                scores[i],
                cosine_similarity(query_embedding, candidates[i].embedding),
                -candidates[i].sequence,
            ),
        )
        best_score = scores[best]
        if best_score < self.threshold:
            self._misses += 1
            return LookupResult(hit=False, nearest_score=best_score, query_embedding=query_embedding)

        entry = candidates[best]
        self._last_access[entry.entry_id] = next(self._clock)
        self._hits += 1
        return LookupResult(
            hit=True,
            entry=entry,
            score=best_score,
            nearest_score=best_score,
            query_embedding=query_embedding,
        )

    async def insert(
        self,
        query_text: str,
        answer: str,
        group_id: Optional[str] = None,
        embedding: Optional[Embedding] = None,
    ) -> str:
        """Store a new entry, evicting the least recently accessed one at capacity."""
        if not query_text.strip():
            raise SemcacheError("query text is empty")
        if embedding is None:
            embedding = await self.embedder.embed_one(query_text)

        capacity = self.config.capacity
        while capacity is not None and len(self._entries) >= capacity:
            self._evict()

        sequence = next(self._sequence)
        entry = CacheEntry(
            entry_id=f"e{sequence}",
            query_text=query_text,
            embedding=embedding,
            answer=answer,
            group_id=group_id,
            sequence=sequence,
        )
        self._store.insert(entry.entry_id, embedding)
        self._entries[entry.entry_id] = entry
        self._last_access[entry.entry_id] = next(self._clock)
        return entry.entry_id

    def _evict(self) -> None:
        victim = min(self._last_access, key=self._last_access.__getitem__)
        self._store.remove(victim)
        del self._entries[victim]
        del self._last_access[victim]
        self._evictions += 1
        logger.debug(f"Evicted cache entry {victim}")

    def stats(self) -> dict:
        """Counters since construction: size, capacity, hits, misses and evictions."""
        return {
            "size": self.size(),
            "capacity": self.config.capacity,
            "hits": self._hits,
            "misses": self._misses,
            "evictions": self._evictions,
        }
