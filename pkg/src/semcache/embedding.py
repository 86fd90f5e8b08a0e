"""Text embeddings: a deterministic hashing embedder, a remote client, and cosine similarity.

The local embedder uses the hashing trick over lowercase alphanumeric tokens:
each token is hashed with xxHash64 (seed ``HASH_SEED``), the bucket is
``hash % dim`` and the sign is ``-1`` when bit 63 is set. Bucket counts are
L2-normalised, so cosine similarity tracks token overlap.
"""

import asyncio
import math
import os
import re
from abc import ABC, abstractmethod
from typing import Literal, Optional, Sequence

import httpx
import numpy as np
import xxhash
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from semcache.errors import ContractViolationError, EmbeddingError
from semcache.transport import RetryPolicy, Sleep, call_with_retry, post_json

HASH_SEED = 0x5EED
DEFAULT_DIM = 256
# Stands in for texts that yield no usable token features.
SENTINEL_TOKEN = "\x00<empty>"
API_KEY_ENV = "SEMCACHE_API_KEY"

_TOKEN = re.compile(r"[^\W_]+")


class Embedding(BaseModel):
    """A fixed-length vector of finite floats."""

    model_config = ConfigDict(frozen=True)

    values: tuple[float, ...]

    @field_validator("values")
    @classmethod
    def _finite(cls, values: tuple[float, ...]) -> tuple[float, ...]:
        if not values:
            raise ValueError("embedding has no values")
        if not all(math.isfinite(v) for v in values):
            raise ValueError("embedding contains non-finite values")
        return values

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        """float64 copy of the values."""
        return np.asarray(self.values, dtype=np.float64)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "Embedding":
        """Validate a 1-d array of finite values and wrap it."""
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 1 or array.size == 0 or not np.all(np.isfinite(array)):
            raise EmbeddingError("embedding must be a non-empty finite 1-d vector")
        return cls.model_construct(values=tuple(array.tolist()))


class EmbeddingProviderConfig(BaseModel):
    kind: Literal["remote", "deterministic_local"] = "deterministic_local"
    endpoint_url: Optional[str] = None
    model_name: Optional[str] = None
    dim: int = Field(DEFAULT_DIM, gt=0)
    timeout_ms: int = Field(30_000, gt=0)
    max_retries: int = Field(3, ge=0)
    concurrency: int = Field(4, gt=0, description="Maximum remote requests in flight")
    batch_size: int = Field(64, gt=0, description="Texts per remote request")

    @model_validator(mode="after")
    def _remote_needs_endpoint(self) -> "EmbeddingProviderConfig":
        if self.kind == "remote" and not (self.endpoint_url and self.model_name):
            raise ValueError("remote embedding provider needs endpoint_url and model_name")
        return self


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    """dot(a, b) / (|a| |b|), clamped to [-1, 1]."""
    if a.dim != b.dim:
        raise EmbeddingError(f"dimension mismatch: {a.dim} vs {b.dim}")
    va, vb = a.as_array(), b.as_array()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise EmbeddingError("cosine similarity is undefined for a zero vector")
    return min(1.0, max(-1.0, float(np.dot(va, vb) / (na * nb))))


def _check_texts(texts: Sequence[str]) -> None:
    if not texts:
        raise EmbeddingError("nothing to embed")
    for i, text in enumerate(texts):
        if not text.strip():
            raise EmbeddingError(f"text {i} is empty")


class Embedder(ABC):
    """Maps texts to embeddings of a fixed dimension."""

    dim: int

    @property
    @abstractmethod
    def fingerprint(self) -> str:
        """Identifies the embedding function in reports."""

    @abstractmethod
    async def embed(self, texts: Sequence[str]) -> list[Embedding]:
        """One embedding per text, in input order."""

    async def embed_one(self, text: str) -> Embedding:
        """Convenience for a single text."""
        return (await self.embed([text]))[0]

    async def aclose(self) -> None:
        return None


class HashingEmbedder(Embedder):
    """Deterministic bag-of-tokens embedder; a pure function of the text."""

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = HASH_SEED):
        if dim <= 0:
            raise EmbeddingError("dim must be positive")
        self.dim = dim
        self.seed = seed

    @property
    def fingerprint(self) -> str:
        return f"hashing-xxh64:seed={self.seed:#x}:dim={self.dim}"

    @staticmethod
    def tokenize(text: str) -> list[str]:
        """Lowercase alphanumeric runs, in order, duplicates kept."""
        return _TOKEN.findall(text.lower())

    def feature(self, token: str) -> tuple[int, int]:
        """(bucket, sign) for one token."""
        h = xxhash.xxh64_intdigest(token.encode("utf-8"), seed=self.seed)
        return h % self.dim, -1 if h >> 63 else 1

    def _accumulate(self, tokens: Sequence[str]) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokens:
            bucket, sign = self.feature(token)
            vec[bucket] += sign
        return vec

    def vectorize(self, text: str) -> np.ndarray:
        """Map ``text`` to a unit vector by signed feature hashing.

        Each token adds its sign to bucket ``xxh64(token) % dim``. A text with
        no tokens, or whose features cancel out, is hashed as the sentinel token
        instead so the result is never the zero vector.

        Args:
            text: Any string, including an empty one.

        Returns:
            A float64 array of length ``dim`` with L2 norm 1.
        """
        vec = self._accumulate(self.tokenize(text))
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec = self._accumulate([SENTINEL_TOKEN])
            norm = np.linalg.norm(vec)
        return vec / norm

    async def embed(self, texts: Sequence[str]) -> list[Embedding]:
        _check_texts(texts)
        return [Embedding.from_array(self.vectorize(text)) for text in texts]


class RemoteEmbedder(Embedder):
    """Client for an OpenAI-style ``/v1/embeddings`` endpoint."""

    def __init__(
        self,
        config: EmbeddingProviderConfig,
        api_key: Optional[str] = None,
        client: Optional[httpx.AsyncClient] = None,
        policy: Optional[RetryPolicy] = None,
        sleep: Sleep = asyncio.sleep,
    ):
        if config.kind != "remote":
            raise EmbeddingError("RemoteEmbedder needs a remote provider config")
        self.config = config
        self.dim = config.dim
        self.url = f"{config.endpoint_url.rstrip('/')}/v1/embeddings"
        self.api_key = api_key if api_key is not None else os.getenv(API_KEY_ENV)
        self._client = client or httpx.AsyncClient()
        self._owns_client = client is None
        self.policy = policy
        self._sleep = sleep
        self._semaphore = asyncio.Semaphore(config.concurrency)

    @property
    def fingerprint(self) -> str:
        return f"remote:{self.config.model_name}@{self.config.endpoint_url}:dim={self.dim}"

    async def embed(self, texts: Sequence[str]) -> list[Embedding]:
        _check_texts(texts)
        size = self.config.batch_size
        batches = [list(texts[i : i + size]) for i in range(0, len(texts), size)]
        results = await asyncio.gather(*(self._embed_batch(batch) for batch in batches))
        return [embedding for batch in results for embedding in batch]

    async def _embed_batch(self, batch: list[str]) -> list[Embedding]:
        async with self._semaphore:
            return await call_with_retry(
                lambda: self._post(batch),
                max_retries=self.config.max_retries,
                policy=self.policy,
                sleep=self._sleep,
                label=f"embeddings {self.config.model_name}",
            )

    async def _post(self, batch: list[str]) -> list[Embedding]:
        body = await post_json(
            self._client,
            self.url,
            {"model": self.config.model_name, "input": batch},
            api_key=self.api_key,
            timeout=self.config.timeout_ms / 1000,
        )
        try:
            data = sorted(body["data"], key=lambda item: item["index"])
            vectors = [item["embedding"] for item in data]
        except (KeyError, TypeError) as e:
            raise ContractViolationError(f"malformed embeddings response: {e!r}") from e
        if len(vectors) != len(batch):
            raise ContractViolationError(
                f"asked for {len(batch)} embeddings, received {len(vectors)}"
            )
        embeddings = []
        for vector in vectors:
            if len(vector) != self.dim:
                raise ContractViolationError(
                    f"embedding dimension {len(vector)} does not match declared dim {self.dim}"
                )
            try:
                embeddings.append(Embedding.from_array(np.asarray(vector, dtype=np.float64)))
            except (EmbeddingError, ValueError) as e:
                raise ContractViolationError(f"unusable embedding: {e}") from e
        logger.debug(f"Embedded {len(batch)} texts via {self.url}")
        return embeddings

    async def aclose(self) -> None:
        if self._owns_client:
            await self._client.aclose()


def make_embedder(config: EmbeddingProviderConfig, **kwargs) -> Embedder:
    """Remote client or hashing embedder, per ``config.kind``; ``kwargs`` reach RemoteEmbedder only."""
    if config.kind == "remote":
        return RemoteEmbedder(config, **kwargs)
    return HashingEmbedder(dim=config.dim)
