"""Exact brute-force cosine KNN over an insertion-ordered set of embeddings."""

import json
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from semcache.embedding import Embedding
from semcache.errors import StoreError


class Neighbor(BaseModel):
    entry_id: str
    score: float = Field(..., ge=-1.0, le=1.0, description="Cosine similarity to the query")


class VectorStore:
    """Embeddings keyed by entry id, searched exhaustively.

    Rows stay in insertion order, so a stable sort on descending score breaks
    ties by ascending insertion order. Mutation requires exclusive access;
    concurrent ``top_k`` calls are safe on an unchanging store.
    """

    def __init__(self, dim: int, initial_capacity: int = 64):
        if dim <= 0:
            raise StoreError("dim must be positive")
        self.dim = dim
        self._vectors = np.empty((max(1, initial_capacity), dim), dtype=np.float64)
        self._norms = np.empty(max(1, initial_capacity), dtype=np.float64)
        self._ids: list[str] = []
        self._embeddings: dict[str, Embedding] = {}

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self._embeddings

    def ids(self) -> Iterator[str]:
        """Entry ids in insertion order."""
        return iter(list(self._ids))

    def get(self, entry_id: str) -> Optional[Embedding]:
        """The stored embedding, or None for an unknown id."""
        return self._embeddings.get(entry_id)

    def _grow(self) -> None:
        capacity = self._vectors.shape[0] * 2
        vectors = np.empty((capacity, self.dim), dtype=np.float64)
        norms = np.empty(capacity, dtype=np.float64)
        size = len(self._ids)
        vectors[:size] = self._vectors[:size]
        norms[:size] = self._norms[:size]
        self._vectors, self._norms = vectors, norms

    def insert(self, entry_id: str, embedding: Embedding) -> None:
        """Add one embedding.

        Args:
            entry_id: Unique id; inserting an existing id raises StoreError.
            embedding: Non-zero vector of the store's dimension.
        """
        if embedding.dim != self.dim:
            raise StoreError(f"embedding dim {embedding.dim} does not match store dim {self.dim}")
        if entry_id in self._embeddings:
            raise StoreError(f"duplicate entry id {entry_id!r}")
        vector = embedding.as_array()
        norm = np.linalg.norm(vector)
        if norm == 0:
            raise StoreError(f"entry {entry_id!r} has a zero vector")
        size = len(self._ids)
        if size == self._vectors.shape[0]:
            self._grow()
        self._vectors[size] = vector
        self._norms[size] = norm
        self._ids.append(entry_id)
        self._embeddings[entry_id] = embedding

    def remove(self, entry_id: str) -> bool:
        """Delete an entry, keeping the others in insertion order. False if it was absent."""
        if entry_id not in self._embeddings:
            return False
        position = self._ids.index(entry_id)
        size = len(self._ids)
        self._vectors[position : size - 1] = self._vectors[position + 1 : size]
        self._norms[position : size - 1] = self._norms[position + 1 : size]
        del self._ids[position]
        del self._embeddings[entry_id]
        return True

    def top_k(self, query: Embedding, k: int) -> list[Neighbor]:
        """The min(k, size) most similar entries, best first."""
        if k < 1:
            raise StoreError("k must be at least 1")
        if query.dim != self.dim:
            raise StoreError(f"query dim {query.dim} does not match store dim {self.dim}")
        size = len(self._ids)
        if size == 0:
            return []
        q = query.as_array()
        q_norm = np.linalg.norm(q)
        if q_norm == 0:
            raise StoreError("query is a zero vector")
        scores = (self._vectors[:size] @ q) / (self._norms[:size] * q_norm)
        scores = np.clip(scores, -1.0, 1.0)
        order = np.argsort(-scores, kind="stable")[:k]
        return [Neighbor(entry_id=self._ids[i], score=float(scores[i])) for i in order]

    def save_snapshot(self, path: Union[str, Path]) -> None:
        """Write ``{dim, entries: [{entry_id, values}]}`` as JSON."""
        snapshot = {
            "dim": self.dim,
            "entries": [
                {"entry_id": entry_id, "values": list(self._embeddings[entry_id].values)}
                for entry_id in self._ids
            ],
        }
        Path(path).write_text(json.dumps(snapshot), encoding="utf-8")

    @classmethod
    def load_snapshot(cls, path: Union[str, Path]) -> "VectorStore":
        """Rebuild a store written by ``save_snapshot``; StoreError if the file is malformed."""
        snapshot = json.loads(Path(path).read_text(encoding="utf-8"))
        try:
            store = cls(int(snapshot["dim"]), initial_capacity=max(1, len(snapshot["entries"])))
            for entry in snapshot["entries"]:
                store.insert(entry["entry_id"], Embedding(values=tuple(entry["values"])))
        except (KeyError, TypeError, ValueError) as e:
            raise StoreError(f"malformed snapshot {path}: {e}") from e
        return store
