from __future__ import annotations

import inspect
import itertools
from pathlib import Path

import pytest

from semcache.embedding import HashingEmbedder
from semcache.models import CreatedBy, QAPair, VariationGroup

REPO_ROOT = Path(__file__).parent.parent.parent
FIXTURES = REPO_ROOT / "fixtures"


def unmarked_coroutine_tests(items) -> list[str]:
    """Node ids of coroutine tests collected without the anyio marker."""
    return [
        item.nodeid
        for item in items
        if inspect.iscoroutinefunction(getattr(item, "function", None)) and item.get_closest_marker("anyio") is None
    ]


# The anyio marker must be in place before parametrization, so async test
# modules declare ``pytestmark = pytest.mark.anyio``; this only checks it.
def pytest_collection_modifyitems(items):
    unmarked = unmarked_coroutine_tests(items)
    if unmarked:
        raise pytest.UsageError(f"async tests without the anyio marker: {', '.join(unmarked)}")


@pytest.fixture(scope="session")
def anyio_backend():
    return "asyncio"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def embedder() -> HashingEmbedder:
    return HashingEmbedder()


def distinct_tokens(embedder: HashingEmbedder, count: int, prefix: str = "w") -> list[str]:
    """Tokens whose hashed features land in pairwise distinct buckets.

    Texts built from these tokens have exact, collision-free cosines:
    shared / sqrt(len(a) * len(b)) for token sets a and b.
    """
    tokens, buckets = [], set()
    for i in itertools.count():
        token = f"{prefix}{i}"
        bucket, _ = embedder.feature(token)
        if bucket in buckets:
            continue
        buckets.add(bucket)
        tokens.append(token)
        if len(tokens) == count:
            return tokens
        if len(buckets) == embedder.dim:
            raise ValueError(f"cannot find {count} distinct buckets in dim {embedder.dim}")


@pytest.fixture(scope="session")
def vocab(embedder) -> list[str]:
    """120 collision-free tokens."""
    return distinct_tokens(embedder, 120)


def make_group(group_id: str, question: str, *variations: str, answer: str = "", doc: str = "doc") -> VariationGroup:
    answer = answer or f"answer for {group_id}"
    original = QAPair(
        qa_id=group_id,
        question=question,
        answer=answer,
        source_doc_id=doc,
        verified=True,
        created_by=CreatedBy.fixture,
    )
    return VariationGroup(group_id=group_id, original=original, variations=list(variations), answer=answer)
