"""Semantic cache lookups, scorers, LRU eviction and threshold properties."""

import json
import math

import httpx
import numpy as np
import pytest

from semcache.cache import (
    CacheConfig,
    CacheEntry,
    CosineScorer,
    LookupResult,
    RemotePairScorer,
    ScorerConfig,
    ScriptedScorer,
    SemanticCache,
    make_scorer,
)
from semcache.embedding import Embedding, HashingEmbedder
from semcache.errors import ContractViolationError, SemcacheError
from semcache.transport import RetryPolicy

pytestmark = pytest.mark.anyio


def cache(threshold=0.9, **kwargs) -> SemanticCache:
    return SemanticCache(HashingEmbedder(), CacheConfig(threshold=threshold, **kwargs))


async def test_empty_cache_misses():
    c = cache()
    result = await c.lookup("anything at all")
    assert not result.hit
    assert result.entry is None and result.score is None and result.nearest_score is None
    assert c.size() == 0


async def test_exact_query_hits_with_score_one():
    c = cache()
    entry_id = await c.insert("what is AT1", "ans")
    result = await c.lookup("what is AT1")
    assert result.hit
    assert result.entry.entry_id == entry_id == "e0"
    assert result.entry.answer == "ans"
    assert math.isclose(result.score, 1.0, abs_tol=1e-6)


async def test_engineered_overlaps_pick_the_closer_entry(vocab):
    query = vocab[:10]
    close = vocab[:9] + vocab[20:21]  # 9 of 10 shared: cosine 0.9, rescaled 0.95
    far = vocab[:6] + vocab[30:34]  # 6 of 10 shared: cosine 0.6, rescaled 0.80
    c = cache(threshold=0.9)
    await c.insert(" ".join(far), "far")
    await c.insert(" ".join(close), "close")

    result = await c.lookup(" ".join(query))
    assert result.hit
    assert result.entry.answer == "close"
    assert math.isclose(result.score, 0.95, rel_tol=1e-9)


async def test_below_threshold_is_a_miss_with_nearest_score(vocab):
    c = cache(threshold=0.9)
    await c.insert(" ".join(vocab[:6] + vocab[30:34]), "far")
    result = await c.lookup(" ".join(vocab[:10]))
    assert not result.hit
    assert math.isclose(result.nearest_score, 0.8, rel_tol=1e-9)
    assert result.query_embedding is not None


async def test_lookup_rejects_blank_query():
    with pytest.raises(SemcacheError):
        await cache().lookup("  ")
    with pytest.raises(SemcacheError):
        await cache().insert("", "a")


async def test_equal_scores_prefer_higher_cosine_then_earlier_insert(vocab):
    flat = ScriptedScorer({}, default=0.95)
    c = cache(threshold=0.9, scorer=flat)
    await c.insert(" ".join(vocab[:4] + vocab[40:46]), "weaker")
    await c.insert(" ".join(vocab[:10]), "first exact")
    await c.insert(" ".join(vocab[:10]), "second exact")

    result = await c.lookup(" ".join(vocab[:10]))
    assert result.entry.answer == "first exact"
    assert result.score == 0.95


async def test_capacity_evicts_least_recently_inserted():
    c = cache(capacity=2)
    for text in ["alpha one", "beta two", "gamma three"]:
        await c.insert(text, text)
    assert [e.query_text for e in c.entries()] == ["beta two", "gamma three"]
    assert c.size() == 2
    assert c.stats()["evictions"] == 1


async def test_hit_refreshes_recency():
    c = cache(capacity=2)
    await c.insert("alpha one", "a")
    await c.insert("beta two", "b")
    assert (await c.lookup("alpha one")).hit
    await c.insert("gamma three", "c")
    assert [e.query_text for e in c.entries()] == ["alpha one", "gamma three"]


async def test_unbounded_cache_keeps_everything():
    c = cache()
    for i in range(100):
        await c.insert(f"question number {i}", str(i))
    assert c.size() == len(c) == 100
    assert [e.entry_id for e in c.entries()][:3] == ["e0", "e1", "e2"]


async def test_lookup_does_not_insert():
    c = cache()
    await c.insert("alpha one", "a")
    await c.lookup("alpha one")
    await c.lookup("something else entirely")
    assert c.size() == 1
    assert c.stats() == {"size": 1, "capacity": None, "hits": 1, "misses": 1, "evictions": 0}


def random_texts(rng: np.random.Generator, vocab: list[str], n: int) -> list[str]:
    return [" ".join(rng.choice(vocab, size=int(rng.integers(1, 6)))) for _ in range(n)]


async def test_group_ids_do_not_affect_lookups(vocab):
    rng = np.random.default_rng(11)
    small = vocab[:12]
    stored = random_texts(rng, small, 30)
    queries = random_texts(rng, small, 30)

    async def run(group_ids):
        c = cache(threshold=0.85, capacity=10)
        outcomes = []
        for text, group_id, query in zip(stored, group_ids, queries):
            await c.insert(text, "answer", group_id=group_id)
            r = await c.lookup(query)
            outcomes.append((r.hit, r.entry.entry_id if r.hit else None, r.nearest_score))
        return outcomes

    truth = [f"g{i % 4}" for i in range(30)]
    scrambled = [str(g) for g in rng.permutation(truth)]
    assert await run(truth) == await run(scrambled) == await run([None] * 30)


async def test_threshold_monotonicity(vocab):
    rng = np.random.default_rng(5)
    small = vocab[:10]
    for _ in range(10):
        stored = random_texts(rng, small, 15)
        queries = random_texts(rng, small, 10)
        previous = None
        for threshold in [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0]:
            c = cache(threshold=threshold, top_k_candidates=3)
            for text in stored:
                await c.insert(text, "a")
            results = [await c.lookup(q) for q in queries]
            if previous is not None:
                for before, after in zip(previous, results):
                    if after.hit:
                        assert before.hit
                        assert before.entry.entry_id == after.entry.entry_id
            previous = results


async def test_byte_identical_query_always_hits(vocab):
    rng = np.random.default_rng(9)
    c = cache(threshold=1.0 - 1e-6, top_k_candidates=50)
    texts = list(dict.fromkeys(random_texts(rng, vocab[:30], 40)))
    for text in texts:
        await c.insert(text, text)
    for text in texts:
        result = await c.lookup(text)
        assert result.hit


async def test_cosine_scorer_range():
    rng = np.random.default_rng(1)
    scorer = CosineScorer()
    query = Embedding.from_array(rng.normal(size=16))
    candidates = [
        CacheEntry(
            entry_id=f"e{i}",
            query_text=str(i),
            embedding=Embedding.from_array(rng.normal(size=16)),
            answer="a",
            sequence=i,
        )
        for i in range(50)
    ]
    scores = await scorer.score("q", query, candidates)
    assert all(0.0 <= s <= 1.0 for s in scores)

    itself = candidates[0].model_copy(update={"embedding": query})
    assert math.isclose((await scorer.score("q", query, [itself]))[0], 1.0, abs_tol=1e-6)


def test_lookup_result_invariant():
    with pytest.raises(ValueError):
        LookupResult(hit=True)
    with pytest.raises(ValueError):
        LookupResult(hit=False, score=0.5)


def test_cache_config_bounds():
    with pytest.raises(ValueError):
        CacheConfig(threshold=1.5)
    with pytest.raises(ValueError):
        CacheConfig(top_k_candidates=0)


def test_scripted_scorer_from_file(tmp_path, fixtures_dir):
    scorer = ScriptedScorer.from_file(fixtures_dir / "scorer_script.yaml")
    assert scorer.default == 0.0
    assert scorer.table[
        ("for assignment two how many references do i need", "how many references do i need for assignment two")
    ] == 0.97

    bad = tmp_path / "bad.yaml"
    bad.write_text("default: 1.5\n")
    with pytest.raises(ValueError):
        ScriptedScorer.from_file(bad)


def test_make_scorer_kinds(fixtures_dir):
    assert make_scorer(ScorerConfig()).name == "cosine"
    assert make_scorer(ScorerConfig(kind="scripted", script_path=str(fixtures_dir / "scorer_script.yaml"))).name == "scripted"
    assert make_scorer(ScorerConfig(kind="remote_pair", endpoint_url="http://stub")).name == "remote_pair"
    with pytest.raises(ValueError):
        ScorerConfig(kind="remote_pair")


async def no_sleep(_: float) -> None:
    return None


def pair_scorer(handler, max_retries=2) -> RemotePairScorer:
    client = httpx.AsyncClient(transport=httpx.MockTransport(handler))
    return RemotePairScorer(
        "http://stub",
        max_retries=max_retries,
        client=client,
        policy=RetryPolicy(base_delay=0.0, max_delay=0.0),
        sleep=no_sleep,
    )


async def test_remote_pair_scorer_drives_lookups():
    requests = []

    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        requests.append(body)
        return httpx.Response(200, json={"scores": [0.93] * len(body["candidates"])})

    c = cache(threshold=0.9, scorer=pair_scorer(handler))
    await c.insert("what's the brief for assignment three", "brief")
    result = await c.lookup("what do i need to do for assignment three")
    assert result.hit and result.score == 0.93
    assert requests == [
        {"query": "what do i need to do for assignment three", "candidates": ["what's the brief for assignment three"]}
    ]


@pytest.mark.parametrize("payload", [{"scores": [0.5, 0.5]}, {"scores": [1.5]}, {"nope": []}])
async def test_remote_pair_scorer_contract_violations(payload):
    c = cache(scorer=pair_scorer(lambda request: httpx.Response(200, json=payload)))
    await c.insert("alpha", "a")
    with pytest.raises(ContractViolationError):
        await c.lookup("alpha")
