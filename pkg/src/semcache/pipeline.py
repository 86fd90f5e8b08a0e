"""Three-stage generation of paraphrase test datasets from a document corpus.

1. Query generation: extract facts from each document, then write one
   question per fact.
2. Query evaluation: keep a question only if retrieving the top N documents
   with it returns its source document.
3. Variation generation: ask for paraphrases of each kept question, then
   drop duplicates, near-duplicates and variations that no longer retrieve
   the source document.

Documents (and pairs in stage 3) run concurrently up to ``concurrency``;
results are merged back in input order so output is independent of timing.
"""

import asyncio
import json
from pathlib import Path
from typing import Awaitable, Callable, Optional, Sequence, TypeVar, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field

from semcache.embedding import Embedder, Embedding, cosine_similarity
from semcache.errors import DatasetError, DocumentTooLongError, LlmParseError, ProviderError
from semcache.llm import LlmGateway, LlmProvider
from semcache.models import CreatedBy, Document, QAPair, VariationGroup, normalize_question
from semcache.templates import PromptTemplates
from semcache.vector_store import VectorStore

T = TypeVar("T")
Llm = Union[LlmProvider, LlmGateway]

# LLM-level failures degrade to skips; anything else is fatal.
RECOVERABLE = (ProviderError, LlmParseError)


class PipelineConfig(BaseModel):
    top_n_verification: int = Field(3, gt=0)
    variations_per_question: int = Field(10, gt=0)
    dedupe_similarity_ceiling: float = Field(0.98, ge=0.0, le=1.0, description="Rescaled-cosine scale")
    domain_terms: list[str] = Field(default_factory=list)
    seed: int = Field(0, ge=0, lt=2**64)
    concurrency: int = Field(4, gt=0)
    max_document_chars: int = Field(24_000, gt=0)
    extract_temperature: float = Field(0.0, ge=0.0)
    question_temperature: float = Field(0.0, ge=0.0)
    variation_temperature: float = Field(0.8, ge=0.0)
    templates_dir: Optional[str] = None
    guidelines_path: Optional[str] = None


class StageCounts(BaseModel):
    documents: int = 0
    answers_extracted: int = 0
    questions_generated: int = 0
    verification_kept: int = 0
    verification_dropped: int = 0
    variations_requested: int = 0
    variations_generated: int = 0
    variations_survived: int = 0
    groups: int = 0


class SkipRecord(BaseModel):
    stage: str
    id: str
    reason: str


class RunManifest(BaseModel):
    """Counts and skips for a pipeline run, saved as ``run_manifest.json``."""

    seed: int = 0
    config: dict = Field(default_factory=dict)
    per_stage_counts: StageCounts = Field(default_factory=StageCounts)
    skipped: list[SkipRecord] = Field(default_factory=list)
    usage: dict = Field(default_factory=dict)

    def restart(self, counters: Sequence[str], stages: Sequence[str]) -> None:
        """Zero the given counters and drop skips from the given stages before a stage reruns."""
        for name in counters:
            setattr(self.per_stage_counts, name, 0)
        self.skipped = [s for s in self.skipped if s.stage not in stages]

    def save(self, path: Union[str, Path]) -> None:
        """Write indented JSON, creating the output directory if needed."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load_or_new(cls, path: Union[str, Path], seed: int = 0) -> "RunManifest":
        """The manifest an earlier stage left in ``path``, or a fresh one."""
        path = Path(path)
        if path.exists():
            return cls.model_validate_json(path.read_text(encoding="utf-8"))
        return cls(seed=seed)


class PipelineResult(BaseModel):
    groups: list[VariationGroup]
    kept: list[QAPair]
    dropped: list[QAPair]
    manifest: RunManifest


class AnnotationRow(BaseModel):
    group_id: str
    question: str
    variation: str
    answer: str
    label: Optional[str] = Field(None, description="Filled in by an annotator: correct / incorrect")


async def _bounded(items: Sequence, limit: int, fn: Callable[..., Awaitable[T]]) -> list[T]:
    semaphore = asyncio.Semaphore(limit)

    async def run(item) -> T:
        async with semaphore:
            return await fn(item)

    return await asyncio.gather(*(run(item) for item in items))


def _rescaled(a: Embedding, b: Embedding) -> float:
    return (cosine_similarity(a, b) + 1.0) / 2.0


class DocumentIndex:
    """The corpus embedded once into a VectorStore keyed by doc_id."""

    def __init__(self, embedder: Embedder, store: VectorStore):
        self.embedder = embedder
        self.store = store

    @classmethod
    async def build(cls, corpus: Sequence[Document], embedder: Embedder) -> "DocumentIndex":
        """Embed every document in one batch call."""
        store = VectorStore(embedder.dim, initial_capacity=max(1, len(corpus)))
        if corpus:
            embeddings = await embedder.embed([doc.text for doc in corpus])
            for doc, embedding in zip(corpus, embeddings):
                store.insert(doc.doc_id, embedding)
        return cls(embedder, store)

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self.store

    def top_documents(self, embedding: Embedding, n: int) -> list[str]:
        """doc_ids of the n nearest documents, best first."""
        return [neighbor.entry_id for neighbor in self.store.top_k(embedding, n)]

    async def retrieves(self, question: str, doc_id: str, n: int) -> bool:
        """Whether ``question`` retrieves ``doc_id`` among its top ``n`` documents.

        Args:
            question: Generated question or variation.
            doc_id: The document it was generated from.
            n: Retrieval depth; a corpus smaller than ``n`` always retrieves.

        Returns:
            True when the source document is in the top ``n``.
        """
        embedding = await self.embedder.embed_one(question)
        return doc_id in self.top_documents(embedding, n)


def check_document_budget(corpus: Sequence[Document], budget: int) -> None:
    """Whole documents go into prompts; oversize ones are rejected, never truncated."""
    for doc in corpus:
        if len(doc.text) > budget:
            raise DocumentTooLongError(doc.doc_id, len(doc.text), budget)


async def extract_answers(
    doc: Document,
    provider: Llm,
    templates: Optional[PromptTemplates] = None,
    config: Optional[PipelineConfig] = None,
) -> list[str]:
    """Facts stated by ``doc``, deduplicated by normalised text."""
    templates = templates or PromptTemplates.load()
    config = config or PipelineConfig()
    check_document_budget([doc], config.max_document_chars)
    facts = await LlmGateway.wrap(provider).ask_list(
        templates.system,
        templates.render_extract_facts(doc.text),
        temperature=config.extract_temperature,
        script_key=f"extract_facts/{doc.doc_id}",
    )
    answers: list[str] = []
    seen: set[str] = set()
    for fact in facts:
        key = normalize_question(fact)
        if key and key not in seen:
            seen.add(key)
            answers.append(fact)
    if not answers:
        logger.warning(f"No facts extracted from document {doc.doc_id}")
    return answers


async def generate_questions(
    answers: Sequence[str],
    doc: Document,
    provider: Llm,
    templates: Optional[PromptTemplates] = None,
    config: Optional[PipelineConfig] = None,
    skipped: Optional[list[SkipRecord]] = None,
) -> list[QAPair]:
    """One question per answer, bound to ``doc``; duplicate questions within the document are dropped."""
    if not answers:
        raise ValueError(f"no answers to generate questions for in document {doc.doc_id}")
    templates = templates or PromptTemplates.load()
    config = config or PipelineConfig()
    llm = LlmGateway.wrap(provider)
    domain_terms = [*config.domain_terms, *(doc.domain_terms or [])]

    pairs: list[QAPair] = []
    seen: set[str] = set()
    for i, answer in enumerate(answers):
        qa_id = f"{doc.doc_id}-q{i}"
        try:
            questions = await llm.ask_list(
                templates.system,
                templates.render_generate_question(answer, doc.text, domain_terms),
                temperature=config.question_temperature,
                script_key=f"generate_question/{doc.doc_id}/{i}",
            )
        except RECOVERABLE as e:
            _record(skipped, "generate_question", qa_id, str(e))
            continue
        if not questions:
            _record(skipped, "generate_question", qa_id, "empty response")
            continue
        question = questions[0]
        key = normalize_question(question)
        if not key or key in seen:
            logger.debug(f"Dropping duplicate question {question!r} in {doc.doc_id}")
            continue
        seen.add(key)
        pairs.append(
            QAPair(
                qa_id=qa_id,
                question=question,
                answer=answer,
                source_doc_id=doc.doc_id,
                verified=False,
                created_by=CreatedBy.llm,
            )
        )
    return pairs


def _record(skipped: Optional[list[SkipRecord]], stage: str, item_id: str, reason: str) -> None:
    logger.bind(stage=stage, item_id=item_id).warning(f"Skipped {item_id} at {stage}: {reason}")
    if skipped is not None:
        skipped.append(SkipRecord(stage=stage, id=item_id, reason=reason))


async def verify_queries(
    pairs: Sequence[QAPair],
    corpus: Sequence[Document],
    embedder: Embedder,
    n: int,
    *,
    index: Optional[DocumentIndex] = None,
) -> tuple[list[QAPair], list[QAPair]]:
    """Partition pairs by whether their question retrieves the source document in the top ``n``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    doc_ids = {doc.doc_id for doc in corpus}
    for pair in pairs:
        if pair.source_doc_id not in doc_ids:
            raise DatasetError(f"pair {pair.qa_id} refers to unknown document {pair.source_doc_id!r}")

    index = index or await DocumentIndex.build(corpus, embedder)
    kept: list[QAPair] = []
    dropped: list[QAPair] = []
    if not pairs:
        return kept, dropped
    embeddings = await index.embedder.embed([pair.question for pair in pairs])
    for pair, embedding in zip(pairs, embeddings):
        if pair.source_doc_id in index.top_documents(embedding, n):
            kept.append(pair.model_copy(update={"verified": True}))
        else:
            dropped.append(pair.model_copy(update={"verified": False}))
    logger.info(f"Verification kept {len(kept)} and dropped {len(dropped)} of {len(pairs)} questions (top {n})")
    return kept, dropped


async def filter_variations(
    original: QAPair,
    candidates: Sequence[str],
    index: DocumentIndex,
    config: Optional[PipelineConfig] = None,
) -> list[str]:
    """Survivors of three rules applied in order, keeping input order.

    1. normalised duplicate of the original or of an accepted candidate;
    2. rescaled cosine to the original or an accepted candidate at or above
       ``dedupe_similarity_ceiling``;
    3. the source document is not among the candidate's top N documents.
    """
    config = config or PipelineConfig()
    candidates = [c.strip() for c in candidates if normalize_question(c)]
    if not candidates:
        return []

    embeddings = await index.embedder.embed([original.question, *candidates])
    accepted_keys = {normalize_question(original.question)}
    accepted_embeddings = [embeddings[0]]
    survivors: list[str] = []
    for candidate, embedding in zip(candidates, embeddings[1:]):
        key = normalize_question(candidate)
        if key in accepted_keys:
            continue
        if any(_rescaled(embedding, other) >= config.dedupe_similarity_ceiling for other in accepted_embeddings):
            continue
        if original.source_doc_id not in index.top_documents(embedding, config.top_n_verification):
            logger.debug(f"Variation {candidate!r} no longer retrieves {original.source_doc_id}")
            continue
        accepted_keys.add(key)
        accepted_embeddings.append(embedding)
        survivors.append(candidate)
    return survivors


async def generate_variations(
    pair: QAPair,
    provider: Llm,
    index: DocumentIndex,
    config: Optional[PipelineConfig] = None,
    templates: Optional[PromptTemplates] = None,
    skipped: Optional[list[SkipRecord]] = None,
    counts: Optional[StageCounts] = None,
) -> VariationGroup:
    """Paraphrase a verified pair and filter the paraphrases into a VariationGroup."""
    if not pair.verified:
        raise ValueError(f"pair {pair.qa_id} has not been verified")
    config = config or PipelineConfig()
    templates = templates or PromptTemplates.load(config.templates_dir, config.guidelines_path)
    requested = config.variations_per_question

    try:
        candidates = await LlmGateway.wrap(provider).ask_list(
            templates.system,
            templates.render_generate_variations(pair.question, pair.answer, requested),
            temperature=config.variation_temperature,
            script_key=f"generate_variations/{pair.qa_id}",
        )
    except RECOVERABLE as e:
        _record(skipped, "generate_variations", pair.qa_id, str(e))
        candidates = []
    candidates = candidates[:requested]
    survivors = await filter_variations(pair, candidates, index, config)

    if counts is not None:
        counts.variations_requested += requested
        counts.variations_generated += len(candidates)
        counts.variations_survived += len(survivors)
        counts.groups += 1
    return VariationGroup(group_id=pair.qa_id, original=pair, variations=survivors, answer=pair.answer)


class _DocumentOutcome(BaseModel):
    answers: int = 0
    pairs: list[QAPair] = Field(default_factory=list)
    skipped: list[SkipRecord] = Field(default_factory=list)


async def synthesize_corpus(
    corpus: Sequence[Document],
    provider: Llm,
    config: Optional[PipelineConfig] = None,
    templates: Optional[PromptTemplates] = None,
    manifest: Optional[RunManifest] = None,
) -> list[QAPair]:
    """Stage 1 over a whole corpus; pairs come back in corpus order."""
    config = config or PipelineConfig()
    templates = templates or PromptTemplates.load(config.templates_dir, config.guidelines_path)
    manifest = manifest if manifest is not None else RunManifest(seed=config.seed)
    check_document_budget(corpus, config.max_document_chars)
    llm = LlmGateway.wrap(provider)

    async def one(doc: Document) -> _DocumentOutcome:
        outcome = _DocumentOutcome()
        try:
            answers = await extract_answers(doc, llm, templates, config)
        except RECOVERABLE as e:
            _record(outcome.skipped, "extract_facts", doc.doc_id, str(e))
            return outcome
        outcome.answers = len(answers)
        if answers:
            outcome.pairs = await generate_questions(answers, doc, llm, templates, config, outcome.skipped)
        return outcome

    outcomes = await _bounded(corpus, config.concurrency, one)
    pairs: list[QAPair] = []
    counts = manifest.per_stage_counts
    counts.documents += len(corpus)
    for outcome in outcomes:
        counts.answers_extracted += outcome.answers
        counts.questions_generated += len(outcome.pairs)
        manifest.skipped.extend(outcome.skipped)
        pairs.extend(outcome.pairs)
    logger.info(f"Generated {len(pairs)} questions from {len(corpus)} documents")
    return pairs


async def vary_pairs(
    pairs: Sequence[QAPair],
    provider: Llm,
    index: DocumentIndex,
    config: Optional[PipelineConfig] = None,
    templates: Optional[PromptTemplates] = None,
    manifest: Optional[RunManifest] = None,
) -> list[VariationGroup]:
    """Stage 3 over many pairs; unverified pairs are skipped with a warning."""
    config = config or PipelineConfig()
    templates = templates or PromptTemplates.load(config.templates_dir, config.guidelines_path)
    manifest = manifest if manifest is not None else RunManifest(seed=config.seed)
    llm = LlmGateway.wrap(provider)

    verified = []
    for pair in pairs:
        if pair.verified:
            verified.append(pair)
        else:
            _record(manifest.skipped, "generate_variations", pair.qa_id, "pair is not verified")

    async def one(pair: QAPair) -> tuple[VariationGroup, StageCounts, list[SkipRecord]]:
        counts, skipped = StageCounts(), []
        group = await generate_variations(pair, llm, index, config, templates, skipped, counts)
        return group, counts, skipped

    groups: list[VariationGroup] = []
    totals = manifest.per_stage_counts
    for group, counts, skipped in await _bounded(verified, config.concurrency, one):
        totals.variations_requested += counts.variations_requested
        totals.variations_generated += counts.variations_generated
        totals.variations_survived += counts.variations_survived
        totals.groups += counts.groups
        manifest.skipped.extend(skipped)
        groups.append(group)
    logger.info(
        f"Built {len(groups)} variation groups with {totals.variations_survived} surviving variations"
    )
    return groups


async def run_pipeline(
    corpus: Sequence[Document],
    provider: Llm,
    embedder: Embedder,
    config: Optional[PipelineConfig] = None,
    templates: Optional[PromptTemplates] = None,
) -> PipelineResult:
    """Query generation, query verification and variation generation over a corpus."""
    if not corpus:
        raise ValueError("corpus is empty")
    config = config or PipelineConfig()
    templates = templates or PromptTemplates.load(config.templates_dir, config.guidelines_path)
    llm = LlmGateway.wrap(provider)
    manifest = RunManifest(seed=config.seed, config=config.model_dump(mode="json"))

    pairs = await synthesize_corpus(corpus, llm, config, templates, manifest)
    index = await DocumentIndex.build(corpus, embedder)
    kept, dropped = await verify_queries(pairs, corpus, embedder, config.top_n_verification, index=index)
    manifest.per_stage_counts.verification_kept += len(kept)
    manifest.per_stage_counts.verification_dropped += len(dropped)
    groups = await vary_pairs(kept, llm, index, config, templates, manifest)
    manifest.usage = llm.ledger.model_dump()
    return PipelineResult(groups=groups, kept=kept, dropped=dropped, manifest=manifest)


def sample_for_annotation(groups: Sequence[VariationGroup], size: int, seed: int) -> list[AnnotationRow]:
    """A seeded random sample of (question, variation) pairs for human correctness review."""
    rows = [
        AnnotationRow(group_id=g.group_id, question=g.original.question, variation=v, answer=g.answer)
        for g in groups
        for v in g.variations
    ]
    if size >= len(rows):
        return rows
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(rows), size=size, replace=False)
    return [rows[i] for i in sorted(int(p) for p in picks)]


def write_annotation_sample(rows: Sequence[AnnotationRow], path: Union[str, Path]) -> None:
    """Write ``annotation.jsonl`` with ``label`` left null for the annotator."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row.model_dump(), ensure_ascii=False) + "\n")
