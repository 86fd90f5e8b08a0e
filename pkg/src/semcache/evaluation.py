"""Replay a variation-group dataset through a semantic cache and score the lookups.

Every query is classified against group membership:

- correct_hit: the cache served an entry from the query's own group
- incorrect_hit: the cache served an entry from another group
- correct_miss: nothing served, and no same-group entry was cached
- incorrect_miss: nothing served although a same-group entry was cached
"""

import csv
import io
import json
from typing import Callable, Literal, Optional, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, model_validator

from semcache.cache import SemanticCache
from semcache.errors import ProviderError, ReplayAbortedError, SemcacheError
from semcache.models import EvalRecord, Outcome, VariationGroup

OrderPolicy = Literal["as_given", "seeded_shuffle"]
InsertPolicy = Literal["miss", "always"]
ReportFormat = Literal["json", "csv", "markdown"]

UNDEFINED = "n/a"
TABLE_COLUMNS = [
    "Strategy",
    "Threshold",
    "Correct Hits",
    "Incorrect Hits",
    "Correct Misses",
    "Incorrect Misses",
    "Total",
    "Precision",
    "Recall",
    "F1",
]
CSV_COLUMNS = [
    "scorer_name",
    "threshold",
    "correct_hits",
    "incorrect_hits",
    "correct_misses",
    "incorrect_misses",
    "total",
    "precision",
    "recall",
    "f1",
]
SWEEP_COLUMNS = [
    "threshold",
    "correct_hits",
    "incorrect_hits",
    "correct_misses",
    "incorrect_misses",
    "precision",
    "recall",
    "f1",
]


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


def _f1(precision: Optional[float], recall: Optional[float]) -> Optional[float]:
    if precision is None or recall is None or precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def _fmt(value: Optional[float]) -> str:
    return UNDEFINED if value is None else f"{value:.4f}"


class PlannedQuery(BaseModel):
    query_text: str
    group_id: str
    answer: str
    is_original: bool = False


class ReplayPlan(BaseModel):
    queries: list[PlannedQuery] = Field(default_factory=list)
    order_policy: OrderPolicy = "seeded_shuffle"
    seed: int = Field(0, ge=0, lt=2**64)

    def __len__(self) -> int:
        return len(self.queries)


def build_plan(
    groups: Sequence[VariationGroup], order_policy: OrderPolicy = "seeded_shuffle", seed: int = 0
) -> ReplayPlan:
    """Flatten groups into one query stream.

    ``as_given`` keeps file order with each group contiguous, original first;
    ``seeded_shuffle`` permutes that stream with a numpy generator seeded by ``seed``.
    """
    queries = [
        PlannedQuery(query_text=member, group_id=g.group_id, answer=g.answer, is_original=i == 0)
        for g in groups
        for i, member in enumerate(g.members)
    ]
    if order_policy == "seeded_shuffle" and queries:
        order = np.random.default_rng(seed).permutation(len(queries))
        queries = [queries[int(i)] for i in order]
    return ReplayPlan(queries=queries, order_policy=order_policy, seed=seed)


class ConfusionReport(BaseModel):
    """Four-outcome counts for one replay, with the settings that produced them."""

    correct_hits: int = Field(0, ge=0)
    incorrect_hits: int = Field(0, ge=0)
    correct_misses: int = Field(0, ge=0)
    incorrect_misses: int = Field(0, ge=0)
    total: int = Field(0, ge=0)
    threshold: float = 0.0
    scorer_name: str = "cosine"
    order_policy: Optional[OrderPolicy] = None
    seed: Optional[int] = None
    insert_policy: Optional[InsertPolicy] = None
    embedder_fingerprint: Optional[str] = None
    config: dict = Field(default_factory=dict, description="Resolved run configuration")
    records: list[EvalRecord] = Field(
        default_factory=list, description="Per-query records; may be omitted from summary-only reports"
    )

    @model_validator(mode="after")
    def _counts_partition(self) -> "ConfusionReport":
        counted = self.correct_hits + self.incorrect_hits + self.correct_misses + self.incorrect_misses
        if counted != self.total:
            raise ValueError(f"outcome counts sum to {counted}, total is {self.total}")
        if self.records and len(self.records) != self.total:
            raise ValueError(f"{len(self.records)} records for a total of {self.total}")
        return self

    @classmethod
    def from_records(cls, records: Sequence[EvalRecord], **settings) -> "ConfusionReport":
        """Count outcomes over ``records``; ``settings`` fill the remaining report fields."""
        counts = {outcome: 0 for outcome in Outcome}
        for record in records:
            counts[record.outcome] += 1
        return cls(
            correct_hits=counts[Outcome.correct_hit],
            incorrect_hits=counts[Outcome.incorrect_hit],
            correct_misses=counts[Outcome.correct_miss],
            incorrect_misses=counts[Outcome.incorrect_miss],
            total=len(records),
            records=list(records),
            **settings,
        )

    @property
    def hits(self) -> int:
        return self.correct_hits + self.incorrect_hits

    @property
    def precision(self) -> Optional[float]:
        return _ratio(self.correct_hits, self.correct_hits + self.incorrect_hits)

    @property
    def recall(self) -> Optional[float]:
        return _ratio(self.correct_hits, self.correct_hits + self.incorrect_misses)

    @property
    def f1(self) -> Optional[float]:
        return _f1(self.precision, self.recall)


async def replay(plan: ReplayPlan, cache: SemanticCache, insert_policy: InsertPolicy = "miss") -> ConfusionReport:
    """Look every planned query up in ``cache`` in order and classify the result.

    With the ``miss`` policy a query is inserted only when its lookup misses;
    ``always`` inserts after every lookup. The cache must start empty.

    Args:
        plan: Queries in replay order.
        cache: An empty cache; its threshold and scorer decide hits.
        insert_policy: ``miss`` or ``always``.

    Returns:
        Counts plus one EvalRecord per query.

    Raises:
        ReplayAbortedError: If the scorer or embedder fails; carries the records so far.
    """
    if cache.size():
        raise SemcacheError(f"replay needs an empty cache, found {cache.size()} entries")

    records: list[EvalRecord] = []
    for index, query in enumerate(plan.queries):
        try:
            result = await cache.lookup(query.query_text)
        except ProviderError as e:
            raise ReplayAbortedError(f"lookup {index} failed: {e}", records) from e

        same_group = [entry for entry in cache.entries() if entry.group_id == query.group_id]
        matched_group_id = matched_query = expected_query = None
        if result.hit:
            matched_group_id = result.entry.group_id
            matched_query = result.entry.query_text
            outcome = Outcome.correct_hit if matched_group_id == query.group_id else Outcome.incorrect_hit
        elif same_group:
            outcome = Outcome.incorrect_miss
            expected_query = same_group[0].query_text
        else:
            outcome = Outcome.correct_miss

        records.append(
            EvalRecord(
                query=query.query_text,
                group_id=query.group_id,
                outcome=outcome,
                matched_group_id=matched_group_id,
                similarity_score=result.nearest_score,
                sequence_index=index,
                matched_query=matched_query,
                expected_query=expected_query,
            )
        )
        if insert_policy == "always" or not result.hit:
            await cache.insert(query.query_text, query.answer, query.group_id, embedding=result.query_embedding)

    report = ConfusionReport.from_records(
        records,
        threshold=cache.threshold,
        scorer_name=cache.scorer.name,
        order_policy=plan.order_policy,
        seed=plan.seed,
        insert_policy=insert_policy,
        embedder_fingerprint=cache.embedder.fingerprint,
    )
    logger.info(
        f"Replayed {report.total} queries at threshold {report.threshold}: "
        f"CH={report.correct_hits} IH={report.incorrect_hits} "
        f"CM={report.correct_misses} IM={report.incorrect_misses}"
    )
    return report


class CalibrationPoint(BaseModel):
    threshold: float = Field(..., ge=0.0, le=1.0)
    correct_hits: int
    incorrect_hits: int
    correct_misses: int
    incorrect_misses: int
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None

    @classmethod
    def from_report(cls, report: ConfusionReport) -> "CalibrationPoint":
        """Counts and metrics of one replay at one threshold."""
        return cls(
            threshold=report.threshold,
            correct_hits=report.correct_hits,
            incorrect_hits=report.incorrect_hits,
            correct_misses=report.correct_misses,
            incorrect_misses=report.incorrect_misses,
            precision=report.precision,
            recall=report.recall,
            f1=report.f1,
        )


class CalibrationCurve(BaseModel):
    points: list[CalibrationPoint]

    @model_validator(mode="after")
    def _increasing(self) -> "CalibrationCurve":
        thresholds = [p.threshold for p in self.points]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("calibration thresholds must be strictly increasing")
        return self

    def best_threshold(self) -> Optional[float]:
        """Threshold with the highest defined F1; the lowest such threshold on ties."""
        best: Optional[CalibrationPoint] = None
        for point in self.points:
            if point.f1 is not None and (best is None or point.f1 > best.f1):
                best = point
        return best.threshold if best else None

    def to_csv(self) -> str:
        """``sweep.csv`` text, one row per threshold; undefined metrics render as n/a."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for p in self.points:
            writer.writerow(
                [
                    f"{p.threshold:g}",
                    p.correct_hits,
                    p.incorrect_hits,
                    p.correct_misses,
                    p.incorrect_misses,
                    _fmt(p.precision),
                    _fmt(p.recall),
                    _fmt(p.f1),
                ]
            )
        return buffer.getvalue()


async def sweep(
    plan: ReplayPlan,
    cache_factory: Callable[[float], SemanticCache],
    thresholds: Sequence[float],
    insert_policy: InsertPolicy = "miss",
) -> CalibrationCurve:
    """Replay the same plan once per threshold, each time into a fresh cache.

    Args:
        plan: Query stream shared by every threshold.
        cache_factory: Builds an empty cache for a threshold; it carries the embedder and scorer.
        thresholds: Strictly increasing values in [0, 1].
        insert_policy: Passed to every replay.

    Returns:
        One calibration point per threshold, in order.
    """
    if not thresholds:
        raise ValueError("no thresholds to sweep")
    for threshold in thresholds:
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(f"threshold {threshold} outside [0, 1]")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")

    points = []
    for threshold in thresholds:
        report = await replay(plan, cache_factory(threshold), insert_policy)
        points.append(CalibrationPoint.from_report(report))
    return CalibrationCurve(points=points)


def parse_thresholds(text: str) -> list[float]:
    """``lo:hi:step`` (inclusive of ``hi``) or a comma-separated list."""
    if ":" in text:
        try:
            lo, hi, step = (float(part) for part in text.split(":"))
        except ValueError as e:
            raise ValueError(f"expected lo:hi:step, got {text!r}") from e
        if step <= 0:
            raise ValueError("step must be positive")
        if lo > hi:
            raise ValueError(f"lo {lo} is greater than hi {hi}")
        values = np.round(np.arange(lo, hi + step / 2, step), 6)
        thresholds = [float(v) for v in values if v <= hi + 1e-9]
    else:
        try:
            thresholds = [float(part) for part in text.split(",") if part.strip()]
        except ValueError as e:
            raise ValueError(f"expected comma-separated thresholds, got {text!r}") from e
    if not thresholds:
        raise ValueError(f"no thresholds in {text!r}")
    for threshold in thresholds:
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(f"threshold {threshold} outside [0, 1]")
    return thresholds


def _row(report: ConfusionReport) -> list:
    return [
        report.scorer_name,
        f"{report.threshold:g}",
        report.correct_hits,
        report.incorrect_hits,
        report.correct_misses,
        report.incorrect_misses,
        report.total,
        _fmt(report.precision),
        _fmt(report.recall),
        _fmt(report.f1),
    ]


def summarize_many(reports: Sequence[ConfusionReport], format: ReportFormat = "markdown") -> str:
    """One comparison table with a row per report."""
    if format == "json":
        return json.dumps([r.model_dump(mode="json") for r in reports], indent=2) + "\n"
    if format == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(_row(r) for r in reports)
        return buffer.getvalue()
    if format == "markdown":
        lines = [
            "| " + " | ".join(TABLE_COLUMNS) + " |",
            "|" + "|".join("---" for _ in TABLE_COLUMNS) + "|",
        ]
        lines += ["| " + " | ".join(str(cell) for cell in _row(r)) + " |" for r in reports]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {format!r}")


def summarize(report: ConfusionReport, format: ReportFormat = "markdown") -> str:
    """Render one report; ``json`` is the full report and loads back unchanged."""
    if format == "json":
        return report.model_dump_json(indent=2) + "\n"
    return summarize_many([report], format)


def exemplars(report: ConfusionReport, outcome: Outcome, limit: int = 5) -> list[tuple[str, str]]:
    """(query, cached key) pairs illustrating an outcome.

    The key is the served entry for hits and the earliest cached same-group
    query for incorrect misses. Correct misses have no key to show.
    """
    if outcome is Outcome.correct_miss:
        raise ValueError("correct misses have no cached counterpart")
    pairs = []
    for record in report.records:
        if len(pairs) >= limit:
            break
        if record.outcome is not outcome:
            continue
        key = record.matched_query if outcome.is_hit else record.expected_query
        if key is not None:
            pairs.append((record.query, key))
    return pairs
