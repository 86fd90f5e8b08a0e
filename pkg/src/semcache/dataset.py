"""JSONL readers and writers for corpora, QA pairs, variation groups and eval records.

Every artifact is one compact JSON object per line, written from the pydantic
model with ``exclude_none`` so optional fields are absent rather than null.
"""

import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, TypeVar, Union

from loguru import logger
from pydantic import BaseModel, ValidationError

from semcache.errors import DatasetError
from semcache.models import Document, EvalRecord, QAPair, VariationGroup, normalize_question

PathLike = Union[str, Path]
M = TypeVar("M", bound=BaseModel)


def _read_jsonl(path: PathLike, model: type[M]) -> list[M]:
    items: list[M] = []
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"malformed JSON: {e.msg}", str(path), line_number) from e
            if not isinstance(payload, dict):
                raise DatasetError("expected a JSON object", str(path), line_number)
            try:
                items.append(model.model_validate(payload))
            except ValidationError as e:
                raise DatasetError(
                    f"invalid {model.__name__}: {e.errors()[0]['msg']}", str(path), line_number
                ) from e
    return items


def _write_jsonl(items: Iterable[BaseModel], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            fh.write(item.model_dump_json(exclude_none=True))
            fh.write("\n")


def _check_unique(ids: Iterable[str], kind: str, path: PathLike) -> None:
    seen: set[str] = set()
    for item_id in ids:
        if item_id in seen:
            raise DatasetError(f"duplicate {kind} {item_id!r}", str(path))
        seen.add(item_id)


def read_corpus(path: PathLike) -> list[Document]:
    """Read a corpus file, preserving order."""
    docs = _read_jsonl(path, Document)
    _check_unique((d.doc_id for d in docs), "doc_id", path)
    return docs


def write_corpus(docs: Iterable[Document], path: PathLike) -> None:
    """Write documents one per line; duplicate ``doc_id`` values raise DatasetError."""
    docs = list(docs)
    _check_unique((d.doc_id for d in docs), "doc_id", path)
    _write_jsonl(docs, path)


def read_qa(path: PathLike) -> list[QAPair]:
    """Read QA pairs from ``qa.jsonl`` or ``dropped.jsonl``.

    Args:
        path: JSONL file with one QAPair object per line; blank lines are skipped.

    Returns:
        Pairs in file order.

    Raises:
        DatasetError: On malformed JSON, an invalid pair (with its line number) or a repeated ``qa_id``.
    """
    pairs = _read_jsonl(path, QAPair)
    _check_unique((p.qa_id for p in pairs), "qa_id", path)
    return pairs


def write_qa(pairs: Iterable[QAPair], path: PathLike) -> None:
    """Write QA pairs in the given order, rejecting duplicate ``qa_id`` values."""
    pairs = list(pairs)
    _check_unique((p.qa_id for p in pairs), "qa_id", path)
    _write_jsonl(pairs, path)


def validate_groups(groups: Iterable[VariationGroup]) -> list[str]:
    """Re-validate groups and report cross-group duplicate questions.

    Raises DatasetError on any invariant violation. Cross-group duplicates are
    legal (they are hard negatives by construction) and come back as warnings.
    """
    owners: dict[str, list[str]] = defaultdict(list)
    seen_ids: set[str] = set()
    for group in groups:
        try:
            VariationGroup.model_validate(group.model_dump())
        except ValidationError as e:
            raise DatasetError(f"invalid group {group.group_id!r}: {e.errors()[0]['msg']}") from e
        if group.group_id in seen_ids:
            raise DatasetError(f"duplicate group_id {group.group_id!r}")
        seen_ids.add(group.group_id)
        for member in group.members:
            owners[normalize_question(member)].append(group.group_id)

    warnings = [
        f"question {question!r} appears in groups {', '.join(group_ids)}"
        for question, group_ids in owners.items()
        if len(group_ids) > 1
    ]
    for warning in warnings:
        logger.warning(f"Cross-group duplicate: {warning}")
    return warnings


def read_dataset(path: PathLike) -> list[VariationGroup]:
    """Read a variation-group dataset written by ``write_dataset``.

    Args:
        path: ``groups.jsonl``.

    Returns:
        Groups in file order; each has already passed the membership validators.
    """
    groups = _read_jsonl(path, VariationGroup)
    _check_unique((g.group_id for g in groups), "group_id", path)
    return groups


def write_dataset(groups: Iterable[VariationGroup], path: PathLike) -> None:
    """Validate then write groups; nothing is written if any group is invalid."""
    groups = list(groups)
    validate_groups(groups)
    _write_jsonl(groups, path)


def read_eval_records(path: PathLike) -> list[EvalRecord]:
    """Per-query replay records, e.g. ``eval.jsonl`` or ``eval.partial.jsonl``."""
    return _read_jsonl(path, EvalRecord)


def write_eval_records(records: Iterable[EvalRecord], path: PathLike) -> None:
    """Write replay records in sequence order."""
    _write_jsonl(records, path)
