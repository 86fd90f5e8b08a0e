"""Pydantic models for corpus documents, generated questions and evaluation records."""

import re
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

_TRAILING = re.compile(r"[\s?.!]+$")


def normalize_question(question: str) -> str:
    """Canonical form used for byte-identity dedupe of questions.

    Lowercases, collapses whitespace runs to one space, trims, and strips the
    trailing run of terminal punctuation (``?``, ``.``, ``!``).
    """
    collapsed = " ".join(question.lower().split())
    return _TRAILING.sub("", collapsed)


class CreatedBy(str, Enum):
    llm = "llm"
    human = "human"
    fixture = "fixture"


class Outcome(str, Enum):
    correct_hit = "correct_hit"
    incorrect_hit = "incorrect_hit"
    correct_miss = "correct_miss"
    incorrect_miss = "incorrect_miss"

    @property
    def is_hit(self) -> bool:
        """True for both hit outcomes."""
        return self in (Outcome.correct_hit, Outcome.incorrect_hit)


class Document(BaseModel):
    """A corpus unit that questions are generated from."""

    model_config = ConfigDict(frozen=True)

    doc_id: str = Field(..., min_length=1, description="Identifier, unique within a corpus file")
    text: str = Field(..., description="Full document text")
    title: Optional[str] = Field(None, description="Optional human-readable title")
    domain_terms: Optional[list[str]] = Field(
        None, description="Optional domain vocabulary to steer question generation"
    )

    @field_validator("text")
    @classmethod
    def _text_not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("document text is empty")
        return value


class QAPair(BaseModel):
    """A generated question bound to the answer it was generated from."""

    model_config = ConfigDict(frozen=True)

    qa_id: str = Field(..., min_length=1)
    question: str = Field(..., description="The question posed to the cache")
    answer: str = Field(..., description="Extracted fact that answers the question")
    source_doc_id: str = Field(..., min_length=1, description="Document the answer was extracted from")
    verified: bool = Field(False, description="True once retrieval verification kept the pair")
    created_by: CreatedBy = CreatedBy.llm

    @field_validator("question", "answer")
    @classmethod
    def _not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("must not be empty")
        return value


class VariationGroup(BaseModel):
    """An original question and its paraphrases; membership is the similarity ground truth."""

    model_config = ConfigDict(frozen=True)

    group_id: str = Field(..., min_length=1)
    original: QAPair
    variations: list[str] = Field(default_factory=list, description="Paraphrased questions, in generation order")
    answer: str = Field(..., description="Answer shared by every member of the group")

    @model_validator(mode="after")
    def _members_distinct(self) -> "VariationGroup":
        if self.answer != self.original.answer:
            raise ValueError(f"group {self.group_id}: answer differs from the original pair's answer")
        seen: set[str] = set()
        for member in self.members:
            key = normalize_question(member)
            if not key:
                raise ValueError(f"group {self.group_id}: empty question")
            if key in seen:
                raise ValueError(f"group {self.group_id}: duplicate question {member!r}")
            seen.add(key)
        return self

    @property
    def members(self) -> list[str]:
        """Original question first, then the variations."""
        return [self.original.question, *self.variations]

    @property
    def size(self) -> int:
        return 1 + len(self.variations)


class EvalRecord(BaseModel):
    """Classification of one replayed query."""

    model_config = ConfigDict(frozen=True)

    query: str
    group_id: str
    outcome: Outcome
    matched_group_id: Optional[str] = None
    similarity_score: Optional[float] = Field(None, ge=-1.0, le=1.0)
    sequence_index: int = Field(..., ge=0)
    matched_query: Optional[str] = Field(None, description="Cached query served on a hit")
    expected_query: Optional[str] = Field(
        None, description="Earliest cached same-group query, on an incorrect miss"
    )

    @model_validator(mode="after")
    def _outcome_consistent(self) -> "EvalRecord":
        if self.outcome is Outcome.correct_hit and self.matched_group_id != self.group_id:
            raise ValueError("correct_hit requires matched_group_id equal to group_id")
        if self.outcome is Outcome.incorrect_hit and (
            self.matched_group_id is None or self.matched_group_id == self.group_id
        ):
            raise ValueError("incorrect_hit requires a matched_group_id different from group_id")
        if not self.outcome.is_hit and self.matched_group_id is not None:
            raise ValueError(f"{self.outcome.value} must not carry matched_group_id")
        return self

    def as_markdown(self) -> str:
        """Format the record as a one-line markdown bullet."""
        line = f"- `{self.outcome.value}` #{self.sequence_index}: {self.query}"
        if self.matched_query:
            line += f" → cached: {self.matched_query}"
        elif self.expected_query:
            line += f" → expected: {self.expected_query}"
        return line
