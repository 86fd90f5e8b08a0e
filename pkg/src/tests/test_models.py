"""Dataset model invariants and question normalisation."""

import pytest
from pydantic import ValidationError

from semcache.models import Document, EvalRecord, Outcome, QAPair, VariationGroup, normalize_question
from tests.conftest import make_group


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("What is X?", "what is x"),
        ("  What   is\tX ?  ", "what is x"),
        ("HELLO!!", "hello"),
        ("Done.", "done"),
        ("e.g. this", "e.g. this"),
        ("???", ""),
    ],
)
def test_normalize_question(raw, expected):
    assert normalize_question(raw) == expected


@pytest.mark.parametrize("raw", ["What is X?", "HELLO!! ", "a  b . ?", "Why?!", "plain"])
def test_normalize_question_is_idempotent(raw):
    once = normalize_question(raw)
    assert normalize_question(once) == once


def test_document_rejects_blank_text():
    with pytest.raises(ValidationError):
        Document(doc_id="d1", text="   ")


def test_qa_pair_rejects_blank_question():
    with pytest.raises(ValidationError):
        QAPair(qa_id="q", question=" ", answer="a", source_doc_id="d")


def test_group_members_original_first():
    group = make_group("g1", "What is X?", "Tell me X", "X means what?")
    assert group.members == ["What is X?", "Tell me X", "X means what?"]
    assert group.size == 3


def test_group_rejects_variation_equal_to_original_after_normalisation():
    with pytest.raises(ValidationError, match="duplicate"):
        make_group("g1", "What is X?", "what is x")


def test_group_rejects_duplicate_variations():
    with pytest.raises(ValidationError, match="duplicate"):
        make_group("g1", "What is X?", "Define X.", "define   x")


def test_group_rejects_answer_mismatch():
    group = make_group("g1", "What is X?")
    with pytest.raises(ValidationError, match="answer"):
        VariationGroup(group_id="g1", original=group.original, variations=[], answer="something else")


def test_group_rejects_empty_variation():
    with pytest.raises(ValidationError, match="empty"):
        make_group("g1", "What is X?", "?!")


def test_eval_record_outcome_consistency():
    EvalRecord(query="q", group_id="g", outcome=Outcome.correct_hit, matched_group_id="g", sequence_index=1)
    EvalRecord(query="q", group_id="g", outcome=Outcome.incorrect_hit, matched_group_id="h", sequence_index=1)
    EvalRecord(query="q", group_id="g", outcome=Outcome.correct_miss, sequence_index=0)

    with pytest.raises(ValidationError):
        EvalRecord(query="q", group_id="g", outcome=Outcome.correct_hit, matched_group_id="h", sequence_index=0)
    with pytest.raises(ValidationError):
        EvalRecord(query="q", group_id="g", outcome=Outcome.incorrect_hit, matched_group_id="g", sequence_index=0)
    with pytest.raises(ValidationError):
        EvalRecord(query="q", group_id="g", outcome=Outcome.incorrect_miss, matched_group_id="g", sequence_index=0)
    with pytest.raises(ValidationError):
        EvalRecord(query="q", group_id="g", outcome=Outcome.correct_miss, sequence_index=-1)


def test_eval_record_markdown_line():
    record = EvalRecord(
        query="how long is the exam",
        group_id="g",
        outcome=Outcome.incorrect_hit,
        matched_group_id="h",
        sequence_index=3,
        matched_query="how long is the presentation",
    )
    assert record.as_markdown() == "- `incorrect_hit` #3: how long is the exam → cached: how long is the presentation"
