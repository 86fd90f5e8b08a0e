"""JSONL artifacts: corpus, QA pairs, variation groups and eval records."""

import json

import pytest

from semcache.dataset import (
    read_corpus,
    read_dataset,
    read_eval_records,
    read_qa,
    validate_groups,
    write_corpus,
    write_dataset,
    write_eval_records,
    write_qa,
)
from semcache.errors import DatasetError
from semcache.models import Document, EvalRecord, Outcome, QAPair
from tests.conftest import make_group


def test_read_shipped_corpus(fixtures_dir):
    docs = read_corpus(fixtures_dir / "corpus.jsonl")
    assert [d.doc_id for d in docs] == [
        "assignment-one",
        "assignment-two",
        "assignment-three",
        "late-policy",
        "final-exam",
    ]
    assert docs[0].title == "Assignment 1: Research proposal"
    assert docs[2].domain_terms is None


def test_read_corpus_skips_blank_lines(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"doc_id": "a", "text": "alpha"}\n\n{"doc_id": "b", "text": "beta"}\n')
    assert [d.doc_id for d in read_corpus(path)] == ["a", "b"]


def test_read_corpus_reports_malformed_line_number(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"doc_id": "a", "text": "alpha"}\n{"doc_id": "b", "text": \n')
    with pytest.raises(DatasetError) as excinfo:
        read_corpus(path)
    assert excinfo.value.line_number == 2
    assert f"{path}:2:" in str(excinfo.value)


def test_read_corpus_rejects_duplicate_doc_ids(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"doc_id": "a", "text": "alpha"}\n{"doc_id": "a", "text": "again"}\n')
    with pytest.raises(DatasetError, match="duplicate doc_id 'a'"):
        read_corpus(path)


def test_read_corpus_rejects_empty_text(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"doc_id": "a", "text": ""}\n')
    with pytest.raises(DatasetError) as excinfo:
        read_corpus(path)
    assert excinfo.value.line_number == 1


def test_corpus_written_optional_fields_are_absent(tmp_path):
    path = tmp_path / "corpus.jsonl"
    write_corpus([Document(doc_id="a", text="alpha")], path)
    assert path.read_text() == '{"doc_id":"a","text":"alpha"}\n'
    assert read_corpus(path) == [Document(doc_id="a", text="alpha")]


def test_qa_pairs_survive_a_file(tmp_path):
    pairs = [
        QAPair(qa_id="d-q0", question="What?", answer="That.", source_doc_id="d", verified=True),
        QAPair(qa_id="d-q1", question="Why?", answer="Because.", source_doc_id="d"),
    ]
    write_qa(pairs, tmp_path / "qa.jsonl")
    assert read_qa(tmp_path / "qa.jsonl") == pairs


def test_write_dataset_is_byte_stable(tmp_path, fixtures_dir):
    groups = read_dataset(fixtures_dir / "adversarial_groups.jsonl")
    write_dataset(groups, tmp_path / "a.jsonl")
    write_dataset(read_dataset(tmp_path / "a.jsonl"), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_read_dataset_rejects_duplicate_group_ids(tmp_path):
    line = make_group("g1", "What is X?").model_dump_json()
    path = tmp_path / "groups.jsonl"
    path.write_text(f"{line}\n{line}\n")
    with pytest.raises(DatasetError, match="g1"):
        read_dataset(path)


def test_read_dataset_rejects_invalid_group(tmp_path):
    group = make_group("g1", "What is X?").model_dump()
    group["variations"] = ["what is x"]
    path = tmp_path / "groups.jsonl"
    path.write_text(json.dumps(group) + "\n")
    with pytest.raises(DatasetError) as excinfo:
        read_dataset(path)
    assert excinfo.value.line_number == 1


def test_validate_groups_warns_on_cross_group_duplicates():
    groups = [make_group("g1", "What is X?"), make_group("g2", "Tell me Y", "what is x")]
    warnings = validate_groups(groups)
    assert len(warnings) == 1
    assert "g1, g2" in warnings[0]


def test_validate_groups_rejects_duplicate_ids():
    with pytest.raises(DatasetError, match="duplicate group_id"):
        validate_groups([make_group("g1", "A?"), make_group("g1", "B?")])


def test_write_dataset_writes_nothing_when_invalid(tmp_path):
    path = tmp_path / "groups.jsonl"
    with pytest.raises(DatasetError):
        write_dataset([make_group("g1", "A?"), make_group("g1", "B?")], path)
    assert not path.exists()


def test_eval_records_survive_a_file(tmp_path):
    records = [
        EvalRecord(query="a", group_id="g", outcome=Outcome.correct_miss, sequence_index=0),
        EvalRecord(
            query="b",
            group_id="g",
            outcome=Outcome.correct_hit,
            matched_group_id="g",
            similarity_score=0.97,
            sequence_index=1,
            matched_query="a",
        ),
    ]
    write_eval_records(records, tmp_path / "eval.jsonl")
    assert read_eval_records(tmp_path / "eval.jsonl") == records
