"""End-to-end command runs on the shipped fixtures."""

import csv
import io
import json
import sys

import pytest
from click.testing import CliRunner
from loguru import logger

from semcache.dataset import read_dataset, read_qa, write_corpus, write_qa
from semcache.evaluation import ConfusionReport
from semcache.main import cli
from semcache.models import Document, QAPair
from tests.conftest import distinct_tokens


@pytest.fixture
def runner():
    yield CliRunner()
    # commands point loguru at the runner's captured stderr
    logger.remove()
    logger.add(sys.stderr)


def invoke(runner, *args, code=0):
    result = runner.invoke(cli, [str(a) for a in args])
    assert result.exit_code == code, result.output
    return result


def build_dataset(runner, fixtures_dir, root):
    """generate -> verify -> vary on the fixture corpus; returns the groups file."""
    corpus, script = fixtures_dir / "corpus.jsonl", fixtures_dir / "script.yaml"
    invoke(runner, "generate", corpus, "--out", root / "gen", "--script", script)
    invoke(runner, "verify", root / "gen" / "qa.jsonl", corpus, "--out", root / "ver")
    invoke(
        runner,
        "vary",
        root / "ver" / "qa.jsonl",
        corpus,
        "--out",
        root / "var",
        "--script",
        script,
        "--per-question",
        3,
        "--annotation-sample",
        4,
    )
    return root / "var" / "groups.jsonl"


def test_full_run_on_fixtures(runner, fixtures_dir, tmp_path):
    groups_path = build_dataset(runner, fixtures_dir, tmp_path)

    generated = read_qa(tmp_path / "gen" / "qa.jsonl")
    assert len(generated) == 10
    kept = read_qa(tmp_path / "ver" / "qa.jsonl")
    dropped = read_qa(tmp_path / "ver" / "dropped.jsonl")
    assert len(kept) + len(dropped) == len(generated)
    assert all(p.verified for p in kept)

    groups = read_dataset(groups_path)
    assert [g.group_id for g in groups] == [p.qa_id for p in kept]
    assert len((tmp_path / "var" / "annotation.jsonl").read_text().splitlines()) <= 4

    manifest = json.loads((tmp_path / "var" / "run_manifest.json").read_text())
    assert manifest["per_stage_counts"]["groups"] == len(groups)
    assert manifest["config"]["pipeline"]["variations_per_question"] == 3

    result = invoke(runner, "evaluate", groups_path, "--out", tmp_path / "eval", "--exemplars", 2)
    report = ConfusionReport.model_validate_json((tmp_path / "eval" / "report.json").read_text())
    assert report.total == sum(g.size for g in groups) > 0
    assert report.config["cache"]["threshold"] == 0.9
    assert len((tmp_path / "eval" / "eval.jsonl").read_text().splitlines()) == report.total
    assert result.stdout.startswith("| Strategy |")


def test_generate_writes_manifest(runner, fixtures_dir, tmp_path):
    result = invoke(
        runner, "generate", fixtures_dir / "corpus.jsonl", "--out", tmp_path, "--script", fixtures_dir / "script.yaml"
    )
    assert "5 documents" in result.stdout
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["per_stage_counts"]["questions_generated"] == 10
    assert manifest["usage"]["requests_sent"] == 15
    assert manifest["skipped"] == []


def test_pipeline_output_is_byte_stable(runner, fixtures_dir, tmp_path):
    outputs = [build_dataset(runner, fixtures_dir, tmp_path / f"run{i}").read_bytes() for i in range(3)]
    assert outputs[0] == outputs[1] == outputs[2]


def test_off_topic_question_lands_in_dropped(runner, embedder, tmp_path):
    tokens = distinct_tokens(embedder, 50, prefix="t")
    docs = [Document(doc_id=f"d{i}", text=" ".join(tokens[i * 5 : (i + 1) * 5])) for i in range(10)]
    pairs = [
        QAPair(qa_id=f"d{i}-q0", question=" ".join(tokens[i * 5 : i * 5 + 3]), answer="a", source_doc_id=f"d{i}")
        for i in range(10)
    ]
    # built from d1's tokens, attributed to d0
    pairs.append(QAPair(qa_id="d0-q1", question=" ".join(tokens[5:9]), answer="a", source_doc_id="d0"))
    write_corpus(docs, tmp_path / "corpus.jsonl")
    write_qa(pairs, tmp_path / "qa.jsonl")

    invoke(runner, "verify", tmp_path / "qa.jsonl", tmp_path / "corpus.jsonl", "--out", tmp_path / "out", "--top-n", 1)
    assert [p.qa_id for p in read_qa(tmp_path / "out" / "dropped.jsonl")] == ["d0-q1"]
    assert len(read_qa(tmp_path / "out" / "qa.jsonl")) == 10


def test_single_document_corpus_keeps_everything(runner, tmp_path):
    write_corpus([Document(doc_id="only", text="the only document")], tmp_path / "corpus.jsonl")
    write_qa(
        [QAPair(qa_id="only-q0", question="something unrelated", answer="a", source_doc_id="only")],
        tmp_path / "qa.jsonl",
    )
    invoke(runner, "verify", tmp_path / "qa.jsonl", tmp_path / "corpus.jsonl", "--out", tmp_path / "out")
    assert (tmp_path / "out" / "dropped.jsonl").read_text() == ""


def test_evaluate_adversarial_fixture(runner, fixtures_dir, tmp_path):
    result = invoke(
        runner,
        "evaluate",
        fixtures_dir / "adversarial_groups.jsonl",
        "--out",
        tmp_path,
        "--order",
        "as_given",
        "--threshold",
        0.9,
        "--exemplars",
        1,
    )
    report = json.loads((tmp_path / "report.json").read_text())
    assert [report[k] for k in ("correct_hits", "incorrect_hits", "correct_misses", "incorrect_misses")] == [
        1,
        1,
        3,
        1,
    ]
    assert "incorrect_hit" in result.stdout
    assert "| cosine | 0.9 | 1 | 1 | 3 | 1 | 6 | 0.5000 | 0.5000 | 0.5000 |" in result.stdout


def test_evaluate_with_scripted_scorer(runner, fixtures_dir, tmp_path):
    invoke(
        runner,
        "evaluate",
        fixtures_dir / "adversarial_groups.jsonl",
        "--out",
        tmp_path,
        "--order",
        "as_given",
        "--scorer",
        "scripted",
        "--scorer-script",
        fixtures_dir / "scorer_script.yaml",
    )
    report = json.loads((tmp_path / "report.json").read_text())
    assert (report["correct_hits"], report["incorrect_hits"]) == (2, 0)
    assert report["scorer_name"] == "scripted"


def test_evaluate_empty_dataset(runner, tmp_path):
    (tmp_path / "groups.jsonl").write_text("")
    result = invoke(runner, "evaluate", tmp_path / "groups.jsonl", "--out", tmp_path / "out")
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["total"] == 0
    assert "| 0 | 0 | 0 | 0 | 0 | n/a | n/a | n/a |" in result.stdout


def test_calibrate_single_threshold_matches_evaluate(runner, fixtures_dir, tmp_path):
    groups = fixtures_dir / "adversarial_groups.jsonl"
    invoke(runner, "evaluate", groups, "--out", tmp_path / "eval", "--order", "as_given", "--threshold", 0.9)
    result = invoke(runner, "calibrate", groups, "--out", tmp_path / "cal", "--order", "as_given", "--thresholds", "0.9")
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    row = next(csv.DictReader(io.StringIO((tmp_path / "cal" / "sweep.csv").read_text())))
    for key in ("correct_hits", "incorrect_hits", "correct_misses", "incorrect_misses"):
        assert int(row[key]) == report[key]
    assert "best threshold: 0.9" in result.stdout


def test_calibrate_sweep_grid(runner, fixtures_dir, tmp_path):
    invoke(
        runner,
        "calibrate",
        fixtures_dir / "adversarial_groups.jsonl",
        "--out",
        tmp_path,
        "--thresholds",
        "0.5:1.0:0.1",
        "--insert-policy",
        "always",
    )
    rows = list(csv.DictReader(io.StringIO((tmp_path / "sweep.csv").read_text())))
    assert [r["threshold"] for r in rows] == ["0.5", "0.6", "0.7", "0.8", "0.9", "1"]
    hits = [int(r["correct_hits"]) + int(r["incorrect_hits"]) for r in rows]
    assert hits == sorted(hits, reverse=True)


def test_report_renders_many(runner, fixtures_dir, tmp_path):
    groups = fixtures_dir / "adversarial_groups.jsonl"
    for threshold in (0.8, 0.95):
        invoke(runner, "evaluate", groups, "--out", tmp_path / str(threshold), "--threshold", threshold)
    paths = [tmp_path / "0.8" / "report.json", tmp_path / "0.95" / "report.json"]

    markdown = invoke(runner, "report", *paths).stdout.splitlines()
    assert len(markdown) == 4
    assert markdown[2].startswith("| cosine | 0.8 |")

    invoke(runner, "report", *paths, "--format", "csv", "--out", tmp_path / "table.csv")
    rows = list(csv.DictReader(io.StringIO((tmp_path / "table.csv").read_text())))
    assert [r["threshold"] for r in rows] == ["0.8", "0.95"]


def test_oversize_document_names_the_document(runner, fixtures_dir, tmp_path):
    result = invoke(
        runner,
        "generate",
        fixtures_dir / "corpus.jsonl",
        "--out",
        tmp_path,
        "--script",
        fixtures_dir / "script.yaml",
        "--set",
        "pipeline.max_document_chars=100",
        code=2,
    )
    assert "assignment-one" in result.output
    assert not (tmp_path / "qa.jsonl").exists()


@pytest.mark.parametrize(
    "args",
    [
        ["generate", "missing.jsonl", "--out", "out"],
        ["verify", "{qa}", "{corpus}", "--out", "out", "--top-n", "0"],
        ["vary", "{qa}", "{corpus}", "--out", "out", "--per-question", "0"],
        ["evaluate", "{groups}", "--out", "out", "--threshold", "1.5"],
        ["calibrate", "{groups}", "--out", "out", "--thresholds", "0.9:0.5:0.1"],
        ["report", "{groups}", "--format", "html"],
        ["evaluate", "{groups}", "--out", "out", "--set", "cache.nope=1"],
    ],
)
def test_usage_errors_exit_2(runner, fixtures_dir, tmp_path, args):
    qa = tmp_path / "qa.jsonl"
    write_qa([QAPair(qa_id="x-q0", question="q", answer="a", source_doc_id="assignment-one")], qa)
    paths = {
        "qa": str(qa),
        "corpus": str(fixtures_dir / "corpus.jsonl"),
        "groups": str(fixtures_dir / "adversarial_groups.jsonl"),
    }
    args = [a.format(**paths) for a in args]
    args = [str(tmp_path / a) if a == "out" else a for a in args]
    result = runner.invoke(cli, args)
    assert result.exit_code == 2, result.output


def test_vary_rejects_unknown_source_document(runner, fixtures_dir, tmp_path):
    write_qa(
        [QAPair(qa_id="x-q0", question="q", answer="a", source_doc_id="nowhere", verified=True)],
        tmp_path / "qa.jsonl",
    )
    result = invoke(
        runner,
        "vary",
        tmp_path / "qa.jsonl",
        fixtures_dir / "corpus.jsonl",
        "--out",
        tmp_path / "out",
        "--script",
        fixtures_dir / "script.yaml",
        code=2,
    )
    assert "nowhere" in result.output
