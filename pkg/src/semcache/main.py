"""semcache command line: build paraphrase datasets and score semantic caches against them.

    semcache generate CORPUS --out DIR      # facts -> questions      (qa.jsonl)
    semcache verify QA CORPUS --out DIR     # retrieval check         (qa.jsonl, dropped.jsonl)
    semcache vary QA CORPUS --out DIR       # paraphrase + filter     (groups.jsonl)
    semcache evaluate GROUPS --out DIR      # replay through a cache  (report.json, eval.jsonl)
    semcache calibrate GROUPS --out DIR     # threshold sweep         (sweep.csv)
    semcache report REPORT...               # render reports as a table
"""

import asyncio
import functools
from pathlib import Path
from typing import Any, Optional

import click
from loguru import logger

from semcache import __version__
from semcache.config import (
    RunConfig,
    build_cache,
    build_embedder,
    build_llm,
    build_scorer,
    configure_logging,
    load_config,
)
from semcache.dataset import (
    read_corpus,
    read_dataset,
    read_qa,
    validate_groups,
    write_dataset,
    write_eval_records,
    write_qa,
)
from semcache.errors import DatasetError, ReplayAbortedError, SemcacheError
from semcache.evaluation import (
    ConfusionReport,
    build_plan,
    exemplars,
    parse_thresholds,
    replay,
    summarize,
    summarize_many,
    sweep,
)
from semcache.models import Outcome
from semcache.pipeline import (
    DocumentIndex,
    RunManifest,
    sample_for_annotation,
    synthesize_corpus,
    vary_pairs,
    verify_queries,
    write_annotation_sample,
)
from semcache.templates import PromptTemplates

MANIFEST = "run_manifest.json"


class CommandError(click.ClickException):
    """A SemcacheError surfaced to the operator; exits 2 like a usage error."""

    exit_code = 2

    def show(self, file=None) -> None:
        click.echo(f"{click.style('Error:', fg='red', bold=True)} {self.format_message()}", err=True)


def run_async(fn):
    """Run an async command body, mapping semcache failures to exit status 2."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return asyncio.run(fn(*args, **kwargs))
        except SemcacheError as e:
            raise CommandError(str(e)) from e

    return wrapper


def config_options(fn):
    """--config / --set / --verbose, shared by every command that resolves a RunConfig."""
    fn = click.option("--verbose", "-v", is_flag=True, default=False, help="Debug logging on stderr")(fn)
    fn = click.option(
        "--set",
        "dotlist",
        multiple=True,
        metavar="KEY=VALUE",
        help="Override any configuration key, e.g. --set pipeline.concurrency=8",
    )(fn)
    fn = click.option(
        "--config",
        "config_file",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="YAML file overriding the packaged defaults",
    )(fn)
    return fn


def out_option(fn):
    """--out DIR, required by every command that writes artifacts."""
    return click.option(
        "--out",
        "out_dir",
        required=True,
        type=click.Path(file_okay=False, path_type=Path),
        help="Output directory",
    )(fn)


def embedder_option(fn):
    """--embedder local|remote, selecting the embedding config group."""
    return click.option(
        "--embedder", type=click.Choice(["local", "remote"]), default=None, help="Embedding provider"
    )(fn)


def provider_options(fn):
    """--provider and --script for the commands that call the LLM."""
    fn = click.option(
        "--script",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="Response table for the scripted provider",
    )(fn)
    fn = click.option(
        "--provider", type=click.Choice(["scripted", "openai"]), default=None, help="LLM provider"
    )(fn)
    return fn


def resolve(
    config_file: Optional[Path],
    dotlist: tuple[str, ...],
    verbose: bool,
    groups: Optional[dict[str, Optional[str]]] = None,
    **overrides: Any,
) -> RunConfig:
    """Configure logging, then resolve the run configuration for one command.

    Flag values arrive as ``section__key`` keyword arguments; None means the
    flag was not given. Configuration errors exit 2 through CommandError.
    """
    configure_logging(verbose)
    try:
        config = load_config(
            config_file,
            groups={k: v for k, v in (groups or {}).items() if v},
            overrides={key.replace("__", "."): value for key, value in overrides.items()},
            dotlist=dotlist,
        )
    except SemcacheError as e:
        raise CommandError(str(e)) from e
    if config.verbose and not verbose:
        configure_logging(True)
    return config


def _load_manifest(out_dir: Path, config: RunConfig) -> RunManifest:
    manifest = RunManifest.load_or_new(out_dir / MANIFEST, seed=config.pipeline.seed)
    manifest.config = config.echo()
    return manifest


@click.group()
@click.version_option(__version__, prog_name="semcache")
def cli():
    """Paraphrase datasets for semantic caches, and the harness that scores caches on them."""


@cli.command()
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@out_option
@provider_options
@click.option("--domain-term", "domain_terms", multiple=True, help="Domain vocabulary hint (repeatable)")
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.option("--templates", type=click.Path(exists=True, file_okay=False), default=None)
@config_options
@run_async
async def generate(corpus_path, out_dir, provider, script, domain_terms, seed, templates, config_file, dotlist, verbose):
    """Extract facts from every document and write one question per fact to qa.jsonl."""
    config = resolve(
        config_file,
        dotlist,
        verbose,
        groups={"llm": provider},
        llm__script_path=script,
        pipeline__domain_terms=domain_terms or None,
        pipeline__seed=seed,
        pipeline__templates_dir=templates,
    )
    corpus = read_corpus(corpus_path)
    if not corpus:
        raise DatasetError("corpus is empty", str(corpus_path))
    prompts = PromptTemplates.load(config.pipeline.templates_dir, config.pipeline.guidelines_path)
    llm = build_llm(config)
    manifest = RunManifest(seed=config.pipeline.seed, config=config.echo())
    try:
        pairs = await synthesize_corpus(corpus, llm, config.pipeline, prompts, manifest)
    finally:
        await llm.provider.aclose()
    manifest.usage = llm.ledger.model_dump()

    write_qa(pairs, out_dir / "qa.jsonl")
    manifest.save(out_dir / MANIFEST)
    counts = manifest.per_stage_counts
    click.echo(
        f"{click.style('generate', fg='green', bold=True)}: {counts.documents} documents, "
        f"{counts.answers_extracted} facts, {counts.questions_generated} questions, "
        f"{len(manifest.skipped)} skipped -> {out_dir / 'qa.jsonl'}"
    )


@cli.command()
@click.argument("qa_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@out_option
@click.option("--top-n", type=click.IntRange(min=1), default=None, help="Documents retrieved per question")
@embedder_option
@config_options
@run_async
async def verify(qa_path, corpus_path, out_dir, top_n, embedder, config_file, dotlist, verbose):
    """Keep questions that retrieve their source document in the top N."""
    config = resolve(
        config_file, dotlist, verbose, groups={"embedding": embedder}, pipeline__top_n_verification=top_n
    )
    pairs = read_qa(qa_path)
    corpus = read_corpus(corpus_path)
    encoder = build_embedder(config)
    try:
        kept, dropped = await verify_queries(pairs, corpus, encoder, config.pipeline.top_n_verification)
    finally:
        await encoder.aclose()

    write_qa(kept, out_dir / "qa.jsonl")
    write_qa(dropped, out_dir / "dropped.jsonl")
    manifest = _load_manifest(out_dir, config)
    manifest.restart(["verification_kept", "verification_dropped"], stages=[])
    manifest.per_stage_counts.verification_kept = len(kept)
    manifest.per_stage_counts.verification_dropped = len(dropped)
    manifest.save(out_dir / MANIFEST)
    click.echo(
        f"{click.style('verify', fg='green', bold=True)}: kept {len(kept)}, dropped {len(dropped)} "
        f"(top {config.pipeline.top_n_verification}) -> {out_dir / 'qa.jsonl'}"
    )


@cli.command()
@click.argument("qa_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@out_option
@click.option("--per-question", type=click.IntRange(min=1), default=None, help="Variations requested per question")
@click.option("--guidelines", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option(
    "--annotation-sample",
    type=click.IntRange(min=0),
    default=0,
    help="Also write N sampled (question, variation) rows to annotation.jsonl",
)
@provider_options
@embedder_option
@config_options
@run_async
async def vary(
    qa_path,
    corpus_path,
    out_dir,
    per_question,
    guidelines,
    annotation_sample,
    provider,
    script,
    embedder,
    config_file,
    dotlist,
    verbose,
):
    """Generate and filter paraphrases of every verified question into groups.jsonl."""
    config = resolve(
        config_file,
        dotlist,
        verbose,
        groups={"llm": provider, "embedding": embedder},
        llm__script_path=script,
        pipeline__variations_per_question=per_question,
        pipeline__guidelines_path=guidelines,
    )
    pairs = read_qa(qa_path)
    corpus = read_corpus(corpus_path)
    known = {doc.doc_id for doc in corpus}
    for pair in pairs:
        if pair.source_doc_id not in known:
            raise DatasetError(f"pair {pair.qa_id} refers to unknown document {pair.source_doc_id!r}", str(qa_path))

    prompts = PromptTemplates.load(config.pipeline.templates_dir, config.pipeline.guidelines_path)
    manifest = _load_manifest(out_dir, config)
    manifest.restart(
        ["variations_requested", "variations_generated", "variations_survived", "groups"],
        stages=["generate_variations"],
    )
    llm = build_llm(config)
    encoder = build_embedder(config)
    try:
        index = await DocumentIndex.build(corpus, encoder)
        groups = await vary_pairs(pairs, llm, index, config.pipeline, prompts, manifest)
    finally:
        await llm.provider.aclose()
        await encoder.aclose()
    manifest.usage = llm.ledger.model_dump()

    write_dataset(groups, out_dir / "groups.jsonl")
    manifest.save(out_dir / MANIFEST)
    if annotation_sample:
        rows = sample_for_annotation(groups, annotation_sample, config.pipeline.seed)
        write_annotation_sample(rows, out_dir / "annotation.jsonl")
    counts = manifest.per_stage_counts
    click.echo(
        f"{click.style('vary', fg='green', bold=True)}: {counts.groups} groups, "
        f"{counts.variations_survived} of {counts.variations_generated} variations kept "
        f"-> {out_dir / 'groups.jsonl'}"
    )


def evaluation_options(fn):
    """Scorer, replay order, seed and insert policy shared by evaluate and calibrate."""
    fn = click.option(
        "--insert-policy", type=click.Choice(["miss", "always"]), default=None, help="When replay inserts"
    )(fn)
    fn = click.option("--seed", type=click.IntRange(min=0), default=None, help="Shuffle seed")(fn)
    fn = click.option("--order", type=click.Choice(["seeded_shuffle", "as_given"]), default=None)(fn)
    fn = click.option(
        "--scorer-script", type=click.Path(exists=True, dir_okay=False), default=None, help="Scripted scorer table"
    )(fn)
    fn = click.option(
        "--scorer", type=click.Choice(["cosine", "remote_pair", "scripted"]), default=None, help="Candidate scorer"
    )(fn)
    return fn


@cli.command()
@click.argument("groups_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@out_option
@click.option("--threshold", type=click.FloatRange(0.0, 1.0), default=None, help="Hit threshold in [0, 1]")
@click.option("--top-k", type=click.IntRange(min=1), default=None, help="Candidates rescored per lookup")
@click.option("--capacity", type=click.IntRange(min=1), default=None, help="LRU capacity (default unbounded)")
@click.option("--exemplars", "exemplar_count", type=click.IntRange(min=0), default=0)
@evaluation_options
@embedder_option
@config_options
@run_async
async def evaluate(
    groups_path,
    out_dir,
    threshold,
    top_k,
    capacity,
    exemplar_count,
    scorer,
    scorer_script,
    order,
    seed,
    insert_policy,
    embedder,
    config_file,
    dotlist,
    verbose,
):
    """Replay every question and variation through a fresh cache and count the four outcomes."""
    config = resolve(
        config_file,
        dotlist,
        verbose,
        groups={"embedding": embedder},
        cache__threshold=threshold,
        cache__top_k_candidates=top_k,
        cache__capacity=capacity,
        scorer__kind=scorer,
        scorer__script_path=scorer_script,
        evaluation__order_policy=order,
        evaluation__seed=seed,
        evaluation__insert_policy=insert_policy,
    )
    groups = read_dataset(groups_path)
    validate_groups(groups)
    plan = build_plan(groups, config.evaluation.order_policy, config.evaluation.seed)

    encoder = build_embedder(config)
    similarity = build_scorer(config)
    try:
        cache = build_cache(config, encoder, similarity)
        report = await replay(plan, cache, config.evaluation.insert_policy)
    except ReplayAbortedError as e:
        write_eval_records(e.records, out_dir / "eval.partial.jsonl")
        logger.error(f"Replay aborted after {len(e.records)} queries; partial records are not counted")
        raise
    finally:
        await similarity.aclose()
        await encoder.aclose()

    report = report.model_copy(update={"config": config.echo()})
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(summarize(report, "json"), encoding="utf-8")
    write_eval_records(report.records, out_dir / "eval.jsonl")

    click.echo(summarize(report, "markdown"), nl=False)
    for outcome in (Outcome.correct_hit, Outcome.incorrect_hit, Outcome.incorrect_miss):
        pairs = exemplars(report, outcome, exemplar_count)
        if pairs:
            click.echo(f"\n{click.style(outcome.value, fg='cyan')}:")
            for query, key in pairs:
                click.echo(f"  {query!r} ~ {key!r}")


@cli.command()
@click.argument("groups_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@out_option
@click.option("--thresholds", required=True, help="lo:hi:step (inclusive) or a comma-separated list")
@click.option("--top-k", type=click.IntRange(min=1), default=None)
@click.option("--capacity", type=click.IntRange(min=1), default=None)
@evaluation_options
@embedder_option
@config_options
@run_async
async def calibrate(
    groups_path,
    out_dir,
    thresholds,
    top_k,
    capacity,
    scorer,
    scorer_script,
    order,
    seed,
    insert_policy,
    embedder,
    config_file,
    dotlist,
    verbose,
):
    """Sweep thresholds over one replay plan and write sweep.csv."""
    try:
        grid = parse_thresholds(thresholds)
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="--thresholds") from e
    config = resolve(
        config_file,
        dotlist,
        verbose,
        groups={"embedding": embedder},
        cache__top_k_candidates=top_k,
        cache__capacity=capacity,
        scorer__kind=scorer,
        scorer__script_path=scorer_script,
        evaluation__order_policy=order,
        evaluation__seed=seed,
        evaluation__insert_policy=insert_policy,
    )
    groups = read_dataset(groups_path)
    validate_groups(groups)
    plan = build_plan(groups, config.evaluation.order_policy, config.evaluation.seed)

    encoder = build_embedder(config)
    similarity = build_scorer(config)
    try:
        curve = await sweep(
            plan,
            lambda threshold: build_cache(config, encoder, similarity, threshold),
            grid,
            config.evaluation.insert_policy,
        )
    finally:
        await similarity.aclose()
        await encoder.aclose()

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.csv").write_text(curve.to_csv(), encoding="utf-8")
    best = curve.best_threshold()
    click.echo(curve.to_csv(), nl=False)
    click.echo(
        f"{click.style('best threshold', fg='green', bold=True)}: "
        f"{'n/a' if best is None else f'{best:g}'} (highest F1 over {len(grid)} thresholds)"
    )


@cli.command()
@click.argument("report_paths", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--format", "fmt", type=click.Choice(["markdown", "csv", "json"]), default="markdown")
@click.option("--out", "out_file", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--verbose", "-v", is_flag=True, default=False)
def report(report_paths, fmt, out_file, verbose):
    """Render one or more report.json files as a comparison table."""
    configure_logging(verbose)
    try:
        reports = [ConfusionReport.model_validate_json(p.read_text(encoding="utf-8")) for p in report_paths]
    except ValueError as e:
        raise CommandError(f"unreadable report: {e}") from e
    text = summarize(reports[0], fmt) if len(reports) == 1 else summarize_many(reports, fmt)
    if out_file is not None:
        out_file.write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


if __name__ == "__main__":
    cli()
