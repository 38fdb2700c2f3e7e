"""Command line entry points: ``prefmem extract|ingest|retrieve|eval|serve|selftest``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
from pydantic import ValidationError

from . import selftest as selftest_mod
from .dataset import fixture_dir, load_corpus, mock_records, split
from .evaluation import EXPERIMENTS, FORMATS, Harness, render_report
from .extraction import ConversationTranscript
from .llm_gateway import GatewayError, MockGateway, build_gateway
from .service import IngestFailure, MemoryEngine, ServiceConfig, create_app, load_config
from .taxonomy import CategoryTaxonomy, load_default_taxonomy, load_taxonomy

logger = logging.getLogger(__name__)

_EXTENSIONS = {"table": "txt", "json": "json", "matrix": "txt"}


class Context:
    def __init__(self, config: ServiceConfig):
        self.config = config

    def override_mock(self, mock: bool | None) -> None:
        if mock is not None:
            self.config = self.config.with_mock(mock)

    def taxonomy(self) -> CategoryTaxonomy:
        path = self.config.taxonomy_path
        return load_taxonomy(path) if path else load_default_taxonomy()

    def engine(self, store: str | None = None) -> MemoryEngine:
        config = self.config
        if store is not None:
            config = config.model_copy(update={"storage_root": store})
        return MemoryEngine(config)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML configuration file.")
@click.option("--mock/--live", default=None, help="Force the mock backend or a live endpoint (default: from config).")
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, mock: bool | None, verbose: int) -> None:
    """Category-bound preference memory for in-car assistants."""
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    # Configuration problems surface here, before any gateway is built.
    try:
        config = load_config(config_path)
        if mock is not None:
            config = config.with_mock(mock)
    except (ValidationError, ValueError, OSError) as exc:
        raise click.UsageError(f"invalid configuration: {exc}") from exc
    ctx.obj = Context(config)


def _read_transcript(source) -> ConversationTranscript:
    try:
        return ConversationTranscript.from_dict(json.load(source))
    except (json.JSONDecodeError, ValueError) as exc:
        raise click.BadParameter(f"malformed transcript: {exc}", param_hint="TRANSCRIPT") from exc


def _echo_json(data) -> None:
    click.echo(json.dumps(data, indent=2, ensure_ascii=False))


@main.command()
@click.argument("transcript", type=click.File("r", encoding="utf-8"))
@click.option("--user", default=None, help="Apply this user's opt-outs (needs --store).")
@click.option("--store", type=click.Path(file_okay=False), default=None, help="Preference store directory.")
@click.pass_obj
def extract(obj: Context, transcript, user: str | None, store: str | None) -> None:
    """Extract candidate preferences from a JSON transcript (use - for stdin)."""
    conv = _read_transcript(transcript)
    engine = obj.engine(store)
    try:
        outcome = engine.extract(user or "", conv)
    except GatewayError as exc:
        raise click.ClickException(f"gateway failure: {exc}") from exc
    _echo_json(
        {
            "structurally_valid": outcome.structurally_valid,
            "discarded_sentinel_count": outcome.discarded_sentinel_count,
            "candidates": [
                {"path": str(c.path), "value": c.value, "source_sentence": c.source_sentence} for c in outcome.candidates
            ],
        }
    )


@main.command()
@click.argument("user")
@click.argument("transcript", type=click.File("r", encoding="utf-8"))
@click.option("--store", type=click.Path(file_okay=False), required=True, help="Preference store directory.")
@click.pass_obj
def ingest(obj: Context, user: str, transcript, store: str) -> None:
    """Extract from a transcript and maintain USER's stored preferences."""
    conv = _read_transcript(transcript)
    try:
        _echo_json(obj.engine(store).ingest(user, conv))
    except IngestFailure as exc:
        _echo_json(exc.body)
        sys.exit(1)


@main.command()
@click.argument("user")
@click.argument("utterance")
@click.option("-k", type=int, default=None, help="Number of preferences to return.")
@click.option("--score-floor", type=float, default=None, help="Drop results scoring below this cosine.")
@click.option("--store", type=click.Path(file_okay=False), required=True, help="Preference store directory.")
@click.pass_obj
def retrieve(obj: Context, user: str, utterance: str, k: int | None, score_floor: float | None, store: str) -> None:
    """Rank USER's stored preferences against UTTERANCE."""
    try:
        results = obj.engine(store).retrieve(user, utterance, k, score_floor)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc
    except GatewayError as exc:
        raise click.ClickException(f"gateway failure: {exc}") from exc
    _echo_json({"user_id": user, "results": results})


@main.command("eval")
@click.option(
    "--experiment",
    type=click.Choice([*EXPERIMENTS, "all"]),
    default="all",
    show_default=True,
    help="Experiment to run.",
)
@click.option("--corpus", type=click.Path(exists=True, file_okay=False), default=None, help="Corpus directory (default: bundled fixture).")
@click.option("--split", "part", type=click.Choice(["all", "first", "second"]), default="all", show_default=True, help="Evaluate a stratified half of the corpus.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for --split.")
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="table", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Also write every format into this directory.")
@click.option("--workers", type=int, default=1, show_default=True, help="Concurrent points per experiment.")
@click.option("--mock/--live", "mock", default=None, help="Override the configured backend for this command.")
@click.pass_obj
def eval_cmd(
    obj: Context, experiment: str, corpus: str | None, part: str, seed: int, fmt: str, out: str | None, workers: int, mock: bool | None
) -> None:
    """Run benchmark experiments and print a report."""
    obj.override_mock(mock)
    gateway_config = obj.config.gateway_config()
    taxonomy = obj.taxonomy()
    loaded = load_corpus(corpus or fixture_dir(), taxonomy, strict=corpus is None)
    for problem in loaded.problems:
        logger.warning("corpus: %s", problem)
    points = loaded.points
    if part != "all":
        first, second = split(points, seed=seed)
        points = first if part == "first" else second
    if gateway_config.mock:
        # The mock's rule table is the corpus' own ground truth.
        gateway = MockGateway(mock_records(points), dimension=gateway_config.mock_dimension)
    else:
        gateway = build_gateway(gateway_config)
    names = list(EXPERIMENTS) if experiment == "all" else [experiment]
    try:
        report = Harness(gateway, taxonomy, workers=workers).run(points, names)
    except GatewayError as exc:
        raise click.ClickException(f"gateway failure: {exc}") from exc
    click.echo(render_report(report, fmt), nl=False)
    if out:
        target = Path(out)
        target.mkdir(parents=True, exist_ok=True)
        for f in FORMATS:
            if f == "matrix" and report.in_schema is None and report.out_of_schema is None:
                continue
            (target / f"report.{f}.{_EXTENSIONS[f]}").write_text(render_report(report, f), encoding="utf-8")


@main.command()
@click.option("--host", default=None, help="Listen address (default: from config).")
@click.option("--port", type=int, default=None, help="Listen port (default: from config).")
@click.option("--mock/--live", "mock", default=None, help="Override the configured backend for this command.")
@click.pass_obj
def serve(obj: Context, host: str | None, port: int | None, mock: bool | None) -> None:
    """Run the HTTP service."""
    import uvicorn

    obj.override_mock(mock)
    app = create_app(obj.config)
    uvicorn.run(app, host=host or obj.config.host, port=port or obj.config.port, log_level="info")


@main.command()
@click.option("--json", "as_json", is_flag=True, help="Print results as JSON after the summary lines.")
@click.option("--write-golden", type=click.Path(file_okay=False), default=None, hidden=True)
def selftest(as_json: bool, write_golden: str | None) -> None:
    """Run the acceptance checks on the bundled fixture with the mock backend."""
    if write_golden:
        for path in selftest_mod.write_golden(write_golden):
            click.echo(f"wrote {path}")
        return
    results = selftest_mod.run(click.echo)
    if as_json:
        click.echo(selftest_mod.results_json(results))
    sys.exit(0 if selftest_mod.all_passed(results) else 1)


if __name__ == "__main__":
    main()
