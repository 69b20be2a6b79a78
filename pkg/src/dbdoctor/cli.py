"""Command line entry points: ingest, diagnose, serve, bench, prompt-tune."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .bench import bundled_kb_path, bundled_scenarios_dir, format_table, load_scenarios, run_bench
from .diagnosis import SearchParams
from .gateway import scripted_gateway
from .knowledge import KnowledgeBase, ingest_document
from .observability import AnomalyAlert
from .promptlab import (
    DiagnosisSample,
    EngineConfig,
    PromptCandidate,
    score_prompt,
    select_template,
)
from .service import ServiceConfig, SessionManager, SessionMode, create_app, render_report


@click.group()
def main():
    """LLM-driven database anomaly diagnosis toolkit."""


@main.command()
@click.argument("doc", type=click.Path(exists=True, dir_okay=False))
@click.option("--kb", required=True, type=click.Path(), help="knowledge base JSON path")
@click.option("--script", required=True, type=click.Path(exists=True), help="gateway script")
@click.option("--max-chunk-tokens", default=1000, show_default=True)
def ingest(doc, kb, script, max_chunk_tokens):
    """Ingest a maintenance document into the experience base."""
    kb_path = Path(kb)
    base = KnowledgeBase.load(kb_path) if kb_path.exists() else KnowledgeBase()
    gw = scripted_gateway(script)
    inserted = ingest_document(
        Path(doc).read_text(encoding="utf-8"), base, gw, max_chunk_tokens
    )
    base.save(kb_path)
    click.echo(f"ingested {len(inserted)} segments into {kb_path}")


def _demo_dir() -> Path:
    from importlib import resources

    return Path(resources.files("dbdoctor") / "data")


@main.command()
@click.option("--alert", "alert_path", required=True, type=click.Path(exists=True))
@click.option(
    "--mode",
    default="single",
    type=click.Choice([m.value for m in SessionMode]),
    show_default=True,
)
@click.option("--kb", type=click.Path(exists=True), default=None)
@click.option("--fixtures", type=click.Path(exists=True), default=None)
@click.option("--script", type=click.Path(exists=True), default=None)
@click.option("--thresholds", type=click.Path(exists=True), default=None)
@click.option("--sessions-dir", type=click.Path(), default="sessions", show_default=True)
@click.option("--format", "fmt", default="markdown", type=click.Choice(["markdown", "json"]))
def diagnose(alert_path, mode, kb, fixtures, script, thresholds, sessions_dir, fmt):
    """Run one diagnosis session and print the report."""
    demo = _demo_dir() / "scenarios" / "MISSING_INDEXES"
    scenario_meta = json.loads((demo / "scenario.json").read_text(encoding="utf-8"))
    config = ServiceConfig(
        kb_path=kb or bundled_kb_path(),
        fixture_dir=fixtures or demo / "fixtures",
        script_path=script or demo / "script.json",
        thresholds=(
            json.loads(Path(thresholds).read_text(encoding="utf-8"))
            if thresholds
            else scenario_meta["thresholds"]
        ),
        sessions_dir=sessions_dir,
        params=SearchParams(max_nodes=scenario_meta.get("max_nodes", 3)),
    )
    manager = SessionManager(config)
    alert = AnomalyAlert.from_dict(
        json.loads(Path(alert_path).read_text(encoding="utf-8"))
    )
    session = manager.start_session(alert, SessionMode(mode), synchronous=True)
    if session.report is None:
        click.echo(f"session {session.session_id} {session.status.value}: {session.error}")
        sys.exit(1)
    click.echo(render_report(session.report, fmt))


@main.command()
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--kb", type=click.Path(exists=True), default=None)
@click.option("--fixtures", type=click.Path(exists=True), default=None)
@click.option("--script", type=click.Path(exists=True), default=None)
@click.option("--sessions-dir", type=click.Path(), default="sessions", show_default=True)
def serve(port, host, kb, fixtures, script, sessions_dir):
    """Serve the HTTP/JSON API consumed by the web console."""
    import uvicorn

    demo = _demo_dir() / "scenarios" / "MISSING_INDEXES"
    scenario_meta = json.loads((demo / "scenario.json").read_text(encoding="utf-8"))
    config = ServiceConfig(
        kb_path=kb or bundled_kb_path(),
        fixture_dir=fixtures or demo / "fixtures",
        script_path=script or demo / "script.json",
        thresholds=scenario_meta["thresholds"],
        sessions_dir=sessions_dir,
        params=SearchParams(max_nodes=scenario_meta.get("max_nodes", 3)),
    )
    uvicorn.run(create_app(SessionManager(config)), host=host, port=port)


@main.command()
@click.option("--scenarios", "scenarios_dir", type=click.Path(exists=True), default=None)
@click.option("--modes", default="dbot,baseline", show_default=True)
@click.option("--out", type=click.Path(), default=None, help="write JSON results here")
def bench(scenarios_dir, modes, out):
    """Run the single-root-cause scenario benchmark."""
    scenarios = load_scenarios(scenarios_dir or bundled_scenarios_dir())
    result = run_bench(scenarios, modes=tuple(modes.split(",")))
    click.echo(format_table(result))
    if out:
        Path(out).write_text(
            json.dumps(
                {
                    "per_scenario": result.per_scenario,
                    "legality_count": result.legality_count,
                    "accuracy_count": result.accuracy_count,
                    "total": result.total,
                },
                indent=2,
                sort_keys=True,
            ),
            encoding="utf-8",
        )


@main.command(name="prompt-tune")
@click.option("--samples", "samples_dir", required=True, type=click.Path(exists=True))
@click.option("--kb", type=click.Path(exists=True), default=None)
@click.option("--script", required=True, type=click.Path(exists=True))
@click.option("--reserve", default=10, show_default=True)
@click.option("--out", type=click.Path(), default="prompt_tuning.json", show_default=True)
def prompt_tune(samples_dir, kb, script, reserve, out):
    """Score candidate prompt templates over labeled samples; print the pick.

    The samples directory holds one JSON per sample: {alert, fixture_dir,
    labeled_causes, thresholds} plus a candidates.json with template strings.
    """
    samples_dir = Path(samples_dir)
    samples = []
    for path in sorted(samples_dir.glob("sample*.json")):
        raw = json.loads(path.read_text(encoding="utf-8"))
        samples.append(
            DiagnosisSample(
                alert=AnomalyAlert.from_dict(raw["alert"]),
                fixture_dir=samples_dir / raw["fixture_dir"],
                labeled_causes=raw["labeled_causes"],
                thresholds=raw.get("thresholds", {}),
            )
        )
    candidates = [
        PromptCandidate(template=t)
        for t in json.loads((samples_dir / "candidates.json").read_text(encoding="utf-8"))
    ]
    gw = scripted_gateway(script)
    engine = EngineConfig(kb=KnowledgeBase.load(kb or bundled_kb_path()))
    scored = [score_prompt(c, samples, engine, gw) for c in candidates]
    reserved, chosen = select_template(scored, reserve=reserve)
    Path(out).write_text(
        json.dumps(
            {
                "reserved": [
                    {"template": s.candidate.template, "score": s.score}
                    for s in reserved
                ],
                "chosen": chosen.template,
            },
            indent=2,
        ),
        encoding="utf-8",
    )
    click.echo(f"scored {len(scored)} candidates; best score {reserved[0].score:.2f}")
    click.echo(f"chosen template written to {out}")


if __name__ == "__main__":
    main()
