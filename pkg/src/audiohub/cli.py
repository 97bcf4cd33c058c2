"""Operator entry point: REPL, server, scripted runs, and eval subcommands.

Exit codes: 0 ok, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

import click

from . import analysis, evalkit
from .core import OrchestratorError
from .execution import load_registry
from .service import SessionService


def _build_service(store_dir: str | None, tools: str | None) -> SessionService:
    root = Path(store_dir) if store_dir else Path(tempfile.mkdtemp(prefix="audiohub-"))
    registry = None
    if tools:
        registry = load_registry(Path(tools).read_bytes())
    return SessionService(root, registry=registry)


@click.group()
def cli():
    """Dialogue orchestration over pluggable audio task executors."""


@cli.command()
@click.option("--store-dir", default=None, help="Resource store root (default: a fresh temp dir).")
@click.option("--tools", default=None, help="Path to a tools.json registry config.")
@click.option("--engine", default="builtin", help="Dialogue engine: builtin or external.")
def repl(store_dir, tools, engine):
    """Interactive loop: plain text is a query; :upload <path>, :play <id>, :quit."""
    service = _build_service(store_dir, tools)
    session = service.create_session(engine)
    click.echo(f"session {session.session_id} ({engine} engine); :quit to leave")
    staged: list[tuple[str, bytes]] = []
    for line in sys.stdin:
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if line.strip() == ":quit":
            break
        if line.startswith(":upload "):
            path = Path(line[len(":upload "):].strip())
            if not path.exists():
                click.echo(f"error: no such file {path}")
                continue
            staged.append((path.name, path.read_bytes()))
            click.echo(f"staged {path.name} for the next query")
            continue
        if line.startswith(":play "):
            rid = line[len(":play "):].strip()
            try:
                service.store.load(rid)
            except OrchestratorError:
                click.echo(f"error: no resource {rid}")
                continue
            click.echo(str(service.store.root / rid[:2] / rid))
            continue
        turn = service.post_turn(session.session_id, description=line, uploads=staged)
        staged = []
        click.echo(turn.response_text)
        for att in turn.attachments:
            click.echo(f"  [{att.kind}] {att.resource_id}")
    click.echo("bye")


@cli.command()
@click.option("--port", default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--store-dir", default=None)
@click.option("--tools", default=None)
@click.option("--ui-dir", default=None, help="Serve a static chat UI from this directory at /ui.")
def serve(port, host, store_dir, tools, ui_dir):
    """Run the HTTP service."""
    import uvicorn

    from .server import create_app

    service = _build_service(store_dir, tools)
    app = create_app(service, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@cli.command(name="run")
@click.option("--script", "script_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--store-dir", default=None)
@click.option("--tools", default=None)
@click.option("--out", default=None, help="Write the transcript JSON here instead of stdout.")
def run_script_cmd(script_path, store_dir, tools, out):
    """Replay a scripted dialogue; prints the transcript as JSON."""
    transcript = run_script(Path(script_path), store_dir=store_dir, tools=tools)
    payload = json.dumps(transcript, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(payload, encoding="utf-8")
    else:
        click.echo(payload)


def run_script(script_path: Path, store_dir: str | None = None, tools: str | None = None) -> dict:
    entries = json.loads(script_path.read_text(encoding="utf-8"))
    service = _build_service(store_dir, tools)
    session = service.create_session()
    turns = []
    for entry in entries:
        uploads = []
        for rel in entry.get("uploads", []):
            p = Path(rel)
            if not p.is_absolute():
                p = script_path.parent / rel
            if not p.exists():
                raise FileNotFoundError(f"upload file {p} named by the script is missing")
            uploads.append((p.name, p.read_bytes()))
        turn = service.post_turn(session.session_id, entry["description"], uploads)
        turns.append(turn.to_dict())
    return {"session_id": session.session_id, "turns": turns}


@cli.group()
def eval():
    """Consistency, rating, and robustness evaluation."""


def _target(target_url: str | None, store_dir: str | None):
    if target_url:
        return evalkit.HttpTarget(target_url)
    service = _build_service(store_dir, None)
    return evalkit.InProcessTarget(service)


def _emit(report: dict, out: str | None):
    payload = json.dumps(report, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(payload, encoding="utf-8")
    else:
        click.echo(payload)


@eval.command()
@click.option("--seeds", "seeds_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", default=5, show_default=True)
@click.option("--target", "target_url", default=None, help="Base URL of a live service; default in-process.")
@click.option("--store-dir", default=None)
@click.option("--out", default=None)
def consistency(seeds_path, k, target_url, store_dir, out):
    seeds = evalkit.load_seeds(Path(seeds_path).read_bytes()) if seeds_path else evalkit.default_seeds()
    corpus = evalkit.expand_seeds(seeds, k)
    report = evalkit.run_consistency(corpus, _target(target_url, store_dir))
    _emit(report, out)
    if report["aborted"]:
        raise click.ClickException("target became unreachable; report is partial")


@eval.command()
@click.option("--csv", "csv_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None)
def ratings(csv_path, out):
    records, rejected = evalkit.ingest_ratings(Path(csv_path).read_bytes())
    report = {"rejected": rejected, "per_task": evalkit.aggregate_ratings(records)}
    _emit(report, out)


@eval.command()
@click.option("--scripts", "scripts_dir", default=None, type=click.Path(exists=True, file_okay=False))
@click.option("--target", "target_url", default=None)
@click.option("--store-dir", default=None)
@click.option("--out", default=None)
def robustness(scripts_dir, target_url, store_dir, out):
    if scripts_dir:
        scripts = [
            evalkit.load_scenario(p.read_bytes())
            for p in sorted(Path(scripts_dir).glob("*.json"))
        ]
        fixture_dir = Path(scripts_dir)
    else:
        scripts = evalkit.shipped_scenarios()
        fixture_dir = None
    report = evalkit.run_robustness(scripts, _target(target_url, store_dir), fixture_dir)
    _emit(report, out)
    if not report["all_pass"]:
        raise click.ClickException("robustness expectations failed")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except Exception as exc:  # runtime failure
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
