#!/usr/bin/env python3
"""Command-line entry point: run, validate and report experiments.

Exit codes: 0 when every gate passes, 1 on a gate failure (or a run that aborts),
2 on a config error. Config errors are raised before any artifact is written.
"""
import os
import sys
from dataclasses import dataclass

import click
from sqlalchemy.exc import SQLAlchemyError

from core import ChecksumError, ConfigError, LabError
from experiments import parse_config, run_pipeline
from labconfig import logger, worker_count
from models import open_catalog, record_run, runs_for_dir
from persistence import load_manifest, now_iso, verify, write_manifest

EXIT_OK = 0
EXIT_GATE_FAILURE = 1
EXIT_CONFIG_ERROR = 2


@dataclass(frozen=True)
class RunOutcome:
    exit_code: int
    gates: list
    failing: list
    output_dir: str
    manifest_path: str


# ------------------ Orchestration ------------------
def run_experiment(config_path, output_dir=None, workers=None, use_catalog=True):
    """Parse, run the pipeline, write the manifest and record the run in the catalog."""
    config = parse_config(config_path)
    workers = workers or worker_count()
    started = now_iso()
    result, store = run_pipeline(config, output_dir, workers)
    finished = now_iso()
    gates = [g.as_dict() for g in result.gates]
    failing = [g.name for g in result.gates if not g.passed]
    exit_code = EXIT_GATE_FAILURE if failing else EXIT_OK
    manifest_path = write_manifest(store.output_dir, config.text, config.name, result.seeds, started, finished,
                                   store.artifacts, gates, workers, config.kind)
    if use_catalog:
        try:
            _, session_factory = open_catalog(output_dir=store.output_dir)
            record_run(session_factory, load_manifest(store.output_dir), store.output_dir, exit_code)
        except SQLAlchemyError as e:
            logger.warning(f"catalog_unavailable error={e}")
    logger.info(f"run_experiment kind={config.kind} exit={exit_code} failing={','.join(failing) or '-'}")
    return RunOutcome(exit_code, gates, failing, store.output_dir, manifest_path)


def _print_gates(gates):
    for g in gates:
        mark = 'PASS' if g['passed'] else 'FAIL'
        click.echo(f"  [{mark}] {g['name']}: value={g['value']:.6g} threshold={g['threshold']:.6g} {g.get('detail') or ''}".rstrip())


# ------------------ CLI ------------------
@click.group()
def cli():
    """Conditional McKean-Vlasov simulation and verification lab."""


@cli.command()
@click.argument('config_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--output-dir', type=click.Path(file_okay=False), default=None,
              help='Override [experiment] output_dir.')
@click.option('--workers', type=int, default=None, help='Worker threads (default: MCKV_WORKERS).')
@click.option('--no-catalog', is_flag=True, help='Skip recording the run in the catalog.')
def run(config_path, output_dir, workers, no_catalog):
    """Run the experiment defined in CONFIG_PATH."""
    try:
        outcome = run_experiment(config_path, output_dir, workers, use_catalog=not no_catalog)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    except LabError as e:
        logger.error(f"run_aborted error={e}")
        click.echo(f"run aborted: {e}", err=True)
        sys.exit(EXIT_GATE_FAILURE)
    click.echo(f"[run] artifacts in {outcome.output_dir}")
    _print_gates(outcome.gates)
    if outcome.failing:
        click.echo(f"failing gates: {', '.join(outcome.failing)}")
    sys.exit(outcome.exit_code)


@cli.command()
@click.argument('config_path', type=click.Path(exists=True, dir_okay=False))
def validate(config_path):
    """Parse and validate CONFIG_PATH without running anything."""
    try:
        config = parse_config(config_path)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    click.echo(f"[validate] ok kind={config.kind} seed={config.seed} N={config.n_particles} "
               f"M={config.n_scenarios} steps={config.time_grid.n_steps}")


@cli.command()
@click.argument('artifact_dir', type=click.Path(exists=True, file_okay=False))
def report(artifact_dir):
    """Summarise a finished run from its manifest and verify every artifact."""
    try:
        manifest = load_manifest(artifact_dir)
    except ChecksumError as e:
        click.echo(f"manifest rejected: {e}", err=True)
        sys.exit(EXIT_GATE_FAILURE)
    click.echo(f"[report] kind={manifest['kind']} config={manifest['config_name']} "
               f"sha256={manifest['config_sha256'][:12]} seed={manifest['seeds'].get('master_seed')}")
    click.echo(f"[report] started={manifest['started']} finished={manifest['finished']} "
               f"workers={manifest['workers']}")
    versions = ' '.join(f"{k}={v}" for k, v in sorted(manifest['versions'].items()))
    click.echo(f"[report] versions {versions}")
    bad = []
    for a in manifest['artifacts']:
        try:
            ok = verify(os.path.join(artifact_dir, a['path'])) == a['sha256']
        except ChecksumError:
            ok = False
        if not ok:
            bad.append(a['path'])
    click.echo(f"[report] artifacts={len(manifest['artifacts'])} corrupted={len(bad)}")
    for path in bad:
        click.echo(f"  corrupted: {path}")
    _print_gates(manifest['gates'])
    if os.path.exists(os.path.join(artifact_dir, 'catalog.db')):
        try:
            _, session_factory = open_catalog(output_dir=os.path.abspath(artifact_dir))
            runs = runs_for_dir(session_factory, os.path.abspath(artifact_dir))
            click.echo(f"[report] catalog runs={len(runs)} last_status={runs[-1].status if runs else '-'}")
        except SQLAlchemyError as e:
            logger.warning(f"catalog_unavailable error={e}")
    failing = [g['name'] for g in manifest['gates'] if not g['passed']]
    if failing:
        click.echo(f"failing gates: {', '.join(failing)}")
    sys.exit(EXIT_GATE_FAILURE if failing or bad else EXIT_OK)


# ------------------ Main ------------------
if __name__ == "__main__":
    cli()
