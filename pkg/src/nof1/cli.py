"""Command line entry points: batch studies and the live session service."""

from __future__ import annotations

import csv
import json
import statistics
import sys
from pathlib import Path

import click

from .config import load_study
from .engine import StudyConfig, run_study
from .errors import ConfigError


@click.group()
def main():
    """Adaptive N-of-1 trial engine."""


@main.group()
def study():
    """Batch simulation studies."""


@study.command("run")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Directory for metric tables, traces, and the run manifest.")
@click.option("--seed", type=int, default=None,
              help="Override the config's master seed.")
@click.option("--workers", type=int, default=1, show_default=True,
              help="Replicates to run in parallel.")
def study_run(config_path, out_dir, seed, workers):
    """Run the replicated study described by CONFIG_PATH."""
    try:
        config, config_hash = load_study(config_path)
    except ConfigError as exc:
        click.echo(f"error: invalid config {config_path}: {exc}", err=True)
        sys.exit(2)
    if seed is not None:
        config = StudyConfig(
            scenario=config.scenario, prior=config.prior, policies=config.policies,
            n_replicates=config.n_replicates, master_seed=seed,
        )
    click.echo(
        f"running {config.n_replicates} replicates x {len(config.policies)} policies "
        f"(N={config.scenario.n_patients}, K={config.scenario.n_cycles}, "
        f"seed={config.master_seed})"
    )
    result = run_study(config, workers=workers)
    result.write_tables(out_dir)
    manifest_path = Path(out_dir) / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["config_file"] = str(config_path)
    manifest["config_sha256"] = config_hash
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if result.failures:
        click.echo(f"warning: {len(result.failures)} trial(s) failed and were excluded", err=True)
    click.echo(f"wrote {out_dir}/logdet.csv, best_prob.csv, best_received.csv, traces/, manifest.json")


@study.command("metrics")
@click.argument("out_dir", type=click.Path(exists=True, file_okay=False))
def study_metrics(out_dir):
    """Summarize the metric tables in OUT_DIR by policy and cycle."""
    out = Path(out_dir)
    logdet = _read_csv(out / "logdet.csv")
    received = _read_csv(out / "best_received.csv")
    prob = _read_csv(out / "best_prob.csv")

    click.echo("median log-determinant of the joint posterior covariance:")
    for (policy, cycle), values in _grouped(logdet, "log_det_full"):
        click.echo(f"  {policy:<11} cycle {cycle}: {statistics.median(values):9.3f}")
    click.echo("mean proportion of slots allocating the truly best arm:")
    for (policy, cycle), values in _grouped(received, "prop_best"):
        click.echo(f"  {policy:<11} cycle {cycle}: {statistics.mean(values):9.3f}")
    click.echo("mean posterior probability of identifying the best arm:")
    for (policy, cycle), values in _grouped(prob, "prob_best"):
        click.echo(f"  {policy:<11} cycle {cycle}: {statistics.mean(values):9.3f}")


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _grouped(rows: list[dict], field: str):
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        cycle = int(row["cycle"])
        if cycle == 0:
            continue
        groups.setdefault((row["policy"], cycle), []).append(float(row[field]))
    return sorted(groups.items())


@main.command()
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False),
              help="Directory holding the session event logs.")
@click.option("--ui", "ui_dir", default=None, type=click.Path(file_okay=False, exists=True),
              help="Optional directory of built UI assets to serve at /.")
def serve(port, host, data_dir, ui_dir):
    """Serve the live-trial session API."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(data_dir, ui_dir=ui_dir), host=host, port=port,
                log_level="info")


if __name__ == "__main__":
    main()
