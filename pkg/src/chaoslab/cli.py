"""Command-line interface.

Exit codes: 0 success, 1 configuration error, 2 check failure, 3 numerical
abort.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .checks import SUITES, check_suite
from .errors import CheckFailure, ConfigError, NumericalAbort
from .report import render_report
from .study import load_config, run_simulation, run_study

EXIT_CONFIG = 1
EXIT_CHECK = 2
EXIT_NUMERIC = 3


@click.group()
def main():
    """Mean-field particle laboratory: studies, simulations, and checks."""


def _run_guarded(fn):
    try:
        return fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except NumericalAbort as exc:
        click.echo(f"numerical abort: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
def simulate(config_path, out_dir):
    """Run one coupled simulation and write trajectory summaries."""

    def body():
        config = load_config(config_path)
        csv_text, meta = run_simulation(config)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "simulate.csv").write_text(csv_text)
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        click.echo(f"wrote {out / 'simulate.csv'}")

    _run_guarded(body)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
def study(config_path, out_dir):
    """Run a convergence study and write study.csv plus metadata."""

    def body():
        config = load_config(config_path)
        result = run_study(config)
        csv_path, meta_path = result.write(out_dir)
        click.echo(f"wrote {csv_path} ({len(result.rows)} rows) and {meta_path}")

    _run_guarded(body)


@main.command()
@click.option("--suite", "suite_id", required=True, type=click.Choice(sorted(SUITES)))
@click.option("--seed", default=0, type=int, show_default=True)
def check(suite_id, seed):
    """Run a verification suite; nonzero exit on any hard failure."""
    try:
        report = check_suite(suite_id, seed)
    except CheckFailure as exc:
        report = getattr(exc, "report", {"suite": suite_id, "passed": False})
        click.echo(json.dumps(report, indent=2))
        click.echo(f"check failure: {exc}", err=True)
        sys.exit(EXIT_CHECK)
    except NumericalAbort as exc:
        click.echo(f"numerical abort: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    click.echo(json.dumps(report, indent=2))


@main.command()
@click.option("--in", "in_dir", required=True, type=click.Path())
@click.option("--figures/--no-figures", default=True, show_default=True)
def report(in_dir, figures):
    """Render a study directory into report.md and per-metric figures."""

    def body():
        text = render_report(in_dir, make_figures=figures)
        click.echo(text)

    _run_guarded(body)


if __name__ == "__main__":
    main()
