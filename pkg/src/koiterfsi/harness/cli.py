"""Command line interface: ``run``, ``check-operators`` and ``study-epsilon``."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from ..errors import ConfigError
from .checks import operator_checks
from .config import RunConfig
from .runner import EXIT_CONFIG, execute, study_epsilon


def _load(config: str, overrides: tuple[str, ...] = ()) -> RunConfig:
    try:
        return RunConfig.load(config, list(overrides))
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        click.echo(f"config error{key}: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


@click.group()
def main() -> None:
    """Fluid inside a clamped Koiter shell: coupled runs and diagnostics."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--override", "overrides", multiple=True, metavar="KEY=VALUE", help="Replace one config value.")
@click.option("--output-dir", default="output", show_default=True, type=click.Path(file_okay=False))
def run(config_path: str, overrides: tuple[str, ...], output_dir: str) -> None:
    """Run one coupled trajectory and write energy, snapshot and summary files."""
    config = _load(config_path, overrides)
    outcome = execute(config, output_dir)
    s = outcome.summary
    click.echo(f"stop_reason={s['stop_reason']} t_star={s['t_star']:.6g}")
    if "fp_iterations" in s:
        click.echo(f"fixed-point iterations per window: {s['fp_iterations']}")
        click.echo(f"max balance residual: {s['max_balance_residual']:.3e}")
    click.echo(f"artifacts in {Path(output_dir).resolve()}")
    sys.exit(outcome.exit_code)


@main.command("check-operators")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
def check_operators(config_path: str) -> None:
    """Run the operator property suite on the configured geometry."""
    config = _load(config_path)
    failures = 0
    for check in operator_checks(config.geometry()):
        result = check()
        click.echo(result.line())
        failures += not result.passed and not result.known_failure
    sys.exit(1 if failures else 0)


@main.command("study-epsilon")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--values", default="0.2,0.1,0.05", show_default=True, help="Comma-separated regularization scales.")
@click.option("--override", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--output", default=None, type=click.Path(dir_okay=False), help="Write the table as JSON.")
def study(config_path: str, values: str, overrides: tuple[str, ...], output: str | None) -> None:
    """Compare runs at eps and eps/2 for each value."""
    config = _load(config_path, overrides)
    try:
        eps = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        click.echo(f"config error: cannot read --values {values!r}", err=True)
        sys.exit(EXIT_CONFIG)
    result = study_epsilon(config, eps)
    click.echo("eps,distance,compared_until")
    for e, d, h in zip(result.values, result.distances, result.horizons):
        click.echo(f"{e:.6g},{d:.12g},{h:.6g}")
    click.echo(f"strictly decreasing: {result.strictly_decreasing}")
    if output:
        Path(output).write_text(
            json.dumps(
                {"values": result.values, "distances": result.distances, "horizons": result.horizons,
                 "strictly_decreasing": result.strictly_decreasing},
                indent=2,
            )
            + "\n"
        )


if __name__ == "__main__":
    main()
