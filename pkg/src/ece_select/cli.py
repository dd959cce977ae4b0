"""Command line interface for model-selection experiments."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.table import Table
from typing_extensions import Annotated

from .audit import RecordAuditor, validate_directory
from .config import ConfigError, ConfigOverrides, ExperimentConfig, load_config, resolve_document
from .harness import HarnessError, analyze_records, run_sweep
from .logging import set_log_context, setup_logging
from .records import ArtifactsExistError, RecordError, is_record_dir, write_record
from .scenarios import run_experiment
from .version import __version__

app = typer.Typer(
    name="ece-select",
    help="Explore-Commit-Eliminate model selection on simulated episodic MDPs.",
    no_args_is_help=True,
)
console = Console()

EXIT_RUNTIME = 1
EXIT_CONFIG = 2

ConfigOption = Annotated[
    Optional[Path], typer.Option("--config", "-c", help="JSON experiment configuration.")
]
OutOption = Annotated[Path, typer.Option("--out", "-o", help="Output directory.")]
SeedOption = Annotated[Optional[int], typer.Option("--seed", help="Base seed override.")]
VariantOption = Annotated[
    Optional[str],
    typer.Option("--variant", help="ece, ece-gap, ece-vstar-known or ece-vhat."),
]
ScenarioOption = Annotated[
    Optional[str],
    typer.Option("--scenario", help="scripted-gap, lsvi-nested or scripted-shortfall."),
]
WorkersOption = Annotated[
    Optional[int], typer.Option("--workers", help="Worker processes (default: all cores).")
]
ForceOption = Annotated[bool, typer.Option("--force", help="Overwrite existing artifacts.")]
LogLevelOption = Annotated[
    Optional[str], typer.Option("--log-level", help="Log level (DEBUG, INFO, WARNING, ERROR).")
]


def _version_callback(value: bool) -> None:
    if value:
        console.print(f"ece-select version {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    version: Annotated[
        Optional[bool],
        typer.Option(
            "--version",
            "-v",
            help="Show version and exit.",
            callback=_version_callback,
            is_eager=True,
        ),
    ] = None,
) -> None:
    """Top-level Typer callback used for eager --version."""
    _ = version


def _load(
    config_path: Optional[Path],
    *,
    seed: Optional[int] = None,
    variant: Optional[str] = None,
    scenario: Optional[str] = None,
    workers: Optional[int] = None,
    log_level: Optional[str] = None,
    horizon_T: Optional[int] = None,
) -> ExperimentConfig:
    overrides = ConfigOverrides(
        log_level=log_level.upper() if log_level else None,
        seed=seed,
        variant=variant.lower() if variant else None,
        scenario=scenario.lower() if scenario else None,
        workers=workers,
        horizon_T=horizon_T,
    )
    try:
        config = load_config(config_path, overrides=overrides)
    except ConfigError as exc:
        console.print(f"[red]Configuration error:[/red] {exc}")
        raise typer.Exit(code=EXIT_CONFIG) from exc
    setup_logging(config.log_level)
    set_log_context(scenario=config.scenario, variant=config.variant, seed=config.seed)
    return config


@app.command()
def run(
    out: OutOption,
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    variant: VariantOption = None,
    scenario: ScenarioOption = None,
    horizon_T: Annotated[
        Optional[int], typer.Option("--horizon-T", "-T", help="Number of episodes T.")
    ] = None,
    force: ForceOption = False,
    log_level: LogLevelOption = None,
) -> None:
    """Execute one run and write its record plus the resolved config."""

    config = _load(
        config_path,
        seed=seed,
        variant=variant,
        scenario=scenario,
        log_level=log_level,
        horizon_T=horizon_T,
    )
    if is_record_dir(out) and not force:
        console.print(f"[red]artifacts exist[/red] in '{out}' (use --force to overwrite)")
        raise typer.Exit(code=EXIT_RUNTIME)

    try:
        record = run_experiment(config)
        write_record(record, out, force=force)
    except ConfigError as exc:
        console.print(f"[red]Configuration error:[/red] {exc}")
        raise typer.Exit(code=EXIT_CONFIG) from exc
    except ArtifactsExistError as exc:
        console.print(f"[red]{exc}[/red]")
        raise typer.Exit(code=EXIT_RUNTIME) from exc
    except Exception as exc:
        console.print(f"[red]Run failed:[/red] {type(exc).__name__}: {exc}")
        raise typer.Exit(code=EXIT_RUNTIME) from exc

    (Path(out) / "resolved_config.json").write_text(
        json.dumps(resolve_document(config), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    eliminations = ", ".join(f"{e.old_candidate}@t={e.t}" for e in record.eliminations) or "none"
    console.print(
        f"[green]Run complete:[/green] {len(record.rows)} episodes, "
        f"final candidate {record.final_candidate}, eliminations: {eliminations}"
    )


@app.command()
def sweep(
    out: OutOption,
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    variant: VariantOption = None,
    scenario: ScenarioOption = None,
    workers: WorkersOption = None,
    force: ForceOption = False,
    resume: Annotated[
        bool, typer.Option("--resume", help="Only run cells without persisted records.")
    ] = False,
    log_level: LogLevelOption = None,
) -> None:
    """Run the T × seed grid (plus baselines) and write aggregates."""

    config = _load(
        config_path,
        seed=seed,
        variant=variant,
        scenario=scenario,
        workers=workers,
        log_level=log_level,
    )
    try:
        summary = run_sweep(config, out, workers=workers, resume=resume, force=force)
    except ArtifactsExistError as exc:
        console.print(f"[red]{exc}[/red]")
        raise typer.Exit(code=EXIT_RUNTIME) from exc
    except ConfigError as exc:
        console.print(f"[red]Configuration error:[/red] {exc}")
        raise typer.Exit(code=EXIT_CONFIG) from exc

    table = Table(title=f"Sweep {config.name} ({config.scenario}, {config.variant})")
    table.add_column("arm")
    table.add_column("slope", justify="right")
    table.add_column("r²", justify="right")
    for arm, fit in summary["fits"].items():
        if "slope" in fit:
            table.add_row(arm, f"{fit['slope']:.3f}", f"{fit['r_squared']:.3f}")
        else:
            table.add_row(arm, "n/a", fit.get("error", ""))
    console.print(table)
    if summary["failed"]:
        console.print(
            f"[yellow]{summary['failed']} cell(s) failed; see {out}/aggregates.csv[/yellow]"
        )
        raise typer.Exit(code=EXIT_RUNTIME)


@app.command()
def analyze(
    records: Annotated[Path, typer.Argument(help="Record directory or sweep output.")],
    out: OutOption,
) -> None:
    """Write plot-ready regret curves and slope fits from persisted records."""

    try:
        curves, fits = analyze_records(records, out)
    except (HarnessError, RecordError) as exc:
        console.print(f"[red]Analysis failed:[/red] {exc}")
        raise typer.Exit(code=EXIT_RUNTIME) from exc
    console.print(
        f"[green]Wrote[/green] {len(curves)} curve points and {len(fits)} fit(s) to '{out}'"
    )


@app.command()
def validate(
    records: Annotated[Path, typer.Argument(help="Record directory or sweep output.")],
    out: Annotated[
        Optional[Path], typer.Option("--out", "-o", help="Write the JSON report here.")
    ] = None,
) -> None:
    """Audit persisted records; exit 0 only when no hard violations were found."""

    report = validate_directory(records)
    text = RecordAuditor.to_json(report)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
    console.print_json(text)
    if not report["ok"]:
        raise typer.Exit(code=EXIT_RUNTIME)
