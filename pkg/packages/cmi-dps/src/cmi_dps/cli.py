"""Command-line interface for cmi_dps."""

import logging
from pathlib import Path
from typing import TYPE_CHECKING, Annotated

import typer

from cmi_dps import __version__

if TYPE_CHECKING:
    from cmi_dps.experiment.config import ExperimentConfig

app = typer.Typer(
    name="cmi_dps",
    help="CMI-guided diffusion posterior sampling experiments",
    add_completion=False,
)


def version_callback(value: bool) -> None:
    """Print version and exit."""
    if value:
        typer.echo(f"cmi_dps version: {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    version: bool | None = typer.Option(
        None,
        "--version",
        "-v",
        help="Show version and exit.",
        callback=version_callback,
        is_eager=True,
    ),
) -> None:
    """CMI-guided diffusion posterior sampling experiments."""


ConfigOption = Annotated[
    Path | None,
    typer.Option(
        "--config",
        "-c",
        help="Path to an experiment YAML file. Defaults to config/experiment.yml.",
    ),
]
VerboseOption = Annotated[
    bool,
    typer.Option("--verbose", "-v", help="Log progress at INFO level."),
]


def _setup_logging(verbose: bool) -> None:
    if verbose:
        logging.basicConfig(
            level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
        )


def _load(config: Path | None) -> "ExperimentConfig":
    from cmi_dps.exceptions import CmiDpsError
    from cmi_dps.experiment.config import load_config

    if config is not None and not config.is_file():
        typer.echo(f"Error: {config} is not a file.", err=True)
        raise typer.Exit(code=1)
    try:
        return load_config(config)
    except CmiDpsError as exc:
        typer.echo(f"Error: {config}: {exc}", err=True)
        raise typer.Exit(code=1) from exc


@app.command()
def run(
    config: ConfigOption = None,
    out: Annotated[
        Path | None,
        typer.Option(
            "--out", "-o", help="Output directory. Overrides config output_dir."
        ),
    ] = None,
    batch: Annotated[
        int | None,
        typer.Option("--batch", "-b", min=1, help="Number of seeds. Overrides config."),
    ] = None,
    base_seed: Annotated[
        int | None,
        typer.Option("--base-seed", "-s", min=0, help="First seed. Overrides config."),
    ] = None,
    workers: Annotated[
        int | None,
        typer.Option("--workers", "-w", min=1, help="Parallel seed workers."),
    ] = None,
    verbose: VerboseOption = False,
) -> None:
    """Run every configured sampler on a batch of seeded problems.

    Writes results.csv, summary.json and one JSON record per run to the
    output directory.

    Examples:

    \\b
        # Defaults: GMM prior, random mask, dps vs cmi_dps
        cmi_dps run

    \\b
        # 100 paired seeds on four workers
        cmi_dps run -c config/gmm_inpainting.yml --batch 100 --workers 4
    """
    import dataclasses

    from cmi_dps.exceptions import CmiDpsError
    from cmi_dps.experiment.runner import run_experiment

    _setup_logging(verbose)
    cfg = _load(config)
    overrides = {
        key: value
        for key, value in {
            "batch": batch,
            "base_seed": base_seed,
            "workers": workers,
        }.items()
        if value is not None
    }
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    output = out or Path(cfg.output_dir)

    typer.echo(
        f"Running {len(cfg.samplers)} sampler(s) on {cfg.batch} seed(s): "
        f"d={cfg.dimension}, N={cfg.schedule.n_steps}, "
        f"operator={cfg.operator.kind}, sigma={cfg.noise_sigma}"
    )
    try:
        summary = run_experiment(cfg, output)
    except CmiDpsError as exc:
        typer.echo(f"Error: {exc}", err=True)
        raise typer.Exit(code=1) from exc

    typer.echo(summary.summary_table())
    typer.echo(f"  Results -> {output / 'results.csv'}")
    typer.echo(f"  Summary -> {output / 'summary.json'}")
    typer.echo("Done.")


@app.command()
def diagnose(
    config: ConfigOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Check operator adjoints, score derivatives and the CMI gradient.

    Exits with code 1 if any check fails.
    """
    from cmi_dps.exceptions import CmiDpsError
    from cmi_dps.experiment.diagnostics import run_diagnostics

    _setup_logging(verbose)
    cfg = _load(config)
    try:
        report = run_diagnostics(cfg)
    except CmiDpsError as exc:
        typer.echo(f"Error: {exc}", err=True)
        raise typer.Exit(code=1) from exc

    typer.echo(report.summary())
    if not report.passed:
        raise typer.Exit(code=1)


@app.command()
def version() -> None:
    """Print the package version."""
    typer.echo(f"cmi_dps version: {__version__}")
