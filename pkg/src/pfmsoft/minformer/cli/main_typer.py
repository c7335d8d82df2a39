"""The ``minformer`` command line: train, sweep, verify and count.

Exit codes are stable: 0 success, 1 unexpected error, 2 usage or config
error, 3 I/O or data-format error, 4 numeric failure, 5 verification
failure.
"""

import logging
from collections.abc import Callable
from pathlib import Path
from typing import Annotated

import typer

from pfmsoft.minformer import __version__
from pfmsoft.minformer.config import parse_overrides
from pfmsoft.minformer.counting import (
    COMPONENTS,
    core_matrix_count,
    core_ratio,
    count_params,
    relative_size,
    stacked_vo_count,
)
from pfmsoft.minformer.data import CIFAR_SIZES, MNIST_SIZES, DataConfig, load_split
from pfmsoft.minformer.errors import ExitCode, exit_code_for
from pfmsoft.minformer.experiment import ExperimentConfig, load_experiment
from pfmsoft.minformer.report import summary_text
from pfmsoft.minformer.sweep import load_sweep, run_sweep, table_text
from pfmsoft.minformer.train import q_ratio, train
from pfmsoft.minformer.verify import run_verification

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s:%(funcName)s: %(message)s"
DATA_DIR_ENV = "MINFORMER_DATA_DIR"

app = typer.Typer(no_args_is_help=True, help="Train and compare reduced transformer variants.")

ConfigOption = Annotated[Path | None, typer.Option("--config", "-c", help="Experiment config file.")]
SetOption = Annotated[
    list[str] | None, typer.Option("--set", "-s", help="Override a config value, key=value. Repeatable.")
]
SeedOption = Annotated[int | None, typer.Option(help="Seed for initialization and shuffling.")]
DeterministicOption = Annotated[bool, typer.Option("--deterministic", help="Fixed gradient reduction order.")]
DataDirOption = Annotated[
    Path | None, typer.Option("--data-dir", envvar=DATA_DIR_ENV, help="Directory holding the dataset files.")
]
PrecisionOption = Annotated[str | None, typer.Option(help="Compute precision, f64 or f32.")]
OverwriteOption = Annotated[bool, typer.Option("--overwrite", help="Replace existing output files.")]


@app.callback()
def main(
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Log at DEBUG level.")] = False,
) -> None:
    """Configure logging for every subcommand."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)
    logger.debug("minformer %s", __version__)


def _overrides(
    assignments: list[str] | None,
    seed: int | None = None,
    deterministic: bool = False,
    data_dir: Path | None = None,
    precision: str | None = None,
) -> dict[str, str]:
    values = parse_overrides(assignments or [])
    if seed is not None:
        values["model.seed"] = values["train.seed"] = str(seed)
    if deterministic:
        values["train.deterministic"] = "true"
    if data_dir is not None:
        values["data.dir"] = str(data_dir)
    if precision is not None:
        values["train.precision"] = precision
    return values


def _run(action: Callable[[], ExitCode | None]) -> None:
    """Run a command body, turning failures into the documented exit codes."""
    try:
        code = action() or ExitCode.OK
    except Exception as error:
        code = exit_code_for(error)
        typer.echo(f"error: {error}", err=True)
        logger.debug("traceback", exc_info=True)
    if code != ExitCode.OK:
        raise typer.Exit(code=int(code))


@app.command("train")
def train_command(
    config: ConfigOption = None,
    set_: SetOption = None,
    seed: SeedOption = None,
    deterministic: DeterministicOption = False,
    out_dir: Annotated[Path | None, typer.Option(help="Run directory, default runs/<config hash>.")] = None,
    data_dir: DataDirOption = None,
    precision: PrecisionOption = None,
    overwrite: OverwriteOption = False,
) -> None:
    """Train one model; writes report.csv, summary.txt and checkpoint.minf."""

    def action() -> None:
        experiment = load_experiment(config, _overrides(set_, seed, deterministic, data_dir, precision))
        model = experiment.model
        train_ds = load_split(experiment.data, "train", model.image_shape, model.classes)
        val_ds = load_split(experiment.data, "test", model.image_shape, model.classes)
        target = out_dir or Path("runs") / experiment.hash()[:16]
        report = train(model, train_ds, val_ds, experiment.train, target, overwrite=overwrite)
        typer.echo(summary_text(report), nl=False)
        typer.echo(f"run directory: {target}")

    _run(action)


@app.command("sweep")
def sweep_command(
    sweep: Annotated[Path, typer.Option("--sweep", help="Sweep file (YAML or JSON).")],
    set_: SetOption = None,
    seed: SeedOption = None,
    deterministic: DeterministicOption = False,
    out_dir: Annotated[Path | None, typer.Option(help="Sweep directory, default runs/<sweep name>.")] = None,
    data_dir: DataDirOption = None,
    precision: PrecisionOption = None,
    jobs: Annotated[int, typer.Option(min=1, help="Variants trained in parallel processes.")] = 1,
    overwrite: OverwriteOption = False,
) -> None:
    """Train every variant of a sweep and print the comparison table."""

    def action() -> None:
        plan = load_sweep(sweep)
        target = out_dir or Path("runs") / plan.name
        rows = run_sweep(
            plan,
            target,
            overrides=_overrides(set_, seed, deterministic, data_dir, precision),
            jobs=jobs,
            overwrite=overwrite,
        )
        typer.echo(table_text(rows), nl=False)
        failed = [row.name for row in rows if row.status != "ok"]
        if failed:
            logger.warning("%d of %d variants failed: %s", len(failed), len(rows), ", ".join(failed))

    _run(action)


@app.command("verify")
def verify_command(
    seed: Annotated[int, typer.Option(help="Seed of the random instances.")] = 0,
    fault_scale: Annotated[
        float, typer.Option(hidden=True, help="Scale one analytic gradient entry; for mutation checks.")
    ] = 1.0,
) -> None:
    """Run the algebraic and gradient property suite."""

    def action() -> ExitCode:
        report = run_verification(seed=seed, fault_scale=fault_scale)
        typer.echo(report.text(), nl=False)
        return ExitCode.OK if report.passed else ExitCode.VERIFY_FAILED

    _run(action)


def _default_examples(data: DataConfig, classes: int) -> int:
    if data.train_size:
        return data.train_size
    match data.dataset:
        case "mnist":
            return MNIST_SIZES["train"]
        case "cifar10":
            return CIFAR_SIZES["train"]
        case _:
            return data.per_class * classes


def count_text(experiment: ExperimentConfig, examples: int, baseline: ExperimentConfig | None = None) -> str:
    """Parameter breakdown, P and Q of an experiment's model."""
    model = experiment.model
    counted = count_params(model)
    lines = [f"{name:<12} {counted.breakdown[name]:>12,}" for name in COMPONENTS]
    lines += [
        f"{'total P':<12} {counted.total:>12,}",
        f"{'core':<12} {core_matrix_count(model):>12,}  (attention + MLP weight matrices)",
        f"Q = K*M/P = {examples}*{model.classes}/{counted.total} = "
        f"{q_ratio(examples, model.classes, counted.total):.2f}",
    ]
    if model.heads == 1 and not model.mlp_enabled and model.encoders:
        shared, ratio = stacked_vo_count(model)
        lines.append(f"stacked W_VO: (S+1)N^2 = {shared:,}, {ratio} of 4SN^2")
    if baseline is not None:
        ratio = core_ratio(model, baseline.model)
        lines.append(f"core vs baseline: {ratio} ({float(ratio):.2%})")
        lines.append(f"total vs baseline: {relative_size(model, baseline.model):.2%}")
    return "\n".join(lines) + "\n"


@app.command("count")
def count_command(
    config: ConfigOption = None,
    set_: SetOption = None,
    examples: Annotated[int | None, typer.Option(help="Training examples K for Q; default from the data config.")] = None,
    baseline: Annotated[Path | None, typer.Option(help="Config to compare parameter counts against.")] = None,
) -> None:
    """Print the parameter breakdown, P and Q of a config without training."""

    def action() -> None:
        experiment = load_experiment(config, _overrides(set_))
        reference = load_experiment(baseline) if baseline is not None else None
        k = examples if examples is not None else _default_examples(experiment.data, experiment.model.classes)
        typer.echo(count_text(experiment, k, reference), nl=False)

    _run(action)
