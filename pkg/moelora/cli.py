"""
Command-line entry point: ``moelora <subcommand> [--config FILE] [--key value ...]``.

Any ``--key value`` pair that is not a subcommand option is a config override,
e.g. ``moelora train --precond none --mode sqrt-detach --max-steps 200``.
"""

import logging
import sys
from pathlib import Path
from typing import Annotated

import typer
from pydantic import BaseModel, Field

from . import __version__
from .bench import (
    RunAborted,
    ablation_arms,
    compare_runs,
    format_comparison,
    run_and_save,
    run_arms,
    run_sweep,
    sweep_cells,
    write_comparison_csv,
)
from .config import (
    TrainConfig,
    arm_label,
    arm_name,
    desk_scale,
    format_config,
    parse_config,
)
from .errors import ConfigError
from .grad_engine import LossKind
from .layer import ForwardMode, LayerShape
from .oracle import (
    VerificationRow,
    gradcheck_layer,
    gradcheck_rows,
    gradcheck_suite,
    run_projection_checks,
    write_report,
)
from .tensor_core import RngStream

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("train", "gradcheck", "verify-projection", "compare", "sweep")
FORWARD_MODES: tuple[ForwardMode, ...] = ("standard", "sqrt-detach")
GRADCHECK_LOSSES: tuple[LossKind, ...] = ("mse-token", "softmax-xent")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
OVERRIDES = {"allow_extra_args": True, "ignore_unknown_options": True}

app = typer.Typer(
    name="moelora",
    help="MoE-LoRA layers with gate-rescaled Riemannian preconditioning.",
    no_args_is_help=True,
    add_completion=False,
)


class DispatchOptions(BaseModel):
    """Subcommand options that are not part of the run configuration."""

    samples: int = Field(default=200, ge=1)
    seeds: int = Field(default=10, ge=1)
    at_step: int | None = Field(default=None, ge=1)
    grid: dict[str, list[str]] = Field(default_factory=dict)
    jobs: int = Field(default=1, ge=1)
    checkpoint: bool = True


def parse_overrides(args: list[str]) -> dict[str, str]:
    """Turn ``--key value`` / ``--key=value`` / bare ``--flag`` tokens into a dict.

    Raises:
        ConfigError: On a token that is not an option
    """
    overrides: dict[str, str] = {}
    index = 0
    while index < len(args):
        token = args[index]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            index += 1
        elif index + 1 < len(args) and not args[index + 1].startswith("--"):
            value = args[index + 1]
            index += 2
        else:
            value = "true"
            index += 1
        overrides[key.replace("-", "_")] = value
    return overrides


def parse_grid(specs: list[str]) -> dict[str, list[str]]:
    """``["weight_decay=0,1e-5", "top_k=2,10"]`` -> {key: [values]}."""
    grid: dict[str, list[str]] = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"grid entry must look like key=v1,v2; got {spec!r}")
        key, values = spec.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in TrainConfig.model_fields:
            raise ConfigError(f"unknown grid key {key!r}")
        grid[key] = [v.strip() for v in values.split(",") if v.strip()]
        if not grid[key]:
            raise ConfigError(f"grid key {key!r} has no values")
    return grid


def echo_config(config: TrainConfig) -> None:
    """Print the resolved config and save it as ``<outdir>/config.txt``."""
    text = format_config(config)
    typer.echo(text, nl=False)
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.txt").write_text(text)


def _run_train(config: TrainConfig, options: DispatchOptions) -> int:
    try:
        record = run_and_save(config, Path(config.outdir), options.checkpoint)
    except RunAborted as e:
        logger.error("run aborted: %s", e)
        return 1
    final = record.rows[-1] if record.rows else None
    if final is not None:
        typer.echo(
            f"{arm_label(config)} seed {config.seed}: train loss "
            f"{final.train_loss:.6e}, eval loss {final.eval_loss:.6e} "
            f"after {final.step} steps"
        )
    return 0


def _run_gradcheck(config: TrainConfig, options: DispatchOptions) -> int:
    shape = LayerShape(
        m=config.m,
        n=config.n,
        num_experts=config.num_experts,
        top_k=config.top_k,
        rank=config.rank,
        alpha=config.alpha,
    )
    layer = gradcheck_layer(shape, RngStream(seed=config.seed))
    reports = []
    for mode in FORWARD_MODES:
        for loss_kind in GRADCHECK_LOSSES:
            report = gradcheck_suite(
                layer, mode, loss_kind, samples=options.samples, seed=config.seed
            )
            for result in report.classes:
                logger.info(
                    "gradcheck %s/%s %s: %d checked, %d excluded, max rel %.3e, "
                    "gap/allowance %.3f",
                    mode,
                    loss_kind,
                    result.name,
                    result.checked,
                    result.excluded,
                    result.max_rel_error,
                    result.max_error_ratio,
                )
            reports.append(report)
    return _emit_rows(gradcheck_rows(reports), Path(config.outdir), "gradcheck")


def _run_verify(config: TrainConfig, options: DispatchOptions) -> int:
    rows = run_projection_checks(seed=config.seed)
    return _emit_rows(rows, Path(config.outdir), "verify_projection")


def _emit_rows(rows: list[VerificationRow], outdir: Path, stem: str) -> int:
    outdir.mkdir(parents=True, exist_ok=True)
    text_path = outdir / f"{stem}.txt"
    write_report(rows, outdir / f"{stem}.csv", text_path)
    typer.echo(text_path.read_text(), nl=False)
    return 0 if all(row.passed for row in rows) else 1


def _run_compare(config: TrainConfig, options: DispatchOptions) -> int:
    arms = ablation_arms(config)
    seeds = range(config.seed, config.seed + options.seeds)
    outdir = Path(config.outdir)
    try:
        records = run_arms(arms, seeds, outdir)
    except RunAborted as e:
        logger.error("comparison aborted: %s", e)
        return 1
    at_step = options.at_step or config.max_steps
    table = compare_runs(records, at_step, baseline=arm_name(arms[0]))
    write_comparison_csv(table, outdir / "compare.csv")
    plain, sqrt_plain, riemannian, rescaled = (arm_name(arm) for arm in arms)
    typer.echo(format_comparison(table))
    typer.echo(
        f"improvement {rescaled} over {riemannian}: "
        f"{table.improvement(riemannian, rescaled):.6e}"
    )
    typer.echo(
        f"improvement {sqrt_plain} over {plain}: "
        f"{table.improvement(plain, sqrt_plain):.6e}"
    )
    return 0


def _run_sweep(config: TrainConfig, options: DispatchOptions) -> int:
    if not options.grid:
        raise ConfigError("sweep needs at least one --grid key=v1,v2")
    cells = sweep_cells(config, options.grid)
    summary = run_sweep(cells, Path(config.outdir), jobs=options.jobs)
    for row in summary:
        typer.echo(f"{row['cell']}: final train loss {row['final_train_loss']}")
    return 1 if any(row["aborted"] for row in summary) else 0


_HANDLERS = {
    "train": _run_train,
    "gradcheck": _run_gradcheck,
    "verify-projection": _run_verify,
    "compare": _run_compare,
    "sweep": _run_sweep,
}


def dispatch(
    subcommand: str, config: TrainConfig, options: DispatchOptions | None = None
) -> int:
    """Run one subcommand and return its exit status (0 iff every check passed).

    Raises:
        ConfigError: If the subcommand is unknown or its options are invalid
    """
    handler = _HANDLERS.get(subcommand)
    if handler is None:
        raise ConfigError(
            f"unknown subcommand {subcommand!r}; expected one of {SUBCOMMANDS}"
        )
    return handler(config, options or DispatchOptions())


def _resolve(
    ctx: typer.Context, config_path: Path | None, reference_lr: bool = True
) -> TrainConfig:
    config = parse_config(config_path, parse_overrides(list(ctx.args)))
    if not reference_lr:
        config = desk_scale(config)
    echo_config(config)
    return config


def _finish(subcommand: str, config: TrainConfig, options: DispatchOptions) -> None:
    try:
        status = dispatch(subcommand, config, options)
    except ConfigError as e:
        typer.echo(f"error: {e}", err=True)
        status = 2
    except ValueError as e:
        logger.error("%s failed: %s", subcommand, e)
        status = 1
    raise typer.Exit(code=status)


def _load(
    ctx: typer.Context, config_path: Path | None, reference_lr: bool = True
) -> TrainConfig:
    try:
        return _resolve(ctx, config_path, reference_lr)
    except ConfigError as e:
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(code=2) from e


ConfigOption = Annotated[
    Path | None, typer.Option("--config", "-c", help="key = value config file")
]
ReferenceLrOption = Annotated[
    bool,
    typer.Option(
        "--reference-lr", help="Keep the reference learning rates instead of desk scale"
    ),
]


@app.callback()
def main_callback(
    log_level: Annotated[str, typer.Option(help="Logging level")] = "INFO",
) -> None:
    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.INFO),
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


@app.command(context_settings=OVERRIDES)
def train(
    ctx: typer.Context,
    config_path: ConfigOption = None,
    checkpoint: Annotated[bool, typer.Option(help="Write the final layer")] = True,
) -> None:
    """Train one arm and write <outdir>/<arm>_<seed>.csv."""
    config = _load(ctx, config_path)
    _finish("train", config, DispatchOptions(checkpoint=checkpoint))


@app.command(context_settings=OVERRIDES)
def gradcheck(
    ctx: typer.Context,
    config_path: ConfigOption = None,
    samples: Annotated[int, typer.Option(help="Coordinates per class")] = 200,
) -> None:
    """Finite-difference check of expert and router gradients, both modes."""
    config = _load(ctx, config_path)
    _finish("gradcheck", config, DispatchOptions(samples=samples))


@app.command("verify-projection", context_settings=OVERRIDES)
def verify_projection(ctx: typer.Context, config_path: ConfigOption = None) -> None:
    """Projection identities, gate-rescaling routes and the balanced-gate ratio."""
    config = _load(ctx, config_path)
    _finish("verify-projection", config, DispatchOptions())


@app.command(context_settings=OVERRIDES)
def compare(
    ctx: typer.Context,
    config_path: ConfigOption = None,
    seeds: Annotated[int, typer.Option(help="Paired seeds per arm")] = 10,
    at_step: Annotated[
        int | None, typer.Option(help="Step to compare (default: last)")
    ] = None,
    reference_lr: ReferenceLrOption = False,
) -> None:
    """Four-arm ablation: plain, sqrt-detach, preconditioned, gate-rescaled."""
    config = _load(ctx, config_path, reference_lr)
    _finish("compare", config, DispatchOptions(seeds=seeds, at_step=at_step))


@app.command(context_settings=OVERRIDES)
def sweep(
    ctx: typer.Context,
    config_path: ConfigOption = None,
    grid: Annotated[
        list[str] | None, typer.Option(help="key=v1,v2 (repeatable)")
    ] = None,
    jobs: Annotated[int, typer.Option(help="Cells run in parallel")] = 1,
    reference_lr: ReferenceLrOption = False,
) -> None:
    """Cartesian sweep over config keys with one CSV per cell plus a summary."""
    config = _load(ctx, config_path, reference_lr)
    try:
        if not grid:
            raise ConfigError("sweep needs at least one --grid key=v1,v2")
        options = DispatchOptions(grid=parse_grid(grid), jobs=jobs)
    except ConfigError as e:
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(code=2) from e
    _finish("sweep", config, options)


@app.command()
def version() -> None:
    """Print the package version."""
    typer.echo(__version__)


def main() -> None:
    app()


if __name__ == "__main__":
    main()
