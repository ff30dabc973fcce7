"""
Synthetic training tasks, the training loop and run comparison.

Two tasks are provided:

- ``lowrank-recover``: fit X = W + sum g_i s B_i A_i to a target W + D, where D is
  a planted rank-R matrix of unit Frobenius norm. The gates come from routing
  the mean-pooled probe (the identity's columns), so each step has one gate
  vector and the loss is 1/2 ||X - T||_F^2.
- ``teacher-student``: inputs come from N Gaussian clusters, targets are the
  outputs of a frozen teacher layer whose router favours the cluster-matched
  expert. The student shares the teacher's base weight and is trained on
  minibatches with the token-mean squared error.
"""

import csv
import itertools
import logging
import math
import time
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from .config import TaskKind, TrainConfig, arm_name
from .errors import DimensionMismatchError, MoeLoraError, NonFiniteError
from .grad_engine import LossKind, backward, loss_and_grad
from .layer import (
    LayerShape,
    LoraExpert,
    MoeLoraLayer,
    RoutingKind,
    forward,
    forward_standard,
    init_layer,
    save_checkpoint,
)
from .optimizers import OptimizerState, StepReport, default_groups, optimizer_step
from .precond import PrecondConfig
from .tensor_core import Matrix, RngStream, frobenius_norm, seeded_gaussian

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "step",
    "train_loss",
    "eval_loss",
    "grad_norm_experts",
    "grad_norm_router",
    "lr_experts",
    "lr_router",
    "wall_ms",
)
SUMMARY_COLUMNS = (
    "cell",
    "arm",
    "seed",
    "steps",
    "final_train_loss",
    "final_eval_loss",
    "aborted",
)

TEACHER_SIGMA = 0.1
CLUSTER_SPREAD = 0.3
ROUTER_GAIN = 4.0
BATCH_STREAM = 1


class Task(BaseModel):
    """A synthetic problem plus the student layer it starts from."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: TaskKind
    seed: int
    layer: MoeLoraLayer
    inputs: np.ndarray
    targets: np.ndarray
    eval_inputs: np.ndarray
    eval_targets: np.ndarray
    teacher: MoeLoraLayer | None = None
    clusters: np.ndarray | None = None

    @property
    def loss_kind(self) -> LossKind:
        return "mse-matrix" if self.kind == "lowrank-recover" else "mse-token"

    @property
    def routing(self) -> RoutingKind:
        return "pooled" if self.kind == "lowrank-recover" else "token"


class StepMetrics(BaseModel):
    step: int
    train_loss: float
    eval_loss: float
    grad_norm_experts: float
    grad_norm_router: float
    lr_experts: float
    lr_router: float
    wall_ms: float = 0.0


class RunRecord(BaseModel):
    """Per-step metrics of one run; ``aborted`` holds the diagnostic of a failed run."""

    arm: str
    seed: int
    rows: list[StepMetrics] = []
    aborted: str | None = None

    def loss_at(
        self, step: int, column: Literal["train_loss", "eval_loss"] = "train_loss"
    ) -> float:
        """Loss recorded at ``step``.

        Raises:
            ValueError: If the record does not reach ``step``
        """
        if not 1 <= step <= len(self.rows):
            raise ValueError(
                f"step {step} is beyond the record of {self.arm}/{self.seed} "
                f"({len(self.rows)} steps)"
            )
        return float(getattr(self.rows[step - 1], column))

    @property
    def final_loss(self) -> float:
        return self.rows[-1].train_loss if self.rows else math.nan


class RunAborted(MoeLoraError):
    """Training step failed (NaN/Inf or singular preconditioner).

    ``record`` holds the rows up to the failure; the cause is chained.
    """

    def __init__(self, message: str, record: RunRecord) -> None:
        super().__init__(message)
        self.record = record


class ComparisonRow(BaseModel):
    arm: str
    seed: int
    loss: float
    delta: float


class ArmSummary(BaseModel):
    arm: str
    median_loss: float
    median_delta: float
    runs: int


class ComparisonTable(BaseModel):
    step: int
    baseline: str
    rows: list[ComparisonRow]
    summary: list[ArmSummary]

    def median(self, arm: str) -> float:
        for entry in self.summary:
            if entry.arm == arm:
                return entry.median_loss
        raise KeyError(arm)

    def improvement(self, baseline: str, variant: str) -> float:
        """Median loss of ``baseline`` minus median loss of ``variant``."""
        return self.median(baseline) - self.median(variant)


def _task_shape(
    m: int, n: int, num_experts: int, top_k: int, rank: int, alpha: float
) -> LayerShape:
    return LayerShape(
        m=m, n=n, num_experts=num_experts, top_k=top_k, rank=rank, alpha=alpha
    )


def gen_lowrank_task(
    m: int,
    n: int,
    num_experts: int,
    top_k: int,
    rank: int,
    target_rank: int,
    seed: int,
    alpha: float = 16.0,
    init_sigma: float = 1e-3,
    router_sigma: float = 0.02,
    eval_tokens: int = 64,
) -> Task:
    """Low-rank recovery: target T = W + D with rank(D) = R and ||D||_F = 1.

    Raises:
        DimensionMismatchError: If R > min(m, n) or R > N * r
    """
    if target_rank > min(m, n) or target_rank > num_experts * rank:
        raise DimensionMismatchError(
            f"target rank {target_rank} must be <= min(m, n) and <= N * r"
        )
    rng = RngStream(seed=seed)
    shape = _task_shape(m, n, num_experts, top_k, rank, alpha)
    layer = init_layer(shape, rng, init_sigma=init_sigma, router_sigma=router_sigma)

    if target_rank == 0:
        delta = np.zeros((m, n))
    else:
        u = seeded_gaussian(rng, m, target_rank, 1.0)
        v = seeded_gaussian(rng, target_rank, n, 1.0)
        delta = u @ v
        delta /= frobenius_norm(delta)
    target = layer.base + delta

    eval_inputs = seeded_gaussian(rng, n, eval_tokens, 1.0)
    return Task(
        kind="lowrank-recover",
        seed=seed,
        layer=layer,
        inputs=np.eye(n),
        targets=target,
        eval_inputs=eval_inputs,
        eval_targets=target @ eval_inputs,
    )


def _cluster_tokens(
    rng: RngStream, centers: Matrix, count: int, spread: float
) -> tuple[Matrix, np.ndarray]:
    labels = np.floor(rng.uniform(count) * centers.shape[0]).astype(int)
    noise = seeded_gaussian(rng, centers.shape[1], count, spread)
    return centers[labels].T + noise, labels


def gate_entropy(layer: MoeLoraLayer, inputs: Matrix) -> float:
    """Mean Shannon entropy (nats) of the per-token gate vectors."""
    _, cache = forward_standard(layer, inputs)
    gates = cache.gates
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(gates > 0, -gates * np.log(gates), 0.0)
    return float(terms.sum(axis=0).mean())


def gen_teacher_task(
    m: int,
    n: int,
    num_experts: int,
    top_k: int,
    rank: int,
    tokens: int,
    seed: int,
    alpha: float = 16.0,
    init_sigma: float = 1e-3,
    router_sigma: float = 0.02,
    eval_tokens: int = 64,
) -> Task:
    """Teacher-student regression with a planted cluster-aligned teacher router.

    Raises:
        ValueError: If tokens < 1
    """
    if tokens < 1:
        raise ValueError(f"tokens must be >= 1, got {tokens}")
    rng = RngStream(seed=seed)
    shape = _task_shape(m, n, num_experts, top_k, rank, alpha)
    student = init_layer(shape, rng, init_sigma=init_sigma, router_sigma=router_sigma)

    centers = seeded_gaussian(rng, num_experts, n, 1.0)
    experts = [
        LoraExpert(
            B=seeded_gaussian(rng, m, rank, TEACHER_SIGMA),
            A=seeded_gaussian(rng, rank, n, TEACHER_SIGMA),
        )
        for _ in range(num_experts)
    ]
    teacher = MoeLoraLayer(
        base=student.base,
        experts=experts,
        router=(ROUTER_GAIN / n) * centers,
        shape=shape,
    )

    inputs, clusters = _cluster_tokens(rng, centers, tokens, CLUSTER_SPREAD)
    eval_inputs, _ = _cluster_tokens(rng, centers, eval_tokens, CLUSTER_SPREAD)
    targets, _ = forward_standard(teacher, inputs)
    eval_targets, _ = forward_standard(teacher, eval_inputs)
    return Task(
        kind="teacher-student",
        seed=seed,
        layer=student,
        inputs=inputs,
        targets=targets,
        eval_inputs=eval_inputs,
        eval_targets=eval_targets,
        teacher=teacher,
        clusters=clusters,
    )


def task_for(config: TrainConfig) -> Task:
    """Generate the task a config describes; arms sharing a seed share the task."""
    if config.task == "lowrank-recover":
        return gen_lowrank_task(
            config.m,
            config.n,
            config.num_experts,
            config.top_k,
            config.rank,
            config.target_rank,
            config.seed,
            alpha=config.alpha,
            init_sigma=config.init_sigma,
            router_sigma=config.router_sigma,
            eval_tokens=config.eval_tokens,
        )
    return gen_teacher_task(
        config.m,
        config.n,
        config.num_experts,
        config.top_k,
        config.rank,
        config.tokens,
        config.seed,
        alpha=config.alpha,
        init_sigma=config.init_sigma,
        router_sigma=config.router_sigma,
        eval_tokens=config.eval_tokens,
    )


def evaluate(task: Task, layer: MoeLoraLayer) -> float:
    """Held-out token-mean squared error with the standard forward."""
    outputs, _ = forward_standard(layer, task.eval_inputs, routing=task.routing)
    loss, _ = loss_and_grad("mse-token", outputs, task.eval_targets)
    return loss


def _batch(task: Task, config: TrainConfig, rng: RngStream) -> tuple[Matrix, Matrix]:
    if task.kind == "lowrank-recover":
        return task.inputs, task.targets
    index = np.floor(rng.uniform(config.batch_size) * task.inputs.shape[1]).astype(int)
    return task.inputs[:, index], task.targets[:, index]


def precond_config(config: TrainConfig) -> PrecondConfig:
    return PrecondConfig(
        enabled=config.precond == "riemannian",
        damping_rel=config.damping_rel,
        ideal_gate_rescale=config.ideal_rescale,
        gate_floor=config.gate_floor,
    )


def train_loop(
    task: Task,
    config: TrainConfig,
    on_step: Callable[[StepMetrics], None] | None = None,
) -> tuple[RunRecord, MoeLoraLayer]:
    """Train a copy of ``task.layer`` for ``config.max_steps`` updates.

    Row ``t`` holds the loss of the forward that produced update ``t`` and the
    held-out loss after it (refreshed every ``eval_every`` steps and at the last
    step, carried forward in between).

    Returns:
        The run record and the trained layer

    Raises:
        RunAborted: If a loss, gradient or update turns NaN/Inf, or a step
            fails with any other MoeLoraError
    """
    layer = task.layer.clone()
    record = RunRecord(arm=arm_name(config), seed=config.seed)
    if config.max_steps == 0:
        return record, layer

    precond = precond_config(config)
    groups = default_groups(
        config.lr_experts, config.lr_router, config.clip_router, config.schedule
    )
    state = OptimizerState(
        family=config.optimizer,
        max_steps=config.max_steps,
        warmup_steps=config.warmup_steps,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    batches = RngStream(seed=config.seed).spawn(BATCH_STREAM)
    eval_loss = evaluate(task, layer)
    logger.info(
        "training %s seed=%d on %s for %d steps",
        record.arm,
        config.seed,
        task.kind,
        config.max_steps,
    )

    for step in range(1, config.max_steps + 1):
        started = time.perf_counter()
        try:
            inputs, targets = _batch(task, config, batches)
            outputs, cache = forward(
                layer, inputs, mode=config.mode, routing=task.routing
            )
            loss, upstream = loss_and_grad(task.loss_kind, outputs, targets)
            if not math.isfinite(loss):
                raise NonFiniteError(f"loss is {loss}")
            bundle = backward(cache, upstream, config.mode)
            report: StepReport = optimizer_step(
                layer, bundle, precond, groups, step - 1, state
            )
            if step % config.eval_every == 0 or step == config.max_steps:
                eval_loss = evaluate(task, layer)
        except MoeLoraError as e:
            last = record.rows[-1].train_loss if record.rows else math.nan
            record.aborted = f"step {step}: {e} (last finite train loss {last:.6g})"
            logger.error(
                "%s seed=%d aborted at %s", record.arm, config.seed, record.aborted
            )
            raise RunAborted(record.aborted, record) from e

        elapsed = (time.perf_counter() - started) * 1000 if config.timing else 0.0
        row = StepMetrics(
            step=step,
            train_loss=loss,
            eval_loss=eval_loss,
            grad_norm_experts=report.grad_norm_experts,
            grad_norm_router=report.grad_norm_router,
            lr_experts=report.lr_experts,
            lr_router=report.lr_router,
            wall_ms=elapsed,
        )
        record.rows.append(row)
        if on_step is not None:
            on_step(row)
        if step % config.eval_every == 0:
            logger.debug(
                "%s step %d train %.6g eval %.6g", record.arm, step, loss, eval_loss
            )

    logger.info(
        "%s seed=%d final train loss %.6g eval loss %.6g",
        record.arm,
        config.seed,
        record.rows[-1].train_loss,
        record.rows[-1].eval_loss,
    )
    return record, layer


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def write_run_csv(record: RunRecord, path: Path) -> None:
    """One row per step with the fixed column order, 17 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in record.rows:
            writer.writerow(
                [
                    row.step,
                    _fmt(row.train_loss),
                    _fmt(row.eval_loss),
                    _fmt(row.grad_norm_experts),
                    _fmt(row.grad_norm_router),
                    _fmt(row.lr_experts),
                    _fmt(row.lr_router),
                    _fmt(row.wall_ms),
                ]
            )


def run_path(outdir: Path, record: RunRecord) -> Path:
    return Path(outdir) / f"{record.arm}_{record.seed}.csv"


def run_and_save(
    config: TrainConfig, outdir: Path, checkpoint: bool = True
) -> RunRecord:
    """Generate the task, train, and write ``<arm>_<seed>.csv`` (plus checkpoint).

    A run that aborts still writes the rows it produced before re-raising.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    task = task_for(config)
    try:
        record, layer = train_loop(task, config)
    except RunAborted as e:
        write_run_csv(e.record, run_path(outdir, e.record))
        raise
    write_run_csv(record, run_path(outdir, record))
    if checkpoint:
        save_checkpoint(layer, run_path(outdir, record).with_suffix(".ckpt"))
    return record


def compare_runs(
    records: Sequence[RunRecord], at_step: int, baseline: str | None = None
) -> ComparisonTable:
    """Loss of every run at ``at_step``, deltas against a baseline arm, medians per arm.

    Deltas pair runs by seed; a seed without a baseline run is compared with the
    baseline's median.

    Raises:
        ValueError: If no records are given or ``at_step`` is beyond a record
    """
    if not records:
        raise ValueError("compare_runs needs at least one record")
    baseline = baseline or records[0].arm
    losses = [(r.arm, r.seed, r.loss_at(at_step)) for r in records]
    base_by_seed = {seed: loss for arm, seed, loss in losses if arm == baseline}
    if not base_by_seed:
        raise ValueError(f"no run of baseline arm {baseline!r}")
    base_median = float(np.median(list(base_by_seed.values())))

    rows = [
        ComparisonRow(
            arm=arm,
            seed=seed,
            loss=loss,
            delta=loss - base_by_seed.get(seed, base_median),
        )
        for arm, seed, loss in losses
    ]
    arms = list(dict.fromkeys(row.arm for row in rows))
    summary = []
    for arm in arms:
        mine = [row for row in rows if row.arm == arm]
        summary.append(
            ArmSummary(
                arm=arm,
                median_loss=float(np.median([row.loss for row in mine])),
                median_delta=float(np.median([row.delta for row in mine])),
                runs=len(mine),
            )
        )
    return ComparisonTable(step=at_step, baseline=baseline, rows=rows, summary=summary)


def format_comparison(table: ComparisonTable) -> str:
    lines = [
        f"loss at step {table.step} (baseline {table.baseline})",
        f"{'arm':<14} {'runs':>4} {'median loss':>14} {'median delta':>14}",
    ]
    for entry in table.summary:
        lines.append(
            f"{entry.arm:<14} {entry.runs:>4} {entry.median_loss:>14.6e} "
            f"{entry.median_delta:>14.6e}"
        )
    return "\n".join(lines)


def write_comparison_csv(table: ComparisonTable, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["arm", "seed", "step", "loss", "delta"])
        for row in table.rows:
            writer.writerow(
                [row.arm, row.seed, table.step, _fmt(row.loss), _fmt(row.delta)]
            )


def ablation_arms(config: TrainConfig) -> list[TrainConfig]:
    """Plain, sqrt-detach, preconditioned and gate-rescaled preconditioned arms."""
    arms = []
    for precond, mode in (
        ("none", "standard"),
        ("none", "sqrt-detach"),
        ("riemannian", "standard"),
        ("riemannian", "sqrt-detach"),
    ):
        arms.append(
            config.model_copy(
                update={"precond": precond, "mode": mode, "ideal_rescale": False}
            )
        )
    return arms


def run_arms(
    configs: Sequence[TrainConfig], seeds: Sequence[int], outdir: Path
) -> list[RunRecord]:
    """Every arm on every seed, in arm-major order."""
    records = []
    for config in configs:
        for seed in seeds:
            seeded = config.model_copy(update={"seed": seed})
            records.append(run_and_save(seeded, outdir, checkpoint=False))
    return records


def sweep_cells(
    config: TrainConfig, grid: Mapping[str, Sequence[str]]
) -> list[tuple[str, TrainConfig]]:
    """Cartesian product of the grid applied to ``config``.

    Cell names are ``<arm>_<key1>-<val1>_<key2>-<val2>...``.
    """
    keys = list(grid)
    base = config.model_dump()
    cells = []
    for values in itertools.product(*(grid[key] for key in keys)):
        overrides = dict(zip(keys, values, strict=True))
        cell = TrainConfig.model_validate({**base, **overrides})
        suffix = "_".join(f"{k}-{v}" for k, v in overrides.items())
        name = f"{arm_name(cell)}_{suffix}" if suffix else arm_name(cell)
        cells.append((name, cell))
    return cells


def run_cell(name: str, config: TrainConfig, outdir: Path) -> dict[str, str]:
    """Train one sweep cell into ``<outdir>/<name>.csv``; returns its summary row."""
    task = task_for(config)
    aborted = ""
    try:
        record, _ = train_loop(task, config)
    except RunAborted as e:
        record, aborted = e.record, e.record.aborted or "aborted"
    write_run_csv(record, Path(outdir) / f"{name}.csv")
    final = record.rows[-1] if record.rows else None
    return {
        "cell": name,
        "arm": record.arm,
        "seed": str(config.seed),
        "steps": str(len(record.rows)),
        "final_train_loss": _fmt(final.train_loss) if final else "",
        "final_eval_loss": _fmt(final.eval_loss) if final else "",
        "aborted": aborted,
    }


def run_sweep(
    cells: Sequence[tuple[str, TrainConfig]], outdir: Path, jobs: int = 1
) -> list[dict[str, str]]:
    """Run all cells (in a process pool when ``jobs > 1``) and write the summary CSV."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, name, cfg, outdir) for name, cfg in cells]
            summary = [future.result() for future in futures]
    else:
        summary = [run_cell(name, cfg, outdir) for name, cfg in cells]

    with open(outdir / "sweep_summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(summary)
    logger.info("sweep finished: %d cells in %s", len(cells), outdir)
    return summary
