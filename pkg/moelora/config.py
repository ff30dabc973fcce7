"""
Run configuration: the flat ``key = value`` file format, flag overrides and arm names.
"""

import os
from collections.abc import Mapping
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .layer import ForwardMode
from .optimizers import (
    DEFAULT_BETAS,
    DEFAULT_EPS,
    DEFAULT_EXPERT_LR,
    DEFAULT_ROUTER_CLIP,
    DEFAULT_ROUTER_LR,
    OptimizerFamily,
    Schedule,
)
from .precond import DEFAULT_DAMPING_REL, DEFAULT_GATE_FLOOR

TaskKind = Literal["lowrank-recover", "teacher-student"]
PrecondKind = Literal["none", "riemannian"]

OUTDIR_ENV = "MOELORA_OUTDIR"
DEFAULT_OUTDIR = "runs"

# synthetic-task rates; router keeps the three-orders-smaller convention
DESK_LR = {"sgd": 3e-3, "adamw": 1e-3}
ROUTER_LR_RATIO = 1e-3


class TrainConfig(BaseModel):
    """Everything one training run needs.

    Defaults follow the reference fine-tuning recipe (expert lr 3e-5, router lr
    3e-8, router norm cap 1.0, LoRA alpha 16, AdamW betas (0.9, 0.999), eps 1e-6,
    no weight decay, no warmup, linear decay) at desk-scale dimensions.
    """

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    task: TaskKind = "lowrank-recover"
    m: int = Field(default=64, ge=1)
    n: int = Field(default=64, ge=1)
    num_experts: int = Field(default=20, ge=1)
    top_k: int = Field(default=10, ge=1)
    rank: int = Field(default=4, ge=1)
    alpha: float = Field(default=16.0, gt=0)
    target_rank: int = Field(default=4, ge=0)
    tokens: int = Field(default=512, ge=1)
    batch_size: int = Field(default=32, ge=1)
    eval_tokens: int = Field(default=64, ge=1)
    init_sigma: float = Field(default=1e-3, ge=0)
    router_sigma: float = Field(default=0.02, ge=0)

    mode: ForwardMode = "standard"
    precond: PrecondKind = "riemannian"
    ideal_rescale: bool = False
    damping_rel: float = Field(default=DEFAULT_DAMPING_REL, ge=0)
    gate_floor: float = Field(default=DEFAULT_GATE_FLOOR, gt=0)

    optimizer: OptimizerFamily = "sgd"
    lr_experts: float = Field(default=DEFAULT_EXPERT_LR, ge=0)
    lr_router: float = Field(default=DEFAULT_ROUTER_LR, ge=0)
    schedule: Schedule = "linear-decay"
    warmup_steps: int = Field(default=0, ge=0)
    max_steps: int = Field(default=500, ge=0)
    eval_every: int = Field(default=10, ge=1)
    clip_router: float = Field(default=DEFAULT_ROUTER_CLIP, gt=0)
    beta1: float = Field(default=DEFAULT_BETAS[0], ge=0, lt=1)
    beta2: float = Field(default=DEFAULT_BETAS[1], ge=0, lt=1)
    eps: float = Field(default=DEFAULT_EPS, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)

    seed: int = Field(default=0, ge=0, lt=2**64)
    outdir: str = DEFAULT_OUTDIR
    timing: bool = False

    @model_validator(mode="after")
    def _check_constraints(self) -> "TrainConfig":
        if self.top_k > self.num_experts:
            raise ValueError(
                f"top_k={self.top_k} exceeds num_experts={self.num_experts}"
            )
        if self.rank > min(self.m, self.n):
            raise ValueError(f"rank={self.rank} exceeds min(m, n)")
        if self.target_rank > min(self.m, self.n):
            raise ValueError(f"target_rank={self.target_rank} exceeds min(m, n)")
        if self.batch_size > self.tokens:
            raise ValueError(f"batch_size={self.batch_size} exceeds tokens")
        if self.max_steps and self.warmup_steps >= self.max_steps:
            raise ValueError("warmup_steps must be smaller than max_steps")
        if self.ideal_rescale:
            if self.precond != "riemannian":
                raise ValueError("ideal_rescale needs precond = riemannian")
            if self.mode != "standard":
                raise ValueError("ideal_rescale needs mode = standard")
            if self.task != "lowrank-recover":
                raise ValueError("ideal_rescale needs the matrix-mode lowrank task")
        return self


def arm_name(config: TrainConfig) -> str:
    """Canonical candidate name, e.g. ``gRSGD`` or ``sqrt-AdamW``."""
    family = "SGD" if config.optimizer == "sgd" else "AdamW"
    if config.precond == "none":
        return f"sqrt-{family}" if config.mode == "sqrt-detach" else family
    if config.ideal_rescale:
        return f"igR{family}"
    prefix = "gR" if config.mode == "sqrt-detach" else "R"
    return f"{prefix}{family}"


def arm_label(config: TrainConfig) -> str:
    """Arm name with the (N, k, r) architecture suffix, e.g. ``gRSGD_20,10,4``."""
    return f"{arm_name(config)}_{config.num_experts},{config.top_k},{config.rank}"


def desk_scale(config: TrainConfig) -> TrainConfig:
    """Swap the reference learning rates for the synthetic-task ones."""
    lr = DESK_LR[config.optimizer]
    return config.model_copy(
        update={"lr_experts": lr, "lr_router": lr * ROUTER_LR_RATIO}
    )


def _normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def read_config_file(path: Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Raises:
        ConfigError: On a malformed line or a repeated key
    """
    values: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = _normalize_key(key)
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def parse_config(
    path: Path | None = None, overrides: Mapping[str, str] | None = None
) -> TrainConfig:
    """Build a TrainConfig from an optional file plus flag overrides.

    Flags win over the file. When neither sets ``outdir`` the ``MOELORA_OUTDIR``
    environment variable is used, then ``runs``.

    Raises:
        ConfigError: On unknown keys, bad values or violated constraints
    """
    values: dict[str, str] = {}
    if path is not None:
        try:
            values.update(read_config_file(path))
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
    for key, value in (overrides or {}).items():
        values[_normalize_key(key)] = value
    if "outdir" not in values:
        values["outdir"] = os.environ.get(OUTDIR_ENV, DEFAULT_OUTDIR)

    try:
        return TrainConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(config: TrainConfig) -> str:
    """Render the config in the file format; parsing it gives back an equal config."""
    lines = [f"# moelora configuration ({arm_label(config)})"]
    for key, value in config.model_dump().items():
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"
