"""
SGD and AdamW for MoE-LoRA layers, with expert / router parameter groups.

One optimizer step runs in a fixed order:
1. Riemannian preconditioning of the raw expert gradients
2. gradient-norm capping of the router gradient
3. per-group learning rate from the schedule
4. SGD or AdamW update (AdamW sees the preconditioned gradient)

Experts that received no gradient in a step keep their AdamW moments and step
counter untouched.
"""

import math
from collections.abc import Sequence
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import NonFiniteError
from .grad_engine import GradBundle
from .layer import MoeLoraLayer
from .precond import PrecondConfig, precondition_bundle
from .tensor_core import Matrix, frobenius_norm

GroupId = Literal["experts", "router"]
Schedule = Literal["linear-decay", "constant"]
OptimizerFamily = Literal["sgd", "adamw"]

# reference fine-tuning recipe
DEFAULT_EXPERT_LR = 3e-5
DEFAULT_ROUTER_LR = 3e-8
DEFAULT_ROUTER_CLIP = 1.0
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-6


class ParamGroup(BaseModel):
    """Learning-rate settings for the experts or the router."""

    id: GroupId
    lr0: float = Field(ge=0)
    schedule: Schedule = "linear-decay"
    max_grad_norm: float | None = Field(default=None, gt=0)


def default_groups(
    lr_experts: float = DEFAULT_EXPERT_LR,
    lr_router: float = DEFAULT_ROUTER_LR,
    clip_router: float | None = DEFAULT_ROUTER_CLIP,
    schedule: Schedule = "linear-decay",
) -> list[ParamGroup]:
    """Expert group (uncapped) and router group (capped)."""
    return [
        ParamGroup(id="experts", lr0=lr_experts, schedule=schedule),
        ParamGroup(
            id="router", lr0=lr_router, schedule=schedule, max_grad_norm=clip_router
        ),
    ]


class AdamWState(BaseModel):
    """First/second moments and step counter of one parameter."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    step: int = 0
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = DEFAULT_EPS
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, param: Matrix, **hyper: float) -> "AdamWState":
        zeros = np.zeros_like(param)
        return cls(exp_avg=zeros, exp_avg_sq=zeros.copy(), **hyper)


class OptimizerState(BaseModel):
    """Optimizer family, schedule horizon and lazily created AdamW slots."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    family: OptimizerFamily = "sgd"
    max_steps: int = Field(ge=1)
    warmup_steps: int = Field(default=0, ge=0)
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = DEFAULT_EPS
    weight_decay: float = Field(default=0.0, ge=0)
    slots: dict[str, AdamWState] = Field(default_factory=dict)

    def slot(self, key: str, param: Matrix) -> AdamWState:
        if key not in self.slots:
            self.slots[key] = AdamWState.zeros_like(
                param,
                beta1=self.beta1,
                beta2=self.beta2,
                eps=self.eps,
                weight_decay=self.weight_decay,
            )
        return self.slots[key]


class StepReport(BaseModel):
    """Norms and learning rates of one optimizer step."""

    grad_norm_experts: float
    grad_norm_router: float
    lr_experts: float
    lr_router: float


def linear_lr(lr0: float, step: int, max_steps: int, warmup_steps: int = 0) -> float:
    """Linear warmup to lr0, then linear decay to 0 at ``max_steps``.

    With no warmup this is lr0 * (1 - step / max_steps).

    Raises:
        ValueError: If step is outside [0, max_steps] or the horizon is empty
    """
    if max_steps < 1 or not 0 <= warmup_steps < max_steps:
        raise ValueError(
            f"need max_steps >= 1 and 0 <= warmup < max_steps, "
            f"got {max_steps=}, {warmup_steps=}"
        )
    if not 0 <= step <= max_steps:
        raise ValueError(f"step {step} is outside [0, {max_steps}]")
    if step < warmup_steps:
        return lr0 * step / warmup_steps
    if warmup_steps == 0:
        return lr0 * (1 - step / max_steps)
    return lr0 * (max_steps - step) / (max_steps - warmup_steps)


def clip_grad_norm(
    grads: Sequence[Matrix], cap: float
) -> tuple[list[Matrix], float]:
    """Scale a set of gradients so their global norm is at most ``cap``.

    Returns:
        The (possibly scaled) gradients and the pre-clip global norm
    """
    if cap <= 0:
        raise ValueError(f"cap must be > 0, got {cap}")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= cap:
        return list(grads), norm
    scale = cap / norm
    return [g * scale for g in grads], norm


def _check_grad(grad: Matrix, param: Matrix) -> None:
    if grad.shape != param.shape:
        raise ValueError(f"gradient {grad.shape} does not match param {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("gradient contains NaN or Inf entries")


def sgd_step(param: Matrix, grad: Matrix, lr: float) -> Matrix:
    """theta <- theta - lr * grad, in place."""
    _check_grad(grad, param)
    param -= lr * grad
    return param


def adamw_step(param: Matrix, grad: Matrix, state: AdamWState, lr: float) -> Matrix:
    """One bias-corrected Adam update followed by decoupled weight decay, in place."""
    _check_grad(grad, param)
    state.step += 1
    state.exp_avg *= state.beta1
    state.exp_avg += (1 - state.beta1) * grad
    state.exp_avg_sq *= state.beta2
    state.exp_avg_sq += (1 - state.beta2) * grad * grad
    m_hat = state.exp_avg / (1 - state.beta1**state.step)
    v_hat = state.exp_avg_sq / (1 - state.beta2**state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay:
        param *= 1.0 - lr * state.weight_decay
    if not np.all(np.isfinite(param)):
        raise NonFiniteError("AdamW update produced NaN or Inf entries")
    return param


def group_lr(group: ParamGroup, step: int, state: OptimizerState) -> float:
    if group.schedule == "constant":
        return group.lr0
    return linear_lr(group.lr0, step, state.max_steps, state.warmup_steps)


def _apply(
    param: Matrix, grad: Matrix, key: str, lr: float, state: OptimizerState
) -> None:
    if state.family == "adamw":
        adamw_step(param, grad, state.slot(key, param), lr)
    else:
        sgd_step(param, grad, lr)


def optimizer_step(
    layer: MoeLoraLayer,
    bundle: GradBundle,
    precond_cfg: PrecondConfig,
    groups: Sequence[ParamGroup],
    step: int,
    state: OptimizerState,
) -> StepReport:
    """Update the layer's experts and router in place from one gradient bundle.

    Args:
        layer: Layer to mutate; its frozen base is never touched
        bundle: Raw gradients of the current step
        precond_cfg: Riemannian preconditioning switches
        groups: One ``experts`` and one ``router`` group
        step: Zero-based update index, used by the schedule
        state: Optimizer family and AdamW slots

    Returns:
        Raw expert gradient norm, pre-clip router norm and the learning rates used
    """
    by_id = {group.id: group for group in groups}
    experts_group, router_group = by_id["experts"], by_id["router"]

    expert_norm = math.sqrt(
        sum(frobenius_norm(g) ** 2 for g in bundle.expert_matrices())
    )
    conditioned = precondition_bundle(
        layer, bundle, bundle.gates, precond_cfg, bundle.mode
    )

    router_grad = conditioned.router
    router_norm = frobenius_norm(router_grad)
    if router_group.max_grad_norm is not None:
        (router_grad,), router_norm = clip_grad_norm(
            [router_grad], router_group.max_grad_norm
        )

    lr_experts = group_lr(experts_group, step, state)
    lr_router = group_lr(router_group, step, state)

    for i in conditioned.active:
        expert = layer.experts[i]
        _apply(expert.A, conditioned.grad_a[i], f"expert{i}.A", lr_experts, state)
        _apply(expert.B, conditioned.grad_b[i], f"expert{i}.B", lr_experts, state)
    if conditioned.router_active:
        _apply(layer.router, router_grad, "router", lr_router, state)

    return StepReport(
        grad_norm_experts=expert_norm,
        grad_norm_router=router_norm,
        lr_experts=lr_experts,
        lr_router=lr_router,
    )
