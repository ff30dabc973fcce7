"""
Riemannian preconditioning of LoRA expert gradients.

For an expert (B, A) the r x r preconditioners are (B^T B)^-1 on the A side and
(A A^T)^-1 on the B side, so that B pA + pB A is the projection of the full
gradient onto col(B) and row(A). Matrix-mode steps can additionally divide by
the expert's gate value (ideal gate rescaling).
"""

import numpy as np
from pydantic import BaseModel, Field

from .errors import RoutingModeError, SingularMatrixError
from .grad_engine import GradBundle
from .layer import ForwardMode, LoraExpert, MoeLoraLayer
from .tensor_core import Matrix, Vector, mat_mul, small_inverse, transpose

DEFAULT_DAMPING_REL = 1e-6
DEFAULT_GATE_FLOOR = 1e-4


class PrecondConfig(BaseModel):
    """Preconditioner switches.

    Damping is relative: delta = damping_rel * max(1, trace(M) / r).
    """

    enabled: bool = True
    damping_rel: float = Field(default=DEFAULT_DAMPING_REL, ge=0)
    ideal_gate_rescale: bool = False
    gate_floor: float = Field(default=DEFAULT_GATE_FLOOR, gt=0)


def damping_for(gram: Matrix, damping_rel: float) -> float:
    """Scale-free ridge for an r x r Gram matrix."""
    rank = gram.shape[0]
    return damping_rel * max(1.0, float(np.trace(gram)) / rank)


def precondition_pair(
    expert: LoraExpert, grad_a: Matrix, grad_b: Matrix, cfg: PrecondConfig
) -> tuple[Matrix, Matrix]:
    """Apply the Riemannian preconditioners to one expert's gradients.

    Returns:
        (pA, pB) with pA = (B^T B + dB I)^-1 gA and pB = gB (A A^T + dA I)^-1

    Raises:
        SingularMatrixError: If a damped Gram matrix cannot be inverted
    """
    gram_b = mat_mul(transpose(expert.B), expert.B)
    gram_a = mat_mul(expert.A, transpose(expert.A))
    inv_b = small_inverse(gram_b, damping_for(gram_b, cfg.damping_rel))
    inv_a = small_inverse(gram_a, damping_for(gram_a, cfg.damping_rel))
    return mat_mul(inv_b, grad_a), mat_mul(grad_b, inv_a)


def ideal_gate_rescale(
    p_a: Matrix, p_b: Matrix, gate: float, floor: float = DEFAULT_GATE_FLOOR
) -> tuple[Matrix, Matrix]:
    """Divide both preconditioned gradients by max(gate, floor).

    Raises:
        ValueError: If gate is not in (0, 1]
    """
    if not 0 < gate <= 1:
        raise ValueError(f"gate must be in (0, 1], got {gate}")
    divisor = max(gate, floor)
    return p_a / divisor, p_b / divisor


def precondition_bundle(
    layer: MoeLoraLayer,
    bundle: GradBundle,
    gates: Vector | None,
    cfg: PrecondConfig,
    mode: ForwardMode,
) -> GradBundle:
    """Precondition every active expert of a bundle; the router passes through.

    Ideal gate rescaling needs the step's single gate vector and a standard-mode
    bundle (sqrt-detach already rescales through the forward).

    Raises:
        RoutingModeError: If ideal rescaling is requested without matrix-mode
            gates or together with sqrt-detach
        SingularMatrixError: If undamped preconditioning meets an expert with an
            all-zero factor
    """
    if not cfg.enabled:
        return bundle
    if cfg.damping_rel == 0 and layer.requires_damping:
        raise SingularMatrixError(
            "layer has an all-zero expert factor; set damping_rel > 0"
        )
    if cfg.ideal_gate_rescale:
        if gates is None:
            raise RoutingModeError("ideal gate rescaling is matrix-mode only")
        if mode != "standard":
            raise RoutingModeError(
                "ideal gate rescaling and sqrt-detach both rescale; pick one"
            )

    grad_a = list(bundle.grad_a)
    grad_b = list(bundle.grad_b)
    for i in bundle.active:
        p_a, p_b = precondition_pair(layer.experts[i], grad_a[i], grad_b[i], cfg)
        if cfg.ideal_gate_rescale and gates is not None:
            p_a, p_b = ideal_gate_rescale(p_a, p_b, float(gates[i]), cfg.gate_floor)
        grad_a[i], grad_b[i] = p_a, p_b
    return bundle.model_copy(update={"grad_a": grad_a, "grad_b": grad_b})
