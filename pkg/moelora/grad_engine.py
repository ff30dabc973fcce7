"""
Hand-derived backward pass for the MoE-LoRA layer.

Expert gradients follow the chain rule of the gated forward: in standard mode
each token contributes with its gate g, in sqrt-detach mode with sqrt(g). The
router gradient goes through the top-k restricted softmax with the selection
held fixed, and is the same in both modes.
"""

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import DimensionMismatchError, RoutingModeError
from .layer import ForwardCache, ForwardMode, MoeLoraLayer, forward_standard
from .tensor_core import Matrix, ensure_finite, mat_mul, transpose

LossKind = Literal["mse-matrix", "mse-token", "softmax-xent"]


class GradBundle(BaseModel):
    """Gradients of one step.

    ``grad_a[i]`` / ``grad_b[i]`` are zero for experts outside ``active``.
    ``gates`` is only set for matrix-mode steps, and
    ``router_active`` is False when the caller supplied the gates.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    grad_a: list[np.ndarray]
    grad_b: list[np.ndarray]
    router: np.ndarray
    active: tuple[int, ...]
    mode: ForwardMode
    router_active: bool = False
    gates: np.ndarray | None = None

    def expert_matrices(self) -> list[np.ndarray]:
        return [m for i in self.active for m in (self.grad_a[i], self.grad_b[i])]


def _check_upstream(cache: ForwardCache, upstream: Matrix) -> Matrix:
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = (cache.layer.shape.m, cache.num_tokens)
    if upstream.shape != expected:
        raise DimensionMismatchError(
            f"output gradient must be {expected}, got {upstream.shape}"
        )
    return ensure_finite(upstream, "output gradient")


def backward_expert(
    cache: ForwardCache, upstream: Matrix, mode: ForwardMode | None = None
) -> GradBundle:
    """Gradients of every expert's A and B given dL/dY.

    Per token t: gB_i += c * s * d_t (A_i x_t)^T and gA_i += c * s * B_i^T d_t x_t^T
    with c = g_it (standard) or sqrt(g_it) (sqrt-detach).

    Raises:
        DimensionMismatchError: If ``upstream`` does not match the cached tokens
    """
    upstream = _check_upstream(cache, upstream)
    mode = mode or cache.mode
    layer = cache.layer
    s = layer.scaling
    coefficients = cache.gates if mode == "standard" else np.sqrt(cache.gates)

    grad_a = [np.zeros_like(expert.A) for expert in layer.experts]
    grad_b = [np.zeros_like(expert.B) for expert in layer.experts]
    for i in cache.active_experts:
        weighted = upstream * coefficients[i]
        back = mat_mul(transpose(layer.experts[i].B), weighted)
        grad_b[i] = s * mat_mul(weighted, transpose(cache.projected[i]))
        grad_a[i] = s * mat_mul(back, transpose(cache.inputs))
        ensure_finite(grad_a[i], f"expert {i} A gradient")
        ensure_finite(grad_b[i], f"expert {i} B gradient")

    return GradBundle(
        grad_a=grad_a,
        grad_b=grad_b,
        router=np.zeros_like(layer.router),
        active=cache.active_experts,
        mode=mode,
        gates=cache.gate_vector() if cache.matrix_mode else None,
    )


def backward_router(
    cache: ForwardCache, upstream: Matrix, mode: ForwardMode | None = None
) -> Matrix:
    """Router gradient through the top-k restricted softmax.

    dL/dg_i = d_t . e_it, then dl_j = g_j (dL/dg_j - sum_i g_i dL/dg_i) over the
    selected set. The sqrt-detach gate path (g - sqrt(g)^) e^ has derivative e
    in g, so ``mode`` does not change the result.
    """
    upstream = _check_upstream(cache, upstream)
    layer = cache.layer
    grad = np.zeros_like(layer.router)
    if cache.fixed_gates:
        return grad

    gate_grads = np.zeros((layer.shape.num_experts, cache.num_tokens))
    for i in cache.active_experts:
        gate_grads[i] = np.sum(upstream * cache.contributions[i], axis=0)

    token_route = np.asarray(cache.token_route)
    for index, route in enumerate(cache.routes):
        per_route = gate_grads[:, token_route == index].sum(axis=1)
        selected = list(route.selected)
        g = route.gates[selected]
        dg = per_route[selected]
        logit_grad = np.zeros(layer.shape.num_experts)
        logit_grad[selected] = g * (dg - g @ dg)
        grad += np.outer(logit_grad, cache.route_inputs[:, index])
    return ensure_finite(grad, "router gradient")


def full_matrix_grad(cache: ForwardCache, upstream: Matrix) -> Matrix:
    """Gradient with respect to the effective weight, dL/dX = dY X_in^T.

    Only defined when a single gate vector covers the whole step.

    Raises:
        RoutingModeError: For token-routed caches
    """
    if not cache.matrix_mode:
        raise RoutingModeError("full matrix gradient needs matrix-mode gates")
    upstream = _check_upstream(cache, upstream)
    return mat_mul(upstream, transpose(cache.inputs))


def backward(
    cache: ForwardCache, upstream: Matrix, mode: ForwardMode | None = None
) -> GradBundle:
    """Expert and router gradients in one bundle."""
    bundle = backward_expert(cache, upstream, mode)
    bundle.router = backward_router(cache, upstream, mode)
    bundle.router_active = not cache.fixed_gates
    return bundle


def loss_and_grad(
    kind: LossKind, prediction: Matrix, target: np.ndarray
) -> tuple[float, Matrix]:
    """Loss value and dL/dprediction.

    Args:
        kind: ``mse-matrix`` (1/2 ||P - T||_F^2), ``mse-token`` (token mean of
            1/2 ||p_t - t_t||^2) or ``softmax-xent`` (token mean cross-entropy,
            columns of P are logits)
        prediction: m x T prediction
        target: m x T target, or T integer labels for ``softmax-xent``

    Raises:
        DimensionMismatchError: On shape mismatch
        ValueError: On a label outside [0, m)
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    if kind == "softmax-xent":
        labels = np.asarray(target)
        rows, tokens = prediction.shape
        if labels.shape != (tokens,):
            raise DimensionMismatchError(f"expected {tokens} labels")
        if np.any(labels < 0) or np.any(labels >= rows):
            raise ValueError(f"labels must be in [0, {rows})")
        shifted = prediction - prediction.max(axis=0)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=0))
        columns = np.arange(tokens)
        loss = -float(np.mean(log_probs[labels, columns]))
        grad = np.exp(log_probs)
        grad[labels, columns] -= 1.0
        return loss, grad / tokens

    target = np.asarray(target, dtype=np.float64)
    if target.shape != prediction.shape:
        raise DimensionMismatchError(
            f"target {target.shape} does not match prediction {prediction.shape}"
        )
    diff = prediction - target
    loss = 0.5 * float(np.sum(diff * diff))
    if kind == "mse-matrix":
        return loss, diff
    tokens = prediction.shape[1]
    return loss / tokens, diff / tokens


def detached_forward(
    layer: MoeLoraLayer, inputs: Matrix, anchor: ForwardCache
) -> Matrix:
    """Evaluate the stop-gradient objective with constants frozen at ``anchor``.

    For a standard-mode anchor this is the plain forward. For sqrt-detach it is
    W x + sum_i sqrt(g0_i) e_i(theta) + (g_i(theta) - sqrt(g0_i)) e0_i, where the
    0-subscripted values come from the anchor. Its derivative at the anchor is
    exactly what backward computes in sqrt-detach mode.
    """
    if anchor.fixed_gates:
        outputs, current = forward_standard(layer, inputs, gates=anchor.gate_vector())
    elif len(anchor.routes) == 1 and anchor.num_tokens > 1:
        outputs, current = forward_standard(layer, inputs, routing="pooled")
    else:
        outputs, current = forward_standard(layer, inputs)
    if anchor.mode == "standard":
        return outputs

    result = layer.base @ np.asarray(inputs, dtype=np.float64)
    for i in range(layer.shape.num_experts):
        e_now = current.contributions[i]
        e_anchor = anchor.contributions[i]
        if e_anchor is None:
            continue
        root = np.sqrt(anchor.gates[i])
        if e_now is not None:
            result += root * e_now
        result += (current.gates[i] - root) * e_anchor
    return result
