"""
Numerical oracles for the projection identities and the backward pass.

All identity checks run in matrix-mode: the gates are constants supplied by the
caller, the input is the identity so the layer output is the effective weight
itself, and the loss is 1/2 ||X - T||_F^2 so the full gradient is X - T.

Observed updates are measured in the gradient-path weighting: with gates g the
standard forward differentiates W + sum g_i s B_i A_i, the sqrt-detach forward
differentiates W + sum sqrt(g_i) s B_i A_i. The linear-gate identity holds for
the latter; the value-path change under sqrt-detach has g^(3/2) coefficients.
"""

import csv
import math
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from .grad_engine import (
    LossKind,
    backward,
    backward_expert,
    detached_forward,
    full_matrix_grad,
    loss_and_grad,
)
from .layer import (
    ForwardCache,
    ForwardMode,
    LayerShape,
    LoraExpert,
    MoeLoraLayer,
    forward,
    init_layer,
    route_token,
    weighted_weight,
)
from .optimizers import sgd_step
from .precond import PrecondConfig, precondition_bundle, precondition_pair
from .tensor_core import (
    Matrix,
    RngStream,
    Vector,
    frobenius_norm,
    seeded_gaussian,
    small_inverse,
    softmax,
    top_k_select,
)

IdentityKind = Literal["squared-gate", "linear-gate", "plain"]

# fixture scales chosen so the second-order term dominates rounding at eta=1e-5
ORACLE_DIM = 12
ORACLE_EXPERT_SIGMA = 0.1
ORACLE_GRAD_NORM = 0.03
ETA_COARSE = 1e-4
ETA_FINE = 1e-5
MIN_SCALING_RATIO = 90.0
RESIDUAL_RTOL = 1e-8
RESIDUAL_ATOL = 1e-12
ROUTE_AGREEMENT_RTOL = 1e-9
PROJECTION_TOL = 1e-9
BALANCED_ETA = 1e-6
BALANCED_RTOL = 1e-3
REPARAM_RTOL = 1e-8
GRADCHECK_RTOL = 1e-6
GRADCHECK_ATOL = 1e-9
GRADCHECK_STEP = 1e-5

EXACT = PrecondConfig(enabled=True, damping_rel=0.0)


class ProjectionPair(BaseModel):
    """Orthogonal projectors onto col(B) (m x m) and row(A) (n x n)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    col_b: np.ndarray
    row_a: np.ndarray


class UpdateReport(BaseModel):
    """Observed versus predicted change of the gradient-path effective weight."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    observed: np.ndarray
    predicted: np.ndarray
    first_order: np.ndarray
    first_order_residual: float
    eta: float
    identity: IdentityKind
    path_weights: np.ndarray
    value_observed: np.ndarray


class VerificationRow(BaseModel):
    """One line of the verification report."""

    config_id: str
    identity: str
    residual: float
    tolerance: float
    passed: bool


class ParamClassResult(BaseModel):
    """Per-class outcome.

    ``max_error_ratio`` is the worst gap divided by its allowance
    ``rtol * scale + atol``; the class passes iff it is at most 1.
    ``max_rel_error`` only counts coordinates whose scale exceeds ``atol``.
    """

    name: str
    checked: int
    excluded: int
    max_rel_error: float
    max_error_ratio: float
    passed: bool


class GradcheckReport(BaseModel):
    mode: ForwardMode
    loss_kind: LossKind
    loss: float
    classes: list[ParamClassResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.classes)


def projection_matrices(expert: LoraExpert) -> ProjectionPair:
    """P_colB = B (B^T B)^-1 B^T and P_rowA = A^T (A A^T)^-1 A, undamped.

    Raises:
        SingularMatrixError: If B or A is rank deficient
    """
    b, a = expert.B, expert.A
    col_b = b @ small_inverse(b.T @ b) @ b.T
    row_a = a.T @ small_inverse(a @ a.T) @ a
    return ProjectionPair(col_b=col_b, row_a=row_a)


def _projected_sum(
    layer: MoeLoraLayer, coefficients: Vector, grad: Matrix, eta: float
) -> Matrix:
    # s^2 enters because both the gradient and the forward carry one factor s
    s2 = layer.scaling**2
    total = np.zeros_like(grad)
    for c, expert in zip(coefficients, layer.experts, strict=True):
        if c == 0:
            continue
        proj = projection_matrices(expert)
        total += (c * s2) * (proj.col_b @ grad + grad @ proj.row_a)
    return -eta * total


def predicted_update_conventional(
    layer: MoeLoraLayer, gates: Vector, grad: Matrix, eta: float
) -> Matrix:
    """First-order update with squared gate coefficients: -eta sum g_i^2 (P grad)."""
    gates = np.asarray(gates, dtype=np.float64)
    return _projected_sum(layer, gates * gates, grad, eta)


def predicted_update_rescaled(
    layer: MoeLoraLayer, gates: Vector, grad: Matrix, eta: float
) -> Matrix:
    """First-order update with linear gate coefficients: -eta sum g_i (P grad)."""
    return _projected_sum(layer, np.asarray(gates, dtype=np.float64), grad, eta)


def predicted_update_plain(
    layer: MoeLoraLayer, coefficients: Vector, grad: Matrix, eta: float
) -> Matrix:
    """Unpreconditioned SGD prediction: -eta sum c_i (B B^T grad + grad A^T A)."""
    s2 = layer.scaling**2
    total = np.zeros_like(grad)
    for c, expert in zip(coefficients, layer.experts, strict=True):
        if c == 0:
            continue
        b, a = expert.B, expert.A
        total += (c * s2) * (b @ (b.T @ grad) + (grad @ a.T) @ a)
    return -eta * total


def gradient_path_weights(gates: Vector, mode: ForwardMode) -> Vector:
    gates = np.asarray(gates, dtype=np.float64)
    return gates if mode == "standard" else np.sqrt(gates)


def measure_one_step(
    layer: MoeLoraLayer,
    mode: ForwardMode,
    precond_cfg: PrecondConfig,
    target: Matrix,
    gates: Vector,
    eta: float,
) -> UpdateReport:
    """Run one forward/backward/precondition/SGD step and compare with theory.

    The layer itself is not modified. Pairing: preconditioned standard mode is
    compared with the squared-gate prediction, preconditioned sqrt-detach or
    ideal rescaling with the linear-gate prediction, and no preconditioning with
    the plain gradient prediction.
    """
    work = layer.clone()
    gates = np.asarray(gates, dtype=np.float64)
    outputs, cache = forward(work, np.eye(layer.shape.n), mode=mode, gates=gates)
    _, upstream = loss_and_grad("mse-matrix", outputs, target)
    bundle = backward_expert(cache, upstream, mode)
    grad_x = full_matrix_grad(cache, upstream)
    conditioned = precondition_bundle(work, bundle, gates, precond_cfg, mode)

    before = [expert.clone() for expert in work.experts]
    for i in conditioned.active:
        sgd_step(work.experts[i].A, conditioned.grad_a[i], eta)
        sgd_step(work.experts[i].B, conditioned.grad_b[i], eta)

    weights = gradient_path_weights(gates, mode)
    s = layer.scaling
    # W is frozen, so the effective-weight change is the sum of expert deltas
    observed = np.zeros_like(grad_x)
    value_observed = np.zeros_like(grad_x)
    first_order = np.zeros_like(grad_x)
    for i in conditioned.active:
        old, new = before[i], work.experts[i]
        delta_b, delta_a = new.B - old.B, new.A - old.A
        change = s * (delta_b @ old.A + old.B @ delta_a + delta_b @ delta_a)
        observed += weights[i] * change
        value_observed += gates[i] * change
        first_order -= (eta * weights[i] * s) * (
            old.B @ conditioned.grad_a[i] + conditioned.grad_b[i] @ old.A
        )

    identity: IdentityKind
    if not precond_cfg.enabled:
        identity = "plain"
        predicted = predicted_update_plain(layer, weights * weights, grad_x, eta)
    elif mode == "sqrt-detach" or precond_cfg.ideal_gate_rescale:
        identity = "linear-gate"
        predicted = predicted_update_rescaled(layer, gates, grad_x, eta)
    else:
        identity = "squared-gate"
        predicted = predicted_update_conventional(layer, gates, grad_x, eta)

    return UpdateReport(
        observed=observed,
        predicted=predicted,
        first_order=first_order,
        first_order_residual=frobenius_norm(observed - predicted),
        eta=eta,
        identity=identity,
        path_weights=weights,
        value_observed=value_observed,
    )


def oracle_layer(
    num_experts: int,
    rank: int,
    rng: RngStream,
    top_k: int | None = None,
    dim: int = ORACLE_DIM,
    alpha: float | None = None,
) -> MoeLoraLayer:
    """Well-conditioned layer for identity checks; alpha defaults to r (s = 1)."""
    shape = LayerShape(
        m=dim,
        n=dim,
        num_experts=num_experts,
        top_k=top_k or num_experts,
        rank=rank,
        alpha=alpha if alpha is not None else float(rank),
    )
    return init_layer(shape, rng, init_sigma=ORACLE_EXPERT_SIGMA, router_sigma=1.0)


def identical_expert_layer(
    num_experts: int, rank: int, rng: RngStream, dim: int = ORACLE_DIM
) -> MoeLoraLayer:
    """Oracle layer whose experts all share one (B, A) pair."""
    layer = oracle_layer(num_experts, rank, rng, dim=dim)
    shared = layer.experts[0]
    layer.experts = [shared.clone() for _ in range(num_experts)]
    return layer


def oracle_gates(num_experts: int, k: int, rng: RngStream) -> Vector:
    """Simplex vector with k nonzero entries at random positions."""
    selected = list(top_k_select(rng.uniform(num_experts), k))
    gates = np.zeros(num_experts)
    gates[selected] = softmax(seeded_gaussian(rng, 1, k, 1.0)[0])
    return gates


def oracle_target(
    layer: MoeLoraLayer,
    gates: Vector,
    rng: RngStream,
    grad_norm: float = ORACLE_GRAD_NORM,
) -> Matrix:
    """Target T such that X - T is a random direction of norm ``grad_norm``."""
    direction = seeded_gaussian(rng, layer.shape.m, layer.shape.n, 1.0)
    direction *= grad_norm / frobenius_norm(direction)
    return weighted_weight(layer, gates) - direction


def balanced_gate_ratio(
    layer: MoeLoraLayer,
    k: int,
    eta: float = BALANCED_ETA,
    target: Matrix | None = None,
) -> float:
    """||dX rescaled|| / ||dX conventional|| with uniform gates 1/k.

    With k identical experts the squared-gate update is k times smaller than
    the linear-gate one, the equality case of sum g^2 >= (sum g)^2 / k.
    """
    gates = np.zeros(layer.shape.num_experts)
    gates[:k] = 1.0 / k
    if target is None:
        target = oracle_target(layer, gates, RngStream(seed=k))
    conventional = measure_one_step(layer, "standard", EXACT, target, gates, eta)
    ideal = EXACT.model_copy(update={"ideal_gate_rescale": True})
    rescaled = measure_one_step(layer, "standard", ideal, target, gates, eta)
    return frobenius_norm(rescaled.observed) / frobenius_norm(conventional.observed)


def expert_first_order(
    expert: LoraExpert,
    grad_x: Matrix,
    gate: float,
    scaling: float,
    eta: float,
    cfg: PrecondConfig = EXACT,
) -> Matrix:
    """-eta * g * s * (B pA + pB A) for one expert under matrix loss gradient grad_x."""
    grad_a = gate * scaling * (expert.B.T @ grad_x)
    grad_b = gate * scaling * (grad_x @ expert.A.T)
    p_a, p_b = precondition_pair(expert, grad_a, grad_b, cfg)
    return -eta * gate * scaling * (expert.B @ p_a + p_b @ expert.A)


def random_invertible(
    rank: int, rng: RngStream, max_condition: float = 100.0
) -> Matrix:
    """R = Q1 diag(sigma) Q2 with singular values spread over [1, max_condition]."""
    q1, _ = np.linalg.qr(seeded_gaussian(rng, rank, rank, 1.0))
    q2, _ = np.linalg.qr(seeded_gaussian(rng, rank, rank, 1.0))
    sigma = np.geomspace(1.0, max_condition, rank) if rank > 1 else np.ones(1)
    return (q1 * sigma) @ q2


def reparameterization_gap(
    expert: LoraExpert, grad_x: Matrix, r_matrix: Matrix, eta: float = 1.0
) -> float:
    """Relative change of the first-order update under (B, A) -> (B R, R^-1 A)."""
    moved = LoraExpert(B=expert.B @ r_matrix, A=small_inverse(r_matrix) @ expert.A)
    original = expert_first_order(expert, grad_x, 1.0, 1.0, eta)
    transformed = expert_first_order(moved, grad_x, 1.0, 1.0, eta)
    return frobenius_norm(transformed - original) / frobenius_norm(original)


def _scaling_rows(
    config_id: str,
    name: str,
    layer: MoeLoraLayer,
    mode: ForwardMode,
    cfg: PrecondConfig,
    target: Matrix,
    gates: Vector,
) -> tuple[list[VerificationRow], UpdateReport]:
    coarse = measure_one_step(layer, mode, cfg, target, gates, ETA_COARSE)
    fine = measure_one_step(layer, mode, cfg, target, gates, ETA_FINE)
    if fine.first_order_residual == 0:
        ratio = math.inf
    else:
        ratio = coarse.first_order_residual / fine.first_order_residual
    tolerance = RESIDUAL_RTOL * frobenius_norm(fine.predicted) + RESIDUAL_ATOL
    rows = [
        VerificationRow(
            config_id=config_id,
            identity=f"{name}-scaling",
            residual=ratio,
            tolerance=MIN_SCALING_RATIO,
            passed=ratio >= MIN_SCALING_RATIO,
        ),
        VerificationRow(
            config_id=config_id,
            identity=f"{name}-residual",
            residual=fine.first_order_residual,
            tolerance=tolerance,
            passed=fine.first_order_residual <= tolerance,
        ),
    ]
    return rows, fine


def identity_suite(
    num_experts: int, top_k: int, rank: int, seed: int = 0
) -> list[VerificationRow]:
    """Squared-gate and linear-gate identities for one (N, k, r) configuration."""
    config_id = f"N{num_experts}-k{top_k}-r{rank}"
    rng = RngStream(seed=seed)
    layer = oracle_layer(num_experts, rank, rng, top_k=top_k)
    gates = oracle_gates(num_experts, top_k, rng)
    target = oracle_target(layer, gates, rng)
    ideal = EXACT.model_copy(update={"ideal_gate_rescale": True})

    rows, _ = _scaling_rows(
        config_id, "squared-gate", layer, "standard", EXACT, target, gates
    )
    sqrt_rows, sqrt_fine = _scaling_rows(
        config_id, "linear-gate-sqrt", layer, "sqrt-detach", EXACT, target, gates
    )
    ideal_rows, ideal_fine = _scaling_rows(
        config_id, "linear-gate-ideal", layer, "standard", ideal, target, gates
    )
    gap = frobenius_norm(sqrt_fine.first_order - ideal_fine.first_order)
    tolerance = ROUTE_AGREEMENT_RTOL * frobenius_norm(ideal_fine.first_order)
    agreement = VerificationRow(
        config_id=config_id,
        identity="rescale-route-agreement",
        residual=gap,
        tolerance=tolerance,
        passed=gap <= tolerance,
    )
    return rows + sqrt_rows + ideal_rows + [agreement]


def projection_suite(count: int = 50, seed: int = 0) -> list[VerificationRow]:
    """Symmetry, idempotence and range conditions of random expert projectors."""
    rng = RngStream(seed=seed)
    worst = {"symmetry": 0.0, "idempotence": 0.0, "range": 0.0}
    for index in range(count):
        rank = 1 + index % 4
        layer = oracle_layer(1, rank, rng)
        expert = layer.experts[0]
        pair = projection_matrices(expert)
        worst["symmetry"] = max(
            worst["symmetry"],
            float(np.max(np.abs(pair.col_b - pair.col_b.T))),
            float(np.max(np.abs(pair.row_a - pair.row_a.T))),
        )
        worst["idempotence"] = max(
            worst["idempotence"],
            float(np.max(np.abs(pair.col_b @ pair.col_b - pair.col_b))),
            float(np.max(np.abs(pair.row_a @ pair.row_a - pair.row_a))),
        )
        worst["range"] = max(
            worst["range"],
            float(np.max(np.abs(pair.col_b @ expert.B - expert.B))),
            float(np.max(np.abs(expert.A @ pair.row_a - expert.A))),
        )
    return [
        VerificationRow(
            config_id=f"projectors-{count}",
            identity=f"projection-{name}",
            residual=value,
            tolerance=PROJECTION_TOL,
            passed=value <= PROJECTION_TOL,
        )
        for name, value in worst.items()
    ]


def balanced_suite(
    ks: Sequence[int] = (1, 2, 5, 10), seed: int = 0
) -> list[VerificationRow]:
    rows = []
    for k in ks:
        layer = identical_expert_layer(max(ks), 4, RngStream(seed=seed))
        ratio = balanced_gate_ratio(layer, k)
        error = abs(ratio - k) / k
        rows.append(
            VerificationRow(
                config_id=f"balanced-k{k}",
                identity="balanced-gate-ratio",
                residual=error,
                tolerance=BALANCED_RTOL,
                passed=error <= BALANCED_RTOL,
            )
        )
    return rows


def reparameterization_suite(
    count: int = 20, rank: int = 4, seed: int = 0
) -> list[VerificationRow]:
    """Quotient invariance of the preconditioned first-order update."""
    rng = RngStream(seed=seed)
    layer = oracle_layer(1, rank, rng)
    expert = layer.experts[0]
    grad_x = seeded_gaussian(rng, layer.shape.m, layer.shape.n, 1.0)
    worst = max(
        reparameterization_gap(expert, grad_x, random_invertible(rank, rng))
        for _ in range(count)
    )
    return [
        VerificationRow(
            config_id=f"reparam-r{rank}-{count}",
            identity="reparameterization-invariance",
            residual=worst,
            tolerance=REPARAM_RTOL,
            passed=worst <= REPARAM_RTOL,
        )
    ]


def damping_monotonicity_suite(
    count: int = 20, seed: int = 0
) -> list[VerificationRow]:
    """Increasing the ridge never increases ||(M + dI)^-1 g||."""
    rng = RngStream(seed=seed)
    dampings = (0.0, 1e-6, 1e-4, 1e-2, 1.0)
    violations = 0
    for _ in range(count):
        factor = seeded_gaussian(rng, 12, 4, 1.0)
        gram = factor.T @ factor
        grad = seeded_gaussian(rng, 4, 12, 1.0)
        norms = [frobenius_norm(small_inverse(gram, d) @ grad) for d in dampings]
        violations += sum(
            1 for low, high in zip(norms, norms[1:], strict=False) if high > low
        )
    return [
        VerificationRow(
            config_id=f"damping-{count}",
            identity="damping-monotonicity",
            residual=float(violations),
            tolerance=0.0,
            passed=violations == 0,
        )
    ]


def verification_grid(
    experts: Sequence[int] = (1, 2, 5, 20),
    top_ks: Sequence[int] = (1, 2, 10),
    ranks: Sequence[int] = (1, 2, 4),
) -> list[tuple[int, int, int]]:
    return [(n, k, r) for n in experts for k in top_ks for r in ranks if k <= n]


def run_projection_checks(seed: int = 0) -> list[VerificationRow]:
    """Every identity row: projectors, both gate identities, balance, invariance."""
    rows = projection_suite(seed=seed)
    for num_experts, top_k, rank in verification_grid():
        rows.extend(identity_suite(num_experts, top_k, rank, seed=seed))
    rows.extend(balanced_suite(seed=seed))
    rows.extend(reparameterization_suite(seed=seed))
    rows.extend(damping_monotonicity_suite(seed=seed))
    return rows


def _routing_signature(
    layer: MoeLoraLayer, inputs: Matrix, anchor: ForwardCache
) -> tuple[tuple[int, ...], ...]:
    if anchor.fixed_gates:
        return ()
    if len(anchor.routes) == 1 and anchor.num_tokens > 1:
        return (route_token(layer, inputs.mean(axis=1)).selected,)
    return tuple(
        route_token(layer, inputs[:, t]).selected for t in range(inputs.shape[1])
    )


def gradcheck_layer(shape: LayerShape, rng: RngStream) -> MoeLoraLayer:
    """Layer with O(1) experts and a decisive router, for finite differences."""
    return init_layer(shape, rng, init_sigma=0.3, router_sigma=0.5)


def gradcheck_suite(
    layer: MoeLoraLayer,
    mode: ForwardMode,
    loss_kind: LossKind,
    samples: int = 200,
    seed: int = 0,
    tokens: int = 4,
    target: np.ndarray | None = None,
    inputs: Matrix | None = None,
) -> GradcheckReport:
    """Compare analytic gradients with central differences of the loss.

    For sqrt-detach the differenced objective is the stop-gradient surrogate
    anchored at the current parameters. Router coordinates whose +-h
    perturbation changes any top-k selection are excluded and counted.
    """
    rng = RngStream(seed=seed)
    shape = layer.shape
    if inputs is None:
        inputs = seeded_gaussian(rng, shape.n, tokens, 1.0)
    if target is None:
        if loss_kind == "softmax-xent":
            target = np.floor(rng.uniform(inputs.shape[1]) * shape.m).astype(int)
        else:
            target = seeded_gaussian(rng, shape.m, inputs.shape[1], 1.0)

    outputs, anchor = forward(layer, inputs, mode=mode)
    loss, upstream = loss_and_grad(loss_kind, outputs, target)
    bundle = backward(anchor, upstream, mode)
    signature = _routing_signature(layer, inputs, anchor)
    atol = GRADCHECK_ATOL * (1.0 + abs(loss))
    work = layer.clone()

    def objective() -> float:
        value, _ = loss_and_grad(
            loss_kind, detached_forward(work, inputs, anchor), target
        )
        return value

    def param_of(name: str, i: int) -> Matrix:
        if name == "router":
            return work.router
        return work.experts[i].A if name == "A" else work.experts[i].B

    def grad_of(name: str, i: int) -> Matrix:
        if name == "router":
            return bundle.router
        return bundle.grad_a[i] if name == "A" else bundle.grad_b[i]

    results = []
    for name in ("A", "B", "router"):
        checked = excluded = 0
        worst = 0.0
        worst_ratio = 0.0
        for _ in range(samples):
            u = rng.uniform(3)
            i = int(u[0] * shape.num_experts)
            param = param_of(name, i)
            row = int(u[1] * param.shape[0])
            col = int(u[2] * param.shape[1])
            theta = float(param[row, col])
            h = GRADCHECK_STEP * max(1.0, abs(theta))

            param[row, col] = theta + h
            flipped = _routing_signature(work, inputs, anchor) != signature
            plus = objective()
            param[row, col] = theta - h
            flipped = flipped or _routing_signature(work, inputs, anchor) != signature
            minus = objective()
            param[row, col] = theta
            if flipped:
                excluded += 1
                continue

            numeric = (plus - minus) / (2 * h)
            analytic = float(grad_of(name, i)[row, col])
            gap = abs(analytic - numeric)
            scale = max(abs(analytic), abs(numeric))
            if scale > atol:
                worst = max(worst, gap / scale)
            worst_ratio = max(worst_ratio, gap / (GRADCHECK_RTOL * scale + atol))
            checked += 1
        results.append(
            ParamClassResult(
                name=name,
                checked=checked,
                excluded=excluded,
                max_rel_error=worst,
                max_error_ratio=worst_ratio,
                passed=worst_ratio <= 1.0,
            )
        )
    return GradcheckReport(mode=mode, loss_kind=loss_kind, loss=loss, classes=results)


def gradcheck_rows(reports: Iterable[GradcheckReport]) -> list[VerificationRow]:
    return [
        VerificationRow(
            config_id=f"{report.mode}-{report.loss_kind}",
            identity=f"gradcheck-{result.name}",
            residual=result.max_error_ratio,
            tolerance=1.0,
            passed=result.passed,
        )
        for report in reports
        for result in report.classes
    ]


def write_report(
    rows: Sequence[VerificationRow], csv_path: Path, text_path: Path
) -> None:
    """CSV (config_id, identity, residual, tolerance, passed) plus a text summary."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["config_id", "identity", "residual", "tolerance", "passed"])
        for row in rows:
            writer.writerow(
                [
                    row.config_id,
                    row.identity,
                    f"{row.residual:.17g}",
                    f"{row.tolerance:.17g}",
                    "pass" if row.passed else "FAIL",
                ]
            )
    failed = [row for row in rows if not row.passed]
    lines = [f"{len(rows)} checks, {len(failed)} failed"]
    for row in rows:
        flag = "ok  " if row.passed else "FAIL"
        lines.append(
            f"{flag} {row.config_id:<24} {row.identity:<32} "
            f"{row.residual:.3e} (tol {row.tolerance:.3e})"
        )
    text_path.write_text("\n".join(lines) + "\n")
