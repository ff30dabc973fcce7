"""
MoE-LoRA layer: frozen base weight, N LoRA experts and a linear top-k router.

Tokens are the columns of the input matrix. Two forward modes share the same
output values and differ only in how gradients are routed (see grad_engine):

- ``standard``: y = W x + sum_i g_i * s * B_i A_i x
- ``sqrt-detach``: each expert term is written as
  sqrt(g_i)^ * e_i + (g_i - sqrt(g_i)^) * e_i^ where ^ marks a constant.
"""

import math
import struct
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import DimensionMismatchError, MoeLoraError
from .tensor_core import (
    Matrix,
    RngStream,
    Vector,
    as_matrix,
    ensure_finite,
    mat_mul,
    seeded_gaussian,
    softmax,
    top_k_select,
)

ForwardMode = Literal["standard", "sqrt-detach"]
RoutingKind = Literal["token", "pooled"]

DEFAULT_INIT_SIGMA = 1e-3
DEFAULT_ROUTER_SIGMA = 0.02
CHECKPOINT_MAGIC = b"MOELORA\x01"
_HEADER = struct.Struct("<5IdB")
_MODES: tuple[ForwardMode, ...] = ("standard", "sqrt-detach")


class LayerShape(BaseModel):
    """Dimensions of a MoE-LoRA layer (m x n weight, N experts, top-k, rank r)."""

    model_config = ConfigDict(frozen=True)

    m: int = Field(ge=1)
    n: int = Field(ge=1)
    num_experts: int = Field(ge=1)
    top_k: int = Field(ge=1)
    rank: int = Field(ge=1)
    alpha: float = Field(gt=0)

    @model_validator(mode="after")
    def _check_bounds(self) -> "LayerShape":
        if self.top_k > self.num_experts:
            raise ValueError(
                f"top_k={self.top_k} exceeds num_experts={self.num_experts}"
            )
        if self.rank > min(self.m, self.n):
            raise ValueError(f"rank={self.rank} exceeds min(m, n)")
        return self

    @property
    def scaling(self) -> float:
        """LoRA scaling factor s = alpha / r."""
        return self.alpha / self.rank


class LoraExpert(BaseModel):
    """One low-rank expert: B (m x r) and A (r x n)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    B: np.ndarray
    A: np.ndarray

    def clone(self) -> "LoraExpert":
        return LoraExpert(B=self.B.copy(), A=self.A.copy())


class GateOutput(BaseModel):
    """Routing decision for one token (or one pooled probe)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    selected: tuple[int, ...]
    gates: np.ndarray
    logits: np.ndarray


class MoeLoraLayer(BaseModel):
    """Frozen base weight plus N LoRA experts and a router ``Wg`` (N x n)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    base: np.ndarray
    experts: list[LoraExpert]
    router: np.ndarray
    shape: LayerShape
    mode: ForwardMode = "standard"

    @model_validator(mode="after")
    def _check_dims(self) -> "MoeLoraLayer":
        shape = self.shape
        if self.base.shape != (shape.m, shape.n):
            raise DimensionMismatchError(f"base must be {(shape.m, shape.n)}")
        if self.router.shape != (shape.num_experts, shape.n):
            raise DimensionMismatchError(
                f"router must be {(shape.num_experts, shape.n)}"
            )
        if len(self.experts) != shape.num_experts:
            raise DimensionMismatchError(
                f"expected {shape.num_experts} experts, got {len(self.experts)}"
            )
        for i, expert in enumerate(self.experts):
            if expert.B.shape != (shape.m, shape.rank):
                raise DimensionMismatchError(f"expert {i}: B must be m x r")
            if expert.A.shape != (shape.rank, shape.n):
                raise DimensionMismatchError(f"expert {i}: A must be r x n")
        # the base weight is frozen for the lifetime of the layer
        self.base.flags.writeable = False
        return self

    @property
    def scaling(self) -> float:
        return self.shape.scaling

    def clone(self) -> "MoeLoraLayer":
        """Deep copy of all trainable state; the frozen base is shared."""
        return MoeLoraLayer(
            base=self.base,
            experts=[expert.clone() for expert in self.experts],
            router=self.router.copy(),
            shape=self.shape,
            mode=self.mode,
        )

    @property
    def requires_damping(self) -> bool:
        """True while some expert has an all-zero factor (singular Gram matrix)."""
        return any(
            not np.any(expert.A) or not np.any(expert.B) for expert in self.experts
        )


class ForwardCache(BaseModel):
    """Everything backward needs, recorded by a forward pass.

    ``gates`` is the dense N x T gate matrix (zero off-selection). ``projected[i]``
    holds A_i X and ``contributions[i]`` holds e_i = s * B_i A_i X for every
    expert selected by at least one token, ``None`` otherwise. ``token_route[t]``
    points at the routing decision (and its router input column) used for token
    t; it is empty when gates were supplied by the caller.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    layer: MoeLoraLayer
    inputs: np.ndarray
    mode: ForwardMode
    routes: list[GateOutput]
    route_inputs: np.ndarray
    token_route: tuple[int, ...]
    gates: np.ndarray
    projected: list[np.ndarray | None]
    contributions: list[np.ndarray | None]
    fixed_gates: bool

    @property
    def num_tokens(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def matrix_mode(self) -> bool:
        """True when one gate vector applies to every token of the step."""
        return self.fixed_gates or len(self.routes) == 1

    @property
    def active_experts(self) -> tuple[int, ...]:
        return tuple(i for i, e in enumerate(self.contributions) if e is not None)

    def gate_vector(self) -> Vector:
        """The single gate vector of a matrix-mode step."""
        if not self.matrix_mode:
            raise MoeLoraError("token-routed step has no single gate vector")
        return self.gates[:, 0].copy()


def init_layer(
    shape: LayerShape,
    rng: RngStream,
    init_sigma: float = DEFAULT_INIT_SIGMA,
    router_sigma: float = DEFAULT_ROUTER_SIGMA,
    base_sigma: float | None = None,
    mode: ForwardMode = "standard",
) -> MoeLoraLayer:
    """Draw a layer from the Gaussian stream.

    Both B and A get N(0, init_sigma^2) entries (not the B = 0 convention) so
    that B^T B is invertible from the first step. The base weight defaults to
    N(0, 1/n) and the router to N(0, router_sigma^2), without bias.

    Draw order is W, Wg, then (B_i, A_i) for each expert.
    """
    if base_sigma is None:
        base_sigma = 1.0 / math.sqrt(shape.n)
    base = seeded_gaussian(rng, shape.m, shape.n, base_sigma)
    router = seeded_gaussian(rng, shape.num_experts, shape.n, router_sigma)
    experts = []
    for _ in range(shape.num_experts):
        b = seeded_gaussian(rng, shape.m, shape.rank, init_sigma)
        a = seeded_gaussian(rng, shape.rank, shape.n, init_sigma)
        experts.append(LoraExpert(B=b, A=a))
    return MoeLoraLayer(
        base=base,
        experts=experts,
        router=router,
        shape=shape,
        mode=mode,
    )


def route_token(layer: MoeLoraLayer, x: Vector) -> GateOutput:
    """Top-k softmax routing of a single input vector.

    The softmax is taken over the selected logits only, which equals a full
    softmax renormalized over the selection.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.shape.n,):
        raise DimensionMismatchError(f"token must have length {layer.shape.n}")
    ensure_finite(x, "token")
    logits = layer.router @ x
    selected = top_k_select(logits, layer.shape.top_k)
    gates = np.zeros(layer.shape.num_experts)
    gates[list(selected)] = softmax(logits[list(selected)])
    return GateOutput(selected=selected, gates=gates, logits=logits)


def _check_gate_vector(layer: MoeLoraLayer, gates: Vector) -> Vector:
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (layer.shape.num_experts,):
        raise DimensionMismatchError(
            f"gate vector must have length {layer.shape.num_experts}"
        )
    ensure_finite(gates, "gates")
    if np.any(gates < 0):
        raise ValueError("gates must be non-negative")
    return gates


def _forward(
    layer: MoeLoraLayer,
    inputs: Matrix,
    mode: ForwardMode,
    gates: Vector | None,
    routing: RoutingKind,
) -> tuple[Matrix, ForwardCache]:
    inputs = as_matrix(inputs, "inputs")
    if inputs.shape[0] != layer.shape.n or inputs.shape[1] < 1:
        raise DimensionMismatchError(
            f"inputs must be {layer.shape.n} x T with T >= 1, got {inputs.shape}"
        )
    num_tokens = inputs.shape[1]

    routes: list[GateOutput] = []
    token_route: tuple[int, ...] = ()
    if gates is not None:
        gate_vector = _check_gate_vector(layer, gates)
        gate_matrix = np.tile(gate_vector[:, None], (1, num_tokens))
        route_inputs = np.zeros((layer.shape.n, 0))
    elif routing == "pooled":
        pooled = inputs.mean(axis=1)
        routes.append(route_token(layer, pooled))
        token_route = (0,) * num_tokens
        gate_matrix = np.tile(routes[0].gates[:, None], (1, num_tokens))
        route_inputs = pooled[:, None]
    else:
        routes = [route_token(layer, inputs[:, t]) for t in range(num_tokens)]
        token_route = tuple(range(num_tokens))
        gate_matrix = np.column_stack([route.gates for route in routes])
        route_inputs = inputs

    s = layer.scaling
    outputs = mat_mul(layer.base, inputs)
    projected: list[Matrix | None] = []
    contributions: list[Matrix | None] = []
    for i, expert in enumerate(layer.experts):
        g = gate_matrix[i]
        if not np.any(g > 0):
            projected.append(None)
            contributions.append(None)
            continue
        ax = mat_mul(expert.A, inputs)
        e = s * mat_mul(expert.B, ax)
        if mode == "standard":
            outputs += g * e
        else:
            root = np.sqrt(g)
            outputs += root * e + (g - root) * e
        projected.append(ax)
        contributions.append(e)

    cache = ForwardCache(
        layer=layer,
        inputs=inputs,
        mode=mode,
        routes=routes,
        route_inputs=route_inputs,
        token_route=token_route,
        gates=gate_matrix,
        projected=projected,
        contributions=contributions,
        fixed_gates=gates is not None,
    )
    return ensure_finite(outputs, "layer output"), cache


def forward_standard(
    layer: MoeLoraLayer,
    inputs: Matrix,
    gates: Vector | None = None,
    routing: RoutingKind = "token",
) -> tuple[Matrix, ForwardCache]:
    """Standard MoE-LoRA forward over the columns of ``inputs`` (n x T).

    Args:
        layer: The layer; its ``mode`` is ignored
        inputs: Tokens as columns
        gates: Optional caller-supplied gate vector (matrix-mode, router bypassed)
        routing: ``token`` routes each column, ``pooled`` routes the mean column
            and applies the result to every token (matrix-mode)
    """
    return _forward(layer, inputs, "standard", gates, routing)


def forward_sqrt_detach(
    layer: MoeLoraLayer,
    inputs: Matrix,
    gates: Vector | None = None,
    routing: RoutingKind = "token",
) -> tuple[Matrix, ForwardCache]:
    """Square-root-detach forward; same values as forward_standard up to 1e-12."""
    return _forward(layer, inputs, "sqrt-detach", gates, routing)


def forward(
    layer: MoeLoraLayer,
    inputs: Matrix,
    mode: ForwardMode | None = None,
    gates: Vector | None = None,
    routing: RoutingKind = "token",
) -> tuple[Matrix, ForwardCache]:
    """Dispatch to the forward of ``mode`` (the layer's own mode by default)."""
    return _forward(layer, inputs, mode or layer.mode, gates, routing)


def weighted_weight(layer: MoeLoraLayer, weights: Vector) -> Matrix:
    """W + sum_i weights_i * s * B_i A_i for arbitrary non-negative weights."""
    weights = _check_gate_vector(layer, weights)
    s = layer.scaling
    result = np.array(layer.base, copy=True)
    for w, expert in zip(weights, layer.experts, strict=True):
        if w != 0:
            result += (w * s) * mat_mul(expert.B, expert.A)
    return result


def effective_weight(layer: MoeLoraLayer, gates: Vector) -> Matrix:
    """Effective weight X = W + sum_i g_i * s * B_i A_i for a fixed gate vector."""
    return weighted_weight(layer, gates)


def save_checkpoint(layer: MoeLoraLayer, path: Path) -> None:
    """Write shape and all matrices as little-endian float64 after a magic header."""
    shape = layer.shape
    header = _HEADER.pack(
        shape.m,
        shape.n,
        shape.num_experts,
        shape.top_k,
        shape.rank,
        shape.alpha,
        _MODES.index(layer.mode),
    )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header)
        for matrix in (layer.base, layer.router):
            fh.write(np.asarray(matrix, dtype="<f8").tobytes())
        for expert in layer.experts:
            fh.write(np.asarray(expert.B, dtype="<f8").tobytes())
            fh.write(np.asarray(expert.A, dtype="<f8").tobytes())


def load_checkpoint(path: Path) -> MoeLoraLayer:
    """Read a layer written by save_checkpoint.

    Raises:
        MoeLoraError: If the magic header or payload size does not match
    """
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise MoeLoraError(f"{path} is not a moelora checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + _HEADER.size:
        raise MoeLoraError(f"{path}: truncated checkpoint header")
    m, n, num_experts, top_k, rank, alpha, mode_index = _HEADER.unpack_from(
        data, offset
    )
    offset += _HEADER.size
    if mode_index >= len(_MODES):
        raise MoeLoraError(f"{path}: unknown forward mode byte {mode_index}")
    try:
        shape = LayerShape(
            m=m, n=n, num_experts=num_experts, top_k=top_k, rank=rank, alpha=alpha
        )
    except ValidationError as e:
        raise MoeLoraError(f"{path}: invalid layer shape in header: {e}") from e
    expected = 8 * (m * n + num_experts * n + num_experts * (m * rank + rank * n))
    if len(data) - offset != expected:
        raise MoeLoraError(f"{path}: payload size does not match header")

    def take(rows: int, cols: int) -> Matrix:
        nonlocal offset
        count = rows * cols
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        return arr.astype(np.float64).reshape(rows, cols)

    base = take(m, n)
    router = take(num_experts, n)
    experts = [
        LoraExpert(B=take(m, rank), A=take(rank, n)) for _ in range(num_experts)
    ]
    return MoeLoraLayer(
        base=base,
        experts=experts,
        router=router,
        shape=shape,
        mode=_MODES[mode_index],
    )
