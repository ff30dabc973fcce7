"""
MCP server implementation using FastMCP for the moelora toolkit.
This module exposes the verification suites and desk-scale training runs as tools.
"""

import os
from pathlib import Path
from typing import Any

from mcp.server.fastmcp import FastMCP

from .bench import (
    RunAborted,
    ablation_arms,
    compare_runs,
    run_and_save,
    run_arms,
)
from .config import OUTDIR_ENV, arm_label, arm_name, desk_scale, parse_config
from .errors import MoeLoraError
from .grad_engine import LossKind
from .layer import ForwardMode, LayerShape
from .oracle import (
    BALANCED_ETA,
    balanced_gate_ratio,
    gradcheck_layer,
    gradcheck_suite,
    identical_expert_layer,
    run_projection_checks,
)
from .tensor_core import RngStream

# Constants
DEFAULT_OUTDIR = "runs"
MAX_TOOL_STEPS = 5000
MAX_TOOL_SEEDS = 20
MAX_BALANCED_K = 64
FORWARD_MODES = ("standard", "sqrt-detach")
LOSS_KINDS = ("mse-token", "softmax-xent")

# Initialize FastMCP server
mcp = FastMCP("moelora")


def _format_error_response(error_msg: str) -> dict[str, str]:
    """Format error response for tool callers."""
    return {"error": error_msg}


def _get_outdir() -> str:
    """Output directory for tool runs, from MOELORA_OUTDIR."""
    return os.environ.get(OUTDIR_ENV, DEFAULT_OUTDIR)


def _overrides(options: dict[str, Any] | None) -> dict[str, str]:
    return {key: str(value) for key, value in (options or {}).items()}


@mcp.tool()
async def moelora_gradcheck(
    mode: ForwardMode = "standard",
    loss_kind: LossKind = "mse-token",
    samples: int = 200,
    seed: int = 0,
    m: int = 16,
    n: int = 16,
    num_experts: int = 5,
    top_k: int = 2,
    rank: int = 2,
) -> dict[str, Any]:
    """Check analytic MoE-LoRA gradients against central finite differences.

    Builds a random layer, samples coordinates of every expert A, expert B and the
    router, and compares the backward pass with central differences. Router
    coordinates whose perturbation flips a top-k selection are excluded and
    counted. For sqrt-detach the stop-gradient surrogate is differenced.

    Returns the maximum relative error and pass flag per parameter class.
    """
    if mode not in FORWARD_MODES:
        return _format_error_response(f"mode must be one of {FORWARD_MODES}")
    if loss_kind not in LOSS_KINDS:
        return _format_error_response(f"loss_kind must be one of {LOSS_KINDS}")
    if samples < 1:
        return _format_error_response("samples must be >= 1")

    try:
        shape = LayerShape(
            m=m, n=n, num_experts=num_experts, top_k=top_k, rank=rank, alpha=16.0
        )
        layer = gradcheck_layer(shape, RngStream(seed=seed))
        report = gradcheck_suite(layer, mode, loss_kind, samples=samples, seed=seed)
        return {
            "passed": report.passed,
            "loss": report.loss,
            "classes": [result.model_dump() for result in report.classes],
        }
    except ValueError as e:
        return _format_error_response(f"Gradient check failed: {str(e)}")
    except Exception as e:
        return _format_error_response(
            f"Unexpected error during gradient check: {str(e)}"
        )


@mcp.tool()
async def moelora_verify_projection(
    seed: int = 0, failures_only: bool = False
) -> dict[str, Any]:
    """Verify the projection identities of preconditioned MoE-LoRA updates.

    Runs the projector invariants, the squared-gate and linear-gate first-order
    identities over N in {1,2,5,20}, k in {1,2,10}, r in {1,2,4}, the agreement
    of the two gate-rescaling routes, the balanced-gate ratio, reparameterization
    invariance and damping monotonicity.

    Set failures_only=True to return just the failing rows.
    """
    try:
        rows = run_projection_checks(seed=seed)
    except ValueError as e:
        return _format_error_response(f"Verification failed: {str(e)}")
    except Exception as e:
        return _format_error_response(
            f"Unexpected error during verification: {str(e)}"
        )

    failed = [row for row in rows if not row.passed]
    shown = failed if failures_only else rows
    return {
        "passed": not failed,
        "checks": len(rows),
        "failed": len(failed),
        "rows": [row.model_dump() for row in shown],
    }


@mcp.tool()
async def moelora_balanced_ratio(
    k: int, rank: int = 4, eta: float = BALANCED_ETA, seed: int = 0
) -> dict[str, Any]:
    """Ratio of gate-rescaled to conventional update size with k identical experts.

    With uniform gates 1/k the ratio equals k at first order, the equality case of
    sum g^2 >= (sum g)^2 / k.
    """
    if not 1 <= k <= MAX_BALANCED_K:
        return _format_error_response(f"k must be in [1, {MAX_BALANCED_K}]")
    if eta <= 0:
        return _format_error_response("eta must be positive")

    try:
        layer = identical_expert_layer(k, rank, RngStream(seed=seed))
        ratio = balanced_gate_ratio(layer, k, eta)
        return {"k": k, "ratio": ratio, "relative_error": abs(ratio - k) / k}
    except ValueError as e:
        return _format_error_response(f"Failed to measure ratio: {str(e)}")
    except Exception as e:
        return _format_error_response(
            f"Unexpected error while measuring ratio: {str(e)}"
        )


@mcp.tool()
async def moelora_train(options: dict[str, Any] | None = None) -> dict[str, Any]:
    """Train one arm on a synthetic task and write its per-step CSV.

    ``options`` takes any config key, e.g. {"precond": "riemannian",
    "mode": "sqrt-detach", "max_steps": 200, "lr_experts": 3e-3}. The output
    directory defaults to MOELORA_OUTDIR.
    """
    values = _overrides(options)
    values.setdefault("outdir", _get_outdir())
    try:
        config = parse_config(None, values)
        if config.max_steps > MAX_TOOL_STEPS:
            return _format_error_response(f"max_steps must be <= {MAX_TOOL_STEPS}")
        record = run_and_save(config, Path(config.outdir))
    except RunAborted as e:
        return _format_error_response(f"Run aborted: {str(e)}")
    except MoeLoraError as e:
        return _format_error_response(f"Invalid training request: {str(e)}")
    except Exception as e:
        return _format_error_response(f"Unexpected error during training: {str(e)}")

    final = record.rows[-1] if record.rows else None
    return {
        "arm": arm_label(config),
        "seed": config.seed,
        "steps": len(record.rows),
        "final_train_loss": final.train_loss if final else None,
        "final_eval_loss": final.eval_loss if final else None,
        "csv": str(Path(config.outdir) / f"{record.arm}_{record.seed}.csv"),
    }


@mcp.tool()
async def moelora_compare(
    options: dict[str, Any] | None = None,
    seeds: int = 3,
    at_step: int | None = None,
    reference_lr: bool = False,
) -> dict[str, Any]:
    """Run the four-arm ablation (plain, sqrt-detach, preconditioned, rescaled).

    Each arm runs on the same paired seeds; the result holds the median loss per
    arm at ``at_step`` (default: last step) and the two improvements
    (gate-rescaled over preconditioned, sqrt-detach over plain).
    """
    if not 1 <= seeds <= MAX_TOOL_SEEDS:
        return _format_error_response(f"seeds must be in [1, {MAX_TOOL_SEEDS}]")
    values = _overrides(options)
    values.setdefault("outdir", _get_outdir())
    try:
        config = parse_config(None, values)
        if config.max_steps > MAX_TOOL_STEPS:
            return _format_error_response(f"max_steps must be <= {MAX_TOOL_STEPS}")
        if not reference_lr:
            config = desk_scale(config)
        arms = ablation_arms(config)
        seed_range = range(config.seed, config.seed + seeds)
        records = run_arms(arms, seed_range, Path(config.outdir))
        table = compare_runs(
            records, at_step or config.max_steps, baseline=arm_name(arms[0])
        )
    except RunAborted as e:
        return _format_error_response(f"Comparison aborted: {str(e)}")
    except MoeLoraError as e:
        return _format_error_response(f"Invalid comparison request: {str(e)}")
    except ValueError as e:
        return _format_error_response(f"Comparison failed: {str(e)}")
    except Exception as e:
        return _format_error_response(
            f"Unexpected error during comparison: {str(e)}"
        )

    plain, sqrt_plain, riemannian, rescaled = (arm_name(arm) for arm in arms)
    return {
        "step": table.step,
        "medians": {entry.arm: entry.median_loss for entry in table.summary},
        "improvement_rescaled": table.improvement(riemannian, rescaled),
        "improvement_sqrt_plain": table.improvement(plain, sqrt_plain),
    }


if __name__ == "__main__":
    # Initialize and run the server
    mcp.run(transport="stdio")
