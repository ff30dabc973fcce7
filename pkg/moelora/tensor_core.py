"""
Dense float64 matrix substrate.

Every other module works on plain ``numpy`` float64 arrays; this module holds
the few operations whose exact behaviour matters for verification: shape-checked
products, damped Gauss-Jordan inversion of small r x r matrices, top-k routing
helpers and a counter-addressable Gaussian stream.
"""

import math

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, Field

from .errors import DimensionMismatchError, NonFiniteError, SingularMatrixError

Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

# Gauss-Jordan refuses pivots smaller than this
PIVOT_FLOOR = 1e-300
# small_inverse is meant for LoRA ranks, not general matrices
MAX_INVERSE_RANK = 64
# one Philox4x64 counter step yields four 64-bit words
_WORDS_PER_BLOCK = 4


def as_matrix(data: npt.ArrayLike, name: str = "matrix") -> Matrix:
    """Return ``data`` as a finite 2-D float64 array.

    Raises:
        DimensionMismatchError: If the input is not two-dimensional
        NonFiniteError: If any entry is NaN or Inf
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    return ensure_finite(arr, name)


def ensure_finite(arr: npt.NDArray[np.float64], name: str = "result") -> Matrix:
    """Raise NonFiniteError unless every entry of ``arr`` is finite."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf entries")
    return arr


def mat_mul(lhs: Matrix, rhs: Matrix) -> Matrix:
    """Standard matrix product with an explicit shape check.

    The forward, backward and preconditioner route their matrix products here,
    so a non-finite intermediate surfaces as NonFiniteError at its source.

    Raises:
        DimensionMismatchError: If ``lhs.cols != rhs.rows``
    """
    if lhs.ndim != 2 or rhs.ndim != 2 or lhs.shape[1] != rhs.shape[0]:
        raise DimensionMismatchError(
            f"cannot multiply {lhs.shape} by {rhs.shape}"
        )
    return ensure_finite(np.matmul(lhs, rhs), "product")


def transpose(m: Matrix) -> Matrix:
    """Return a contiguous transposed copy."""
    return np.ascontiguousarray(m.T)


def small_inverse(m: Matrix, damping: float = 0.0) -> Matrix:
    """Invert ``m + damping * I`` by Gauss-Jordan elimination with partial pivoting.

    Args:
        m: Square r x r matrix, r <= 64
        damping: Non-negative ridge added to the diagonal before inversion

    Returns:
        The inverse of the damped matrix

    Raises:
        DimensionMismatchError: If ``m`` is not square or too large
        SingularMatrixError: If a pivot falls below ``PIVOT_FLOOR``
    """
    m = as_matrix(m, "inverse input")
    rows, cols = m.shape
    if rows != cols:
        raise DimensionMismatchError(f"cannot invert non-square shape {m.shape}")
    if rows > MAX_INVERSE_RANK:
        raise DimensionMismatchError(
            f"small_inverse handles r <= {MAX_INVERSE_RANK}, got r={rows}"
        )
    if damping < 0 or not math.isfinite(damping):
        raise ValueError(f"damping must be finite and >= 0, got {damping}")

    eye = np.eye(rows)
    aug = np.hstack([m + damping * eye, eye])
    for col in range(rows):
        pivot = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[pivot, col]) < PIVOT_FLOOR:
            raise SingularMatrixError(
                f"matrix is singular at column {col} (damping={damping})"
            )
        if pivot != col:
            aug[[col, pivot]] = aug[[pivot, col]]
        aug[col] /= aug[col, col]
        factors = aug[:, col].copy()
        factors[col] = 0.0
        aug -= np.outer(factors, aug[col])
    return ensure_finite(np.ascontiguousarray(aug[:, rows:]), "inverse")


def softmax(v: npt.ArrayLike) -> Vector:
    """Max-shifted softmax of a non-empty finite vector."""
    logits = np.asarray(v, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise DimensionMismatchError("softmax needs a non-empty 1-D vector")
    ensure_finite(logits, "logits")
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def top_k_select(v: npt.ArrayLike, k: int) -> tuple[int, ...]:
    """Indices of the k largest entries, ties going to the lower index.

    Returns:
        The selected indices in ascending order

    Raises:
        ValueError: If k is outside [1, len(v)]
    """
    values = np.asarray(v, dtype=np.float64)
    if not 1 <= k <= values.size:
        raise ValueError(f"k must be in [1, {values.size}], got {k}")
    # stable sort keeps the lower index first among equal values
    order = np.argsort(-values, kind="stable")[:k]
    return tuple(sorted(int(i) for i in order))


def frobenius_norm(m: npt.ArrayLike) -> float:
    """Square root of the sum of squared entries."""
    arr = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(arr * arr)))


class RngStream(BaseModel):
    """Counter-addressable random stream on the Philox4x64 bit generator.

    ``(seed, counter)`` fully determines the next draw. Each request starts a
    fresh Philox state at the current counter and consumes whole blocks, so a
    stream can be reconstructed from the two integers alone.
    """

    seed: int = Field(ge=0, lt=2**64)
    counter: int = Field(default=0, ge=0)

    def uniform(self, count: int) -> Vector:
        """Draw ``count`` doubles in [0, 1) and advance the counter."""
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        bits = np.random.Philox(key=self.seed, counter=self.counter)
        values = np.random.Generator(bits).random(count)
        self.counter += -(-count // _WORDS_PER_BLOCK)
        return values

    def spawn(self, offset: int) -> "RngStream":
        """Independent stream for a sub-component, keyed off this seed."""
        return RngStream(seed=(self.seed + 0x9E3779B97F4A7C15 * (offset + 1)) % 2**64)


def seeded_gaussian(rng: RngStream, rows: int, cols: int, sigma: float) -> Matrix:
    """I.i.d. N(0, sigma^2) matrix drawn with the Box-Muller transform.

    Raises:
        ValueError: If sigma is negative
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    count = rows * cols
    pairs = -(-count // 2)
    u = rng.uniform(2 * pairs).reshape(pairs, 2)
    # 1 - u keeps the log argument in (0, 1]
    radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
    theta = 2.0 * np.pi * u[:, 1]
    normals = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
    return sigma * normals.reshape(-1)[:count].reshape(rows, cols)
