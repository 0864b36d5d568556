"""Dense real matrix arithmetic.

Matrices are two-dimensional ``float64`` NumPy arrays. Every function here
is pure: inputs are never modified and results are fresh arrays, so the
module can be used from any number of threads.

Inversion goes through an LU factorisation with partial pivoting (LAPACK
``getrf`` via SciPy). A matrix counts as numerically singular when a pivot
falls below ``PIVOT_TOLERANCE`` times the scale of the row it came from.
"""

import warnings
from typing import Optional, Tuple

import numpy as np
from scipy import linalg as sla
from scipy.linalg import lapack

from .core import ShapeError, SingularMatrixError

PIVOT_TOLERANCE = 1e-12

LUFactors = Tuple[np.ndarray, np.ndarray]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``a`` to a 2-D finite float64 array.

    Args:
        a: Array-like input
        name: Name used in error messages

    Returns:
        A float64 array (a copy only when conversion is needed)

    Raises:
        ShapeError: If ``a`` is not two-dimensional
        ValueError: If ``a`` holds NaN or Inf
    """
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)


def mat_mul(a, b) -> np.ndarray:
    """Standard matrix product ``a @ b``.

    Args:
        a: Left matrix (r x k)
        b: Right matrix (k x c)

    Returns:
        Product of shape (r x c)

    Raises:
        ShapeError: If ``a.cols != b.rows``

    Example:
        >>> mat_mul([[1, 2], [3, 4]], [[0, 1], [1, 0]])
        array([[2., 1.],
               [4., 3.]])
    """
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")
    product = a @ b
    if not np.all(np.isfinite(product)):
        raise ValueError(f"Product of {a.shape} and {b.shape} overflowed")
    return product


def _require_square(m: np.ndarray) -> None:
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"Expected a square matrix, got shape {m.shape}")


def _row_permutation(piv: np.ndarray) -> np.ndarray:
    """Turn LAPACK's sequential row swaps into a permutation vector."""
    perm = np.arange(piv.shape[0])
    for i, p in enumerate(piv):
        perm[i], perm[p] = perm[p], perm[i]
    return perm


def lu_factor(m) -> LUFactors:
    """LU factorisation with partial pivoting and a singularity check.

    Args:
        m: Square matrix

    Returns:
        ``(lu, piv)`` in LAPACK ``getrf`` layout

    Raises:
        ShapeError: If ``m`` is not square
        SingularMatrixError: If a pivot is below the relative tolerance
    """
    m = as_matrix(m)
    _require_square(m)
    n = m.shape[0]
    if n == 0:
        raise ShapeError("Cannot factor an empty matrix")

    row_scale = np.abs(m).max(axis=1)
    if np.any(row_scale == 0.0):
        raise SingularMatrixError("Matrix has an all-zero row")

    with warnings.catch_warnings():
        # exactly-zero pivots are reported below with our own error
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(m, check_finite=False)

    pivots = np.abs(np.diag(lu))
    scale = row_scale[_row_permutation(piv)]
    bad = np.nonzero(pivots < PIVOT_TOLERANCE * scale)[0]
    if bad.size:
        i = int(bad[0])
        raise SingularMatrixError(
            f"Matrix is numerically singular: pivot {i} is {pivots[i]:.3e} "
            f"against row scale {scale[i]:.3e}"
        )
    return lu, piv


def mat_inverse(m, factors: Optional[LUFactors] = None) -> np.ndarray:
    """Inverse of a square matrix via LU with partial pivoting.

    Args:
        m: Square, nonsingular matrix
        factors: Precomputed ``lu_factor(m)``, reused when given

    Returns:
        ``m^-1``

    Raises:
        ShapeError: If ``m`` is not square
        SingularMatrixError: If ``m`` is (numerically) singular

    Example:
        >>> mat_inverse([[2.0, 0.0], [0.0, 4.0]])
        array([[0.5 , 0.  ],
               [0.  , 0.25]])
    """
    m = as_matrix(m)
    if factors is None:
        factors = lu_factor(m)
    return sla.lu_solve(factors, identity(m.shape[0]), check_finite=False)


def condition_estimate(m, factors: Optional[LUFactors] = None) -> float:
    """Estimate the 1-norm condition number ``||m||_1 * ||m^-1||_1``.

    Uses LAPACK ``gecon`` on the LU factors, which never forms the inverse.

    Args:
        m: Square, nonsingular matrix
        factors: Precomputed ``lu_factor(m)``, reused when given

    Returns:
        Condition number estimate (>= 1)

    Raises:
        SingularMatrixError: If ``m`` is singular
    """
    m = as_matrix(m)
    if factors is None:
        factors = lu_factor(m)
    lu, _ = factors
    anorm = float(np.linalg.norm(m, 1))
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or rcond <= 0.0:
        raise SingularMatrixError("Condition estimate failed: matrix is singular")
    return 1.0 / float(rcond)


def identity_residual(m, m_inv) -> float:
    """Return the largest absolute entry of ``m @ m_inv - I``."""
    product = mat_mul(m, m_inv)
    return float(np.max(np.abs(product - identity(product.shape[0]))))
