"""
Small dense matrix kernel.

Matrices are 2-D numpy arrays: float64 for numerical work, or object arrays of
`Fraction` for exact work ("exact" matrices). Systems here are tiny (n up to ~50), so
everything is dense.
"""

from __future__ import annotations

import math
import numbers
from collections.abc import Iterable, Sequence
from fractions import Fraction
from typing import Any

import numpy as np
import numpy.typing as npt
import scipy.linalg
import sympy

from randchan.errors import InvalidInput

Matrix = npt.NDArray[Any]
FloatArray = npt.NDArray[np.float64]

DEFAULT_TOL = 1e-9

Entry = int | float | str | Fraction


def to_fraction(value: Entry) -> Fraction:
    """
    Exact value of a matrix entry. Floats are read through their shortest decimal
    repr, so 0.1 becomes 1/10 rather than its binary expansion.
    """
    if isinstance(value, bool):
        raise InvalidInput(f"Not a number: {value!r}")
    if isinstance(value, numbers.Integral):
        return Fraction(int(value))
    if isinstance(value, numbers.Real) and not isinstance(value, Fraction):
        as_float = float(value)
        if not math.isfinite(as_float):
            raise InvalidInput(f"Matrix entries must be finite, got {value!r}")
        return Fraction(repr(as_float))
    try:
        return Fraction(value)
    except (ValueError, ZeroDivisionError, TypeError):
        raise InvalidInput(f"Not a number or rational: {value!r}") from None


def as_matrix(rows: Iterable[Iterable[Entry]] | Matrix, exact: bool = False) -> Matrix:
    """
    Build a matrix from row-major nested data. Entries may be numbers, Fractions or
    strings like "3/7". Rows must be rectangular and entries finite.
    """
    if isinstance(rows, np.ndarray):
        data = [list(row) for row in rows.tolist()] if rows.ndim == 2 else None
    else:
        data = [list(row) for row in rows]
    if data is None:
        raise InvalidInput("Matrix must be two-dimensional")
    widths = {len(row) for row in data}
    if len(widths) > 1:
        raise InvalidInput(f"Matrix rows have unequal lengths {sorted(widths)}")
    cols = widths.pop() if widths else 0

    if exact:
        out = np.empty((len(data), cols), dtype=object)
        for i, row in enumerate(data):
            for j, value in enumerate(row):
                out[i, j] = to_fraction(value)
        return out

    values = [[_to_float(value) for value in row] for row in data]
    return np.array(values, dtype=np.float64).reshape(len(data), cols)


def _to_float(value: Entry) -> float:
    if isinstance(value, bool) or not isinstance(value, str | numbers.Real):
        raise InvalidInput(f"Not a number: {value!r}")
    try:
        result = float(to_fraction(value) if isinstance(value, str | Fraction) else value)
    except OverflowError:
        raise InvalidInput(f"Matrix entry too large for a float: {value!r}") from None
    if not math.isfinite(result):
        raise InvalidInput(f"Matrix entries must be finite, got {value!r}")
    return result


def as_vector(values: Iterable[Entry] | Matrix, dim: int | None = None) -> FloatArray:
    vector = np.array([_to_float(v) for v in np.ravel(np.asarray(list(values), dtype=object))])
    if dim is not None and vector.shape != (dim,):
        raise InvalidInput(f"Expected a vector of length {dim}, got length {vector.size}")
    return vector


def is_exact(matrix: Matrix) -> bool:
    return matrix.dtype == object


def to_float(matrix: Matrix) -> FloatArray:
    if is_exact(matrix):
        return np.array(
            [[float(x) for x in row] for row in matrix.tolist()], dtype=np.float64
        ).reshape(matrix.shape)
    return np.asarray(matrix, dtype=np.float64)


def to_exact(matrix: Matrix) -> Matrix:
    if is_exact(matrix):
        return matrix
    return as_matrix(matrix, exact=True)


def _exact_rank(matrix: Matrix) -> int:
    rational = sympy.Matrix(
        [[sympy.Rational(x.numerator, x.denominator) for x in row] for row in matrix.tolist()]
    )
    return int(rational.rank())


def _pivoted_qr(matrix: FloatArray) -> tuple[FloatArray, FloatArray, npt.NDArray[np.intp]]:
    q, r, piv = scipy.linalg.qr(matrix, mode="economic", pivoting=True)
    return q, r, piv


def _numerical_rank(r: FloatArray, scale: float, tol: float) -> int:
    # Pivoted QR leaves |R[i, i]| nonincreasing, so accepted pivots form a prefix.
    diag = np.abs(np.diag(r))
    return int(np.count_nonzero(diag > tol * scale))


def pivot_scale(matrix: FloatArray) -> float:
    """Reference magnitude for pivots: max(1, largest entry magnitude)."""
    return max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0


def rank(matrix: Matrix, tol: float = DEFAULT_TOL) -> int:
    """
    Rank of a matrix. A pivot of the column-pivoted QR factorization counts iff its
    magnitude exceeds tol * max(1, largest entry magnitude). Exact matrices get an
    exact rational rank and `tol` is ignored.
    """
    if tol < 0:
        raise InvalidInput(f"tol must be nonnegative, got {tol}")
    if matrix.ndim != 2:
        raise InvalidInput("rank() needs a two-dimensional matrix")
    if matrix.size == 0:
        return 0
    if is_exact(matrix):
        return _exact_rank(matrix)
    values = to_float(matrix)
    _, r, _ = _pivoted_qr(values)
    return _numerical_rank(r, pivot_scale(values), tol)


def _check_square(a: Matrix) -> int:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInput(f"Expected a square matrix, got shape {a.shape}")
    return a.shape[0]


def krylov_column(a: Matrix, v: Matrix, j: int) -> Matrix:
    """
    A^j v by j successive products; A^j itself is never formed.
    """
    n = _check_square(a)
    if v.shape != (n,):
        raise InvalidInput(f"Vector of length {v.shape} does not match {n}x{n} matrix")
    if j < 0:
        raise InvalidInput(f"Power must be nonnegative, got {j}")
    out = v
    for _ in range(j):
        out = a @ out
    return out


def krylov_blocks(a: Matrix, b: Matrix, depth: int) -> Matrix:
    """
    Stack of A^j B for j = 0..depth-1, shape (depth, n, m).
    """
    n = _check_square(a)
    if b.ndim != 2 or b.shape[0] != n:
        raise InvalidInput(f"Input matrix of shape {b.shape} does not match {n}x{n} matrix")
    exact = is_exact(a) or is_exact(b)
    if exact:
        a, b = to_exact(a), to_exact(b)
    dtype = object if exact else np.float64
    blocks = np.empty((depth, n, b.shape[1]), dtype=dtype)
    current = b
    for j in range(depth):
        blocks[j] = current
        current = a @ current
    return blocks


def solve_min_norm(
    m: Matrix, y: Sequence[float] | FloatArray, tol: float = DEFAULT_TOL
) -> FloatArray:
    """
    Minimum-norm least-squares solution z of M z ~= y.

    Uses a complete orthogonal decomposition: M P = Q R with column pivoting, rank r
    chosen as in `rank()`, then [R11 R12]^T = Z L so that the solution lies in the row
    space of M.
    """
    values = to_float(m)
    target = np.asarray(y, dtype=np.float64)
    if values.ndim != 2 or target.shape != (values.shape[0],):
        raise InvalidInput(
            f"Right-hand side of length {target.shape} does not match {values.shape}"
        )
    cols = values.shape[1]
    if values.size == 0:
        return np.zeros(cols)

    q, r, piv = _pivoted_qr(values)
    rnk = _numerical_rank(r, pivot_scale(values), tol)
    z = np.zeros(cols)
    if rnk == 0:
        return z

    w = r[:rnk, :]
    c = q[:, :rnk].T @ target
    zq, t = scipy.linalg.qr(w.T, mode="economic")
    v = scipy.linalg.solve_triangular(t, c, trans="T", lower=False)
    z[piv] = zq @ v
    return z
