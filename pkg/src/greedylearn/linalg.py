"""Dense float64 linear-algebra kernels used by the pursuit and network code.

Everything here operates on plain numpy arrays. ``Matrix``/``Vector``/
``CholFactor`` are aliases rather than wrapper classes; a ``CholFactor`` is a
lower-triangular ``(k, k)`` array whose order is ``k``.

On-disk matrix format
---------------------
A matrix is stored as two files sharing a base path:

* ``<base>.json`` -- header: ``{"rows": r, "cols": c, "dtype": "f64",
  "byte_order": "little"}``
* ``<base>.bin``  -- the raw values, row-major, little-endian float64,
  ``r * c * 8`` bytes, no padding.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import CorruptHeader, NotPositiveDefinite, RankDeficientSupport, ShapeMismatch

Matrix = np.ndarray
Vector = np.ndarray
CholFactor = np.ndarray

# Pivots at or below this are treated as loss of positive definiteness.
# No silent ridge/jitter is ever added; callers decide how to recover.
PIVOT_TOL = 1e-12


def _as_float_array(a, ndim, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ShapeMismatch(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def cholesky(gram: Matrix) -> CholFactor:
    """Lower-triangular Cholesky factor of a symmetric positive-definite matrix.

    Raises NotPositiveDefinite if any pivot (Schur-complement diagonal) falls
    at or below ``PIVOT_TOL``. Symmetry of ``gram`` is the caller's contract.
    """
    g = _as_float_array(gram, 2, "gram")
    n, m = g.shape
    if n != m:
        raise ShapeMismatch(f"gram must be square, got {g.shape}")
    low = np.zeros((n, n))
    for j in range(n):
        pivot = g[j, j] - low[j, :j] @ low[j, :j]
        if pivot <= PIVOT_TOL:
            raise NotPositiveDefinite(f"pivot {pivot:.3e} at column {j} (tol {PIVOT_TOL})")
        low[j, j] = math.sqrt(pivot)
        if j + 1 < n:
            low[j + 1:, j] = (g[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]) / low[j, j]
    return low


def cholesky_append(factor: CholFactor, gram_col: Vector, gram_diag: float) -> CholFactor:
    """Extend an order-k factor to order k+1 with one new atom.

    ``gram_col`` holds the inner products of the new atom with the k existing
    ones and ``gram_diag`` its squared norm. Cost is one forward substitution
    plus a scalar pivot; the first k rows/columns of the result equal
    ``factor`` exactly.
    """
    low = _as_float_array(factor, 2, "factor")
    k = low.shape[0]
    if low.shape != (k, k):
        raise ShapeMismatch(f"factor must be square, got {low.shape}")
    col = _as_float_array(gram_col, 1, "gram_col")
    if col.shape[0] != k:
        raise ShapeMismatch(f"gram_col must have length {k}, got {col.shape[0]}")
    w = solve_lower(low, col) if k else col
    pivot = float(gram_diag) - w @ w
    if pivot <= PIVOT_TOL:
        raise NotPositiveDefinite(f"append pivot {pivot:.3e} (tol {PIVOT_TOL})")
    out = np.zeros((k + 1, k + 1))
    out[:k, :k] = low
    out[k, :k] = w
    out[k, k] = math.sqrt(pivot)
    return out


def solve_lower(low: CholFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve ``low @ z = rhs`` by forward substitution (1-D or 2-D rhs)."""
    n = low.shape[0]
    z = np.array(rhs, dtype=np.float64, copy=True)
    if z.shape[0] != n:
        raise ShapeMismatch(f"rhs has leading dimension {z.shape[0]}, factor order is {n}")
    for i in range(n):
        if i:
            z[i] -= low[i, :i] @ z[:i]
        z[i] /= low[i, i]
    return z


def solve_upper(upper: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``upper @ z = rhs`` by back substitution (1-D or 2-D rhs)."""
    n = upper.shape[0]
    z = np.array(rhs, dtype=np.float64, copy=True)
    if z.shape[0] != n:
        raise ShapeMismatch(f"rhs has leading dimension {z.shape[0]}, factor order is {n}")
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            z[i] -= upper[i, i + 1:] @ z[i + 1:]
        z[i] /= upper[i, i]
    return z


def chol_solve(factor: CholFactor, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(L @ L.T) @ z = rhs`` given the lower factor ``L``."""
    return solve_upper(factor.T, solve_lower(factor, rhs))


def ls_solve(basis: Matrix, x: Vector) -> Vector:
    """Least-squares coefficients ``argmin_a ||x - basis @ a||_2``.

    Solved through the Cholesky factorization of the Gram matrix; a failed
    factorization (rank-deficient basis) raises RankDeficientSupport. An
    empty basis returns an empty coefficient vector.
    """
    b = _as_float_array(basis, 2, "basis")
    v = _as_float_array(x, 1, "x")
    if b.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"basis rows {b.shape[0]} != signal length {v.shape[0]}")
    if b.shape[1] == 0:
        return np.zeros(0)
    try:
        factor = cholesky(b.T @ b)
    except NotPositiveDefinite as exc:
        raise RankDeficientSupport(f"Gram factorization failed: {exc}") from exc
    return chol_solve(factor, b.T @ v)


def spd_inverse(gram: Matrix) -> Matrix:
    """Inverse of a symmetric positive-definite matrix via its Cholesky factor."""
    factor = cholesky(gram)
    return chol_solve(factor, np.eye(factor.shape[0]))


def inverse_gradient(a_inv: Matrix, upstream: Matrix) -> Matrix:
    """Reverse-mode gradient of matrix inversion.

    Given ``B = A^-1`` and the loss gradient w.r.t. ``B``, returns the loss
    gradient w.r.t. ``A``: ``-B.T @ upstream @ B.T``.
    """
    b = _as_float_array(a_inv, 2, "a_inv")
    g = _as_float_array(upstream, 2, "upstream")
    if b.shape[0] != b.shape[1]:
        raise ShapeMismatch(f"a_inv must be square, got {b.shape}")
    if g.shape != b.shape:
        raise ShapeMismatch(f"upstream shape {g.shape} != a_inv shape {b.shape}")
    return -b.T @ g @ b.T


def _base_path(path) -> Path:
    p = Path(path)
    if p.suffix in {".bin", ".json"}:
        p = p.with_suffix("")
    return p


def save_matrix(path, matrix: Matrix) -> None:
    """Write a matrix to ``<base>.json`` + ``<base>.bin`` (see module docstring)."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if m.ndim != 2:
        raise ShapeMismatch(f"only 2-D matrices are serializable, got shape {m.shape}")
    base = _base_path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    header = {"rows": int(m.shape[0]), "cols": int(m.shape[1]),
              "dtype": "f64", "byte_order": "little"}
    base.with_suffix(".json").write_text(json.dumps(header) + "\n")
    base.with_suffix(".bin").write_bytes(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_matrix(path) -> Matrix:
    """Read a matrix written by save_matrix. Raises CorruptHeader on bad files."""
    base = _base_path(path)
    try:
        header = json.loads(base.with_suffix(".json").read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptHeader(f"unreadable header {base.with_suffix('.json')}: {exc}") from exc
    try:
        rows, cols = int(header["rows"]), int(header["cols"])
        dtype, order = header["dtype"], header["byte_order"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeader(f"header {base.with_suffix('.json')} missing fields: {exc}") from exc
    if dtype != "f64" or order != "little" or rows < 0 or cols < 0:
        raise CorruptHeader(f"unsupported header values in {base.with_suffix('.json')}: {header}")
    raw = base.with_suffix(".bin").read_bytes()
    if len(raw) != rows * cols * 8:
        raise CorruptHeader(
            f"payload {base.with_suffix('.bin')} has {len(raw)} bytes, expected {rows * cols * 8}")
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
