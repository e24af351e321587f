"""Sparse symmetric operators and a Jacobi-preconditioned conjugate gradient.

Storage is canonical CSR (sorted, duplicate-free column indices) backed by
:mod:`scipy.sparse`.  Assembly goes through :class:`TripletAccumulator`, whose
compression pass sums duplicates in a deterministic order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.io
import scipy.sparse as sp


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConvergenceError(RuntimeError):
    """CG did not reach the requested tolerance.

    The best iterate and its relative residual are kept on the exception so
    callers can inspect or salvage them.
    """

    def __init__(self, message, x, residual, iterations):
        super().__init__(message)
        self.x = x
        self.residual = residual
        self.iterations = iterations


class SparseMatrix:
    """Square-or-rectangular CSR matrix in canonical form."""

    __slots__ = ("_csr",)

    def __init__(self, csr):
        csr = sp.csr_matrix(csr, dtype=float)
        csr.sum_duplicates()
        csr.sort_indices()
        self._csr = csr

    @classmethod
    def from_dense(cls, a):
        return cls(sp.csr_matrix(np.asarray(a, dtype=float)))

    @classmethod
    def diagonal_matrix(cls, d):
        return cls(sp.diags(np.asarray(d, dtype=float), format="csr"))

    @property
    def shape(self):
        return self._csr.shape

    @property
    def n_rows(self):
        return self._csr.shape[0]

    @property
    def n_cols(self):
        return self._csr.shape[1]

    @property
    def row_offsets(self):
        return self._csr.indptr

    @property
    def col_indices(self):
        return self._csr.indices

    @property
    def values(self):
        return self._csr.data

    @property
    def csr(self):
        """Underlying :class:`scipy.sparse.csr_matrix` (treat as read-only)."""
        return self._csr

    def diagonal(self):
        return self._csr.diagonal()

    def row_sums(self):
        return np.asarray(self._csr.sum(axis=1)).ravel()

    def toarray(self):
        return self._csr.toarray()

    def __matmul__(self, x):
        return spmv(self, x)

    def __add__(self, other):
        return SparseMatrix(self._csr + _as_csr(other))

    def __sub__(self, other):
        return SparseMatrix(self._csr - _as_csr(other))

    def __mul__(self, scalar):
        return SparseMatrix(self._csr * float(scalar))

    __rmul__ = __mul__

    def is_symmetric(self, rtol=1e-12):
        scale = np.abs(self._csr.data).max() if self._csr.nnz else 0.0
        diff = self._csr - self._csr.T
        return diff.nnz == 0 or np.abs(diff.data).max() <= rtol * scale

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self._csr.nnz})"


def _as_csr(m):
    return m.csr if isinstance(m, SparseMatrix) else sp.csr_matrix(m)


class TripletAccumulator:
    """Coordinate-format accumulator; duplicates are summed on compression."""

    def __init__(self, n_rows, n_cols=None):
        self.n_rows = n_rows
        self.n_cols = n_rows if n_cols is None else n_cols
        self._rows = []
        self._cols = []
        self._vals = []

    def add(self, rows, cols, vals):
        self._rows.append(np.asarray(rows, dtype=np.int64).ravel())
        self._cols.append(np.asarray(cols, dtype=np.int64).ravel())
        self._vals.append(np.asarray(vals, dtype=float).ravel())

    def merge(self, other):
        """Append another accumulator's entries (per-worker merge)."""
        self._rows.extend(other._rows)
        self._cols.extend(other._cols)
        self._vals.extend(other._vals)

    def tocsr(self):
        if self._rows:
            rows = np.concatenate(self._rows)
            cols = np.concatenate(self._cols)
            vals = np.concatenate(self._vals)
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
        coo = sp.coo_matrix((vals, (rows, cols)), shape=(self.n_rows, self.n_cols))
        return SparseMatrix(coo.tocsr())


def spmv(A: SparseMatrix, x) -> np.ndarray:
    """Return ``A @ x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != A.n_cols:
        raise DimensionError(f"spmv: matrix has {A.n_cols} columns, vector has shape {x.shape}")
    return A.csr @ x


@dataclass(frozen=True)
class SolveOptions:
    tolerance: float = 1e-10
    max_iterations: int | None = None  # None -> 10 * n
    preconditioner: Literal["none", "jacobi"] = "jacobi"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.preconditioner not in ("none", "jacobi"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    residual: float

    def __iter__(self):
        return iter((self.x, self.iterations, self.residual))


def cg_solve(A: SparseMatrix, b, opts: SolveOptions | None = None, x0=None) -> SolveResult:
    """Solve ``A x = b`` for SPD ``A`` by preconditioned conjugate gradients.

    Stops when ``||b - A x||_2 <= tolerance * ||b||_2``.  Raises
    :class:`ConvergenceError` (carrying the best iterate) otherwise.
    """
    opts = opts or SolveOptions()
    b = np.asarray(b, dtype=float)
    n = A.n_rows
    if A.n_cols != n or b.shape != (n,):
        raise DimensionError(f"cg_solve: matrix {A.shape}, right-hand side {b.shape}")
    if not np.all(np.isfinite(b)):
        raise FloatingPointError("cg_solve: right-hand side is not finite")
    max_it = opts.max_iterations if opts.max_iterations is not None else 10 * n
    csr = A.csr

    if opts.preconditioner == "jacobi":
        d = A.diagonal()
        if np.any(d == 0.0):
            raise ZeroDivisionError(
                f"jacobi preconditioner: zero diagonal at row {int(np.flatnonzero(d == 0.0)[0])}")
        inv_d = 1.0 / d
    else:
        inv_d = None

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return SolveResult(np.zeros(n), 0, 0.0)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - csr @ x
    target = opts.tolerance * bnorm
    rnorm = np.linalg.norm(r)
    best_x, best_res = x.copy(), rnorm
    if rnorm <= target:
        return SolveResult(x, 0, rnorm / bnorm)

    z = r * inv_d if inv_d is not None else r.copy()
    p = z.copy()
    rz = r @ z
    for it in range(1, max_it + 1):
        q = csr @ p
        pq = p @ q
        if pq <= 0.0:
            raise ConvergenceError(
                f"cg_solve: non-positive curvature at iteration {it} (matrix not SPD?)",
                best_x, best_res / bnorm, it)
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        rnorm = np.linalg.norm(r)
        if rnorm < best_res:
            best_x, best_res = x.copy(), rnorm
        if rnorm <= target:
            # recompute to guard against drift of the recursive residual
            true_r = np.linalg.norm(b - csr @ x)
            if true_r <= target:
                return SolveResult(x, it, true_r / bnorm)
            r = b - csr @ x
        z = r * inv_d if inv_d is not None else r.copy()
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"cg_solve: no convergence in {max_it} iterations (relative residual {best_res / bnorm:.3e})",
        best_x, best_res / bnorm, max_it)


def write_matrix_market(path, A: SparseMatrix, comment=""):
    """Dump ``A`` in MatrixMarket coordinate format for offline inspection."""
    scipy.io.mmwrite(str(path), A.csr, comment=comment)


def read_matrix_market(path) -> SparseMatrix:
    return SparseMatrix(sp.csr_matrix(scipy.io.mmread(str(path))))
