"""Sparse LU factorization of the constant stage matrix.

The real-valued system matrix of a stage does not change with the series
order, so it is factorized once (SuperLU with COLAMD ordering) and reused
for every back-substitution.  Rows are equilibrated to unit max-norm before
factorizing, so the singularity test on the pivots of U does not depend on
how the equations happen to be scaled.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .netmodel import ConditioningError


class SingularMatrixError(ConditioningError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


@dataclass
class FactoredSystem:
    lu: object
    shape: tuple
    matrix: sp.csc_matrix = field(repr=False)
    min_pivot: float = 0.0
    row_scale: np.ndarray = field(default=None, repr=False)

    def solve(self, b):
        return solve(self, b)

    def condition_estimate(self) -> float:
        """Cheap 1-norm condition estimate from the LU factors."""
        from scipy.sparse.linalg import LinearOperator, onenormest

        n = self.shape[0]
        inv = LinearOperator(
            (n, n),
            matvec=lambda x: self.solve(np.asarray(x, dtype=float).ravel()),
            rmatvec=lambda x: self.row_scale * self.lu.solve(np.asarray(x, dtype=float).ravel(),
                                                              trans="T"),
            dtype=float,
        )
        return float(onenormest(self.matrix) * onenormest(inv))


def factorize(A, pivot_rtol: float = 1e-13) -> FactoredSystem:
    """Factorize a square real sparse matrix.

    Raises SingularMatrixError when a row or column is structurally empty or
    when a diagonal value of U falls below ``pivot_rtol`` times the largest
    entry of the row-equilibrated matrix (which is 1).
    """
    A = sp.csc_matrix(A, dtype=float)
    n, m = A.shape
    if n != m:
        raise ValueError(f"matrix must be square, got {A.shape}")
    if n == 0:
        raise ValueError("empty system")
    absA = abs(A)
    row_norm = np.asarray(absA.max(axis=1).todense()).ravel()
    if np.any(row_norm == 0):
        r = int(np.flatnonzero(row_norm == 0)[0])
        raise SingularMatrixError(f"row {r} of the stage matrix is empty", row=r)
    col_norm = np.asarray(absA.max(axis=0).todense()).ravel()
    if np.any(col_norm == 0):
        c = int(np.flatnonzero(col_norm == 0)[0])
        raise SingularMatrixError(f"column {c} of the stage matrix is empty", row=c)
    R = 1.0 / row_norm
    As = sp.diags(R) @ A
    try:
        lu = splu(sp.csc_matrix(As), permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularMatrixError(f"factorization failed: {exc}") from exc
    udiag = np.abs(lu.U.diagonal())
    k = int(np.argmin(udiag))
    if not np.isfinite(udiag).all() or udiag[k] <= pivot_rtol:
        row = int(lu.perm_r.argsort()[k]) if hasattr(lu, "perm_r") else k
        raise SingularMatrixError(f"matrix is numerically singular near row {row}", row=row)
    return FactoredSystem(lu, A.shape, A, float(udiag[k]), R)


def solve(F: FactoredSystem, b):
    b = np.asarray(b, dtype=float)
    if b.shape[0] != F.shape[0]:
        raise ValueError(f"right-hand side has {b.shape[0]} rows, system has {F.shape[0]}")
    R = F.row_scale if b.ndim == 1 else F.row_scale[:, None]
    return F.lu.solve(R * b)
