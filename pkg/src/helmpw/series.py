"""Truncated power-series arithmetic.

Coefficient arrays keep the order along axis 0, so the same functions work
for a single series (shape ``(N+1,)``) and for a bank of series evaluated
together (shape ``(N+1, k)``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ORDER = 32
REAL_TOL = 1e-12


@dataclass
class Series:
    coeffs: np.ndarray
    is_real: bool = False

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if not np.isfinite(self.coeffs[0]).all():
            raise ValueError("leading coefficient must be finite")
        if self.is_real:
            check_real(self.coeffs)

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    def __getitem__(self, k):
        return self.coeffs[k]

    def __call__(self, s):
        return eval_horner(self.coeffs, s)

    def conj(self) -> "Series":
        return Series(np.conj(self.coeffs), self.is_real)


def check_real(c, tol: float = REAL_TOL, what: str = "series") -> None:
    c = np.asarray(c)
    if np.iscomplexobj(c):
        scale = max(1.0, float(np.max(np.abs(c), initial=0.0)))
        if np.max(np.abs(c.imag), initial=0.0) > tol * scale:
            raise ValueError(f"{what} expected real, |imag| = {np.max(np.abs(c.imag)):.3g}")


def _coeffs(x):
    return x.coeffs if isinstance(x, Series) else np.asarray(x)


def convolve_at(A, B, N: int):
    """``sum_{m=0}^{N} A[m] B[N-m]``."""
    A, B = _coeffs(A), _coeffs(B)
    if N < 0 or N >= len(A) or N >= len(B):
        raise IndexError(f"order {N} exceeds available coefficients")
    return np.sum(A[: N + 1] * B[N::-1], axis=0)


def convolve_inner(A, B, N: int):
    """Convolution at order ``N`` without the two end terms (``m = 1..N-1``)."""
    A, B = _coeffs(A), _coeffs(B)
    if N < 2:
        return np.zeros(np.shape(A)[1:], dtype=np.result_type(A, B))
    return np.sum(A[1:N] * B[N - 1:0:-1], axis=0)


def invert_next(V, Vinv, N: int):
    """Coefficient ``N`` of ``1/V(s)`` given ``Vinv`` through ``N-1``.

    Requires ``V[0] == 1``, which every solver voltage series satisfies.
    """
    V, Vinv = _coeffs(V), _coeffs(Vinv)
    if not np.all(V[0] == 1):
        raise ValueError("reciprocal recurrence requires V[0] == 1")
    if N == 0:
        return np.ones_like(V[0])
    return -np.sum(V[1: N + 1] * Vinv[N - 1::-1][:N], axis=0)


def reciprocal(V, N: int | None = None) -> np.ndarray:
    V = _coeffs(V)
    N = len(V) - 1 if N is None else N
    out = np.zeros((N + 1,) + V.shape[1:], dtype=complex)
    for n in range(N + 1):
        out[n] = invert_next(V, out, n)
    return out


def eval_horner(c, s):
    """Plain truncated-polynomial value; diagnostics only."""
    c = _coeffs(c)
    acc = np.zeros(np.broadcast(c[0], s).shape, dtype=complex) if np.ndim(s) else 0j
    for coef in c[::-1]:
        acc = acc * s + coef
    return acc
