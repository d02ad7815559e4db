"""Near-diagonal Padé approximants and staircase convergence verdicts.

Denominators come from the Toeplitz normal equations, solved by Gaussian
elimination with full pivoting.  An entry whose elimination meets a pivot
below ``1e-13`` times the preceding pivot is treated as degenerate (it sits
in a block of the Padé table); the staircase walk skips such entries.

The scale is local on purpose.  For series with a branch point near the unit
circle the pivots shrink steadily (by about 16 per step for a square-root
branch), so a threshold relative to ``max|A|`` would reject every entry past
degree ten although those entries are accurate.  A genuine block shows up as
a collapse of one pivot to rounding level relative to its predecessor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

PIVOT_RTOL = 1e-13
POLE_TOL = 1e-12
OSCILLATION_WINDOW = 6


class DegeneratePadeError(ArithmeticError):
    pass


class PadePoleError(ArithmeticError):
    pass


@dataclass
class PadeVerdict:
    value: complex
    converged: bool
    error_estimate: float
    oscillating: bool
    orders_used: int


def staircase_lm(N: int):
    """Degrees of staircase entry ``N``: [0/0], [1/0], [1/1], [2/1], ..."""
    return N - N // 2, N // 2


def full_pivot_solve(A, b, rtol=PIVOT_RTOL):
    """Solve a batch of small dense systems with complete pivoting.

    ``A`` has shape ``(B, M, M)`` and ``b`` shape ``(B, M)``.  Returns
    ``(x, ok)`` where ``ok[k]`` is False when system ``k`` met a pivot below
    ``rtol`` times the preceding pivot; ``x`` for those rows is zero.  Uses
    the LAPACK complete-pivoting LU (getc2/gesc2).
    """
    A = np.asarray(A, dtype=complex)
    b = np.asarray(b, dtype=complex)
    B, M = A.shape[0], A.shape[1]
    x = np.zeros((B, M), dtype=complex)
    ok = np.ones(B, dtype=bool)
    if M == 0:
        return x, ok
    scale = np.abs(A).max(axis=(1, 2))
    d = np.zeros((B, M))
    getc2, gesc2 = lapack.zgetc2, lapack.zgesc2
    for i in np.flatnonzero(scale > 0):
        lu, ipiv, jpiv, _ = getc2(A[i])
        # getc2 silently replaces tiny pivots, so the factor is tested below
        d[i] = np.abs(lu.diagonal())
        xi, factor = gesc2(lu, b[i], ipiv, jpiv)
        x[i] = xi / factor
    bad = ~(d[:, 0] > 0)
    if M > 1:
        bad |= (d[:, 1:] <= rtol * d[:, :-1]).any(axis=1)
    ok[bad] = False
    x[bad] = 0.0
    return x, ok


def pade_batch(C, L: int, M: int):
    """[L/M] coefficients for every row of ``C`` (shape ``(B, >= L+M+1)``).

    Returns ``(num, den, ok)`` with ``den[:, 0] == 1``.
    """
    C = np.asarray(C, dtype=complex)
    if C.ndim == 1:
        C = C[None, :]
    B = C.shape[0]
    if C.shape[1] < L + M + 1:
        raise ValueError(f"[{L}/{M}] needs {L + M + 1} coefficients, have {C.shape[1]}")
    ok = np.ones(B, dtype=bool)
    den = np.zeros((B, M + 1), dtype=complex)
    den[:, 0] = 1.0
    if M > 0:
        i = np.arange(1, M + 1)[:, None]
        k = np.arange(1, M + 1)[None, :]
        idx = L + i - k
        A = np.where(idx >= 0, C[:, np.clip(idx, 0, None)], 0.0)
        rhs = -C[:, L + 1: L + M + 1]
        x, ok = full_pivot_solve(A, rhs)
        den[:, 1:] = x
    num = np.zeros((B, L + 1), dtype=complex)
    for j in range(L + 1):
        kk = min(j, M)
        num[:, j] = np.sum(den[:, : kk + 1] * C[:, j::-1][:, : kk + 1], axis=1)
    return num, den, ok


def _polyval(coef, s):
    """Evaluate rows of ``coef`` (ascending powers) at points ``s``."""
    s = np.asarray(s)
    if s.ndim == 1 and not np.iscomplexobj(s):
        # real points: one matrix product per part against the power table
        P = s[None, :] ** np.arange(coef.shape[-1])[:, None]
        flat = coef.reshape(-1, coef.shape[-1])
        out = (flat.real @ P) + 1j * (flat.imag @ P)
        return out.reshape(coef.shape[:-1] + s.shape)
    acc = np.zeros(coef.shape[:-1] + s.shape, dtype=complex)
    for j in range(coef.shape[-1] - 1, -1, -1):
        acc = acc * s + coef[..., j][..., None] if s.ndim else acc * s + coef[..., j]
    return acc


def pade_coefficients(c, L: int, M: int):
    num, den, ok = pade_batch(np.asarray(c)[None, :], L, M)
    if not ok[0]:
        raise DegeneratePadeError(f"[{L}/{M}] entry is degenerate")
    return num[0], den[0]


def pade_eval(c, L: int, M: int, s, fallback: bool = True):
    """Value of the [L/M] approximant of series ``c`` at ``s``.

    A degenerate entry falls back to its neighbour [L/M-1] (down to [L/0],
    which always exists) unless ``fallback`` is False.
    """
    while True:
        try:
            num, den = pade_coefficients(c, L, M)
            break
        except DegeneratePadeError:
            if not fallback or M == 0:
                raise
            M -= 1
    q = _polyval(den, s)
    if np.any(np.abs(q) <= POLE_TOL * np.max(np.abs(den))):
        raise PadePoleError(f"[{L}/{M}] has a pole at s={s}")
    return _polyval(num, s) / q


def staircase_verdict(c, s: float, tol: float, window: int = OSCILLATION_WINDOW) -> PadeVerdict:
    """Walk the staircase of series ``c`` at ``s`` until two successive
    approximants agree within ``tol``."""
    c = np.asarray(c, dtype=complex)
    if len(c) < 4:
        raise ValueError("staircase verdict needs at least 4 coefficients")
    table = StaircaseTable(c[:, None])
    vals = table.values(np.array([s]))[:, 0, 0]
    prev = None
    best = np.inf
    since_best = 0
    last_err = np.inf
    for N, v in enumerate(vals):
        if not np.isfinite(v):
            continue
        if prev is not None:
            err = abs(v - prev)
            last_err = err
            if err <= tol:
                return PadeVerdict(complex(v), True, float(err), False, N + 1)
            if err < best:
                best, since_best = err, 0
            else:
                since_best += 1
        prev = v
    return PadeVerdict(complex(prev), False, float(last_err), since_best >= window, len(c))


class StaircaseTable:
    """Staircase Padé entries for a bank of series, grown order by order.

    ``C`` has shape ``(N+1, k)`` (order along axis 0), matching the solver's
    coefficient storage.  Entry ``N`` uses coefficients ``0..N``.
    """

    CACHE_SIZE = 64

    def __init__(self, C=None, n_series: int | None = None):
        self.entries: list = []
        self._cache: dict = {}  # evaluation points -> list of per-entry values
        if C is not None:
            C = np.asarray(C)
            for N in range(C.shape[0]):
                self.add(C[: N + 1])

    def __len__(self):
        return len(self.entries)

    def add(self, C):
        """Append the staircase entry that uses all rows of ``C``."""
        C = np.asarray(C)
        N = C.shape[0] - 1
        if N != len(self.entries):
            raise ValueError("staircase entries must be added in order")
        L, M = staircase_lm(N)
        num, den, ok = pade_batch(C.T, L, M)
        self.entries.append((num, den, ok))

    def _stacked(self, lo: int):
        """Entries ``lo..`` zero-padded to common degrees, for one-shot
        evaluation: ``(num, den, ok)`` of shapes (n, k, L+1), (n, k, M+1),
        (n, k)."""
        ents = self.entries[lo:]
        k = ents[0][0].shape[0]
        Lm = max(e[0].shape[1] for e in ents)
        Mm = max(e[1].shape[1] for e in ents)
        num = np.zeros((len(ents), k, Lm), dtype=complex)
        den = np.zeros((len(ents), k, Mm), dtype=complex)
        for i, (n, d, _) in enumerate(ents):
            num[i, :, : n.shape[1]] = n
            den[i, :, : d.shape[1]] = d
        return num, den, np.array([e[2] for e in ents])

    def values(self, s):
        """Approximant values, shape ``(n_entries, k, len(s))``; NaN where the
        entry is degenerate or has a pole at ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        key = s.tobytes()
        out = self._cache.get(key)
        if out is None:
            if len(self._cache) >= self.CACHE_SIZE:
                self._cache.pop(next(iter(self._cache)))
            out = self._cache[key] = []
        if len(out) < len(self.entries):
            num, den, ok = self._stacked(len(out))
            q = _polyval(den, s)
            p = _polyval(num, s)
            scale = np.max(np.abs(den), axis=2)[..., None]
            bad = (~ok)[..., None] | (np.abs(q) <= POLE_TOL * scale)
            with np.errstate(invalid="ignore", divide="ignore"):
                v = np.where(bad, np.nan, p / np.where(bad, 1.0, q))
            out.extend(v)
        return np.array(out)

    def update_errors(self, s):
        """Per-series staircase differences and the carried value.

        Returns ``(vals, diffs)`` of shape ``(n_entries, k, len(s))``.  A
        skipped entry repeats the previous value and difference.
        """
        raw = self.values(s)
        key = np.atleast_1d(np.asarray(s, dtype=float)).tobytes() + b"errors"
        vals, diffs = self._cache.get(key, ([], []))
        for N in range(len(vals), raw.shape[0]):
            if N == 0:
                vals.append(raw[0])
                diffs.append(np.full(raw.shape[1:], np.inf))
                continue
            good = np.isfinite(raw[N])
            vals.append(np.where(good, raw[N], vals[N - 1]))
            diffs.append(np.where(good, np.abs(raw[N] - vals[N - 1]), diffs[N - 1]))
        self._cache[key] = (vals, diffs)
        return np.array(vals), np.array(diffs)

    def verdict(self, s, tol: float):
        """Network verdict at each point of ``s`` by the infinity norm over
        series.  Returns ``(converged, N, values, errors)`` where ``N`` is the
        first entry whose aggregated update error is within ``tol``."""
        vals, diffs = self.update_errors(s)
        agg = diffs.max(axis=1)  # (n_entries, ns)
        hit = agg <= tol
        conv = hit.any(axis=0)
        first = np.where(conv, hit.argmax(axis=0), agg.shape[0] - 1)
        ns = agg.shape[1]
        values = vals[first, :, np.arange(ns)]  # (ns, k)
        errors = agg[first, np.arange(ns)]
        return conv, first, values, errors

    def aggregated_errors(self, s):
        _, diffs = self.update_errors(s)
        return diffs.max(axis=1)
