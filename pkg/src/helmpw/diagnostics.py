"""Verification of power-flow solutions.

Mismatch in nodal currents, complementarity of the Q-limit conditions, the
potential function whose stationary points are the power-flow solutions, and
per-order convergence traces.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .netmodel import Network

INTERIOR, AT_QMIN, AT_QMAX = "interior", "at-Qmin", "at-Qmax"

PRODUCT_TOL = 1e-6
SLACK_TOL = 1e-8
SETPOINT_TOL = 1e-6
# a control within this distance (pu) of a limit counts as saturated
SATURATION_QTOL = 1e-4


class ConsistencyViolation(ValueError):
    def __init__(self, reports):
        self.reports = reports
        msg = "; ".join(r.message for r in reports)
        super().__init__(f"complementarity violated: {msg}")


def _check_voltage(V):
    V = np.asarray(V, dtype=complex)
    if np.any(np.abs(V) == 0):
        raise ValueError("zero voltage in solution")
    return V


def _specified(net: Network, Q):
    S = net.injections.copy()
    idx = net.index
    for k, c in enumerate(net.controls):
        S[idx[c.a]] += 1j * Q[k]
    return S


def current_residuals(net: Network, V, Q) -> np.ndarray:
    V = _check_voltage(V)
    Y, Ysh = net.admittance
    S = _specified(net, np.asarray(Q, dtype=float))
    r = Y @ V + Ysh * V - net.currents - np.conj(S) / np.conj(V)
    r[net.swing] = 0.0
    return r


def mismatch(net: Network, V, Q=()) -> float:
    """Worst nodal current mismatch over non-swing buses (pu)."""
    if len(Q) != len(net.controls):
        raise ValueError("one reactive injection per control is required")
    return float(np.max(np.abs(current_residuals(net, V, Q)), initial=0.0))


# ---------------------------------------------------------------------------
# complementarity
# ---------------------------------------------------------------------------

@dataclass
class ControlReport:
    a: int
    b: int
    status: str
    product: float
    slack_lo: float
    slack_hi: float
    setpoint_dev: float
    passed: bool
    message: str = ""


def complementarity_check(net: Network, V, Q, qtol: float = SATURATION_QTOL, wtol: float = SETPOINT_TOL,
                          product_tol: float = PRODUCT_TOL, slack_tol: float = SLACK_TOL):
    """Classify every control and check the three complementarity conditions.

    Returns ``(statuses, violations)`` where ``violations`` lists the
    ControlReport of every failing control.  Use ``control_reports`` for the
    full per-control breakdown.
    """
    reports = control_reports(net, V, Q, qtol, wtol, product_tol, slack_tol)
    return [r.status for r in reports], [r for r in reports if not r.passed]


def control_reports(net: Network, V, Q, qtol: float = SATURATION_QTOL, wtol: float = SETPOINT_TOL,
                    product_tol: float = PRODUCT_TOL, slack_tol: float = SLACK_TOL):
    V = _check_voltage(V)
    idx = net.index
    out = []
    for k, c in enumerate(net.controls):
        q = float(Q[k])
        vb2 = abs(V[idx[c.b]]) ** 2
        dev = vb2 - c.Wsp
        lo, hi = c.qmin_net, c.qmax_net
        slack_lo = np.inf if lo is None else q - lo
        slack_hi = np.inf if hi is None else hi - q
        product = dev
        if lo is not None:
            product *= slack_lo
        if hi is not None:
            product *= slack_hi
        if hi is not None and abs(slack_hi) <= qtol:
            status = AT_QMAX
        elif lo is not None and abs(slack_lo) <= qtol:
            status = AT_QMIN
        else:
            status = INTERIOR
        problems = []
        if abs(product) > product_tol:
            problems.append(f"product {product:.3g}")
        if slack_lo < -slack_tol or slack_hi < -slack_tol:
            problems.append(f"limit exceeded (slacks {slack_lo:.3g}, {slack_hi:.3g})")
        if status == INTERIOR and abs(dev) > wtol:
            problems.append(f"interior but |V|^2 - Wsp = {dev:.3g}")
        if status == AT_QMAX and dev > wtol:
            problems.append("at Qmax with |V| above setpoint")
        if status == AT_QMIN and dev < -wtol:
            problems.append("at Qmin with |V| below setpoint")
        msg = f"control {c.a}->{c.b}: " + ", ".join(problems) if problems else ""
        out.append(ControlReport(c.a, c.b, status, float(product), float(slack_lo),
                                 float(slack_hi), float(dev), not problems, msg))
    return out


def saturation_status(net: Network, V, Q, qtol: float = SATURATION_QTOL, wtol: float = SETPOINT_TOL,
                      strict: bool = True):
    statuses, bad = complementarity_check(net, V, Q, qtol, wtol)
    if bad and strict:
        raise ConsistencyViolation(bad)
    return statuses


# ---------------------------------------------------------------------------
# potential functions
# ---------------------------------------------------------------------------

def _susceptances(net: Network):
    """Branch susceptances b_ij (i < j) and shunt susceptances, taken from the
    transmission matrix so that taps are included."""
    Y, Ysh = net.admittance
    off = sp.triu(Y, k=1).tocoo()
    low = sp.tril(Y, k=-1).T.tocsr()
    b = -0.5 * (off.data.imag + np.asarray(low[off.row, off.col]).ravel().imag)
    return off.row, off.col, b, Ysh.imag


def lagrangian_value(net: Network, V, Q=None, max_angle: float = 0.9 * np.pi) -> float:
    """Potential whose stationary points (for fixed P, Q) are the lossless AC
    power-flow equations.  Conductances, if present, are ignored."""
    V = _check_voltage(V)
    theta = np.angle(V)
    if np.max(np.abs(theta)) > max_angle:
        raise ValueError("angle spread too close to pi for a principal-branch evaluation")
    Q = np.zeros(len(net.controls)) if Q is None else np.asarray(Q, dtype=float)
    S = _specified(net, Q)
    i, j, b, bsh = _susceptances(net)
    mask = np.ones(net.n_bus, dtype=bool)
    mask[net.swing] = False
    I = net.currents
    L = -0.5 * np.sum(b * np.abs(V[i] - V[j]) ** 2)
    L -= 0.5 * np.sum(bsh[mask] * np.abs(V[mask]) ** 2)
    cross = I.real * V.imag - I.imag * V.real
    L -= np.sum(cross[mask])
    L -= 0.5 * np.sum(S.imag[mask] * np.log(np.abs(V[mask]) ** 2))
    L -= np.sum(S.real[mask] * theta[mask])
    return float(L)


def energy_value(net: Network, V, Q) -> float:
    """The Lagrangian without the logarithmic reactive terms of the
    controlling buses, i.e. the objective of the limited problem."""
    V = _check_voltage(V)
    L = lagrangian_value(net, V, Q)
    S = _specified(net, np.asarray(Q, dtype=float))
    idx = net.index
    for c in net.controls:
        k = idx[c.a]
        L += 0.5 * S.imag[k] * np.log(abs(V[k]) ** 2)
    return float(L)


def dc_lagrangian(net: Network, V) -> float:
    """Potential of an all-DC network (real voltages, conductances only)."""
    V = np.asarray(V, dtype=float)
    if np.any(V <= 0):
        raise ValueError("DC voltages must be positive")
    Y, Ysh = net.admittance
    off = sp.triu(Y, k=1).tocoo()
    g = -off.data.real
    mask = np.ones(net.n_bus, dtype=bool)
    mask[net.swing] = False
    P = net.injections.real
    I = net.currents.real
    L = 0.5 * np.sum(g * (V[off.row] - V[off.col]) ** 2)
    L += np.sum((0.5 * Ysh.real * V ** 2 - I * V - P * np.log(V))[mask])
    return float(L)


# ---------------------------------------------------------------------------
# traces and reports
# ---------------------------------------------------------------------------

def convergence_trace(histories) -> list:
    """Rows ``(stage, N, error)`` from per-stage update-error histories.

    ``histories[k][N]`` is the aggregated staircase difference after order N
    in stage k; the order-0 entry has no predecessor and is skipped.
    """
    rows = []
    for k, hist in enumerate(histories):
        for N, e in enumerate(hist):
            if N == 0 or not np.isfinite(e):
                continue
            rows.append((k, N, float(e)))
    return rows


def trace_csv(rows, stream=None) -> str:
    buf = io.StringIO() if stream is None else stream
    w = csv.writer(buf)
    w.writerow(["stage", "N", "error"])
    for r in rows:
        w.writerow([r[0], r[1], f"{r[2]:.6e}"])
    return buf.getvalue() if stream is None else ""


@dataclass
class Verification:
    mismatch: float
    products: list
    slacks: list
    violations: list
    lagrangian: Optional[float]
    trace: list = field(default_factory=list)

    def to_json(self) -> str:
        def clean(x):
            if isinstance(x, float) and not np.isfinite(x):
                return None
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            return x

        return json.dumps({k: clean(v) for k, v in asdict(self).items()}, indent=1)


def verify(net: Network, V, Q, trace=()) -> Verification:
    reports = control_reports(net, V, Q)
    try:
        lag = lagrangian_value(net, V, Q)
    except ValueError:
        lag = None
    return Verification(
        mismatch=mismatch(net, V, Q),
        products=[r.product for r in reports],
        slacks=[(r.slack_lo, r.slack_hi) for r in reports],
        violations=[r.message for r in reports if not r.passed],
        lagrangian=lag,
        trace=[list(r) for r in trace],
    )
