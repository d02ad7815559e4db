"""Newton-Raphson reference power flow with optional PV-PQ switching.

Polar formulation.  Unknowns are angle and magnitude at every non-swing bus
plus the net reactive injection of every active (non-saturated) control.
Each active control contributes the equation ``|V_b| = Vsp``; a saturated
control pins its injection at the limit instead.  This handles remote
regulation without special cases.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .diagnostics import AT_QMAX, AT_QMIN, INTERIOR, complementarity_check
from .netmodel import Network

STRATEGIES = ("none", "switch-all", "switch-one")


@dataclass
class NRReport:
    V: np.ndarray
    Q: np.ndarray  # net reactive injection per control
    status: tuple
    converged: bool
    iterations: int
    outer_rounds: int = 0
    mismatch: float = np.inf
    cycled: bool = False
    history: list = field(default_factory=list)
    # classification of the final point by the shared saturation tolerance;
    # can differ from ``status`` for a PV control sitting just inside a limit
    saturation: tuple = ()

    def counts(self):
        st = self.saturation or self.status
        return (sum(s == AT_QMIN for s in st), sum(s == AT_QMAX for s in st))


def _ybus(net: Network):
    Y, Ysh = net.admittance
    return (Y + sp.diags(Ysh)).tocsr()


def _dS_dV(Ybus, V, Ic):
    """Polar derivatives of bus power, following the standard sparse forms."""
    Ibus = Ybus @ V - Ic
    dV = sp.diags(V)
    dI = sp.diags(Ibus)
    dVn = sp.diags(V / np.abs(V))
    dS_dVa = 1j * dV @ np.conj(dI - Ybus @ dV)
    dS_dVm = dV @ np.conj(Ybus @ dVn) + np.conj(dI) @ dVn
    return dS_dVa, dS_dVm


class _Problem:
    def __init__(self, net: Network):
        self.net = net
        self.Ybus = _ybus(net)
        self.n = net.n_bus
        self.sw = net.swing
        self.free = np.array([i for i in range(self.n) if i != self.sw])
        self.S = net.injections
        self.Ic = net.currents
        idx = net.index
        self.ctrls = net.controls
        self.a = np.array([idx[c.a] for c in self.ctrls], dtype=int)
        self.b = np.array([idx[c.b] for c in self.ctrls], dtype=int)
        self.vsp = np.array([c.Vsp for c in self.ctrls])
        self.qmin = np.array([-np.inf if c.qmin_net is None else c.qmin_net for c in self.ctrls])
        self.qmax = np.array([np.inf if c.qmax_net is None else c.qmax_net for c in self.ctrls])

    def q_injection(self, V):
        """Net reactive injection at each controlling bus implied by V."""
        Scalc = V * np.conj(self.Ybus @ V - self.Ic)
        return Scalc[self.a].imag

    def solve(self, status, V0, tol, max_iter):
        n, free = self.n, self.free
        nf = len(free)
        active = np.array([s == INTERIOR for s in status], dtype=bool)
        act = np.flatnonzero(active)
        V = V0.copy()
        for k in act:
            V[self.b[k]] = self.vsp[k] * V[self.b[k]] / abs(V[self.b[k]])
        Q = self.q_injection(V)
        for k, s in enumerate(status):
            if s == AT_QMIN:
                Q[k] = self.qmin[k]
            elif s == AT_QMAX:
                Q[k] = self.qmax[k]
        pos = -np.ones(n, dtype=int)
        pos[free] = np.arange(nf)

        def mismatch(V, Q):
            Sspec = self.S.copy()
            np.add.at(Sspec, self.a, 1j * Q)
            F = V * np.conj(self.Ybus @ V - self.Ic) - Sspec
            g = np.abs(V[self.b[act]]) - self.vsp[act]
            return np.concatenate([F[free].real, F[free].imag, g])

        it = 0
        f = mismatch(V, Q)
        while np.max(np.abs(f), initial=0.0) > tol and it < max_iter:
            it += 1
            dVa, dVm = _dS_dV(self.Ybus, V, self.Ic)
            J11 = dVa[free][:, free]
            J12 = dVm[free][:, free]
            # Q columns: the specified injection enters the Q mismatch with -1
            qc = sp.csr_matrix((-np.ones(len(act)), (pos[self.a[act]], np.arange(len(act)))),
                               shape=(nf, len(act)))
            grow = sp.csr_matrix((np.ones(len(act)), (np.arange(len(act)), pos[self.b[act]])),
                                 shape=(len(act), nf))
            J = sp.bmat([
                [J11.real, J12.real, None],
                [J11.imag, J12.imag, qc],
                [None, grow, None],
            ], format="csc")
            try:
                dx = spsolve(J, -f)
            except Exception:  # pragma: no cover - singular Jacobian
                return V, Q, False, it
            if not np.all(np.isfinite(dx)):
                return V, Q, False, it
            va = np.angle(V)
            vm = np.abs(V)
            va[free] += dx[:nf]
            vm[free] += dx[nf:2 * nf]
            V = vm * np.exp(1j * va)
            Q = Q.copy()
            Q[act] += dx[2 * nf:]
            f = mismatch(V, Q)
            if not np.all(np.isfinite(f)):
                return V, Q, False, it
        return V, Q, bool(np.max(np.abs(f), initial=0.0) <= tol), it

    def flat_start(self):
        V = np.ones(self.n, dtype=complex)
        V[self.sw] = self.net.swing_voltage
        V[self.b] = self.vsp
        return V

    def mismatch_norm(self, V, Q):
        Sspec = self.S.copy()
        np.add.at(Sspec, self.a, 1j * Q)
        F = V * np.conj(self.Ybus @ V - self.Ic) - Sspec
        return float(np.max(np.abs(F[self.free]), initial=0.0))


def newton_solve(net: Network, q_limits: str = "none", tol: float = 1e-8,
                 max_iter: int = 30, max_outer: int = 50,
                 status: Optional[Sequence[str]] = None,
                 V0: Optional[np.ndarray] = None, qtol: float = 1e-6) -> NRReport:
    """Solve the power flow.

    ``q_limits`` selects the limit strategy: ``none`` ignores limits,
    ``switch-all`` converts every violating control at once (and reverts
    saturated controls whose voltage moved to the wrong side), ``switch-one``
    converts only the worst offender per round.  ``status`` fixes an initial
    saturation assignment.
    """
    if q_limits not in STRATEGIES:
        raise ValueError(f"unknown strategy {q_limits!r}")
    prob = _Problem(net)
    nc = len(prob.ctrls)
    status = list(status) if status is not None else [INTERIOR] * nc
    V = prob.flat_start() if V0 is None else np.asarray(V0, dtype=complex)
    seen = set()
    total = 0
    rounds = 0
    history = []
    cycled = False
    while True:
        V, Q, ok, it = prob.solve(status, V, tol, max_iter)
        total += it
        history.append(tuple(status))
        if not ok or q_limits == "none":
            break
        key = tuple(status)
        seen.add(key)
        vb = np.abs(V[prob.b])
        viol = []  # (magnitude, index, new status)
        for k in range(nc):
            if status[k] == INTERIOR:
                if Q[k] > prob.qmax[k] + qtol:
                    viol.append((Q[k] - prob.qmax[k], k, AT_QMAX))
                elif Q[k] < prob.qmin[k] - qtol:
                    viol.append((prob.qmin[k] - Q[k], k, AT_QMIN))
        rev = []
        for k in range(nc):
            if status[k] == AT_QMAX and vb[k] > prob.vsp[k] + qtol:
                rev.append((vb[k] - prob.vsp[k], k, INTERIOR))
            elif status[k] == AT_QMIN and vb[k] < prob.vsp[k] - qtol:
                rev.append((prob.vsp[k] - vb[k], k, INTERIOR))
        if not viol and not rev:
            break
        rounds += 1
        if rounds > max_outer:
            ok = False
            break
        if q_limits == "switch-all":
            changes = viol + rev
        else:
            changes = [max(viol)] if viol else [max(rev)]
        for _, k, s in changes:
            status[k] = s
        if tuple(status) in seen:
            cycled, ok = True, False
            break
    sat = tuple(complementarity_check(net, V, Q)[0]) if ok and q_limits != "none" else ()
    return NRReport(V=V, Q=Q, status=tuple(status), converged=bool(ok), iterations=total,
                    outer_rounds=rounds, mismatch=prob.mismatch_norm(V, Q), cycled=cycled,
                    history=history, saturation=sat)


@dataclass
class Assignment:
    status: tuple
    converged: bool
    feasible: bool
    V: np.ndarray
    Q: np.ndarray


def enumerate_assignments(net: Network, controls: Optional[Sequence[int]] = None,
                          tol: float = 1e-8, qtol: float = 1e-6,
                          max_controls: int = 12) -> list:
    """Solve every saturation assignment of the chosen controls.

    Controls outside ``controls`` (indices into ``net.controls``) stay at
    their setpoint.  Feasibility means the solution satisfies every limit and
    every saturated control's voltage deviates in the consistent direction.
    """
    prob = _Problem(net)
    nc = len(prob.ctrls)
    chosen = list(range(nc)) if controls is None else list(controls)
    if len(chosen) > max_controls:
        raise ValueError(f"{len(chosen)} controls exceed the enumeration cap {max_controls}")
    out = []
    for combo in itertools.product((INTERIOR, AT_QMIN, AT_QMAX), repeat=len(chosen)):
        status = [INTERIOR] * nc
        for k, s in zip(chosen, combo):
            status[k] = s
        if any((s == AT_QMIN and not np.isfinite(prob.qmin[k]))
               or (s == AT_QMAX and not np.isfinite(prob.qmax[k]))
               for k, s in enumerate(status)):
            continue
        V, Q, ok, _ = prob.solve(status, prob.flat_start(), tol, 30)
        feas = ok
        if ok:
            vb = np.abs(V[prob.b])
            for k, s in enumerate(status):
                if s == INTERIOR:
                    feas &= prob.qmin[k] - qtol <= Q[k] <= prob.qmax[k] + qtol
                elif s == AT_QMAX:
                    feas &= vb[k] <= prob.vsp[k] + qtol
                else:
                    feas &= vb[k] >= prob.vsp[k] - qtol
        out.append(Assignment(tuple(status), bool(ok), bool(feas), V, Q))
    return out
