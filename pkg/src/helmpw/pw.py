"""Staged analytic continuation of the HELM germ (Padé-Weierstrass).

When the staircase does not converge at ``s = 1``, the germ is evaluated
at a real point ``s0`` well inside its convergence region and the problem is
re-embedded around that point.  The substitution ``s = s0 + (1 - s0) s'``,
``V = V(s0) V'`` and ``Q = Q(s0) + Q'`` maps the remaining continuation to a
problem of the same form on ``[0, 1]``, with Gamma terms absorbing the
partial injections.  Voltages compose multiplicatively, injections
additively.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .helm import (ControlParams, EmbeddingConfig, StageParams, StageRun,
                   build_stage_system, initial_stage_params, run_stage)
from .diagnostics import AT_QMAX, AT_QMIN, SATURATION_QTOL, SETPOINT_TOL
from .netmodel import ConditioningError, Network

DEFAULT_GRID = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)


class StallSignal(RuntimeError):
    """No advance point above the floor converges."""


class DegenerateVoltageError(ConditioningError):
    pass


class PWNonConvergence(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class PWOptions:
    tol: float = 1e-11
    Nmax: int = 32
    stage_cap: int = 80
    mismatch_gate: float = 1e-8
    beta: float = 0.95
    grid: tuple = DEFAULT_GRID
    bisections: int = 20
    s_floor: float = 1e-6
    stall_s0: float = 0.01
    stall_stages: int = 3
    retries: int = 6
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    # smaller two-sided mu values tried, in order, when the primary path stalls
    mu_fallback: tuple = (0.1, 0.01)
    # grow every stage to Nmax instead of stopping at the first converged order
    full_orders: bool = False
    qtol: float = SATURATION_QTOL
    wtol: float = SETPOINT_TOL


@dataclass
class PWStage:
    k: int
    s0: float
    V: np.ndarray  # partial voltages at s0, every bus
    Q: np.ndarray  # partial net injections at s0
    params: StageParams  # the parameters this stage was solved with
    position: float  # accumulated position in the original s after this stage
    orders: int = 0
    error: float = np.inf

    def record(self) -> dict:
        return {"stage": self.k, "s0": self.s0, "Nmax": self.orders,
                "update_error": self.error, "position": self.position}


@dataclass
class Solution:
    V: np.ndarray
    Q: np.ndarray  # net reactive injection per control
    Qgen: np.ndarray  # regulating-generator output per control
    status: tuple
    stages: int
    mismatch: float
    converged: bool
    infeasible: bool = False
    s_crit: Optional[float] = None
    lagrangian: Optional[float] = None
    trace: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    final_error: float = np.inf
    histories: list = field(default_factory=list)  # per stage, update error per order
    stage_params: list = field(default_factory=list)  # embedded problem of each stage

    @property
    def attained_error(self) -> float:
        """Smallest update error reached in the final stage."""
        h = [e for e in (self.histories[-1][1:] if self.histories else []) if np.isfinite(e)]
        return float(min(h)) if h else np.inf

    def counts(self):
        return (sum(s == AT_QMIN for s in self.status), sum(s == AT_QMAX for s in self.status))

    def trace_json(self) -> str:
        return json.dumps(self.trace, indent=1)


# ---------------------------------------------------------------------------
# advance point
# ---------------------------------------------------------------------------

_SCAN = 32  # points per refinement scan


def _converges(run: StageRun, s: np.ndarray, tol: float) -> np.ndarray:
    agg = run.table.aggregated_errors(s)
    return (agg <= tol).any(axis=0)


def find_advance_point(run: StageRun, tol: float, opts: PWOptions = PWOptions()) -> float:
    """Largest safe real advance point of a stage.

    Scans the grid upward to its first failure and refines the last bracket.
    Returns 1.0 when the staircase converges at ``s = 1``.
    """
    if len(run.table) < 4:
        raise ValueError("advance-point search needs at least 4 orders")
    if _converges(run, np.array([1.0]), tol)[0]:
        return 1.0
    grid = np.array(sorted(opts.grid))
    ok = _converges(run, grid, tol)
    fail = np.flatnonzero(~ok)
    if len(fail) == 0:
        lo, hi = grid[-1], 1.0
    else:
        j = fail[0]
        lo, hi = (grid[j - 1] if j > 0 else 0.0), grid[j]
    # refine the bracket with vectorized scans, as fine as ``bisections`` halvings
    rounds = int(np.ceil(opts.bisections * np.log(2) / np.log(_SCAN + 1)))
    for _ in range(rounds):
        pts = np.linspace(lo, hi, _SCAN + 2)[1:-1]
        fail = np.flatnonzero(~_converges(run, pts, tol))
        if len(fail) == 0:
            lo = pts[-1]
        else:
            j = fail[0]
            lo, hi = (pts[j - 1] if j > 0 else lo), pts[j]
    if lo < opts.s_floor:
        raise StallSignal(f"no convergent point above {opts.s_floor:g}")
    return opts.beta * lo


def partial_values(run: StageRun, s0: float):
    """Voltages and injections of a stage at ``s0``, taken at the staircase
    entry with the smallest update error."""
    vals, diffs = run.table.update_errors(np.array([s0]))
    agg = diffs[:, :, 0].max(axis=1)
    best = int(np.argmin(agg[1:]) + 1) if len(agg) > 1 else 0
    nf = len(run.system.free)
    V = np.empty(run.params.n_bus, dtype=complex)
    V[run.system.free] = vals[best, :nf, 0]
    V[run.params.swing] = 1.0 + s0 * run.params.swing_c1
    Q = vals[best, nf:, 0].real.copy()
    return V, Q, float(agg[best]), best


def stage_mismatch(params: StageParams, s: float, V: np.ndarray, Q: np.ndarray) -> float:
    """Worst nodal current residual of the embedded equations at ``s``."""
    Y = sp.csr_matrix(params.Y)
    lhs = Y @ V + s * params.Ysh * V
    rhs = (s * np.conj(params.S) + params.Gamma) / np.conj(V) - params.Gamma * V + s * params.I
    for k, c in enumerate(params.controls):
        rhs[c.a] -= 1j * Q[k] / np.conj(V[c.a])
    r = np.abs(lhs - rhs)
    r[params.swing] = 0.0
    return float(r.max(initial=0.0))


# ---------------------------------------------------------------------------
# stage transformation
# ---------------------------------------------------------------------------

def transform_stage(params: StageParams, s0: float, V: np.ndarray, Q: np.ndarray,
                    vmin: float = 1e-6) -> StageParams:
    """Re-embed ``params`` around the partial solution ``(V, Q)`` at ``s0``."""
    if not 0.0 <= s0 < 1.0:
        raise ValueError("s0 must lie in [0, 1)")
    if np.any(params.I != 0) and s0 > 0:
        raise ValueError("constant-current injections are not invariant under a stage transform")
    V = np.asarray(V, dtype=complex)
    if np.min(np.abs(V)) < vmin:
        k = int(np.argmin(np.abs(V)))
        raise DegenerateVoltageError(f"|V| = {abs(V[k]):.3g} at bus position {k}")
    Y = sp.csr_matrix(params.Y)
    Yhat = sp.diags(np.conj(V)) @ Y @ sp.diags(V)
    rowsum = np.asarray(Yhat.sum(axis=1)).ravel()
    Ynew = (Yhat - sp.diags(rowsum)).tocsr()
    Ynew.sort_indices()
    m2 = np.abs(V) ** 2
    Ysh = (1.0 - s0) * m2 * params.Ysh
    Gamma = params.Gamma + s0 * np.conj(params.S)
    ctrls = []
    for k, c in enumerate(params.controls):
        Gamma[c.a] -= 1j * Q[k]
        vb2 = m2[c.b]

        def shift(q):
            if q is None:
                return None
            return (q[0] + s0 * q[1] - Q[k], (1.0 - s0) * q[1])

        nc = ControlParams(
            a=c.a, b=c.b, mu=(1.0 - s0) * c.mu / vb2,
            W0=(c.W0 + s0 * c.W1) / vb2, W1=(1.0 - s0) * c.W1 / vb2,
            qlo=shift(c.qlo), qhi=shift(c.qhi))
        # the germ starts from V' = 1 with B'[0] = -mu'/q'[0], so the order-0
        # constraint only holds to the accuracy of the partial solution;
        # take W0' from it exactly and keep the end target W0' + W1'
        w0 = 1.0 - sum(nc.B0())
        ctrls.append(replace(nc, W0=w0, W1=(c.W0 + c.W1) / vb2 - w0))
    c1 = params.swing_c1
    return StageParams(Y=Ynew, Ysh=Ysh, Gamma=Gamma, S=(1.0 - s0) * params.S,
                       swing=params.swing, swing_c1=(1.0 - s0) * c1 / (1.0 + s0 * c1),
                       controls=tuple(ctrls), I=params.I.copy())


def unwind(stages, V_final, Q_final):
    """Compose partial solutions: voltages multiply, injections add."""
    V = np.asarray(V_final, dtype=complex).copy()
    Q = np.asarray(Q_final, dtype=float).copy()
    for st in stages:
        V = V * st.V
        Q = Q + st.Q
    return V, Q


def accumulated_position(s0s) -> float:
    return float(1.0 - np.prod([1.0 - s for s in s0s]))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _finish(net, stages, V, Q, opts, trace, final_error, converged=True,
            infeasible=False, s_crit=None, histories=(), stage_params=()):
    from .diagnostics import complementarity_check, lagrangian_value, mismatch

    ctrls = net.controls
    Qgen = np.array([q - c.q_offset for q, c in zip(Q, ctrls)])
    mm = mismatch(net, V, Q) if converged else np.inf
    status, violations = complementarity_check(net, V, Q, qtol=opts.qtol, wtol=opts.wtol)
    lag = None
    if converged:
        try:
            lag = lagrangian_value(net, V, Q)
        except ValueError:
            lag = None
    return Solution(V=V, Q=Q, Qgen=Qgen, status=tuple(status), stages=len(stages),
                    mismatch=mm, converged=converged and mm <= opts.mismatch_gate,
                    infeasible=infeasible, s_crit=s_crit, lagrangian=lag, trace=trace,
                    violations=violations, final_error=final_error,
                    histories=[list(h) for h in histories], stage_params=list(stage_params))


def solve_pw(net: Network, opts: PWOptions = PWOptions(), limits: bool = True,
             params: Optional[StageParams] = None) -> Solution:
    """Solve the power flow by staged continuation.

    Returns a Solution; a stall is reported as ``infeasible`` with the
    accumulated position as the estimate of the critical point.  Exceeding
    the stage cap raises PWNonConvergence carrying the stage trace.

    The barrier weight mu only shapes the path, not the solution at s = 1.
    A large mu can pin narrow-range controls near the middle of their range
    at intermediate s and fold the path before s = 1, so a stall of a
    limited problem is retried with each value of ``opts.mu_fallback``.
    """
    if not limits:
        net = net.without_limits()
    sol = _solve_path(net, opts, params)
    limited = any(c.qmin_net is not None and c.qmax_net is not None for c in net.controls)
    if params is not None or not limited:
        return sol
    for mu in opts.mu_fallback:
        if not sol.infeasible:
            break
        alt = replace(opts, embedding=replace(opts.embedding, two_sided_mu=mu))
        retry = _solve_path(net, alt, None)
        if not retry.infeasible or retry.s_crit > sol.s_crit:
            sol = retry
    return sol


def _solve_path(net: Network, opts: PWOptions, params: Optional[StageParams]) -> Solution:
    params = initial_stage_params(net, opts.embedding) if params is None else params
    params.validate()
    stages: list = []
    trace: list = []
    histories: list = []
    plist: list = []
    position = 0.0
    small = 0
    for k in range(opts.stage_cap + 1):
        run = run_stage(params, opts.tol, opts.Nmax, stop_on_convergence=not opts.full_orders)
        histories.append(run.germ.errors)
        plist.append(params)
        v = run.verdict
        if v.converged:
            V, Q = unwind(stages, v.V, v.Q)
            trace.append({"stage": k, "s0": 1.0, "Nmax": v.orders_used,
                          "update_error": v.error_estimate, "position": 1.0})
            sol = _finish(net, stages, V, Q, opts, trace, v.error_estimate,
                          histories=histories, stage_params=plist)
            if sol.converged or k == opts.stage_cap:
                return sol
            # the series converged but the unwound mismatch misses the gate:
            # take one more stage short of s = 1 instead of accepting it
        if k == opts.stage_cap:
            break
        try:
            s_star = find_advance_point(run, opts.tol, opts) / opts.beta
        except StallSignal:
            s_star = 0.0
        if np.any(params.I != 0):
            raise ValueError("constant-current injections require convergence at the first stage")
        if s_star >= 1.0:
            s_star = max(g for g in opts.grid if g < 1.0)
        s0 = opts.beta * s_star
        new_params = None
        for _ in range(opts.retries):
            if s0 < opts.s_floor:
                break
            Vs, Qs, err, best = partial_values(run, s0)
            try:
                if stage_mismatch(params, s0, Vs, Qs) > opts.mismatch_gate:
                    raise ConditioningError("partial solution misses the mismatch gate")
                cand = transform_stage(params, s0, Vs, Qs)
                cand.validate()
                build_stage_system(cand)
                new_params = cand
                break
            except (ConditioningError, ValueError):
                s0 *= 0.5
        if new_params is None:
            Vp, Qp = unwind(stages, np.ones(net.n_bus), np.zeros(len(net.controls)))
            return _finish(net, stages, Vp, Qp, opts, trace, v.error_estimate,
                           converged=False, infeasible=True, s_crit=position,
                           histories=histories, stage_params=plist)
        position = 1.0 - (1.0 - position) * (1.0 - s0)
        st = PWStage(k, s0, Vs, Qs, params, position, orders=v.orders_used, error=err)
        stages.append(st)
        trace.append(st.record())
        params = new_params
        small = small + 1 if s0 < opts.stall_s0 else 0
        if small >= opts.stall_stages:
            Vp, Qp = unwind(stages, np.ones(net.n_bus), np.zeros(len(net.controls)))
            return _finish(net, stages, Vp, Qp, opts, trace, v.error_estimate,
                           converged=False, infeasible=True, s_crit=position,
                           histories=histories, stage_params=plist)
    raise PWNonConvergence(f"no convergence within {opts.stage_cap} stages", trace)


def saturation_status(net: Network, V, Q, qtol: float = SATURATION_QTOL,
                      wtol: float = SETPOINT_TOL):
    from .diagnostics import complementarity_check

    return complementarity_check(net, V, Q, qtol=qtol, wtol=wtol)[0]
