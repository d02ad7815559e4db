"""One embedded HELM problem: germ construction with limit complementarity.

Each stage solves, for every non-swing bus ``i``,

    sum_j Y_ij V_j(s) + s Ysh_i V_i(s)
        = s S_i* / V_i*(s) + Gamma_i (1/V_i*(s) - V_i(s)) + s I_i
          - j Q_i(s) / V_i*(s)             (controlling buses only)

with ``V_sw(s) = 1 + s c1`` at the swing.  A control regulating ``|V_b|``
from bus ``a`` adds

    V_b(s) V_b*(s) = W0 + s W1 + B_up(s) + B_lo(s),
    B_side(s) (Q_a(s) - Qlim_side(s)) = mu (1 - s),   Qlim(s) = q0 + s q1,

or, without limits, ``V_b V_b* = W0 + s W1``.  The reference state at
``s = 0`` is ``V = 1``, ``Q = 0``, ``B_side[0] = -mu / q0_side``.

The order-N system is real: the unknowns are ``[Re V_free, Im V_free]``.
For a limited control, ``Q_a[N]`` is eliminated through the linearised
constraint ``2 Re V_b[N] + pi Q_a[N] = T_a``; for an unlimited one,
``Re V_b[N]`` is known and its column slot carries ``Q_a[N]`` instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import linsys
from .netmodel import BusKind, ConditioningError, ControlSet, Network
from .pade import StaircaseTable
from .series import DEFAULT_ORDER

REAL_TOL = 1e-12


@dataclass(frozen=True)
class EmbeddingConfig:
    """Constants for the limit embedding (one-sided defaults are heuristics)."""

    lower_only_w0: float = 0.9
    lower_only_q0: float = -10.0
    upper_only_w0: float = 1.1
    upper_only_q0: float = 10.0
    two_sided_mu: float = 1.0


@dataclass(frozen=True)
class ControlParams:
    a: int  # bus index of the injection
    b: int  # bus index of the regulated voltage
    mu: float
    W0: float
    W1: float
    qlo: Optional[tuple] = None  # (q0, q1) or None
    qhi: Optional[tuple] = None

    @property
    def limited(self) -> bool:
        return self.qlo is not None or self.qhi is not None

    @property
    def sides(self):
        return [q for q in (self.qhi, self.qlo) if q is not None]

    @property
    def pivot(self) -> float:
        """``pi = mu * sum 1/q0^2`` over present sides (0 when unlimited)."""
        return self.mu * sum(1.0 / q[0] ** 2 for q in self.sides)

    def B0(self):
        up = -self.mu / self.qhi[0] if self.qhi is not None else 0.0
        lo = -self.mu / self.qlo[0] if self.qlo is not None else 0.0
        return up, lo


def embedding_constants(ctrl: ControlSet, config: EmbeddingConfig = EmbeddingConfig()):
    """Return ``(mu, (W0, W1), qlo, qhi)`` with ``qlo``/``qhi`` as ``(q0, q1)``
    pairs or None.  Limits are taken on the net injection at ``a``."""
    W = ctrl.Wsp
    lo, hi = ctrl.qmin_net, ctrl.qmax_net
    if lo is not None and hi is not None:
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        return config.two_sided_mu, (1.0, W - 1.0), (-half, mid), (half, mid)
    if lo is not None:
        w0, q0 = config.lower_only_w0, config.lower_only_q0
        return q0 * (w0 - 1.0), (w0, W - w0), (q0, lo - q0), None
    if hi is not None:
        w0, q0 = config.upper_only_w0, config.upper_only_q0
        return q0 * (w0 - 1.0), (w0, W - w0), None, (q0, hi - q0)
    return 0.0, (1.0, W - 1.0), None, None


@dataclass
class StageParams:
    """Parameters of one embedded problem, indexed by bus position."""

    Y: sp.csr_matrix
    Ysh: np.ndarray
    Gamma: np.ndarray
    S: np.ndarray
    swing: int
    swing_c1: complex
    controls: tuple = ()
    I: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.Y.shape[0]
        self.Ysh = np.asarray(self.Ysh, dtype=complex)
        self.Gamma = np.asarray(self.Gamma, dtype=complex)
        self.S = np.asarray(self.S, dtype=complex)
        if self.I is None:
            self.I = np.zeros(n, dtype=complex)
        for arr in (self.Ysh, self.Gamma, self.S, self.I):
            if arr.shape != (n,):
                raise ValueError("per-bus parameter arrays must match the admittance size")

    @property
    def n_bus(self) -> int:
        return self.Y.shape[0]

    def validate(self, tol: float = 1e-9) -> None:
        """Interior-point and transmission conditions."""
        rs = np.abs(np.asarray(self.Y.sum(axis=1)).ravel())
        scale = max(1.0, float(abs(self.Y).max()))
        if rs.max(initial=0.0) > tol * scale:
            raise ValueError("admittance rows do not sum to zero")
        for c in self.controls:
            if c.limited and not c.mu > 0:
                raise ValueError(f"control at {c.a}: mu must be positive")
            if c.qlo is not None and not c.qlo[0] < 0:
                raise ValueError(f"control at {c.a}: Qmin[0] must be negative")
            if c.qhi is not None and not c.qhi[0] > 0:
                raise ValueError(f"control at {c.a}: Qmax[0] must be positive")
            if self.S[c.a].imag != 0:
                raise ValueError(f"control at {c.a}: injection must be real (P only)")


def initial_stage_params(net: Network, config: EmbeddingConfig = EmbeddingConfig()) -> StageParams:
    idx = net.index
    S = net.injections.copy()
    ctrls = []
    for c in net.controls:
        mu, (w0, w1), qlo, qhi = embedding_constants(c, config)
        ctrls.append(ControlParams(idx[c.a], idx[c.b], mu, w0, w1, qlo, qhi))
    return StageParams(Y=net.Y, Ysh=net.Ysh, Gamma=np.zeros(net.n_bus, dtype=complex), S=S,
                       swing=net.swing, swing_c1=complex(net.swing_voltage - 1.0),
                       controls=tuple(ctrls), I=net.currents.copy())


# ---------------------------------------------------------------------------
# system assembly
# ---------------------------------------------------------------------------

@dataclass
class StageSystem:
    F: linsys.FactoredSystem
    A: sp.csc_matrix
    free: np.ndarray  # bus indices of unknowns, in order
    pos: np.ndarray  # bus index -> free position (-1 at swing)
    pivots: np.ndarray  # per control (0 for unlimited)
    known_cols: np.ndarray  # dense columns for unlimited Re V_b, (2nf, n_unlimited)
    unlimited: np.ndarray  # control indices without limits
    Ysw: np.ndarray  # column of Y at the swing

    @property
    def dimension(self) -> int:
        return self.A.shape[0]


def build_stage_system(params: StageParams) -> StageSystem:
    n = params.n_bus
    sw = params.swing
    free = np.array([i for i in range(n) if i != sw], dtype=int)
    pos = -np.ones(n, dtype=int)
    pos[free] = np.arange(len(free))
    nf = len(free)
    Y = sp.csr_matrix(params.Y)
    Yff = Y[free][:, free]
    G2 = sp.diags(2.0 * params.Gamma[free])
    Yr, Yi = Yff.real, Yff.imag
    A = sp.bmat([[Yr + G2.real, -Yi], [Yi + G2.imag, Yr]], format="lil")

    pivots = np.zeros(len(params.controls))
    unlimited = []
    for k, c in enumerate(params.controls):
        if pos[c.a] < 0 or pos[c.b] < 0:
            raise ValueError("controls may not involve the swing bus")
        if c.limited:
            pivots[k] = c.pivot
            if not pivots[k] > 0:
                raise ConditioningError(f"control at {c.a}: non-positive constraint pivot")
            A[nf + pos[c.a], pos[c.b]] += -2.0 / pivots[k]
        else:
            unlimited.append(k)
    A = A.tocsc()
    known = np.zeros((2 * nf, len(unlimited)))
    if unlimited:
        cols = [pos[params.controls[k].b] for k in unlimited]
        known = A[:, cols].toarray()
        keep = np.ones(2 * nf)
        keep[cols] = 0.0
        A = A @ sp.diags(keep)
        q_rows = [nf + pos[params.controls[k].a] for k in unlimited]
        A = A + sp.csc_matrix((np.ones(len(cols)), (q_rows, cols)), shape=A.shape)
        A = A.tocsc()
    A.eliminate_zeros()
    F = linsys.factorize(A)
    Ysw = np.asarray(Y[:, [sw]].todense()).ravel()
    return StageSystem(F, A, free, pos, pivots, known, np.array(unlimited, dtype=int), Ysw)


# ---------------------------------------------------------------------------
# germ
# ---------------------------------------------------------------------------

@dataclass
class Germ:
    V: np.ndarray  # (Nmax+1, n) complex
    Vinv: np.ndarray
    Q: np.ndarray  # (Nmax+1, n_ctrl) real
    Bup: np.ndarray
    Blo: np.ndarray
    N: int = 0
    errors: list = field(default_factory=list)

    @property
    def capacity(self) -> int:
        return self.V.shape[0] - 1

    def coefficients(self, free=None) -> np.ndarray:
        """Series bank ``[V_free | Q]`` through the current order."""
        V = self.V[: self.N + 1]
        if free is not None:
            V = V[:, free]
        return np.hstack([V, self.Q[: self.N + 1].astype(complex)])


def init_germ(params: StageParams, Nmax: int = DEFAULT_ORDER) -> Germ:
    n, nc = params.n_bus, len(params.controls)
    V = np.zeros((Nmax + 1, n), dtype=complex)
    Vinv = np.zeros_like(V)
    V[0] = Vinv[0] = 1.0
    Q = np.zeros((Nmax + 1, nc))
    Bup = np.zeros((Nmax + 1, nc))
    Blo = np.zeros((Nmax + 1, nc))
    for k, c in enumerate(params.controls):
        Bup[0, k], Blo[0, k] = c.B0()
    g = Germ(V, Vinv, Q, Bup, Blo)
    _swing_coeff(g, params, 0)
    return g


def _swing_coeff(g: Germ, params: StageParams, n: int):
    sw = params.swing
    c1 = params.swing_c1
    g.V[n, sw] = 1.0 if n == 0 else (c1 if n == 1 else 0.0)
    # 1/(1 + s c1) = sum (-c1)^n s^n
    g.Vinv[n, sw] = (-c1) ** n


def _inner(A, B, n):
    """sum_{m=1}^{n-1} A[m] B[n-m] along axis 0."""
    if n < 2:
        return np.zeros(A.shape[1:], dtype=np.result_type(A, B))
    return np.sum(A[1:n] * B[n - 1:0:-1], axis=0)


def _constraint_rhs(g: Germ, c: ControlParams, k: int, n: int) -> float:
    """T[n]: everything in the order-n constraint except 2 Re V_b[n] + pi Q[n]."""
    Vb = g.V[:, c.b]
    T = (c.W1 if n == 1 else 0.0) - _inner(Vb, np.conj(Vb), n).real
    for q, B in ((c.qhi, g.Bup[:, k]), (c.qlo, g.Blo[:, k])):
        if q is None:
            continue
        acc = _inner(B, g.Q[:, k], n) - B[n - 1] * q[1] + (c.mu if n == 1 else 0.0)
        T += acc / q[0]
    return float(T)


def advance_order(g: Germ, system: StageSystem, params: StageParams) -> Germ:
    """Compute order ``g.N + 1`` in place and return the germ."""
    n = g.N + 1
    if n > g.capacity:
        raise ValueError("germ capacity exhausted")
    _swing_coeff(g, params, n)
    free, pos = system.free, system.pos
    nf = len(free)
    V, Vinv = g.V, g.Vinv
    Vc, Vic = np.conj(V), np.conj(Vinv)
    R = (np.conj(params.S) * Vic[n - 1] - params.Ysh * V[n - 1]
         - params.Gamma * _inner(Vc, Vic, n)
         - system.Ysw * V[n, params.swing])
    if n == 1:
        R = R + params.I
    T = np.zeros(len(params.controls))
    for k, c in enumerate(params.controls):
        R[c.a] -= 1j * np.sum(g.Q[1:n, k] * Vic[n - 1:0:-1, c.a])
        if c.limited:
            T[k] = _constraint_rhs(g, c, k, n)
    Rf = R[free]
    rhs = np.concatenate([Rf.real, Rf.imag])
    known_re = np.zeros(len(system.unlimited))
    for j, k in enumerate(system.unlimited):
        c = params.controls[k]
        Vb = V[:, c.b]
        known_re[j] = 0.5 * ((c.W1 if n == 1 else 0.0) - _inner(Vb, np.conj(Vb), n).real)
    if len(known_re):
        rhs -= system.known_cols @ known_re
    for k, c in enumerate(params.controls):
        if c.limited:
            rhs[nf + pos[c.a]] -= T[k] / system.pivots[k]
    x = system.F.solve(rhs)
    vr, vi = x[:nf].copy(), x[nf:]
    for j, k in enumerate(system.unlimited):
        c = params.controls[k]
        g.Q[n, k] = vr[pos[c.b]]
        vr[pos[c.b]] = known_re[j]
    V[n, free] = vr + 1j * vi
    for k, c in enumerate(params.controls):
        if c.limited:
            g.Q[n, k] = (T[k] - 2.0 * V[n, c.b].real) / system.pivots[k]
    Vinv[n, free] = -np.sum(V[1:n + 1, free] * Vinv[n - 1::-1, free][:n], axis=0)
    for k, c in enumerate(params.controls):
        for q, B in ((c.qhi, g.Bup[:, k]), (c.qlo, g.Blo[:, k])):
            if q is None:
                continue
            acc = (np.sum(B[:n] * g.Q[n:0:-1, k]) - q[1] * B[n - 1]
                   + (c.mu if n == 1 else 0.0))
            B[n] = acc / q[0]
    g.N = n
    return g


# ---------------------------------------------------------------------------
# residual oracle
# ---------------------------------------------------------------------------

def germ_residuals(g: Germ, params: StageParams, N: Optional[int] = None) -> dict:
    """Coefficient-wise residuals of every embedded equation through order N.

    For each order and equation family the residual vector is divided
    normwise by the largest term magnitude in that family, so values near
    machine epsilon mean the germ satisfies the equations to rounding.
    Returns the worst relative residual per family.
    """
    N = g.N if N is None else N
    n_bus = params.n_bus
    free = np.array([i for i in range(n_bus) if i != params.swing])
    Y = sp.csr_matrix(params.Y)
    absY = abs(Y)
    V, Vinv, Q = g.V, g.Vinv, g.Q
    Vc, Vic = np.conj(V), np.conj(Vinv)
    out = {"bus": 0.0, "reciprocal": 0.0, "constraint": 0.0, "complementarity": 0.0}

    def rel(res, mag):
        res, mag = np.abs(np.asarray(res)), np.asarray(mag)
        if res.size == 0:
            return 0.0
        return float(res.max() / max(mag.max(), 1e-300))

    nc = len(params.controls)
    for n in range(N + 1):
        lhs = Y @ V[n]
        mag = absY @ np.abs(V[n])
        rhs = np.zeros(n_bus, dtype=complex)
        if n >= 1:
            t = params.Ysh * V[n - 1]
            lhs = lhs + t
            mag = mag + np.abs(t)
            t = np.conj(params.S) * Vic[n - 1]
            rhs += t
            mag = mag + np.abs(t)
        if n == 1:
            rhs += params.I
            mag = mag + np.abs(params.I)
        t = params.Gamma * (Vic[n] - V[n])
        rhs += t
        mag = mag + np.abs(params.Gamma) * (np.abs(Vic[n]) + np.abs(V[n]))
        for k, c in enumerate(params.controls):
            terms = Q[: n + 1, k] * Vic[n::-1, c.a]
            rhs[c.a] -= 1j * np.sum(terms)
            mag[c.a] += np.sum(np.abs(terms))
        out["bus"] = max(out["bus"], rel((lhs - rhs)[free], mag[free]))

        terms = V[: n + 1] * Vinv[n::-1]
        res = terms.sum(axis=0) - (1.0 if n == 0 else 0.0)
        out["reciprocal"] = max(out["reciprocal"], rel(res, np.abs(terms).sum(axis=0) + (n == 0)))

        cres, cmag, pres, pmag = np.zeros(nc), np.zeros(nc), [], []
        for k, c in enumerate(params.controls):
            terms = V[: n + 1, c.b] * Vc[n::-1, c.b]
            w = c.W0 if n == 0 else (c.W1 if n == 1 else 0.0)
            res = terms.sum() - w
            mag = np.abs(terms).sum() + abs(w)
            if c.limited:
                res -= g.Bup[n, k] + g.Blo[n, k]
                mag += abs(g.Bup[n, k]) + abs(g.Blo[n, k])
            cres[k], cmag[k] = abs(res), mag
            for q, B in ((c.qhi, g.Bup[:, k]), (c.qlo, g.Blo[:, k])):
                if q is None:
                    continue
                gap = Q[: n + 1, k].copy()
                gap[0] -= q[0]
                if n >= 1:
                    gap[1] -= q[1]
                terms = B[: n + 1] * gap[n::-1]
                target = c.mu * (1.0 if n == 0 else (-1.0 if n == 1 else 0.0))
                pres.append(abs(terms.sum() - target))
                pmag.append(np.abs(terms).sum() + abs(target))
        out["constraint"] = max(out["constraint"], rel(cres, cmag))
        out["complementarity"] = max(out["complementarity"], rel(pres, pmag))
    return out


def check_realness(g: Germ, tol: float = REAL_TOL) -> None:
    for name in ("Q", "Bup", "Blo"):
        arr = getattr(g, name)
        if np.iscomplexobj(arr) and np.max(np.abs(arr.imag), initial=0.0) > tol:
            raise ValueError(f"{name} coefficients are not real")


# ---------------------------------------------------------------------------
# stage driver
# ---------------------------------------------------------------------------

@dataclass
class StageVerdict:
    """Network-level staircase verdict at one point of the stage."""

    V: np.ndarray  # all buses
    Q: np.ndarray
    converged: bool
    error_estimate: float
    oscillating: bool
    orders_used: int


@dataclass
class StageRun:
    params: StageParams
    system: StageSystem
    germ: Germ
    table: StaircaseTable
    verdict: StageVerdict

    tol: float = 1e-11

    def _split(self, vals):
        """Map series-bank values (ns, k) to full bus voltages and Q."""
        ns = vals.shape[0]
        nf = len(self.system.free)
        V = np.empty((ns, self.params.n_bus), dtype=complex)
        V[:, self.system.free] = vals[:, :nf]
        V[:, self.params.swing] = np.nan  # filled by caller when s is known
        return V, vals[:, nf:].real

    def values_at(self, s):
        """Values, per-point update error and the entry used, at points ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        conv, first, vals, errs = self.table.verdict(s, self.tol)
        V, Q = self._split(vals)
        V[:, self.params.swing] = 1.0 + s * self.params.swing_c1
        return V, Q, errs, first, conv


def _window_oscillation(errs, window: int) -> bool:
    best = np.inf
    since = 0
    for e in errs:
        if e < best:
            best, since = e, 0
        else:
            since += 1
    return since >= window


def run_stage(params: StageParams, tol: float = 1e-11, Nmax: int = DEFAULT_ORDER,
              stop_on_convergence: bool = True, window: int = 6,
              system: Optional[StageSystem] = None) -> StageRun:
    """Grow the germ until the staircase at s = 1 converges or ``Nmax``."""
    system = build_stage_system(params) if system is None else system
    g = init_germ(params, Nmax)
    table = StaircaseTable()
    table.add(g.coefficients(system.free))
    run = StageRun(params, system, g, table, None, tol)
    for _ in range(Nmax):
        advance_order(g, system, params)
        table.add(g.coefficients(system.free))
        agg = table.aggregated_errors([1.0])[:, 0]
        g.errors = [float(e) for e in agg]
        if stop_on_convergence and g.N >= 3 and agg[-1] <= tol:
            break
    V, Q, errs, first, conv = run.values_at([1.0])
    agg = np.asarray(g.errors)
    osc = (not conv[0]) and _window_oscillation(agg[1:], window)
    run.verdict = StageVerdict(V[0], Q[0], bool(conv[0]), float(errs[0]), bool(osc), int(first[0]) + 1)
    return run
