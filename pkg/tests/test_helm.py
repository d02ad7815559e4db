import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import LAMBDA_CRIT, case, two_bus_dc, two_bus_pv
from helmpw.helm import (ControlParams, EmbeddingConfig, StageParams, build_stage_system,
                         check_realness, embedding_constants, germ_residuals, init_germ,
                         initial_stage_params, run_stage)
from helmpw.netmodel import ControlSet


def test_two_sided_constants():
    mu, (w0, w1), lo, hi = embedding_constants(ControlSet(1, 1, -1.0, 3.0, 1.05 ** 2))
    assert mu == 1.0 and w0 == 1.0
    assert w1 == pytest.approx(0.1025)
    assert lo == (-2.0, 1.0) and hi == (2.0, 1.0)


def test_lower_only_constants():
    mu, (w0, w1), lo, hi = embedding_constants(ControlSet(1, 1, -0.5, None, 1.0))
    assert mu == pytest.approx(1.0)
    assert (w0, w1) == pytest.approx((0.9, 0.1))
    assert lo[0] == -10.0 and lo[0] - (lo[0] + lo[1]) == pytest.approx(-9.5)
    assert hi is None


def test_upper_only_and_unlimited_constants():
    mu, (w0, w1), lo, hi = embedding_constants(ControlSet(1, 1, None, 0.4, 1.0))
    assert mu == pytest.approx(10.0 * 0.1) and (w0, w1) == pytest.approx((1.1, -0.1))
    assert lo is None and hi == pytest.approx((10.0, -9.6))
    assert embedding_constants(ControlSet(1, 1, None, None, 1.21)) == (0.0, (1.0, pytest.approx(0.21)),
                                                                       None, None)


@given(q=st.floats(0.01, 10.0), mu=st.floats(0.01, 5.0))
def test_symmetric_limits_unembedded(q, mu):
    _, _, lo, hi = embedding_constants(ControlSet(1, 1, -q, q, 1.0), EmbeddingConfig(two_sided_mu=mu))
    assert lo[1] == 0.0 and hi[1] == 0.0


def test_constraint_pivot():
    c = ControlParams(a=1, b=1, mu=1.0, W0=1.0, W1=0.0, qlo=(-2.0, 0.0), qhi=(2.0, 0.0))
    assert c.pivot == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(lo=st.floats(-3.0, -0.01), width=st.floats(0.02, 6.0), vsp=st.floats(0.9, 1.1))
def test_zero_order_consistency(lo, width, vsp):
    c = ControlSet(1, 1, lo, lo + width, vsp ** 2)
    mu, (w0, w1), qlo, qhi = embedding_constants(c)
    p = ControlParams(0, 0, mu, w0, w1, qlo, qhi)
    assert w0 + sum(p.B0()) == pytest.approx(1.0, abs=1e-14)
    assert qlo[0] + qlo[1] == pytest.approx(lo) and qhi[0] + qhi[1] == pytest.approx(lo + width)


def test_validate_rejects_bad_params():
    p = initial_stage_params(two_bus_pv())
    bad = dataclasses.replace(p, controls=(dataclasses.replace(p.controls[0], mu=0.0),))
    with pytest.raises(ValueError, match="mu"):
        bad.validate()
    Y = p.Y.copy().tolil()
    Y[1, 1] += 1.0
    with pytest.raises(ValueError, match="sum"):
        dataclasses.replace(p, Y=Y.tocsr()).validate()
    with pytest.raises(ValueError):
        StageParams(Y=p.Y, Ysh=np.zeros(3), Gamma=np.zeros(2), S=np.zeros(2), swing=0, swing_c1=0j)


def test_initial_germ():
    p = initial_stage_params(case("case14"))
    g = init_germ(p)
    assert np.all(g.V[0] == 1) and np.all(g.Vinv[0] == 1) and np.all(g.Q[0] == 0)
    for k, c in enumerate(p.controls):
        if c.qhi is not None:
            assert g.Bup[0, k] == -c.mu / c.qhi[0]
        if c.qlo is not None:
            assert g.Blo[0, k] == -c.mu / c.qlo[0]


def test_flat_case_converges_immediately():
    run = run_stage(initial_stage_params(two_bus_dc(P=0.0)))
    assert run.verdict.converged
    assert run.germ.N <= 3
    assert np.allclose(run.verdict.V, 1.0)


def test_order_one_two_bus_closed_form():
    net = two_bus_dc(G=2.0, P=-0.3)
    g = run_stage(initial_stage_params(net), Nmax=4, stop_on_convergence=False).germ
    assert g.V[1, 1] == pytest.approx(-0.3 / 2.0, abs=1e-15)
    # second order: G V[2] = P conj(Vinv[1]) = P * (-V[1])
    assert g.V[2, 1] == pytest.approx(-0.3 * 0.15 / 2.0, abs=1e-15)


def test_unlimited_matrix_is_canonical():
    p = initial_stage_params(case("case9").without_limits())
    sysm = build_stage_system(p)
    free = sysm.free
    Yff = p.Y.toarray()[np.ix_(free, free)]
    ref = np.block([[Yff.real, -Yff.imag], [Yff.imag, Yff.real]])
    for c in p.controls:
        j = sysm.pos[c.b]
        ref[:, j] = 0.0
        ref[len(free) + sysm.pos[c.a], j] = 1.0
    assert np.allclose(sysm.A.toarray(), ref)
    assert np.all(sysm.pivots == 0)


def canonical_germ(net, N):
    """Textbook HELM with PV setpoints and no limits, dense and independent."""
    Yb, Ysh = net.admittance
    Y = Yb.toarray()
    n, sw = net.n_bus, net.swing
    free = [i for i in range(n) if i != sw]
    idx = net.index
    pv = {idx[c.a]: c for c in net.controls}
    S = net.injections
    V = np.zeros((N + 1, n), dtype=complex)
    W = np.zeros((N + 1, n), dtype=complex)  # 1/V
    Q = np.zeros((N + 1, n))
    V[0] = W[0] = 1.0
    vsw = net.swing_voltage
    nf = len(free)
    for k in range(1, N + 1):
        V[k, sw] = vsw - 1.0 if k == 1 else 0.0
        # unknowns: Re V_free, Im V_free, Q_pv
        pvs = sorted(pv)
        A = np.zeros((2 * nf + len(pvs), 2 * nf + len(pvs)))
        rhs = np.zeros(2 * nf + len(pvs))
        Yf = Y[np.ix_(free, free)]
        A[:nf, :nf], A[:nf, nf:2 * nf] = Yf.real, -Yf.imag
        A[nf:2 * nf, :nf], A[nf:2 * nf, nf:2 * nf] = Yf.imag, Yf.real
        r = np.conj(S) * np.conj(W[k - 1]) - Ysh * V[k - 1] - Y[:, sw] * V[k, sw]
        for i in pvs:
            r[i] -= 1j * sum(Q[m, i] * np.conj(W[k - m, i]) for m in range(1, k))
        for j, i in enumerate(pvs):
            # -j Q[k] conj(W[0]) moves to the left as +j Q[k]
            A[nf + free.index(i), 2 * nf + j] = 1.0
            b = idx[pv[i].b]
            A[2 * nf + j, free.index(b)] = 2.0
            w1 = pv[i].Wsp - 1.0 if k == 1 else 0.0
            rhs[2 * nf + j] = w1 - sum((V[m, b] * np.conj(V[k - m, b])).real for m in range(1, k))
        rf = r[free]
        rhs[:nf], rhs[nf:2 * nf] = rf.real, rf.imag
        x = np.linalg.solve(A, rhs)
        V[k, free] = x[:nf] + 1j * x[nf:2 * nf]
        for j, i in enumerate(pvs):
            Q[k, i] = x[2 * nf + j]
        W[k] = -sum(V[m] * W[k - m] for m in range(1, k + 1))
    return V, Q


@pytest.mark.parametrize("name", ["case9", "case14", "case30"])
def test_unlimited_matches_canonical_helm(name):
    net = case(name).without_limits()
    p = initial_stage_params(net)
    g = run_stage(p, Nmax=20, stop_on_convergence=False).germ
    V, Q = canonical_germ(net, 20)
    scale = np.abs(V).max(axis=1, keepdims=True)
    assert np.all(np.abs(g.V[:21] - V) <= 1e-10 * scale)
    idx = net.index
    for k, c in enumerate(net.controls):
        assert np.allclose(g.Q[:21, k], Q[:, idx[c.a]], atol=1e-10 * np.abs(Q).max())


@pytest.mark.parametrize("name,lam", [("case9", 1.0), ("case14", 1.2), ("case57", 1.2)])
def test_germ_residuals_and_realness(name, lam):
    p = initial_stage_params(case(name).scaled(lam))
    run = run_stage(p, Nmax=32, stop_on_convergence=False)
    check_realness(run.germ)
    res = germ_residuals(run.germ, p)
    assert max(res.values()) < 1e-12, res


def test_germ_residual_detects_corruption():
    p = initial_stage_params(case("case9"))
    g = run_stage(p, Nmax=8, stop_on_convergence=False).germ
    g.V[5, 4] += 1e-6
    assert germ_residuals(g, p)["bus"] > 1e-9


def test_case9_unlimited_converges():
    run = run_stage(initial_stage_params(case("case9").without_limits()))
    assert run.verdict.converged and run.verdict.orders_used < 32


def test_near_collapse_needs_continuation():
    net = case("case9").scaled(LAMBDA_CRIT - 1e-6).without_limits()
    run = run_stage(initial_stage_params(net), tol=1e-11)
    assert not run.verdict.converged
    assert min(run.germ.errors[1:]) > 1e-4
