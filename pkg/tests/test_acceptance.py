"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""
import dataclasses
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, LAMBDA_CRIT, case, solved, two_bus_dc
from helmpw.cli import RunOptions, collapse_point
from helmpw.diagnostics import complementarity_check, energy_value
from helmpw.helm import germ_residuals, initial_stage_params, run_stage
from helmpw.netmodel import bundled_cases, resolve_case
from helmpw.pw import (PWOptions, build_stage_system, find_advance_point, partial_values,
                       solve_pw, transform_stage)
from helmpw.refsolver import enumerate_assignments, newton_solve

FIXTURES = ("case9", "case14", "case30", "case57", "case118", "case300")
MATRIX = [(n, lam, lim) for n in FIXTURES for lam in (1.0, 1.2) for lim in (True, False)]


def record(k, ok, detail):
    line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_bundled_fixtures():
    assert set(FIXTURES) <= set(bundled_cases())


def test_c01_collapse_point():
    t = time.perf_counter()
    r = collapse_point(case("case9"), RunOptions(case="case9", enforce_qlims=False, precision=1e-6))
    dt = time.perf_counter() - t
    err = abs(r.lam - LAMBDA_CRIT)
    record(1, err <= 2e-6 and r.window <= 1e-6 and dt < 10,
           f"lambda_crit = {r.lam:.9f} (|err| {err:.1e}, window {r.window:.1e}, "
           f"{r.solves} solves, {dt:.1f} s)")


def test_c02_case300_saturation_counts():
    net = case("case300")
    t = time.perf_counter()
    sol = solved("case300", 1.0, True)
    t_helm = time.perf_counter() - t
    counts = {"helm": sol.counts() if sol.converged else None}
    times = {"helm": t_helm}
    for name, strat in (("nr1", "switch-all"), ("nr2", "switch-one")):
        t = time.perf_counter()
        rep = newton_solve(net, strat)
        times[name] = time.perf_counter() - t
        counts[name] = rep.counts() if rep.converged else None
    ok = (counts["helm"] == (0, 11) and counts["nr1"] == counts["helm"]
          and counts["nr2"] == counts["helm"] and max(times.values()) < 30)
    pct = 100.0 * 11 / len(net.controls)
    record(2, ok, f"case300 HELM {counts['helm']}, NR {counts['nr1']} / {counts['nr2']}, "
                  f"%PV {pct:.1f}, times " + ", ".join(f"{k} {v:.1f} s" for k, v in times.items()))


def test_c02_illinois200_conditional():
    try:
        resolve_case("illinois200")
    except FileNotFoundError:
        ACCEPTANCE_LINES.append("criterion  2: SKIP  illinois200 fixture not bundled")
        pytest.skip("illinois200 fixture not bundled")
    sol = solve_pw(case("illinois200"))
    record(2, sol.converged and sol.counts() == (0, 13), f"illinois200 HELM {sol.counts()}")


def test_c03_mismatch_gate():
    worst, n_conv, failed = 0.0, 0, []
    for name, lam, lim in MATRIX:
        sol = solved(name, lam, lim)
        if not sol.converged:
            continue
        n_conv += 1
        worst = max(worst, sol.mismatch)
        if not sol.mismatch <= 1e-8:
            failed.append((name, lam, lim, sol.mismatch))
    record(3, not failed and n_conv >= len(MATRIX) - 1,
           f"{n_conv}/{len(MATRIX)} converged, worst mismatch {worst:.1e} pu {failed or ''}")


def test_c04_complementarity_suite():
    n, bad = 0, []
    for name, lam, lim in MATRIX:
        sol = solved(name, lam, lim)
        if not (lim and sol.converged):
            continue
        n += 1
        _, viol = complementarity_check(case(name).scaled(lam), sol.V, sol.Q)
        if viol or sol.violations:
            bad.append((name, lam, [v.message for v in viol]))
    record(4, n > 0 and not bad, f"{n} limited solves checked, violations: {bad or 0}")


def test_c05_two_bus_dc_oracle():
    net = two_bus_dc(G=1.0, P=-0.25)
    params = initial_stage_params(net)
    run = run_stage(params, stop_on_convergence=False)
    s0 = 0.75
    V, Q, _, _ = partial_values(run, s0)
    nxt = transform_stage(params, s0, V, Q)
    pivot = build_stage_system(nxt).A.toarray()[0, 0]
    closed = 0.5 * (1 - s0 + np.sqrt(1 - s0))
    errs = [abs(V[1] - (1 + np.sqrt(1 - s0)) / 2), abs(pivot - closed), abs(pivot - 0.375),
            abs(nxt.Y[1, 1] - 0.75), abs(nxt.Gamma[1] + 0.1875), abs(nxt.S[1] + 0.0625)]
    record(5, max(errs) <= 1e-12,
           f"V(s0) = {V[1].real:.15f}, pivot = {pivot:.15f}, worst error {max(errs):.1e}")


def test_c06_pw_precision_gain():
    net = case("case9").scaled(LAMBDA_CRIT - 1e-7)
    sol = solve_pw(net, PWOptions(tol=1e-12), limits=False)
    run0 = run_stage(initial_stage_params(net.without_limits()), stop_on_convergence=False)
    floor = min(run0.germ.errors[1:])
    ok = sol.converged and sol.stages <= 12 and sol.attained_error <= 1e-12 and floor > 1e-4
    record(6, ok, f"{sol.stages} P-W stages, final update error {sol.attained_error:.1e}, "
                  f"stage-0 plateau {floor:.1e}")


def test_c07_oracle_equivalence():
    worst = {}
    for name in FIXTURES:
        sol = solved(name, 1.0, False)
        rep = newton_solve(case(name).without_limits(), "none")
        assert sol.converged and rep.converged
        worst[name] = float(np.max(np.abs(np.abs(sol.V) - np.abs(rep.V))))
    record(7, max(worst.values()) <= 1e-6,
           "max ||V| diff| " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def _limited_case9(l2, l3):
    base = case("case9").lossless()
    g = list(base.generators)
    g[1] = dataclasses.replace(g[1], Qmin=l2[0], Qmax=l2[1])
    g[2] = dataclasses.replace(g[2], Qmin=l3[0], Qmax=l3[1])
    return dataclasses.replace(base, generators=tuple(g))


def test_c08_lossless_minimality():
    t = time.perf_counter()
    net = _limited_case9((-0.3, 0.03), (-0.05, 0.3))
    sol = solve_pw(net)
    assert sol.converged
    e_helm = energy_value(net, sol.V, sol.Q)
    res = enumerate_assignments(net)
    feas = sorted((energy_value(net, a.V, a.Q), a.status) for a in res if a.feasible)
    infeas = sorted(energy_value(net, a.V, a.Q) for a in res if a.converged and not a.feasible)
    e_min, st_min = feas[0]
    margin = (f"margin to next feasible {feas[1][0] - e_min:.3g}" if len(feas) > 1
              else "unique feasible assignment")
    gap = e_min - infeas[0] if infeas else np.nan
    dt = time.perf_counter() - t
    ok = (st_min == sol.status and abs(e_helm - e_min) <= 1e-8 and dt < 60)
    record(8, ok, f"HELM {sol.status} E = {e_helm:.10f}; {len(feas)} feasible of {len(res)} "
                  f"assignments, {margin}; best infeasible assignment lies {gap:.3g} below "
                  f"({dt:.1f} s)")


def test_c09_germ_residuals():
    rng = np.random.default_rng(20240)
    picks = [(n, float(rng.uniform(1.0, 1.2))) for n in FIXTURES[:5]]
    worst, n_stages = 0.0, 0
    for name, lam in picks:
        sol = solve_pw(case(name).scaled(lam))
        assert sol.converged
        for p in sol.stage_params:
            run = run_stage(p, Nmax=32, stop_on_convergence=False)
            assert run.germ.N == 32
            worst = max(worst, max(germ_residuals(run.germ, p).values()))
            n_stages += 1
    record(9, worst < 1e-12, f"{n_stages} stages over {len(picks)} fixtures, worst relative "
                             f"residual {worst:.1e}")


def test_c10_stage_invariance():
    rng = np.random.default_rng(7)
    worst = 0.0
    for name in ("case9", "case14", "case30"):
        params = initial_stage_params(case(name).scaled(1.1))
        run0 = run_stage(params, stop_on_convergence=False)
        reach = min(find_advance_point(run0, 1e-11), 1.0)
        s0 = 0.5 * reach
        V0, Q0, _, _ = partial_values(run0, s0)
        run1 = run_stage(transform_stage(params, s0, V0, Q0), stop_on_convergence=False)
        sp = rng.uniform(0.0, (reach - s0) / (1 - s0), 10)
        Va, Qa, _, _, ca = run0.values_at(s0 + (1 - s0) * sp)
        Vb, Qb, _, _, cb = run1.values_at(sp)
        assert ca.all() and cb.all()
        worst = max(worst, np.abs(Va - Vb * V0).max(), np.abs(Qa - (Qb + Q0)).max(initial=0.0))
    record(10, worst <= 1e-9, f"30 points over 3 fixtures, worst composition error {worst:.1e}")
