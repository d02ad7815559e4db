"""Command-line front end.

Subcommands: ``solve``, ``collapse``, ``compare`` and ``convergence``.
Exit codes are 0 for a converged solve, 2 for an infeasible (or unsolved)
case and 1 for any error, including usage errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .diagnostics import AT_QMAX, AT_QMIN, convergence_trace, trace_csv
from .netmodel import VSP_SOURCES, CaseError, Network, load_case
from .pw import PWNonConvergence, PWOptions, Solution, solve_pw
from .refsolver import newton_solve

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2
NR_STRATEGIES = {"nr1": "switch-all", "nr2": "switch-one"}


@dataclass
class RunOptions:
    case: str = ""
    format: Optional[str] = None  # matpower or json; inferred from the suffix when None
    vsp_source: str = "bus"  # MATPOWER setpoint column: bus Vm or generator Vg
    enforce_qlims: bool = False
    scale: float = 1.0
    tol_update: float = 1e-11
    tol_mismatch: float = 1e-8
    Nmax: int = 32
    stage_cap: int = 80
    strategy: str = "helm"
    output: str = "human"
    precision: float = 1e-6
    lam_max: float = 100.0
    out: Optional[str] = None

    def validate(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        for name in ("tol_update", "tol_mismatch", "precision"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.Nmax < 2 or self.stage_cap < 0:
            raise ValueError("Nmax must be at least 2 and stage_cap non-negative")
        if self.strategy not in ("helm", *NR_STRATEGIES):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.vsp_source not in VSP_SOURCES:
            raise ValueError(f"unknown setpoint source {self.vsp_source!r}")
        if self.output not in ("json", "csv", "human"):
            raise ValueError(f"unknown output format {self.output!r}")
        return self

    def pw_options(self) -> PWOptions:
        return PWOptions(tol=self.tol_update, Nmax=self.Nmax, stage_cap=self.stage_cap,
                         mismatch_gate=self.tol_mismatch)


_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


def read_config(path) -> dict:
    """Parse ``key = value`` lines into RunOptions overrides.

    Blank lines and ``#`` comments are ignored; string values may be quoted.
    """
    types = {f.name: f.type for f in fields(RunOptions)}
    names = {n.lower(): n for n in types}  # keys follow the flag spelling
    out = {}
    for k, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{k}: expected key = value")
        key, val = (t.strip() for t in line.split("=", 1))
        key = names.get(key.replace("-", "_").lower(), key)
        if key not in types:
            raise ValueError(f"{path}:{k}: unknown option {key!r}")
        val = val.strip("\"'")
        kind = types[key]
        if kind == "bool":
            if val.lower() not in _BOOL:
                raise ValueError(f"{path}:{k}: {key} expects a boolean")
            out[key] = _BOOL[val.lower()]
        elif kind == "int":
            out[key] = int(val)
        elif kind == "float":
            out[key] = float(val)
        else:
            out[key] = val
    return out


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


def solution_dict(net: Network, sol: Solution, opts: RunOptions) -> dict:
    ctrls = net.controls
    return {
        "case": opts.case,
        "scale": opts.scale,
        "strategy": opts.strategy,
        "converged": bool(sol.converged),
        "infeasible": bool(sol.infeasible),
        "s_crit": _finite(sol.s_crit),
        "stages": sol.stages,
        "mismatch": _finite(sol.mismatch),
        "lagrangian": _finite(sol.lagrangian),
        "buses": [{"id": b.id, "vm": float(abs(v)), "va_deg": float(np.degrees(np.angle(v)))}
                  for b, v in zip(net.buses, sol.V)],
        "controls": [{"bus": c.a, "regulates": c.b, "q_gen": float(qg), "q_net": float(q),
                      "status": st} for c, q, qg, st in zip(ctrls, sol.Q, sol.Qgen, sol.status)],
        "trace": sol.trace,
    }


def _human(d: dict) -> str:
    lines = [f"case {d['case']}  scale {d['scale']:g}  strategy {d['strategy']}"]
    if d["converged"]:
        lines.append(f"converged in {d['stages']} P-W stages, mismatch {d['mismatch']:.3e} pu")
        if d["lagrangian"] is not None:
            lines.append(f"Lagrangian {d['lagrangian']:.10g}")
    elif d["infeasible"]:
        s = d["s_crit"]
        lines.append("infeasible" + (f", estimated s_crit {s:.8f}" if s is not None else ""))
    else:
        lines.append("not converged")
    lines.append(f"{'bus':>8} {'|V|':>12} {'angle':>12}")
    for b in d["buses"]:
        lines.append(f"{b['id']:>8} {b['vm']:>12.8f} {b['va_deg']:>12.6f}")
    if d["controls"]:
        lines.append(f"{'bus':>8} {'regulates':>10} {'Qgen':>12} {'status':>10}")
        for c in d["controls"]:
            lines.append(f"{c['bus']:>8} {c['regulates']:>10} {c['q_gen']:>12.6f} {c['status']:>10}")
    return "\n".join(lines)


def _csv(d: dict) -> str:
    rows = ["bus,vm,va_deg"] + [f"{b['id']},{b['vm']:.12g},{b['va_deg']:.12g}" for b in d["buses"]]
    return "\n".join(rows)


def _emit(text: str, opts: RunOptions):
    if opts.out:
        Path(opts.out).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load(opts: RunOptions) -> Network:
    return load_case(opts.case, opts.format, opts.vsp_source).scaled(opts.scale)


def _nr_solution(net: Network, opts: RunOptions) -> Solution:
    rep = newton_solve(net if opts.enforce_qlims else net.without_limits(),
                       NR_STRATEGIES[opts.strategy] if opts.enforce_qlims else "none",
                       tol=opts.tol_mismatch)
    st = rep.saturation or tuple("interior" for _ in net.controls)
    Qgen = np.array([q - c.q_offset for q, c in zip(rep.Q, net.controls)])
    return Solution(V=rep.V, Q=rep.Q, Qgen=Qgen, status=st, stages=0, mismatch=rep.mismatch,
                    converged=rep.converged)


def solve_case(opts: RunOptions):
    net = _load(opts)
    if opts.strategy == "helm":
        return net, solve_pw(net, opts.pw_options(), limits=opts.enforce_qlims)
    return net, _nr_solution(net, opts)


def cmd_solve(opts: RunOptions) -> int:
    net, sol = solve_case(opts)
    d = solution_dict(net, sol, opts)
    if opts.output == "json":
        _emit(json.dumps(d, indent=1), opts)
    elif opts.output == "csv":
        _emit(_csv(d), opts)
    else:
        _emit(_human(d), opts)
    return EXIT_OK if sol.converged else EXIT_INFEASIBLE


@dataclass
class CollapseResult:
    lam: float  # midpoint of the final bracket
    window: float  # bracket width
    lo: float  # last feasible scale
    hi: float  # first infeasible scale
    solves: int
    unbounded: bool = False


def _verdict(net: Network, lam: float, opts: RunOptions):
    """Feasibility of the scaled case and, when infeasible, the scale at
    which the continuation stalled."""
    try:
        sol = solve_pw(net.scaled(lam), opts.pw_options(), limits=opts.enforce_qlims)
    except PWNonConvergence:
        return False, None
    if sol.converged:
        return True, None
    return False, (lam * sol.s_crit if sol.s_crit else None)


def collapse_point(net: Network, opts: RunOptions) -> CollapseResult:
    """Bracket the critical scale between a feasible and an infeasible verdict.

    A stalled continuation at scale ``hi`` reached ``s_crit``, and
    ``hi * s_crit`` is an estimate from below of the collapse (exact when
    only the injections are embedded).  Trial points are placed just above
    that estimate, falling back to bisection whenever a guided trial does
    not shrink the bracket enough, so the bracket always stays valid.
    """
    ok, _ = _verdict(net, 1.0, opts)
    if not ok:
        raise ValueError("case is not solvable at scale 1")
    lo, hi, solves, est = 1.0, 2.0, 1, None
    while True:
        solves += 1
        ok, est = _verdict(net, hi, opts)
        if not ok:
            break
        lo = hi
        if hi >= opts.lam_max:
            return CollapseResult(hi, np.inf, hi, np.inf, solves, unbounded=True)
        hi = min(2 * hi, opts.lam_max)
    guided = True
    while hi - lo > opts.precision:
        w = hi - lo
        use = guided and est is not None and lo < est < hi
        gap = hi - est if use else np.inf
        if use and hi - est <= 0.5 * opts.precision:
            t = hi - 0.9 * opts.precision  # close the bracket from below
        elif use:
            t = est + _OVERSHOOT * (hi - est)
        else:
            t = 0.5 * (lo + hi)
        t = min(max(t, lo + 1e-3 * w), hi - 1e-3 * w)
        solves += 1
        ok, e = _verdict(net, t, opts)
        if ok:
            lo = t
        else:
            hi, est = t, e
        # a guided step that does not halve the gap above the estimate
        # forces one bisection
        guided = not (use and not ok and (est is None or hi - est > 0.5 * gap))
    return CollapseResult(0.5 * (lo + hi), hi - lo, lo, hi, solves)


_OVERSHOOT = 0.1  # trial position between the estimate and the infeasible end


def cmd_collapse(opts: RunOptions) -> int:
    net = load_case(opts.case, opts.format, opts.vsp_source)
    r = collapse_point(net, opts)
    if opts.output == "json":
        _emit(json.dumps({"case": opts.case, "lambda_crit": r.lam, "window": _finite(r.window),
                          "lo": r.lo, "hi": _finite(r.hi), "solves": r.solves,
                          "unbounded": r.unbounded}), opts)
    elif r.unbounded:
        _emit(f"feasible up to the configured maximum scale {opts.lam_max:g}", opts)
    else:
        _emit(f"lambda_crit = {r.lam:.9f} +/- {r.window / 2:.1e} ({r.solves} solves)", opts)
    return EXIT_OK


def compare_row(net: Network, opts: RunOptions) -> dict:
    """Saturation counts of HELM and the two NR strategies on one case."""
    limited = replace(opts, enforce_qlims=True)
    out = {"case": opts.case, "controls": len(net.controls), "methods": {}}
    for name in ("helm", *NR_STRATEGIES):
        o = replace(limited, strategy=name)
        try:
            sol = (solve_pw(net, o.pw_options()) if name == "helm" else _nr_solution(net, o))
        except (PWNonConvergence, ArithmeticError, ValueError):  # reported inline
            sol = None
        if sol is None or not sol.converged:
            out["methods"][name] = None
            continue
        nmin, nmax = sol.counts()
        out["methods"][name] = {"qmin": nmin, "qmax": nmax, "stages": sol.stages}
    helm = out["methods"]["helm"]
    if helm is not None and out["controls"]:
        out["pv_saturated_pct"] = round(100.0 * (helm["qmin"] + helm["qmax"]) / out["controls"], 1)
        out["stages"] = helm["stages"]
    return out


def _marker(ref, res) -> str:
    if res is None:
        return "NC"
    if ref is not None and (res["qmin"], res["qmax"]) == (ref["qmin"], ref["qmax"]):
        return "="
    return f"*{res['qmin']}/{res['qmax']}*"


def cmd_compare(opts: RunOptions) -> int:
    net = _load(opts)
    row = compare_row(net, opts)
    m = row["methods"]
    if opts.output == "json":
        _emit(json.dumps(row, indent=1), opts)
    else:
        helm = m["helm"]
        h = "NC" if helm is None else f"{helm['qmin']}/{helm['qmax']}"
        cells = [opts.case, str(row["controls"]), h, _marker(helm, m["nr1"]), _marker(helm, m["nr2"]),
                 f"{row.get('pv_saturated_pct', float('nan')):.1f}", str(row.get("stages", "-"))]
        if opts.output == "csv":
            _emit("case,controls,helm,nr1,nr2,pv_saturated_pct,stages\n" + ",".join(cells), opts)
        else:
            _emit(f"{'case':>10} {'PV':>5} {'HELM':>7} {'NR1':>7} {'NR2':>7} {'%PV':>6} {'P-W':>4}\n"
                  + f"{cells[0]:>10} {cells[1]:>5} {cells[2]:>7} {cells[3]:>7} {cells[4]:>7} "
                  f"{cells[5]:>6} {cells[6]:>4}", opts)
    return EXIT_OK if m["helm"] is not None else EXIT_INFEASIBLE


def cmd_convergence(opts: RunOptions) -> int:
    net = _load(opts)
    try:
        sol = solve_pw(net, opts.pw_options(), limits=opts.enforce_qlims)
    except PWNonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _emit(trace_csv(convergence_trace(sol.histories)).rstrip("\n"), opts)
    return EXIT_OK if sol.converged else EXIT_INFEASIBLE


COMMANDS = {"solve": cmd_solve, "collapse": cmd_collapse, "compare": cmd_compare,
            "convergence": cmd_convergence}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_ERROR)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="helm-pw", description="Holomorphic-embedding power flow with "
                "staged continuation and reactive-limit complementarity.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("case", help="case file, or the name of a bundled fixture")
        s.add_argument("--format", choices=("matpower", "json"), default=argparse.SUPPRESS)
        s.add_argument("--vsp-source", dest="vsp_source", choices=VSP_SOURCES,
                       default=argparse.SUPPRESS,
                       help="setpoint column of MATPOWER files (default: bus)")
        q = s.add_mutually_exclusive_group()
        q.add_argument("--qlims", dest="enforce_qlims", action="store_true", default=argparse.SUPPRESS)
        q.add_argument("--no-qlims", dest="enforce_qlims", action="store_false", default=argparse.SUPPRESS)
        s.add_argument("--scale", type=float, default=argparse.SUPPRESS)
        s.add_argument("--tol-update", dest="tol_update", type=float, default=argparse.SUPPRESS)
        s.add_argument("--tol-mismatch", dest="tol_mismatch", type=float, default=argparse.SUPPRESS)
        s.add_argument("--nmax", dest="Nmax", type=int, default=argparse.SUPPRESS)
        s.add_argument("--stage-cap", dest="stage_cap", type=int, default=argparse.SUPPRESS)
        s.add_argument("--strategy", choices=("helm", *NR_STRATEGIES), default=argparse.SUPPRESS)
        s.add_argument("--output", choices=("json", "csv", "human"), default=argparse.SUPPRESS)
        s.add_argument("--precision", type=float, default=argparse.SUPPRESS)
        s.add_argument("--lam-max", dest="lam_max", type=float, default=argparse.SUPPRESS)
        s.add_argument("--out", default=argparse.SUPPRESS, help="write the report to a file")
        s.add_argument("--config", default=None, help="key = value file of option defaults")
    return p


def parse_options(argv=None):
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config = args.pop("config")
    settings = read_config(config) if config else {}
    settings.update(args)  # explicit flags win over the config file
    return command, RunOptions(**settings).validate()


def main(argv=None) -> int:
    try:
        command, opts = parse_options(argv)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        return COMMANDS[command](opts)
    except (CaseError, OSError, ValueError, ArithmeticError, PWNonConvergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
