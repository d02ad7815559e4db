"""Grid case model: parsing, admittance structures and voltage-control sets.

All quantities held by :class:`Network` are per-unit on the system MVA base.
The branch-built admittance matrix ``Y`` satisfies the transmission condition
(every row sums to zero); everything else that connects a bus to ground,
including the asymmetric remainder of off-nominal transformers, lives in the
shunt vector ``Ysh``.
"""
from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp


class CaseError(Exception):
    """Base class for case-file problems."""


class CaseParseError(CaseError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CaseValidationError(CaseError):
    pass


class ConditioningError(CaseError):
    pass


class BusKind(str, enum.Enum):
    SWING = "swing"
    PQ = "pq"
    PV = "pv"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    Pd: float = 0.0
    Qd: float = 0.0
    Gsh: float = 0.0
    Bsh: float = 0.0
    Vsp: Optional[float] = None
    Iconst: complex = 0j
    # initial guess / swing angle reference (degrees)
    vm0: float = 1.0
    va0: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    y: complex
    charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0  # degrees
    status: bool = True
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class Generator:
    bus: int
    Pg: float
    Qg: float
    Qmax: Optional[float]
    Qmin: Optional[float]
    Vg: float
    status: bool = True
    reg_bus: Optional[int] = None  # remote regulated bus; None means local

    @property
    def regulated(self) -> int:
        return self.bus if self.reg_bus is None else self.reg_bus


@dataclass(frozen=True)
class ControlSet:
    """One voltage control: injection at bus ``a`` regulating ``|V_b|``.

    ``qmin``/``qmax`` are aggregated generator limits; ``q_offset`` is the
    fixed reactive injection at ``a`` (minus load, plus non-regulating
    generation), so the solver works on the net injection ``Qgen + q_offset``.
    """

    a: int
    b: int
    qmin: Optional[float]
    qmax: Optional[float]
    Wsp: float
    q_offset: float = 0.0

    def __post_init__(self):
        if self.qmin is not None and self.qmax is not None and not self.qmin < self.qmax:
            raise CaseValidationError(
                f"control at bus {self.a}: Qmin={self.qmin} must be below Qmax={self.qmax}")
        if self.Wsp <= 0:
            raise CaseValidationError(f"control at bus {self.a}: non-positive setpoint")

    @property
    def Vsp(self) -> float:
        return math.sqrt(self.Wsp)

    @property
    def qmin_net(self) -> Optional[float]:
        return None if self.qmin is None else self.qmin + self.q_offset

    @property
    def qmax_net(self) -> Optional[float]:
        return None if self.qmax is None else self.qmax + self.q_offset

    def without_limits(self) -> "ControlSet":
        return replace(self, qmin=None, qmax=None)


@dataclass(frozen=True)
class AdmittanceLimits:
    y_min: float = 1e-6
    y_max: float = 1e6


@dataclass(frozen=True)
class Network:
    buses: tuple
    branches: tuple
    generators: tuple
    base_mva: float = 100.0
    name: str = ""
    limits: AdmittanceLimits = field(default_factory=AdmittanceLimits)

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise CaseValidationError(f"duplicate bus id(s): {dup}")
        swings = [b.id for b in self.buses if b.kind is BusKind.SWING]
        if len(swings) != 1:
            raise CaseValidationError(
                "no swing bus" if not swings else f"multiple swing buses: {swings}")
        known = set(ids)
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise CaseValidationError(f"branch {br.label} references unknown bus")
            if br.from_bus == br.to_bus:
                raise CaseValidationError(f"branch {br.label} connects a bus to itself")
        for g in self.generators:
            if g.bus not in known or g.regulated not in known:
                raise CaseValidationError(f"generator at bus {g.bus} references unknown bus")
        for b in self.buses:
            if not (math.isfinite(b.Gsh) and math.isfinite(b.Bsh)):
                raise CaseValidationError(f"bus {b.id}: non-finite shunt")
            if b.Vsp is not None and b.Vsp <= 0:
                raise CaseValidationError(f"bus {b.id}: non-positive voltage setpoint")
        # validate controls eagerly so that bad cases fail at construction
        self.controls  # noqa: B018

    # -- indexing -----------------------------------------------------------
    @cached_property
    def index(self) -> dict:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def swing(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.kind is BusKind.SWING)

    @cached_property
    def swing_voltage(self) -> complex:
        bus = self.buses[self.swing]
        vm = bus.vm0
        for g in self.generators:
            if g.status and g.bus == bus.id:
                vm = g.Vg
                break
        return vm * np.exp(1j * np.deg2rad(bus.va0))

    # -- derived structures -------------------------------------------------
    @cached_property
    def admittance(self):
        return build_admittance(self)

    @property
    def Y(self) -> sp.csr_matrix:
        return self.admittance[0]

    @property
    def Ysh(self) -> np.ndarray:
        return self.admittance[1]

    @cached_property
    def controls(self) -> tuple:
        return tuple(derive_controls(self))

    @cached_property
    def injections(self) -> np.ndarray:
        """Specified complex injections per bus (pu).

        At controlling buses the imaginary part excludes the regulating
        generators, whose output is the free variable.
        """
        S = np.array([complex(-b.Pd, -b.Qd) for b in self.buses])
        regulating = {c.a for c in self.controls}
        by_bus = self.index
        for g in self.generators:
            if not g.status:
                continue
            k = by_bus[g.bus]
            S[k] += g.Pg
            kind = self.buses[k].kind
            if kind is BusKind.PQ:
                S[k] += 1j * g.Qg
            elif kind is BusKind.PV and g.bus not in regulating:
                # zero-width limits: output pinned at the limit
                S[k] += 1j * (g.Qmax if g.Qmax is not None else g.Qg)
        for k in regulating:
            S[by_bus[k]] = S[by_bus[k]].real
        return S

    @cached_property
    def currents(self) -> np.ndarray:
        return np.array([b.Iconst for b in self.buses], dtype=complex)

    @cached_property
    def kinds(self) -> tuple:
        """Bus kinds re-derived from the control sets."""
        ctrl = {c.a for c in self.controls}
        out = []
        for b in self.buses:
            if b.kind is BusKind.SWING:
                out.append(BusKind.SWING)
            else:
                out.append(BusKind.PV if b.id in ctrl else BusKind.PQ)
        return tuple(out)

    # -- transformations ----------------------------------------------------
    def scaled(self, lam: float) -> "Network":
        """Uniform scaling of load P, Q and generator P by ``lam``."""
        if not lam > 0:
            raise ValueError("scale factor must be positive")
        buses = tuple(replace(b, Pd=b.Pd * lam, Qd=b.Qd * lam) for b in self.buses)
        gens = tuple(replace(g, Pg=g.Pg * lam) for g in self.generators)
        return replace(self, buses=buses, generators=gens)

    def without_limits(self) -> "Network":
        gens = tuple(replace(g, Qmin=None, Qmax=None) for g in self.generators)
        return replace(self, generators=gens)

    def lossless(self) -> "Network":
        """Drop all series and shunt conductances."""
        branches = tuple(replace(br, y=complex(0.0, br.y.imag)) for br in self.branches)
        buses = tuple(replace(b, Gsh=0.0) for b in self.buses)
        return replace(self, branches=branches, buses=buses)

    def rebase(self, base_mva: float) -> "Network":
        """Express the same physical network on a different MVA base."""
        a = base_mva / self.base_mva
        buses = tuple(
            replace(b, Pd=b.Pd / a, Qd=b.Qd / a, Gsh=b.Gsh / a, Bsh=b.Bsh / a,
                    Iconst=b.Iconst / a)
            for b in self.buses)
        branches = tuple(replace(br, y=br.y / a, charging=br.charging / a)
                         for br in self.branches)
        gens = tuple(
            replace(g, Pg=g.Pg / a, Qg=g.Qg / a,
                    Qmax=None if g.Qmax is None else g.Qmax / a,
                    Qmin=None if g.Qmin is None else g.Qmin / a)
            for g in self.generators)
        return replace(self, buses=buses, branches=branches, generators=gens,
                       base_mva=base_mva)


# ---------------------------------------------------------------------------
# admittance
# ---------------------------------------------------------------------------

def build_admittance(net: Network):
    """Return ``(Y, Ysh)``: branch-built transmission matrix and shunt vector.

    Off-nominal taps and phase shifts use the usual two-port model; the part
    of each two-port that does not cancel along a row is moved to ``Ysh`` so
    that ``Y`` keeps zero row sums.
    """
    n = net.n_bus
    idx = net.index
    rows, cols, vals = [], [], []
    Ysh = np.array([complex(b.Gsh, b.Bsh) for b in net.buses])
    for br in net.branches:
        if not br.status:
            continue
        mag = abs(br.y)
        if not (net.limits.y_min <= mag <= net.limits.y_max):
            raise ConditioningError(
                f"branch {br.label}: |y|={mag:.3g} outside "
                f"[{net.limits.y_min:g}, {net.limits.y_max:g}]")
        f, t = idx[br.from_bus], idx[br.to_bus]
        tap = (br.tap if br.tap else 1.0) * np.exp(1j * np.deg2rad(br.shift))
        ytt = br.y + 0.5j * br.charging
        yff = ytt / (tap * np.conj(tap))
        yft = -br.y / np.conj(tap)
        ytf = -br.y / tap
        rows += [f, t]
        cols += [t, f]
        vals += [yft, ytf]
        Ysh[f] += yff + yft
        Ysh[t] += ytt + ytf
    off = sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex).tocsr()
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    Y = (off + sp.diags(diag)).tocsr()
    Y.sort_indices()
    return Y, Ysh


# ---------------------------------------------------------------------------
# controls
# ---------------------------------------------------------------------------

def _agg(values):
    if any(v is None for v in values):
        return None
    return float(sum(values))


def derive_controls(net: Network, vsp_tol: float = 1e-6):
    """Merge in-service regulating generators into one control per bus.

    Generators on PV buses regulate ``gen.regulated`` (their own bus unless a
    remote bus is given).  A zero-width aggregate interval turns the control
    into a fixed injection and no ControlSet is produced for it.
    """
    idx = net.index
    groups: dict = {}
    for g in net.generators:
        if not g.status:
            continue
        bus = net.buses[idx[g.bus]]
        if bus.kind is not BusKind.PV:
            continue
        groups.setdefault(g.bus, []).append(g)

    controlled_by: dict = {}
    out = []
    for a, gens in groups.items():
        targets = {g.regulated for g in gens}
        if len(targets) > 1:
            raise CaseValidationError(
                f"bus {a}: generators regulate different buses {sorted(targets)}")
        b = targets.pop()
        if b == net.buses[net.swing].id:
            raise CaseValidationError(f"bus {a} regulates the swing bus")
        if b in controlled_by:
            raise CaseValidationError(
                f"concurrent control unsupported: bus {b} regulated from buses "
                f"{controlled_by[b]} and {a}")
        vgs = [g.Vg for g in gens]
        if max(vgs) - min(vgs) > vsp_tol:
            raise CaseValidationError(f"bus {a}: conflicting voltage setpoints {vgs}")
        qmin = _agg([g.Qmin for g in gens])
        qmax = _agg([g.Qmax for g in gens])
        if qmin is not None and qmax is not None and qmax - qmin <= 0:
            continue  # degenerate: fixed-Q injection, handled as PQ
        controlled_by[b] = a
        # every in-service generator on a PV bus joins the group, so the only
        # fixed reactive injection left at ``a`` is its load
        out.append(ControlSet(a=a, b=b, qmin=qmin, qmax=qmax, Wsp=vgs[0] ** 2,
                              q_offset=-net.buses[idx[a]].Qd))
    return out


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_MP_TYPES = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SWING}
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}


def _matpower_blocks(text: str):
    scalars = {}
    blocks = {}
    lines = text.splitlines()
    k = 0
    while k < len(lines):
        raw = lines[k].split("%", 1)[0].strip()
        m = re.match(r"mpc\.(\w+)\s*=\s*(.*)$", raw)
        if not m:
            k += 1
            continue
        name, rest = m.group(1), m.group(2).strip()
        if not rest.startswith("["):
            val = rest.rstrip(";").strip()
            try:
                scalars[name] = float(val)
            except ValueError:
                scalars[name] = val.strip("'\"")
            k += 1
            continue
        rows = []
        body = rest[1:]
        start = k + 1
        while True:
            end = "]" in body
            chunk = body.split("]", 1)[0]
            for piece in chunk.split(";"):
                piece = piece.strip()
                if not piece:
                    continue
                try:
                    rows.append(([float(x) for x in piece.replace(",", " ").split()], k + 1))
                except ValueError:
                    raise CaseParseError(f"malformed mpc.{name} record {piece!r}", k + 1)
            if end:
                break
            k += 1
            if k >= len(lines):
                raise CaseParseError(f"unterminated mpc.{name} block", start)
            body = lines[k].split("%", 1)[0]
        blocks[name] = rows
        k += 1
    return scalars, blocks


VSP_SOURCES = ("bus", "gen")


def parse_matpower(text: str, name: str = "", vsp_source: str = "bus") -> Network:
    """Parse a MATPOWER case file (values converted to per-unit).

    ``vsp_source`` picks the regulated-voltage setpoint: ``bus`` takes the
    voltage-magnitude column of the bus table, ``gen`` the generator ``Vg``
    column that MATPOWER itself uses.
    """
    if vsp_source not in VSP_SOURCES:
        raise ValueError(f"unknown setpoint source {vsp_source!r}")
    scalars, blocks = _matpower_blocks(text)
    base = float(scalars.get("baseMVA", 100.0))
    for key in ("bus", "gen", "branch"):
        if key not in blocks:
            raise CaseParseError(f"missing mpc.{key}")
        for row, line in blocks[key]:
            if len(row) < _MIN_COLS[key]:
                raise CaseParseError(
                    f"mpc.{key} record has {len(row)} columns, need {_MIN_COLS[key]}", line)

    gens = []
    for row, line in blocks["gen"]:
        gens.append(Generator(
            bus=int(row[0]), Pg=row[1] / base, Qg=row[2] / base,
            Qmax=row[3] / base, Qmin=row[4] / base, Vg=row[5],
            status=row[7] > 0))
    if vsp_source == "bus":
        vm = {int(row[0]): row[7] for row, _ in blocks["bus"]}
        gens = [replace(g, Vg=vm.get(g.bus, g.Vg)) for g in gens]
    buses = []
    isolated = set()
    for row, line in blocks["bus"]:
        btype = int(row[1])
        if btype == 4:
            isolated.add(int(row[0]))
            continue
        if btype not in _MP_TYPES:
            raise CaseParseError(f"unknown bus type {btype}", line)
        kind = _MP_TYPES[btype]
        vsp = None
        if kind is not BusKind.PQ:
            vgs = [g.Vg for g in gens if g.status and g.bus == int(row[0])]
            if kind is BusKind.PV and not vgs:
                kind = BusKind.PQ
            else:
                vsp = vgs[0] if vgs else row[7]
        buses.append(Bus(
            id=int(row[0]), kind=kind, Pd=row[2] / base, Qd=row[3] / base,
            Gsh=row[4] / base, Bsh=row[5] / base, Vsp=vsp, vm0=row[7], va0=row[8]))
    gens = [g for g in gens if g.bus not in isolated]
    branches = []
    for row, line in blocks["branch"]:
        if int(row[0]) in isolated or int(row[1]) in isolated:
            continue
        z = complex(row[2], row[3])
        if z == 0:
            raise CaseParseError("branch with zero impedance", line)
        branches.append(Branch(
            from_bus=int(row[0]), to_bus=int(row[1]), y=1.0 / z, charging=row[4],
            tap=row[8] if row[8] else 1.0, shift=row[9], status=row[10] > 0))
    return Network(buses=tuple(buses), branches=tuple(branches),
                   generators=tuple(gens), base_mva=base, name=name)


def _cplx(v) -> complex:
    if isinstance(v, (list, tuple)):
        return complex(float(v[0]), float(v[1]))
    return complex(v)


def parse_json(text: str, name: str = "") -> Network:
    """Parse the native JSON case schema (see README); values are per-unit."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(exc.msg, exc.lineno) from None
    try:
        buses = tuple(
            Bus(id=int(b["id"]), kind=BusKind(b["kind"]), Pd=b.get("Pd", 0.0),
                Qd=b.get("Qd", 0.0), Gsh=b.get("Gsh", 0.0), Bsh=b.get("Bsh", 0.0),
                Vsp=b.get("Vsp"), Iconst=_cplx(b.get("Iconst", [0.0, 0.0])),
                vm0=b.get("vm0", 1.0), va0=b.get("va0", 0.0))
            for b in doc["buses"])
        branches = tuple(
            Branch(from_bus=int(r["from"]), to_bus=int(r["to"]), y=_cplx(r["y"]),
                   charging=r.get("charging", 0.0), tap=r.get("tap", 1.0),
                   shift=r.get("shift", 0.0), status=bool(r.get("status", True)),
                   name=r.get("name", ""))
            for r in doc["branches"])
        gens = tuple(
            Generator(bus=int(g["bus"]), Pg=g.get("Pg", 0.0), Qg=g.get("Qg", 0.0),
                      Qmax=g.get("Qmax"), Qmin=g.get("Qmin"), Vg=g.get("Vg", 1.0),
                      status=bool(g.get("status", True)), reg_bus=g.get("reg_bus"))
            for g in doc.get("generators", []))
        base = float(doc.get("base_mva", 100.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseParseError(f"invalid JSON case: {exc}") from None
    return Network(buses=buses, branches=branches, generators=gens, base_mva=base,
                   name=doc.get("name", name))


def to_json(net: Network) -> str:
    def c(z):
        return [z.real, z.imag]

    doc = {
        "format": "helmpw-case",
        "version": 1,
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [
            {"id": b.id, "kind": b.kind.value, "Pd": b.Pd, "Qd": b.Qd, "Gsh": b.Gsh,
             "Bsh": b.Bsh, "Vsp": b.Vsp, "Iconst": c(b.Iconst), "vm0": b.vm0,
             "va0": b.va0}
            for b in net.buses],
        "branches": [
            {"from": r.from_bus, "to": r.to_bus, "y": c(r.y), "charging": r.charging,
             "tap": r.tap, "shift": r.shift, "status": r.status, "name": r.name}
            for r in net.branches],
        "generators": [
            {"bus": g.bus, "Pg": g.Pg, "Qg": g.Qg, "Qmax": g.Qmax, "Qmin": g.Qmin,
             "Vg": g.Vg, "status": g.status, "reg_bus": g.reg_bus}
            for g in net.generators],
    }
    return json.dumps(doc, indent=1)


def parse_case(text: str, format: str = "matpower", name: str = "",
               vsp_source: str = "bus") -> Network:
    if format == "matpower":
        return parse_matpower(text, name, vsp_source)
    if format == "json":
        return parse_json(text, name)
    raise ValueError(f"unknown case format {format!r}")


FIXTURE_DIR = Path(__file__).parent / "fixtures"


def resolve_case(ref: str, fixture_dir: Optional[Path] = None) -> Path:
    """Map a path or bare case name (``case9``) to a file."""
    import os

    p = Path(ref)
    if p.is_file():
        return p
    dirs = [Path(d) for d in (fixture_dir, os.environ.get("HELM_PW_FIXTURES")) if d]
    dirs.append(FIXTURE_DIR)
    for d in dirs:
        for cand in (d / ref, d / f"{ref}.m", d / f"{ref}.json"):
            if cand.is_file():
                return cand
    raise FileNotFoundError(ref)


def load_case(ref: str, format: Optional[str] = None, vsp_source: str = "bus") -> Network:
    path = resolve_case(ref)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "matpower"
    return parse_case(path.read_text(), format, name=path.stem, vsp_source=vsp_source)


def bundled_cases() -> Sequence[str]:
    return sorted(p.stem for p in FIXTURE_DIR.glob("*.m"))
