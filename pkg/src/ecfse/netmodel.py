"""Network model: MATPOWER case parsing and rectangular admittance operators.

All electrical quantities downstream of this module are per-unit on the case
base. The bus table keeps the file's MW/MVAr values verbatim (so a case can
be re-emitted losslessly); the ``*_pu`` accessors on :class:`Network` are
what the estimators consume.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable

import numpy as np
import scipy.sparse as sp


class CaseError(ValueError):
    """Base class for problems with a case file or network definition."""


class MissingTable(CaseError):
    def __init__(self, name: str):
        super().__init__(f"case text has no mpc.{name} assignment")
        self.name = name


class MalformedRow(CaseError):
    def __init__(self, line: int, reason: str = ""):
        msg = f"malformed row at line {line}"
        super().__init__(f"{msg}: {reason}" if reason else msg)
        self.line = line


class UnknownBusReference(CaseError):
    def __init__(self, branch: int, bus_id: int):
        super().__init__(f"branch {branch} references unknown bus {bus_id}")
        self.branch = branch
        self.bus_id = bus_id


class ZeroVm(CaseError):
    def __init__(self, bus_id: int):
        super().__init__(f"bus {bus_id} has non-positive voltage magnitude")
        self.bus_id = bus_id


class SingularBranch(CaseError):
    def __init__(self, index: int):
        super().__init__(f"in-service branch {index} has r = x = 0")
        self.index = index


class BranchOutOfService(CaseError):
    def __init__(self, index: int):
        super().__init__(f"branch {index} is out of service")
        self.index = index


class IndexOutOfRange(IndexError):
    pass


class BusType(IntEnum):
    PQ = 1
    PV = 2
    REF = 3
    ISOLATED = 4


@dataclass(frozen=True)
class Bus:
    id: int
    bus_type: BusType
    Pd: float  # MW
    Qd: float  # MVAr
    Gs: float  # MW at 1 p.u.
    Bs: float  # MVAr at 1 p.u.
    Vm: float
    Va: float  # degrees
    base_kV: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 0.0
    shift: float = 0.0  # degrees
    status: bool = True

    @property
    def ratio(self) -> float:
        return self.tap if self.tap != 0 else 1.0


@dataclass(frozen=True)
class Gen:
    bus: int
    Pg: float = 0.0
    Qg: float = 0.0
    status: bool = True


@dataclass(frozen=True)
class Network:
    base_MVA: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    gens: tuple[Gen, ...] = ()
    index: dict[int, int] = field(default=None, compare=False, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise CaseError("duplicate bus ids")
        active = [b for b in self.buses if b.bus_type != BusType.ISOLATED]
        if not active:
            raise CaseError("network has no non-isolated bus")
        for b in active:
            if not b.Vm > 0:
                raise ZeroVm(b.id)
        all_ids = set(ids)
        for k, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in all_ids:
                    raise UnknownBusReference(k, end)
            if br.from_bus == br.to_bus:
                raise CaseError(f"branch {k} is a self-loop")
        object.__setattr__(self, "index", {b.id: i for i, b in enumerate(active)})

    # -- views over the active (non-isolated) buses, in state-vector order

    @property
    def active_buses(self) -> tuple[Bus, ...]:
        return tuple(b for b in self.buses if b.bus_type != BusType.ISOLATED)

    @property
    def n(self) -> int:
        return len(self.index)

    @property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.active_buses], dtype=int)

    def _column(self, name: str) -> np.ndarray:
        return np.array([getattr(b, name) for b in self.active_buses], dtype=float)

    @property
    def vm(self) -> np.ndarray:
        return self._column("Vm")

    @property
    def va_rad(self) -> np.ndarray:
        return np.deg2rad(self._column("Va"))

    @property
    def pd_pu(self) -> np.ndarray:
        return self._column("Pd") / self.base_MVA

    @property
    def qd_pu(self) -> np.ndarray:
        return self._column("Qd") / self.base_MVA

    @property
    def shunt_pu(self) -> np.ndarray:
        """Complex shunt admittance (Gs + jBs) / base_MVA per active bus."""
        return (self._column("Gs") + 1j * self._column("Bs")) / self.base_MVA

    @property
    def slack_index(self) -> int:
        for i, b in enumerate(self.active_buses):
            if b.bus_type == BusType.REF:
                return i
        return 0

    def in_service(self, k: int) -> bool:
        br = self.branches[k]
        if not br.status:
            return False
        return br.from_bus in self.index and br.to_bus in self.index

    def gen_bus_indices(self) -> set[int]:
        return {self.index[g.bus] for g in self.gens if g.status and g.bus in self.index}


# ---------------------------------------------------------------------------
# MATPOWER parsing

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")


def _strip_comments(text: str) -> list[str]:
    return [line.split("%", 1)[0] for line in text.splitlines()]


def _find_matrix(lines: list[str], name: str) -> list[tuple[int, list[float]]]:
    """Rows of ``mpc.<name> = [ ... ];`` with 1-based source line numbers."""
    start = None
    for i, line in enumerate(lines):
        m = _ASSIGN.search(line)
        if m and m.group(1) == name:
            start = (i, m.end())
            break
    if start is None:
        raise MissingTable(name)
    i, col = start
    rest = lines[i][col:].lstrip()
    if not rest.startswith("["):
        raise MalformedRow(i + 1, f"mpc.{name} is not a matrix literal")
    rows: list[tuple[int, list[float]]] = []
    buf = rest[1:]
    lineno = i
    while True:
        closed = "]" in buf
        body = buf.split("]", 1)[0] if closed else buf
        for chunk in body.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                rows.append((lineno + 1, [float(t) for t in tokens]))
            except ValueError:
                raise MalformedRow(lineno + 1, f"non-numeric token in {chunk.strip()!r}") from None
        if closed:
            return rows
        lineno += 1
        if lineno >= len(lines):
            raise MalformedRow(i + 1, f"unterminated mpc.{name} matrix")
        buf = lines[lineno]


def _find_scalar(lines: list[str], name: str) -> float:
    for i, line in enumerate(lines):
        m = _ASSIGN.search(line)
        if m and m.group(1) == name:
            value = line[m.end():].split(";", 1)[0].strip()
            try:
                return float(value)
            except ValueError:
                raise MalformedRow(i + 1, f"mpc.{name} is not a number") from None
    raise MissingTable(name)


def _check_width(rows, width: int, name: str):
    for lineno, row in rows:
        if len(row) < width:
            raise MalformedRow(lineno, f"{name} row has {len(row)} columns, need {width}")


def parse_matpower_case(text: str) -> Network:
    """Parse the bus/gen/branch subset of a MATPOWER version-2 case file."""
    lines = _strip_comments(text)
    base = _find_scalar(lines, "baseMVA")
    bus_rows = _find_matrix(lines, "bus")
    gen_rows = _find_matrix(lines, "gen")
    branch_rows = _find_matrix(lines, "branch")
    _check_width(bus_rows, 10, "bus")
    _check_width(gen_rows, 8, "gen")
    _check_width(branch_rows, 11, "branch")

    gens = tuple(
        Gen(bus=int(r[0]), Pg=r[1], Qg=r[2], status=r[7] > 0) for _, r in gen_rows
    )
    ids = {int(r[0]) for _, r in bus_rows}
    for lineno, r in gen_rows:
        if int(r[0]) not in ids:
            raise MalformedRow(lineno, f"generator at unknown bus {int(r[0])}")
    with_gen = {g.bus for g in gens if g.status}

    buses = []
    for lineno, r in bus_rows:
        try:
            btype = BusType(int(r[1]))
        except ValueError:
            raise MalformedRow(lineno, f"unknown bus type {r[1]}") from None
        # a PV/REF label without a live generator is demoted, as MATPOWER does
        if btype == BusType.PV and int(r[0]) not in with_gen:
            btype = BusType.PQ
        buses.append(Bus(
            id=int(r[0]), bus_type=btype, Pd=r[2], Qd=r[3], Gs=r[4], Bs=r[5],
            Vm=r[7], Va=r[8], base_kV=r[9],
        ))

    branches = []
    for k, (lineno, r) in enumerate(branch_rows):
        f, t = int(r[0]), int(r[1])
        for end in (f, t):
            if end not in ids:
                raise UnknownBusReference(k, end)
        branches.append(Branch(
            from_bus=f, to_bus=t, r=r[2], x=r[3], b_charging=r[4],
            tap=r[8], shift=r[9], status=r[10] > 0,
        ))
    return Network(base_MVA=base, buses=tuple(buses), branches=tuple(branches), gens=gens)


def load_case(path) -> Network:
    with open(path) as fh:
        return parse_matpower_case(fh.read())


def _fmt(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def format_matpower_case(net: Network, name: str = "case") -> str:
    """Emit ``net`` as canonical MATPOWER text; parsing it back gives an equal Network."""
    out = [f"function mpc = {name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(net.base_MVA)};", ""]
    out.append("%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin")
    out.append("mpc.bus = [")
    for b in net.buses:
        row = [b.id, int(b.bus_type), b.Pd, b.Qd, b.Gs, b.Bs, 1, b.Vm, b.Va, b.base_kV, 1, 1.1, 0.9]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out.append("];")
    out.append("")
    out.append("%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin")
    out.append("mpc.gen = [")
    for g in net.gens:
        row = [g.bus, g.Pg, g.Qg, 9999, -9999, 1, net.base_MVA, int(g.status), 9999, 0]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out.append("];")
    out.append("")
    out.append("%% fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax")
    out.append("mpc.branch = [")
    for br in net.branches:
        row = [br.from_bus, br.to_bus, br.r, br.x, br.b_charging, 0, 0, 0,
               br.tap, br.shift, int(br.status), -360, 360]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# admittance assembly


@dataclass(frozen=True)
class AdmittanceBlocks:
    """Real and imaginary parts of Ybus plus the per-branch pi-model terms.

    ``yff, yft, ytf, ytt`` are complex per-branch coefficients (zero for
    out-of-service branches) with ``I_from = yff V_f + yft V_t`` and
    ``I_to = ytf V_f + ytt V_t``; ``f`` and ``t`` are internal bus indices
    (-1 for branches that touch an isolated bus).
    """

    n: int
    Gm: sp.csr_matrix
    Bm: sp.csr_matrix
    f: np.ndarray
    t: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray

    @property
    def ybus(self) -> sp.csr_matrix:
        return (self.Gm + 1j * self.Bm).tocsr()

    def stacked(self) -> sp.csr_matrix:
        """The real 2n x 2n operator mapping [V^R; V^I] to [I^R; I^I]."""
        return sp.bmat([[self.Gm, -self.Bm], [self.Bm, self.Gm]], format="csr")


def build_ybus(net: Network) -> AdmittanceBlocks:
    n = net.n
    nl = len(net.branches)
    f = np.full(nl, -1, dtype=int)
    t = np.full(nl, -1, dtype=int)
    yff = np.zeros(nl, dtype=complex)
    yft = np.zeros(nl, dtype=complex)
    ytf = np.zeros(nl, dtype=complex)
    ytt = np.zeros(nl, dtype=complex)
    for k, br in enumerate(net.branches):
        if not net.in_service(k):
            continue
        if br.r == 0 and br.x == 0:
            raise SingularBranch(k)
        f[k] = net.index[br.from_bus]
        t[k] = net.index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        tap = br.ratio * np.exp(1j * np.deg2rad(br.shift))
        ytt[k] = ys + 0.5j * br.b_charging
        yff[k] = ytt[k] / (tap * np.conj(tap))
        yft[k] = -ys / np.conj(tap)
        ytf[k] = -ys / tap

    live = f >= 0
    fl, tl = f[live], t[live]
    rows = np.concatenate([fl, fl, tl, tl, np.arange(n)])
    cols = np.concatenate([fl, tl, fl, tl, np.arange(n)])
    vals = np.concatenate([yff[live], yft[live], ytf[live], ytt[live], net.shunt_pu])
    # keep explicit zeros out of the pattern: only real incidences stay
    keep = vals != 0
    Y = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
    Y.sum_duplicates()
    Gm = sp.csr_matrix((Y.data.real, Y.indices, Y.indptr), shape=(n, n))
    Bm = sp.csr_matrix((Y.data.imag, Y.indices, Y.indptr), shape=(n, n))
    return AdmittanceBlocks(n=n, Gm=Gm, Bm=Bm, f=f, t=t, yff=yff, yft=yft, ytf=ytf, ytt=ytt)


def _complex_rows(n: int, cols: Iterable[int], coeffs: Iterable[complex]) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Real-form rows of a linear complex functional sum_k c_k V_k."""
    cols = np.asarray(list(cols), dtype=int)
    c = np.asarray(list(coeffs), dtype=complex)
    zeros = np.zeros(2 * len(cols), dtype=int)
    idx = np.concatenate([cols, cols + n])
    row_r = sp.csr_matrix((np.concatenate([c.real, -c.imag]), (zeros, idx)), shape=(1, 2 * n))
    row_i = sp.csr_matrix((np.concatenate([c.imag, c.real]), (zeros, idx)), shape=(1, 2 * n))
    row_r.sum_duplicates()
    row_i.sum_duplicates()
    return row_r, row_i


def injection_rows(adm: AdmittanceBlocks, bus_index: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Rows giving I_i^R and I_i^I as linear functions of x = [V^R; V^I]."""
    if not 0 <= bus_index < adm.n:
        raise IndexOutOfRange(f"bus index {bus_index} outside [0, {adm.n})")
    g = adm.Gm.getrow(bus_index)
    b = adm.Bm.getrow(bus_index)
    return sp.hstack([g, -b], format="csr"), sp.hstack([b, g], format="csr")


def branch_current_rows(net: Network, adm: AdmittanceBlocks, branch_index: int,
                        end: str) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Rows giving the current flowing from bus ``end`` into the branch."""
    if not 0 <= branch_index < len(net.branches):
        raise IndexOutOfRange(f"branch index {branch_index} outside [0, {len(net.branches)})")
    if not net.in_service(branch_index):
        raise BranchOutOfService(branch_index)
    k = branch_index
    cols = (adm.f[k], adm.t[k])
    if end == "from":
        coeffs = (adm.yff[k], adm.yft[k])
    elif end == "to":
        coeffs = (adm.ytf[k], adm.ytt[k])
    else:
        raise ValueError(f"end must be 'from' or 'to', got {end!r}")
    return _complex_rows(adm.n, cols, coeffs)


def branch_current_matrix(adm: AdmittanceBlocks, end: str) -> sp.csr_matrix:
    """Complex nl x n matrix whose product with V gives per-branch end currents."""
    live = np.flatnonzero(adm.f >= 0)
    if end == "from":
        a, b = adm.yff[live], adm.yft[live]
    else:
        a, b = adm.ytf[live], adm.ytt[live]
    rows = np.concatenate([live, live])
    cols = np.concatenate([adm.f[live], adm.t[live]])
    return sp.csr_matrix((np.concatenate([a, b]), (rows, cols)), shape=(len(adm.f), adm.n))


def end_bus(adm: AdmittanceBlocks, branch_index: int, end: str) -> int:
    return int(adm.f[branch_index] if end == "from" else adm.t[branch_index])


def detect_zero_injection_buses(net: Network) -> set[int]:
    """Indices of buses with no live generator, no load and no shunt."""
    gen = net.gen_bus_indices()
    zi = set()
    for i, b in enumerate(net.active_buses):
        if i in gen:
            continue
        if b.Pd == 0 and b.Qd == 0 and b.Gs == 0 and b.Bs == 0:
            zi.add(i)
    return zi
