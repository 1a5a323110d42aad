"""Equivalent-circuit state estimator.

Every device contributes linear residual rows in x = [V^R; V^I]:

* PMU at bus i: current rows ``Y_i x + z_I`` and voltage rows ``V_i - z_V``;
* RTU at bus i: ``Y_i x + (G - jB) V_i`` with G, B from the metered P, Q, |V|;
* flow meters: branch-current rows minus the metered (or modelled) current;
* ZI buses: hard constraints ``Y_i x = 0``.

Unmetered buses contribute nothing. The objective is ``sum w r^2`` over the
rows, so the problem is a convex equality-constrained QP solved by a single
factorization of its KKT matrix.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .measurements import AnchorMissing, Channel, MeasurementSet, rtu_shunt_params, validate_measurement_set
from .netmodel import AdmittanceBlocks, IndexOutOfRange, Network, branch_current_matrix, end_bus

OPTIMAL = "optimal"
SINGULAR = "singular"
ANCHOR_MISSING = "anchor_missing"

# smallest |pivot| / largest |pivot| of the equilibrated KKT factor accepted as nonsingular
PIVOT_RATIO_TOL = 1e-13
MAX_REFINEMENTS = 5


@dataclass(frozen=True)
class QpProblem:
    """``min x'Hx + g'x + c0  s.t.  C x = 0``.

    When built from measurements, ``A``, ``b`` and ``w`` hold the residual
    rows (objective ``sum w (A x - b)^2``), which lets the stationarity
    residual be evaluated without forming ``H x``. Weights are divided by
    ``weight_scale`` (the largest channel weight) so the KKT system is O(1);
    the minimizer is unchanged and ``weight_scale * objective(x)`` is the
    objective in the caller's weights.
    """

    n_state: int
    H: sp.csr_matrix
    g: np.ndarray
    c0: float
    C: sp.csr_matrix
    row_index: list[tuple[int, str]] = field(default_factory=list)
    meas_index: list[Channel] = field(default_factory=list)
    A: Optional[sp.csr_matrix] = None
    b: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    weight_scale: float = 1.0

    @classmethod
    def from_matrices(cls, H, g, c0: float = 0.0, C=None) -> "QpProblem":
        H = sp.csr_matrix(np.atleast_2d(H) if not sp.issparse(H) else H)
        n = H.shape[0]
        C = sp.csr_matrix((0, n)) if C is None else sp.csr_matrix(C)
        return cls(n_state=n, H=H, g=np.asarray(g, dtype=float).ravel(), c0=float(c0), C=C)

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def residuals(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x - self.b

    def objective(self, x: np.ndarray) -> float:
        if self.A is not None:
            r = self.residuals(x)
            return float(np.dot(self.w * r, r))
        return float(x @ (self.H @ x) + self.g @ x + self.c0)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if self.A is not None:
            return 2.0 * (self.A.T @ (self.w * self.residuals(x)))
        return 2.0 * (self.H @ x) + self.g


@dataclass
class EstimateResult:
    x: np.ndarray
    lam: np.ndarray
    objective: float
    kkt_residual: float
    status: str
    noise: dict = field(default_factory=dict)
    solve_time: float = 0.0
    factorizations: int = 0
    refinements: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


class _Rows:
    """Accumulates residual rows as (source row, extra entries, b, w, channel)."""

    def __init__(self):
        self.src: list[int] = []
        self.extra_r: list[int] = []
        self.extra_c: list[int] = []
        self.extra_v: list[float] = []
        self.b: list[float] = []
        self.w: list[float] = []
        self.channels: list[Channel] = []

    def add(self, channel: Channel, src: int, extra, b: float, w: float):
        r = len(self.b)
        self.src.append(src)
        for c, v in extra:
            self.extra_r.append(r)
            self.extra_c.append(c)
            self.extra_v.append(v)
        self.b.append(b)
        self.w.append(w)
        self.channels.append(channel)


def _real_form(M: sp.spmatrix) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Real rows of a complex operator acting on [V^R; V^I]."""
    return (sp.hstack([M.real, -M.imag], format="csr"),
            sp.hstack([M.imag, M.real], format="csr"))


def assemble_qp(net: Network, adm: AdmittanceBlocks, ms: MeasurementSet) -> QpProblem:
    report = validate_measurement_set(net, ms)
    if report.has("AnchorMissing"):
        raise AnchorMissing("measurement set has no PMU voltage and no anchor")
    if report.has("IndexOutOfRange"):
        raise IndexOutOfRange("; ".join(i.detail for i in report.issues if i.code == "IndexOutOfRange"))
    if not report.ok:
        raise ValueError("invalid measurement set: " + "; ".join(f"{i.code}: {i.detail}" for i in report.issues))

    n = adm.n
    S = adm.stacked()
    lf_r, lf_i = _real_form(branch_current_matrix(adm, "from"))
    lt_r, lt_i = _real_form(branch_current_matrix(adm, "to"))
    nl = lf_r.shape[0]
    source = sp.vstack([S, lf_r, lf_i, lt_r, lt_i], format="csr")
    NONE = -1

    def flow_src(k: int, end: str, part: str) -> int:
        base = 2 * n + (0 if end == "from" else 2 * nl)
        return base + k + (0 if part == "R" else nl)

    rows = _Rows()
    for m in ms.pmu:
        i = m.bus
        rows.add(Channel("pmu_i", i, "R"), i, (), -m.z_ir, m.w_i)
        rows.add(Channel("pmu_i", i, "I"), n + i, (), -m.z_ii, m.w_i)
        rows.add(Channel("pmu_v", i, "R"), NONE, ((i, 1.0),), m.z_vr, m.w_v)
        rows.add(Channel("pmu_v", i, "I"), NONE, ((n + i, 1.0),), m.z_vi, m.w_v)
    for m in ms.rtu:
        i = m.bus
        G, B = rtu_shunt_params(m.z_vm, m.z_p, m.z_q)
        rows.add(Channel("rtu", i, "R"), i, ((i, G), (n + i, B)), 0.0, m.w)
        rows.add(Channel("rtu", i, "I"), n + i, ((n + i, G), (i, -B)), 0.0, m.w)
    for m in ms.flows:
        k, end = m.branch, m.end
        ref = (k, end)
        if m.kind == "rtu":
            j = end_bus(adm, k, end)
            G, B = rtu_shunt_params(m.z_vm, m.z_pline, m.z_qline)
            rows.add(Channel("flow_rtu", ref, "R"), flow_src(k, end, "R"),
                     ((j, -G), (n + j, -B)), 0.0, m.w)
            rows.add(Channel("flow_rtu", ref, "I"), flow_src(k, end, "I"),
                     ((n + j, -G), (j, B)), 0.0, m.w)
        else:
            rows.add(Channel("flow_pmu", ref, "R"), flow_src(k, end, "R"), (), m.z_ir, m.w)
            rows.add(Channel("flow_pmu", ref, "I"), flow_src(k, end, "I"), (), m.z_ii, m.w)
    if ms.anchor is not None:
        a = ms.anchor
        rows.add(Channel("anchor", a.bus, "R"), NONE, ((a.bus, 1.0),), a.z_vr, a.weight)
        rows.add(Channel("anchor", a.bus, "I"), NONE, ((n + a.bus, 1.0),), a.z_vi, a.weight)

    nr = len(rows.b)
    src = np.asarray(rows.src, dtype=int)
    picked = np.flatnonzero(src >= 0)
    P = sp.csr_matrix((np.ones(len(picked)), (picked, src[picked])), shape=(nr, source.shape[0]))
    D = sp.csr_matrix((rows.extra_v, (rows.extra_r, rows.extra_c)), shape=(nr, 2 * n))
    A = (P @ source + D).tocsr()
    A.sum_duplicates()
    b = np.asarray(rows.b, dtype=float)
    w = np.asarray(rows.w, dtype=float)
    scale = float(w.max()) if len(w) and w.max() > 0 else 1.0
    w = w / scale

    WA = sp.diags(w) @ A
    H = (A.T @ WA).tocsr()
    g = -2.0 * (A.T @ (w * b))
    c0 = float(np.dot(w * b, b))

    zi = sorted(ms.zi_buses)
    row_index = [(i, part) for i in zi for part in ("R", "I")]
    C = S[[i if part == "R" else n + i for i, part in row_index], :] if zi else sp.csr_matrix((0, 2 * n))
    return QpProblem(n_state=2 * n, H=H, g=np.asarray(g).ravel(), c0=c0, C=sp.csr_matrix(C),
                     row_index=row_index, meas_index=rows.channels, A=A, b=b, w=w,
                     weight_scale=scale)


def _kkt_parts(qp: QpProblem, x: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    stat = qp.gradient(x)
    if qp.m:
        stat = stat + qp.C.T @ lam
    return stat, qp.C @ x


def kkt_residual(qp: QpProblem, est: EstimateResult) -> float:
    """Infinity norm of the stationarity and feasibility residuals at ``est``."""
    stat, feas = _kkt_parts(qp, est.x, est.lam)
    return float(max(np.max(np.abs(stat), initial=0.0), np.max(np.abs(feas), initial=0.0)))


def _singular(qp: QpProblem, t0: float, factorizations: int) -> EstimateResult:
    nan = np.full(qp.n_state, np.nan)
    return EstimateResult(x=nan, lam=np.full(qp.m, np.nan), objective=np.nan,
                          kkt_residual=np.inf, status=SINGULAR,
                          solve_time=time.perf_counter() - t0, factorizations=factorizations)


def solve_qp(qp: QpProblem) -> EstimateResult:
    """Solve the KKT system ``[2H C'; C 0][x; lam] = [-g; 0]`` by one sparse LU.

    The matrix is symmetrically equilibrated before factorization and the
    solution is polished by a few iterative-refinement passes that reuse the
    same factors; no step depends on a starting point. ``lam`` and
    ``kkt_residual`` are in the QP's (normalized) units, ``objective`` in the
    measurement weights.
    """
    t0 = time.perf_counter()
    ns, m = qp.n_state, qp.m
    K = sp.bmat([[2.0 * qp.H, qp.C.T], [qp.C, None]], format="csc")
    if K.shape != (ns + m, ns + m):
        K.resize((ns + m, ns + m))
    row_max = abs(K).max(axis=1).toarray().ravel()
    if np.any(row_max == 0):
        return _singular(qp, t0, 0)
    d = 1.0 / np.sqrt(row_max)
    Dm = sp.diags(d)
    Ks = (Dm @ K @ Dm).tocsc()
    try:
        lu = spla.splu(Ks, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError:
        return _singular(qp, t0, 1)
    piv = np.abs(lu.U.diagonal())
    if piv.min() <= PIVOT_RATIO_TOL * piv.max():
        return _singular(qp, t0, 1)

    def step(rhs: np.ndarray) -> np.ndarray:
        return d * lu.solve(d * rhs)

    z = step(np.concatenate([-qp.g, np.zeros(m)]))
    if not np.all(np.isfinite(z)):
        return _singular(qp, t0, 1)

    def residual(z):
        stat, feas = _kkt_parts(qp, z[:ns], z[ns:])
        return np.concatenate([stat, feas])

    r = residual(z)
    best = np.max(np.abs(r))
    refinements = 0
    for _ in range(MAX_REFINEMENTS):
        if best == 0:
            break
        cand = z - step(r)
        rc = residual(cand)
        nc = np.max(np.abs(rc))
        if not nc < 0.5 * best:
            if nc < best:
                z, r, best = cand, rc, nc
                refinements += 1
            break
        z, r, best = cand, rc, nc
        refinements += 1

    x, lam = z[:ns], z[ns:]
    res = EstimateResult(x=x, lam=lam, objective=qp.weight_scale * qp.objective(x),
                         kkt_residual=float(best),
                         status=OPTIMAL, factorizations=1, refinements=refinements)
    res.solve_time = time.perf_counter() - t0
    return res


def recover_noise_terms(net: Network, adm: AdmittanceBlocks, ms: MeasurementSet,
                        x: np.ndarray) -> dict[Channel, float]:
    """Slack currents of every current-type channel at ``x``, from the device models.

    Injection channels give the noise current ``n`` that closes the bus KCL
    equation; flow channels give the line current minus the metered (PMU) or
    modelled (RTU) one. Voltage and anchor mismatches are not noise currents
    and are left to :func:`voltage_mismatches`.
    """
    n = adm.n
    v = x[:n] + 1j * x[n:]
    inj = adm.ybus @ v
    out: dict[Channel, float] = {}
    for m in ms.pmu:
        nz = -(inj[m.bus] + complex(m.z_ir, m.z_ii))
        out[Channel("pmu_i", m.bus, "R")] = nz.real
        out[Channel("pmu_i", m.bus, "I")] = nz.imag
    for m in ms.rtu:
        G, B = rtu_shunt_params(m.z_vm, m.z_p, m.z_q)
        nz = -(inj[m.bus] + complex(G, -B) * v[m.bus])
        out[Channel("rtu", m.bus, "R")] = nz.real
        out[Channel("rtu", m.bus, "I")] = nz.imag
    if ms.flows:
        cur = {end: branch_current_matrix(adm, end) @ v for end in ("from", "to")}
    for m in ms.flows:
        k, end = m.branch, m.end
        i_line = cur[end][k]
        if m.kind == "rtu":
            G, B = rtu_shunt_params(m.z_vm, m.z_pline, m.z_qline)
            nz = i_line - complex(G, -B) * v[end_bus(adm, k, end)]
        else:
            nz = i_line - complex(m.z_ir, m.z_ii)
        key = "flow_" + m.kind
        out[Channel(key, (k, end), "R")] = nz.real
        out[Channel(key, (k, end), "I")] = nz.imag
    return out


def voltage_mismatches(ms: MeasurementSet, x: np.ndarray) -> dict[Channel, float]:
    """``V - z`` for PMU voltage channels and the anchor."""
    n = len(x) // 2
    out: dict[Channel, float] = {}
    for m in ms.pmu:
        out[Channel("pmu_v", m.bus, "R")] = x[m.bus] - m.z_vr
        out[Channel("pmu_v", m.bus, "I")] = x[n + m.bus] - m.z_vi
    if ms.anchor is not None:
        a = ms.anchor
        out[Channel("anchor", a.bus, "R")] = x[a.bus] - a.z_vr
        out[Channel("anchor", a.bus, "I")] = x[n + a.bus] - a.z_vi
    return out


def estimate_ecf(net: Network, adm: AdmittanceBlocks, ms: MeasurementSet) -> EstimateResult:
    """Assemble, solve and recover noise terms; an unanchored set yields ``anchor_missing``."""
    t0 = time.perf_counter()
    try:
        qp = assemble_qp(net, adm, ms)
    except AnchorMissing:
        n2 = 2 * adm.n
        return EstimateResult(x=np.full(n2, np.nan), lam=np.empty(0), objective=np.nan,
                              kkt_residual=np.inf, status=ANCHOR_MISSING)
    res = solve_qp(qp)
    if res.ok:
        res.noise = recover_noise_terms(net, adm, ms, res.x)
    res.solve_time = time.perf_counter() - t0
    return res
