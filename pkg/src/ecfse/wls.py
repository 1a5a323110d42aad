"""Polar-coordinate weighted-least-squares estimator solved by Gauss-Newton.

The state is (va, vm) with the reference-bus angle fixed. Zero-injection
buses enter as heavily weighted P = Q = 0 pseudo-measurements, the
traditional way of keeping such systems observable. No line search by
default, so divergence stays observable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .measurements import Channel, MeasurementSet
from .netmodel import AdmittanceBlocks, Network, branch_current_matrix

ZI_WEIGHT_MULTIPLIER = 1e6


@dataclass
class WlsOptions:
    max_iters: int = 20
    tol: float = 1e-8
    line_search: bool = False
    max_halvings: int = 4
    zi_weight_multiplier: float = ZI_WEIGHT_MULTIPLIER


@dataclass
class PolarState:
    vm: np.ndarray
    va: np.ndarray  # radians
    ref: int

    @property
    def v(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    def rectangular(self) -> np.ndarray:
        v = self.v
        return np.concatenate([v.real, v.imag])


@dataclass
class WlsResult:
    state: PolarState
    iterations: int
    converged: bool
    divergence_reason: Optional[str] = None  # max_iters | nan | singular_gain
    final_gradient_norm: float = np.nan
    objective: float = np.nan
    history: list[float] = field(default_factory=list)


@dataclass
class ChannelSet:
    """Measured values in a fixed channel order plus how to evaluate each one.

    ``pick[k]`` indexes the real vector ``[Re q; Im q]`` of stacked complex
    quantities (see :func:`_quantities`), scaled by ``sign[k]``.
    """

    channels: list[Channel]
    z: np.ndarray
    w: np.ndarray
    pick: np.ndarray
    sign: np.ndarray
    pseudo: np.ndarray  # True for ZI pseudo-measurements


class _Layout:
    """Offsets of each complex quantity block inside the stacked vector q."""

    def __init__(self, n: int, nl: int):
        self.n, self.nl = n, nl
        names = [("V", n), ("I", n), ("S", n), ("VM", n),
                 ("If", nl), ("It", nl), ("Sf", nl), ("St", nl)]
        self.off = {}
        pos = 0
        for name, size in names:
            self.off[name] = pos
            pos += size
        self.size = pos

    def re(self, block: str, i: int) -> int:
        return self.off[block] + i

    def im(self, block: str, i: int) -> int:
        return self.size + self.off[block] + i


def build_channels(net: Network, adm: AdmittanceBlocks, ms: MeasurementSet,
                   zi_weight_multiplier: float = ZI_WEIGHT_MULTIPLIER) -> ChannelSet:
    lay = _Layout(adm.n, len(net.branches))
    chans, z, w, pick, sign, pseudo = [], [], [], [], [], []

    def add(ch: Channel, value: float, weight: float, idx: int, sgn: float = 1.0, is_pseudo=False):
        chans.append(ch)
        z.append(value)
        w.append(weight)
        pick.append(idx)
        sign.append(sgn)
        pseudo.append(is_pseudo)

    for m in ms.pmu:
        i = m.bus
        add(Channel("pmu_v", i, "R"), m.z_vr, m.w_v, lay.re("V", i))
        add(Channel("pmu_v", i, "I"), m.z_vi, m.w_v, lay.im("V", i))
        add(Channel("pmu_i", i, "R"), m.z_ir, m.w_i, lay.re("I", i), -1.0)
        add(Channel("pmu_i", i, "I"), m.z_ii, m.w_i, lay.im("I", i), -1.0)
    vm_buses = set()
    for m in ms.rtu:
        i = m.bus
        vm_buses.add(i)
        add(Channel("rtu_vm", i, "M"), m.z_vm, m.w, lay.re("VM", i))
        add(Channel("rtu_p", i, "P"), m.z_p, m.w, lay.re("S", i), -1.0)
        add(Channel("rtu_q", i, "Q"), m.z_q, m.w, lay.im("S", i), -1.0)
    for m in ms.flows:
        k, end = m.branch, m.end
        ref = (k, end)
        cur, pw = ("If", "Sf") if end == "from" else ("It", "St")
        if m.kind == "rtu":
            j = int(adm.f[k] if end == "from" else adm.t[k])
            # one |V| reading per bus; an injection RTU at the bus already supplies it
            if j not in vm_buses:
                vm_buses.add(j)
                add(Channel("flow_vm", j, "M"), m.z_vm, m.w, lay.re("VM", j))
            add(Channel("flow_p", ref, "P"), m.z_pline, m.w, lay.re(pw, k))
            add(Channel("flow_q", ref, "Q"), m.z_qline, m.w, lay.im(pw, k))
        else:
            add(Channel("flow_pmu", ref, "R"), m.z_ir, m.w, lay.re(cur, k))
            add(Channel("flow_pmu", ref, "I"), m.z_ii, m.w, lay.im(cur, k))
    wmax = max(w) if w else 1.0
    for i in sorted(ms.zi_buses):
        add(Channel("zi_p", i, "P"), 0.0, zi_weight_multiplier * wmax, lay.re("S", i), 1.0, True)
        add(Channel("zi_q", i, "Q"), 0.0, zi_weight_multiplier * wmax, lay.im("S", i), 1.0, True)
    return ChannelSet(chans, np.array(z, dtype=float), np.array(w, dtype=float),
                      np.array(pick, dtype=int), np.array(sign), np.array(pseudo, dtype=bool))


class _Model:
    """Complex network quantities and their derivatives in (va, vm)."""

    def __init__(self, net: Network, adm: AdmittanceBlocks):
        self.n = adm.n
        self.nl = len(net.branches)
        self.Y = adm.ybus.tocsr()
        self.Yf = branch_current_matrix(adm, "from")
        self.Yt = branch_current_matrix(adm, "to")
        rows = np.arange(self.nl)
        live = adm.f >= 0
        self.Cf = sp.csr_matrix((np.ones(live.sum()), (rows[live], adm.f[live])), shape=(self.nl, self.n))
        self.Ct = sp.csr_matrix((np.ones(live.sum()), (rows[live], adm.t[live])), shape=(self.nl, self.n))

    def quantities(self, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
        v = vm * np.exp(1j * va)
        i = self.Y @ v
        i_f, i_t = self.Yf @ v, self.Yt @ v
        s = v * np.conj(i)
        s_f = (self.Cf @ v) * np.conj(i_f)
        s_t = (self.Ct @ v) * np.conj(i_t)
        q = np.concatenate([v, i, s, vm.astype(complex), i_f, i_t, s_f, s_t])
        return np.concatenate([q.real, q.imag])

    def jacobian(self, vm: np.ndarray, va: np.ndarray) -> sp.csr_matrix:
        """Real Jacobian of :meth:`quantities` with columns [va, vm]."""
        n = self.n
        v = vm * np.exp(1j * va)
        dv = sp.hstack([sp.diags(1j * v), sp.diags(v / vm)], format="csr")
        i = self.Y @ v
        i_f, i_t = self.Yf @ v, self.Yt @ v
        di = self.Y @ dv
        di_f, di_t = self.Yf @ dv, self.Yt @ dv
        ds = sp.diags(np.conj(i)) @ dv + sp.diags(v) @ di.conj()
        ds_f = sp.diags(np.conj(i_f)) @ (self.Cf @ dv) + sp.diags(self.Cf @ v) @ di_f.conj()
        ds_t = sp.diags(np.conj(i_t)) @ (self.Ct @ dv) + sp.diags(self.Ct @ v) @ di_t.conj()
        dvm = sp.hstack([sp.csr_matrix((n, n)), sp.identity(n, format="csr")], format="csr")
        dq = sp.vstack([dv, di, ds, dvm.astype(complex), di_f, di_t, ds_f, ds_t], format="csr")
        return sp.vstack([dq.real, dq.imag], format="csr")


def _free_columns(n: int, ref: int) -> np.ndarray:
    return np.concatenate([np.delete(np.arange(n), ref), n + np.arange(n)])


def measurement_function(net: Network, adm: AdmittanceBlocks, ms: MeasurementSet,
                         st: PolarState, channels: Optional[ChannelSet] = None) -> np.ndarray:
    """Model value of every channel (measurements first, ZI pseudo-channels last)."""
    cs = channels or build_channels(net, adm, ms)
    return cs.sign * _Model(net, adm).quantities(st.vm, st.va)[cs.pick]


def measurement_jacobian(net: Network, adm: AdmittanceBlocks, ms: MeasurementSet,
                         st: PolarState, channels: Optional[ChannelSet] = None) -> sp.csr_matrix:
    """d h / d(va without reference, vm)."""
    cs = channels or build_channels(net, adm, ms)
    J = _Model(net, adm).jacobian(st.vm, st.va)[cs.pick][:, _free_columns(adm.n, st.ref)]
    return (sp.diags(cs.sign) @ J).tocsr()


def initial_state(net: Network, init: str) -> PolarState:
    ref = net.slack_index
    if init == "case_data":
        return PolarState(net.vm.copy(), net.va_rad.copy(), ref)
    if init == "flat":
        va = np.zeros(net.n)
        va[ref] = net.va_rad[ref]
        return PolarState(np.ones(net.n), va, ref)
    raise ValueError(f"init must be 'flat' or 'case_data', got {init!r}")


def estimate_wls(net: Network, adm: AdmittanceBlocks, ms: MeasurementSet,
                 init: str = "case_data", opts: Optional[WlsOptions] = None) -> WlsResult:
    opts = opts or WlsOptions()
    cs = build_channels(net, adm, ms, opts.zi_weight_multiplier)
    if not len(cs.z):
        raise ValueError("empty measurement set")
    model = _Model(net, adm)
    st = initial_state(net, init)
    n, ref = net.n, st.ref
    free = _free_columns(n, ref)
    W = sp.diags(cs.w)

    def evaluate(vm, va):
        h = cs.sign * model.quantities(vm, va)[cs.pick]
        r = cs.z - h
        return h, r, float(np.dot(cs.w * r, r))

    def gradient(vm, va, r):
        J = sp.diags(cs.sign) @ model.jacobian(vm, va)[cs.pick][:, free]
        return J, J.T @ (cs.w * r)

    vm, va = st.vm.copy(), st.va.copy()
    h, r, obj = evaluate(vm, va)
    history = [obj]
    reason = None
    converged = False
    it = 0
    while it < opts.max_iters:
        J, rhs = gradient(vm, va, r)
        gain = (J.T @ W @ J).tocsc()
        try:
            dx = spla.splu(gain).solve(rhs)
        except RuntimeError:
            reason = "singular_gain"
            break
        if not np.all(np.isfinite(dx)):
            reason = "nan"
            break
        it += 1
        step = 1.0
        for _ in range(opts.max_halvings + 1 if opts.line_search else 1):
            full = np.zeros(2 * n)
            full[free] = step * dx
            va_new, vm_new = va + full[:n], vm + full[n:]
            h_new, r_new, obj_new = evaluate(vm_new, va_new)
            if not opts.line_search or obj_new <= obj:
                break
            step *= 0.5
        if not (np.all(np.isfinite(h_new)) and np.isfinite(obj_new)):
            reason = "nan"
            break
        va, vm, h, r, obj = va_new, vm_new, h_new, r_new, obj_new
        history.append(obj)
        if np.max(np.abs(step * dx)) < opts.tol:
            converged = True
            break
    if not converged and reason is None:
        reason = "max_iters"

    grad_norm = np.nan
    if np.all(np.isfinite(vm)) and np.all(np.isfinite(va)):
        _, g = gradient(vm, va, r)
        grad_norm = float(np.max(np.abs(g), initial=0.0))
    return WlsResult(state=PolarState(vm, va, ref), iterations=it, converged=converged,
                     divergence_reason=reason, final_gradient_norm=grad_norm,
                     objective=obj, history=history)
