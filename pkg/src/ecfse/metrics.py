"""Evaluation metrics: weighted residual, weighted measurement error, state error.

Each method is scored in its own measurement space. ECF channels live in
current space (the residual rows of its QP, anchor included), WLS channels
are the raw measured quantities; ZI pseudo-channels are excluded from both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ecf import EstimateResult, assemble_qp
from .measurements import MeasurementSet, rtu_shunt_params
from .netmodel import AdmittanceBlocks, Network, branch_current_matrix, end_bus
from .synth import TruthBundle
from .wls import WlsResult, build_channels, measurement_function, PolarState


class LengthMismatch(ValueError):
    pass


def _same_length(*arrays):
    if len({len(a) for a in arrays}) > 1:
        raise LengthMismatch(f"lengths differ: {[len(a) for a in arrays]}")


def residual_metric(z, z_est, w) -> float:
    z, z_est, w = (np.asarray(a, dtype=float) for a in (z, z_est, w))
    _same_length(z, z_est, w)
    return float(np.sum(w * (z - z_est) ** 2) / len(z)) if len(z) else 0.0


def mse_z(z_est, z_true, w) -> float:
    return residual_metric(z_est, z_true, w)


def mse_x(x_est, x_true, n_bus: int) -> float:
    """Squared state error divided by the number of buses (not the state length)."""
    x_est, x_true = np.asarray(x_est, dtype=float), np.asarray(x_true, dtype=float)
    _same_length(x_est, x_true)
    return float(np.sum((x_est - x_true) ** 2) / n_bus)


@dataclass
class MetricsReport:
    method: str
    res: float
    mse_z: float
    mse_x: float
    n_meter: int
    n_bus: int
    channels: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {"res": self.res, "mse_z": self.mse_z, "mse_x": self.mse_x,
                "n_meter": self.n_meter, "n_bus": self.n_bus}


def _report(method, labels, z, z_est, z_true, w, x_est, x_true, n_bus) -> MetricsReport:
    rows = [
        {"channel": f"{c.kind}:{c.ref}:{c.part}", "z": float(a), "z_est": float(b),
         "z_true": float(t), "w": float(ww)}
        for c, a, b, t, ww in zip(labels, z, z_est, z_true, w)
    ]
    finite = np.all(np.isfinite(x_est))
    return MetricsReport(
        method=method,
        res=residual_metric(z, z_est, w) if finite else np.nan,
        mse_z=mse_z(z_est, z_true, w) if finite else np.nan,
        mse_x=mse_x(x_est, x_true, n_bus) if finite else np.nan,
        n_meter=len(z), n_bus=n_bus, channels=rows,
    )


def ecf_channel_values(net: Network, adm: AdmittanceBlocks, ms: MeasurementSet,
                       x: np.ndarray):
    """(labels, z, z_est, weights) for the ECF channels at state ``x``.

    ``z - z_est`` equals the QP residual row up to sign, so ``res`` times the
    channel count reproduces the objective.
    """
    qp = assemble_qp(net, adm, ms)
    n = adm.n
    v = x[:n] + 1j * x[n:]
    inj = adm.ybus @ v
    cur = {end: branch_current_matrix(adm, end) @ v for end in ("from", "to")}
    rtu = {m.bus: m for m in ms.rtu}
    pmu = {m.bus: m for m in ms.pmu}
    flows = {(m.branch, m.end): m for m in ms.flows}

    def part(c: complex, p: str) -> float:
        return c.real if p == "R" else c.imag

    z, z_est = [], []
    for ch in qp.meas_index:
        k, ref, p = ch.kind, ch.ref, ch.part
        if k == "pmu_i":
            m = pmu[ref]
            z.append(m.z_ir if p == "R" else m.z_ii)
            z_est.append(part(-inj[ref], p))
        elif k == "pmu_v":
            m = pmu[ref]
            z.append(m.z_vr if p == "R" else m.z_vi)
            z_est.append(part(v[ref], p))
        elif k == "rtu":
            m = rtu[ref]
            G, B = rtu_shunt_params(m.z_vm, m.z_p, m.z_q)
            z.append(part(complex(G, -B) * v[ref], p))
            z_est.append(part(-inj[ref], p))
        elif k == "flow_rtu":
            m = flows[ref]
            G, B = rtu_shunt_params(m.z_vm, m.z_pline, m.z_qline)
            z.append(part(complex(G, -B) * v[end_bus(adm, *ref)], p))
            z_est.append(part(cur[ref[1]][ref[0]], p))
        elif k == "flow_pmu":
            m = flows[ref]
            z.append(m.z_ir if p == "R" else m.z_ii)
            z_est.append(part(cur[ref[1]][ref[0]], p))
        elif k == "anchor":
            a = ms.anchor
            z.append(a.z_vr if p == "R" else a.z_vi)
            z_est.append(part(v[ref], p))
        else:  # pragma: no cover
            raise ValueError(f"unknown channel kind {k}")
    return qp.meas_index, np.array(z), np.array(z_est), qp.w * qp.weight_scale


def ecf_metrics(net: Network, adm: AdmittanceBlocks, ms: MeasurementSet,
                truth: TruthBundle, est: EstimateResult) -> MetricsReport:
    labels, z, z_est, w = ecf_channel_values(net, adm, ms, est.x)
    # true channel values: the device model evaluated at the true state
    _, _, z_true, _ = ecf_channel_values(net, adm, ms, truth.x_true)
    return _report("ecf", labels, z, z_est, z_true, w, est.x, truth.x_true, net.n)


def wls_metrics(net: Network, adm: AdmittanceBlocks, ms: MeasurementSet,
                truth: TruthBundle, result: WlsResult, method: str = "wls") -> MetricsReport:
    cs = build_channels(net, adm, ms)
    keep = ~cs.pseudo
    st = result.state
    x_est = st.rectangular()
    true_state = PolarState(np.abs(truth.v), np.angle(truth.v), st.ref)
    h_true = measurement_function(net, adm, ms, true_state, cs)
    if np.all(np.isfinite(x_est)):
        h_est = measurement_function(net, adm, ms, st, cs)
    else:
        h_est = np.full(len(cs.z), np.nan)
    labels = [c for c, k in zip(cs.channels, keep) if k]
    return _report(method, labels, cs.z[keep], h_est[keep], h_true[keep], cs.w[keep],
                   x_est, truth.x_true, net.n)
