"""Ground truth from a case's stored voltages and noisy measurement synthesis."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .measurements import (
    Anchor,
    FlowMeas,
    MeasurementSet,
    PmuInjectionMeas,
    RtuInjectionMeas,
    default_weight,
)
from .netmodel import (
    AdmittanceBlocks,
    Network,
    ZeroVm,
    branch_current_matrix,
    detect_zero_injection_buses,
)

# recorded in reports so a run can be replayed bit-for-bit
PRNG_NAME = f"numpy.random.PCG64 (numpy {np.__version__})"


class PlanConflict(ValueError):
    pass


class NegativeSigma(ValueError):
    pass


@dataclass(frozen=True)
class FlowTruth:
    ir: float
    ii: float
    p: float
    q: float
    vm: float


@dataclass(frozen=True)
class TruthBundle:
    x_true: np.ndarray
    inj: np.ndarray  # complex injection current per bus, network convention
    flows: dict[tuple[int, str], FlowTruth]

    @property
    def v(self) -> np.ndarray:
        n = len(self.inj)
        return self.x_true[:n] + 1j * self.x_true[n:]


def true_state_from_case(net: Network) -> np.ndarray:
    vm = net.vm
    if np.any(vm <= 0):
        raise ZeroVm(int(net.bus_ids[np.argmin(vm)]))
    va = net.va_rad
    return np.concatenate([vm * np.cos(va), vm * np.sin(va)])


def compute_truth(net: Network, adm: AdmittanceBlocks, x_true: np.ndarray) -> TruthBundle:
    n = adm.n
    v = x_true[:n] + 1j * x_true[n:]
    inj = adm.ybus @ v
    flows = {}
    for end, buses in (("from", adm.f), ("to", adm.t)):
        cur = branch_current_matrix(adm, end) @ v
        for k in np.flatnonzero(buses >= 0):
            vend = v[buses[k]]
            s = vend * np.conj(cur[k])
            flows[(int(k), end)] = FlowTruth(cur[k].real, cur[k].imag, s.real, s.imag, abs(vend))
    return TruthBundle(x_true=np.asarray(x_true, dtype=float), inj=inj, flows=flows)


@dataclass
class MeasurementPlan:
    """Which device sits where. Keys of ``devices`` are internal bus indices."""

    devices: dict[int, str] = field(default_factory=dict)
    flows: list[tuple[int, str, str]] = field(default_factory=list)  # (branch, end, kind)
    anchor: Optional[int] = None

    def to_dict(self, net: Network) -> dict:
        ids = net.bus_ids.tolist()
        return {
            "devices": {str(ids[i]): kind for i, kind in sorted(self.devices.items())},
            "flows": [{"branch": k + 1, "end": e, "kind": kd} for k, e, kd in self.flows],
            "anchor": ids[self.anchor] if self.anchor is not None else None,
        }

    @classmethod
    def from_dict(cls, net: Network, doc: dict) -> "MeasurementPlan":
        devices = {}
        for bus_id, kind in doc.get("devices", {}).items():
            if int(bus_id) not in net.index:
                raise PlanConflict(f"plan references unknown or isolated bus {bus_id}")
            devices[net.index[int(bus_id)]] = kind
        flows = [(int(f["branch"]) - 1, f["end"], f["kind"]) for f in doc.get("flows", [])]
        anchor = doc.get("anchor")
        if anchor == "slack":
            anchor = net.slack_index
        elif anchor is not None:
            if int(anchor) not in net.index:
                raise PlanConflict(f"anchor at unknown bus {anchor}")
            anchor = net.index[int(anchor)]
        return cls(devices=devices, flows=flows, anchor=anchor)


BUILTIN_PLANS = ("rtu-all", "rtu-flows", "pmu-all", "fig5")


def builtin_plan(name: str, net: Network) -> MeasurementPlan:
    """Named device placements.

    ``rtu-all``: an RTU at every injection (non-ZI) bus, anchored at the slack
    bus with its measured magnitude and reference angle. ``rtu-flows`` adds an
    RTU flow meter at the from-end of every live branch. ``pmu-all``: a PMU at
    every bus. ``fig5``: PMUs at buses 1 and 4, an RTU at bus 5.
    """
    zi = detect_zero_injection_buses(net)
    if name in ("rtu-all", "rtu-flows"):
        plan = MeasurementPlan(
            devices={i: "rtu" for i in range(net.n) if i not in zi},
            anchor=net.slack_index,
        )
        if name == "rtu-flows":
            plan.flows = [(k, "from", "rtu") for k in range(len(net.branches)) if net.in_service(k)]
        return plan
    if name == "pmu-all":
        return MeasurementPlan(devices={i: "pmu" for i in range(net.n)})
    if name == "fig5":
        want = {1: "pmu", 4: "pmu", 5: "rtu"}
        if not all(b in net.index for b in want):
            raise PlanConflict("fig5 plan needs buses 1, 4 and 5")
        return MeasurementPlan(devices={net.index[b]: k for b, k in want.items()})
    raise PlanConflict(f"unknown plan {name!r}; choose from {BUILTIN_PLANS}")


def load_plan(spec: str, net: Network) -> MeasurementPlan:
    if spec in BUILTIN_PLANS:
        return builtin_plan(spec, net)
    with open(spec) as fh:
        return MeasurementPlan.from_dict(net, json.load(fh))


def synthesize_measurements(net: Network, truth: TruthBundle, plan: MeasurementPlan,
                            sigma: float, seed: int) -> MeasurementSet:
    """Add independent Gaussian noise (std ``sigma``) to every metered channel.

    Draw order is fixed (devices by bus index, then flows in plan order, then
    the anchor), so the result depends only on the arguments.
    """
    if sigma < 0:
        raise NegativeSigma(f"sigma must be >= 0, got {sigma}")
    n = net.n
    for i, kind in plan.devices.items():
        if not 0 <= i < n:
            raise PlanConflict(f"device at bus index {i} outside network")
        if kind not in ("pmu", "rtu"):
            raise PlanConflict(f"unknown device kind {kind!r} at bus {i}")
    seen = set()
    for k, end, kind in plan.flows:
        if not 0 <= k < len(net.branches) or not net.in_service(k):
            raise PlanConflict(f"flow meter on missing or out-of-service branch {k}")
        if end not in ("from", "to") or kind not in ("pmu", "rtu"):
            raise PlanConflict(f"bad flow meter spec {(k, end, kind)}")
        if (k, end, kind) in seen:
            raise PlanConflict(f"duplicate flow meter {(k, end, kind)}")
        seen.add((k, end, kind))

    rng = np.random.Generator(np.random.PCG64(seed))
    w = default_weight(sigma)
    v = truth.v

    def noisy(value: float) -> float:
        return float(value + sigma * rng.standard_normal()) if sigma > 0 else float(value)

    pmu, rtu = [], []
    vm_meas: dict[int, float] = {}
    for i in sorted(plan.devices):
        if plan.devices[i] == "pmu":
            dev = -truth.inj[i]
            pmu.append(PmuInjectionMeas(
                bus=i, z_vr=noisy(v[i].real), z_vi=noisy(v[i].imag),
                z_ir=noisy(dev.real), z_ii=noisy(dev.imag), w_v=w, w_i=w,
            ))
        else:
            s_dev = -v[i] * np.conj(truth.inj[i])
            z_vm = noisy(abs(v[i]))
            vm_meas[i] = z_vm
            rtu.append(RtuInjectionMeas(bus=i, z_vm=z_vm, z_p=noisy(s_dev.real),
                                        z_q=noisy(s_dev.imag), w=w))

    flows = []
    for k, end, kind in plan.flows:
        ft = truth.flows[(k, end)]
        if kind == "pmu":
            flows.append(FlowMeas(branch=k, end=end, kind="pmu",
                                  z_ir=noisy(ft.ir), z_ii=noisy(ft.ii), w=w))
        else:
            bus = int(net.index[net.branches[k].from_bus if end == "from" else net.branches[k].to_bus])
            if bus not in vm_meas:
                vm_meas[bus] = noisy(ft.vm)
            flows.append(FlowMeas(branch=k, end=end, kind="rtu", z_vm=vm_meas[bus],
                                  z_pline=noisy(ft.p), z_qline=noisy(ft.q), w=w))

    anchor = None
    if plan.anchor is not None:
        a = plan.anchor
        mag = vm_meas[a] if a in vm_meas else noisy(abs(v[a]))
        ang = float(net.va_rad[a])
        anchor = Anchor(bus=a, z_vr=mag * np.cos(ang), z_vi=mag * np.sin(ang), weight=w)

    zi = frozenset(detect_zero_injection_buses(net) - set(plan.devices))
    return MeasurementSet(pmu=tuple(pmu), rtu=tuple(rtu), flows=tuple(flows),
                          zi_buses=zi, anchor=anchor, sigma=sigma, seed=seed)
