"""Measurement records, RTU equivalent-circuit parameters and validation.

Records index buses and branches internally (0-based state order). The JSON
form uses external bus ids and 1-based branch-table row numbers instead.

Sign conventions used throughout the package:

* PMU injection currents are reported in device (load) convention, i.e. the
  current drawn by the metered device, ``z_I = -(Y V)_i``.
* RTU injection powers are likewise the power drawn at the bus.
* Flow meters (either kind) report the current / power leaving the metered
  end's bus into the branch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Hashable, NamedTuple, Optional

from .netmodel import Network


class NonPositiveVoltage(ValueError):
    pass


class AnchorMissing(ValueError):
    """No PMU voltage phasor and no explicit anchor: the estimate is not pinned."""


@dataclass(frozen=True)
class PmuInjectionMeas:
    bus: int
    z_vr: float
    z_vi: float
    z_ir: float
    z_ii: float
    w_v: float = 1.0
    w_i: float = 1.0


@dataclass(frozen=True)
class RtuInjectionMeas:
    bus: int
    z_vm: float
    z_p: float
    z_q: float
    w: float = 1.0


@dataclass(frozen=True)
class FlowMeas:
    branch: int
    end: str  # "from" | "to"
    kind: str  # "rtu" | "pmu"
    z_vm: Optional[float] = None
    z_pline: Optional[float] = None
    z_qline: Optional[float] = None
    z_ir: Optional[float] = None
    z_ii: Optional[float] = None
    w: float = 1.0

    _RTU = ("z_vm", "z_pline", "z_qline")
    _PMU = ("z_ir", "z_ii")

    def fields_ok(self) -> bool:
        own, other = (self._RTU, self._PMU) if self.kind == "rtu" else (self._PMU, self._RTU)
        return (all(getattr(self, f) is not None for f in own)
                and all(getattr(self, f) is None for f in other))


@dataclass(frozen=True)
class Anchor:
    bus: int
    z_vr: float
    z_vi: float
    weight: float = 1.0


@dataclass(frozen=True)
class MeasurementSet:
    pmu: tuple[PmuInjectionMeas, ...] = ()
    rtu: tuple[RtuInjectionMeas, ...] = ()
    flows: tuple[FlowMeas, ...] = ()
    zi_buses: frozenset[int] = frozenset()
    anchor: Optional[Anchor] = None
    sigma: Optional[float] = None
    seed: Optional[int] = None

    @property
    def has_phase_reference(self) -> bool:
        return bool(self.pmu) or self.anchor is not None

    def measured_buses(self) -> set[int]:
        return {m.bus for m in self.pmu} | {m.bus for m in self.rtu}


@dataclass(frozen=True)
class Channel:
    """One scalar measured quantity, e.g. ``Channel("rtu", 4, "R")``."""

    kind: str
    ref: Hashable  # bus index, or (branch, end) for flows
    part: str


class ShuntParams(NamedTuple):
    G: float
    B: float


def rtu_shunt_params(z_vm: float, z_p: float, z_q: float) -> ShuntParams:
    """Conductance/susceptance of the RTU's equivalent load at the measured point."""
    if not z_vm > 0:
        raise NonPositiveVoltage(f"voltage magnitude must be positive, got {z_vm}")
    v2 = z_vm * z_vm
    return ShuntParams(z_p / v2, z_q / v2)


# ---------------------------------------------------------------------------
# validation


@dataclass
class Issue:
    code: str
    detail: str


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def codes(self) -> set[str]:
        return {i.code for i in self.issues}

    def has(self, code: str) -> bool:
        return code in self.codes()

    def add(self, code: str, detail: str):
        self.issues.append(Issue(code, detail))


def validate_measurement_set(net: Network, ms: MeasurementSet) -> ValidationReport:
    rep = ValidationReport()
    n = net.n
    nl = len(net.branches)

    def bus_ok(i: int, what: str) -> bool:
        if not 0 <= i < n:
            rep.add("IndexOutOfRange", f"{what} references bus index {i} (n = {n})")
            return False
        return True

    for kind, recs in (("pmu", ms.pmu), ("rtu", ms.rtu)):
        seen = set()
        for m in recs:
            bus_ok(m.bus, kind)
            if m.bus in seen:
                rep.add("Duplicate", f"second {kind} injection record at bus {m.bus}")
            seen.add(m.bus)
            weights = (m.w_v, m.w_i) if kind == "pmu" else (m.w,)
            if any(w < 0 for w in weights):
                rep.add("NegativeWeight", f"{kind} at bus {m.bus}")
            if kind == "rtu" and not m.z_vm > 0:
                rep.add("NonPositiveVoltage", f"rtu at bus {m.bus}")

    seen_flows = set()
    for m in ms.flows:
        key = (m.branch, m.end, m.kind)
        if not 0 <= m.branch < nl:
            rep.add("IndexOutOfRange", f"flow references branch index {m.branch}")
            continue
        if m.end not in ("from", "to") or m.kind not in ("rtu", "pmu") or not m.fields_ok():
            rep.add("BadKind", f"flow record {key} has inconsistent end/kind/fields")
            continue
        if not net.in_service(m.branch):
            rep.add("BranchOutOfService", f"flow on branch {m.branch}")
        if key in seen_flows:
            rep.add("Duplicate", f"second flow record {key}")
        seen_flows.add(key)
        if m.w < 0:
            rep.add("NegativeWeight", f"flow record {key}")
        if m.kind == "rtu" and not m.z_vm > 0:
            rep.add("NonPositiveVoltage", f"flow record {key}")

    for i in sorted(ms.zi_buses):
        bus_ok(i, "zi_buses")
    clash = ms.zi_buses & ms.measured_buses()
    for i in sorted(clash):
        rep.add("ZiConflict", f"bus {i} is both zero-injection and measured")

    if ms.anchor is not None:
        bus_ok(ms.anchor.bus, "anchor")
        if ms.anchor.weight < 0:
            rep.add("NegativeWeight", "anchor")
    if not ms.has_phase_reference:
        rep.add("AnchorMissing", "no PMU voltage phasor and no anchor")
    return rep


# ---------------------------------------------------------------------------
# JSON schema (external ids)


def measurement_set_to_dict(net: Network, ms: MeasurementSet) -> dict:
    ids = net.bus_ids.tolist()

    def ext(rec) -> dict:
        d = asdict(rec)
        d["bus"] = ids[d["bus"]]
        return d

    flows = []
    for m in ms.flows:
        d = {k: v for k, v in asdict(m).items() if v is not None}
        d["branch"] = m.branch + 1
        flows.append(d)
    return {
        "pmu": [ext(m) for m in ms.pmu],
        "rtu": [ext(m) for m in ms.rtu],
        "flows": flows,
        "zi_buses": sorted(ids[i] for i in ms.zi_buses),
        "anchor": ext(ms.anchor) if ms.anchor is not None else None,
        "sigma": ms.sigma,
        "seed": ms.seed,
    }


def measurement_set_from_dict(net: Network, doc: dict) -> MeasurementSet:
    missing = {"pmu", "rtu", "flows", "zi_buses", "anchor", "sigma", "seed"} - set(doc)
    if missing:
        raise ValueError(f"measurement document lacks keys {sorted(missing)}")

    def internal(bus_id) -> int:
        try:
            return net.index[int(bus_id)]
        except KeyError:
            raise ValueError(f"unknown or isolated bus id {bus_id}") from None

    pmu = tuple(PmuInjectionMeas(**{**d, "bus": internal(d["bus"])}) for d in doc["pmu"])
    rtu = tuple(RtuInjectionMeas(**{**d, "bus": internal(d["bus"])}) for d in doc["rtu"])
    flows = tuple(FlowMeas(**{**d, "branch": int(d["branch"]) - 1}) for d in doc["flows"])
    anchor = None
    if doc["anchor"] is not None:
        anchor = Anchor(**{**doc["anchor"], "bus": internal(doc["anchor"]["bus"])})
    return MeasurementSet(
        pmu=pmu, rtu=rtu, flows=flows,
        zi_buses=frozenset(internal(b) for b in doc["zi_buses"]),
        anchor=anchor, sigma=doc["sigma"], seed=doc["seed"],
    )


def dumps(net: Network, ms: MeasurementSet) -> str:
    return json.dumps(measurement_set_to_dict(net, ms), indent=1, sort_keys=True)


def loads(net: Network, text: str) -> MeasurementSet:
    return measurement_set_from_dict(net, json.loads(text))


def default_weight(sigma: Optional[float]) -> float:
    if sigma is None or sigma == 0:
        return 1.0
    return 1.0 / (sigma * sigma)
