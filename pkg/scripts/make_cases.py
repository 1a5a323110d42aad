"""Regenerate the bundled case files in src/ecfse/data/.

case14/case118 are the standard MATPOWER cases re-solved with pypower at a
tight tolerance, so the stored voltages satisfy KCL to ~1e-12 (the published
files round Vm/Va, which leaves ZI buses with ~1e-3 injections).

case2, case5 and case2000 are built so they are solved exactly: voltages are
chosen at every non-ZI bus, ZI voltages follow from the linear equations
Y_ZZ V_Z = -Y_ZN V_N, and loads/generation are set to the resulting injections.

    pip install pypower   # only needed for case14/case118
    python scripts/make_cases.py
"""

from __future__ import annotations

import pathlib

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import Delaunay
from scipy.sparse.csgraph import minimum_spanning_tree

from ecfse.netmodel import (
    Branch,
    Bus,
    BusType,
    Gen,
    Network,
    build_ybus,
    format_matpower_case,
)

DATA = pathlib.Path(__file__).resolve().parents[1] / "src" / "ecfse" / "data"


def solve_by_construction(net: Network, v_target: np.ndarray, zi: set[int]) -> Network:
    """Fill Vm/Va, Pd/Qd and Pg/Qg so ``net`` is a solved case with ZI buses ``zi``."""
    adm = build_ybus(net)
    Y = adm.ybus.tocsc()
    n = net.n
    z = np.array(sorted(zi), dtype=int)
    keep = np.setdiff1d(np.arange(n), z)
    v = v_target.astype(complex).copy()
    if len(z):
        rhs = -(Y[z][:, keep] @ v[keep])
        v[z] = spla.spsolve(Y[z][:, z].tocsc(), rhs)
    s = v * np.conj(Y @ v) * net.base_MVA  # injected power, MVA
    gen_buses = {g.bus for g in net.gens}
    buses, gens = [], []
    for i, b in enumerate(net.active_buses):
        vm, va = abs(v[i]), float(np.degrees(np.angle(v[i])))
        if i in zi:
            buses.append(Bus(b.id, b.bus_type, 0.0, 0.0, 0.0, 0.0, vm, va, b.base_kV))
            continue
        if b.id in gen_buses:
            pd, qd = b.Pd, b.Qd
            gens.append(Gen(b.id, s[i].real + pd, s[i].imag + qd))
        else:
            pd, qd = -s[i].real, -s[i].imag
        buses.append(Bus(b.id, b.bus_type, pd, qd, b.Gs, b.Bs, vm, va, b.base_kV))
    return Network(net.base_MVA, tuple(buses), net.branches, tuple(gens))


def case2() -> Network:
    buses = (
        Bus(1, BusType.REF, 0, 0, 0, 0, 1.0, 0.0, 100),
        Bus(2, BusType.PQ, 0, 90.0, 0, 0, 0.9, 0.0, 100),
    )
    return Network(100.0, buses, (Branch(1, 2, 0.0, 0.1),), (Gen(1, 0.0, 90.0),))


def case5() -> Network:
    """Five-bus network with bus 2 zero-injection and bus 3 an unmetered load."""
    skel = (
        Bus(1, BusType.REF, 0, 0, 0, 0, 1, 0, 230),
        Bus(2, BusType.PQ, 0, 0, 0, 0, 1, 0, 230),
        Bus(3, BusType.PQ, 0, 0, 0, 0, 1, 0, 230),
        Bus(4, BusType.PV, 40, 5, 0, 0, 1, 0, 230),
        Bus(5, BusType.PQ, 0, 0, 0, 0, 1, 0, 230),
    )
    lines = [(1, 2, 0.02, 0.06, 0.06), (1, 3, 0.08, 0.24, 0.05), (2, 3, 0.06, 0.18, 0.04),
             (2, 4, 0.06, 0.18, 0.04), (2, 5, 0.04, 0.12, 0.03), (3, 4, 0.01, 0.03, 0.02),
             (4, 5, 0.08, 0.24, 0.05)]
    branches = tuple(Branch(f, t, r, x, b) for f, t, r, x, b in lines)
    net = Network(100.0, skel, branches, (Gen(1), Gen(4)))
    vm = np.array([1.06, 1.0, 0.987, 0.984, 0.972])
    va = np.radians([0.0, 0.0, -5.0, -5.3, -6.1])
    return solve_by_construction(net, vm * np.exp(1j * va), {1})


def synthetic(n: int = 2000, seed: int = 2000) -> Network:
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2))
    tri = Delaunay(pts)
    edges = set()
    for s in tri.simplices:
        for a, b in ((s[0], s[1]), (s[1], s[2]), (s[0], s[2])):
            edges.add((min(a, b), max(a, b)))
    edges = np.array(sorted(edges))
    length = np.linalg.norm(pts[edges[:, 0]] - pts[edges[:, 1]], axis=1)
    W = sp.coo_matrix((length, (edges[:, 0], edges[:, 1])), shape=(n, n))
    mst = minimum_spanning_tree(W).tocoo()
    chosen = {(min(a, b), max(a, b)) for a, b in zip(mst.row, mst.col)}
    extra = [tuple(e) for e in edges[np.argsort(length)] if tuple(e) not in chosen]
    chosen |= set(extra[: int(0.38 * n)])
    chosen = sorted(chosen)

    scale = 1.0 / np.sqrt(n)  # typical neighbour distance
    branches = []
    for a, b in chosen:
        d = np.linalg.norm(pts[a] - pts[b]) / scale
        x = 0.02 + 0.04 * d * rng.uniform(0.7, 1.3)
        r = x / rng.uniform(3.0, 10.0)
        bc = 0.03 * d * rng.uniform(0.5, 1.5)
        tap = 0.0
        if rng.random() < 0.05:
            tap, bc, r = rng.uniform(0.95, 1.05), 0.0, r * 0.2
        branches.append(Branch(int(a) + 1, int(b) + 1, r, x, bc, tap))

    kind = rng.choice(["gen", "load", "zi"], size=n, p=[0.1, 0.65, 0.25])
    kind[0] = "gen"
    buses, gens = [], []
    for i in range(n):
        btype = BusType.REF if i == 0 else (BusType.PV if kind[i] == "gen" else BusType.PQ)
        gs, bs = 0.0, 0.0
        if kind[i] == "load" and rng.random() < 0.04:
            bs = float(rng.choice([10.0, 20.0, -10.0]))
        buses.append(Bus(i + 1, btype, 0, 0, gs, bs, 1, 0, 138))
        if kind[i] == "gen":
            gens.append(Gen(i + 1))
    net = Network(100.0, tuple(buses), tuple(branches), tuple(gens))

    # DC-like angles from a balanced random injection pattern
    adm = build_ybus(net)
    Bdc = -adm.Bm.tocsc()
    p = np.where(kind == "gen", rng.uniform(1.0, 4.0, n), np.where(kind == "load", -rng.uniform(0.1, 0.6, n), 0.0))
    p[0] -= p.sum()
    others = np.arange(1, n)
    theta = np.zeros(n)
    theta[others] = spla.spsolve(Bdc[others][:, others].tocsc(), p[others])
    theta *= 0.6 / max(np.abs(theta).max(), 1e-9)
    vm = 1.0 + 0.025 * np.sin(3 * pts[:, 0]) * np.cos(2 * pts[:, 1]) + 0.004 * rng.standard_normal(n)
    vm[kind == "gen"] = 1.02 + 0.02 * rng.random((kind == "gen").sum())
    zi = {i for i in range(n) if kind[i] == "zi"}
    return solve_by_construction(net, vm * np.exp(1j * theta), zi)


def from_pypower(name: str) -> Network:
    from pypower import api

    ppc = getattr(api, name)()
    opt = api.ppoption(PF_TOL=1e-13, VERBOSE=0, OUT_ALL=0)
    res, ok = api.runpf(ppc, opt)
    assert ok, f"power flow failed for {name}"
    base = float(res["baseMVA"])
    buses = tuple(
        Bus(int(r[0]), BusType(int(r[1])), r[2], r[3], r[4], r[5], r[7], r[8], r[9]) for r in res["bus"]
    )
    gens = tuple(Gen(int(r[0]), r[1], r[2], r[7] > 0) for r in res["gen"])
    branches = tuple(
        Branch(int(r[0]), int(r[1]), r[2], r[3], r[4], r[8], r[9], r[10] > 0) for r in res["branch"]
    )
    return Network(base, buses, branches, gens)


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    cases = {"case2": case2(), "case5": case5(), "case2000": synthetic()}
    for name in ("case14", "case118"):
        cases[name] = from_pypower(name)
    for name, net in cases.items():
        (DATA / f"{name}.m").write_text(format_matpower_case(net, name))
        print(f"{name}: {len(net.buses)} buses, {len(net.branches)} branches")


if __name__ == "__main__":
    main()
