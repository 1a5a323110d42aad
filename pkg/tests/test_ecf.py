import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import setup
from ecfse.ecf import (
    ANCHOR_MISSING,
    OPTIMAL,
    SINGULAR,
    EstimateResult,
    QpProblem,
    assemble_qp,
    estimate_ecf,
    kkt_residual,
    recover_noise_terms,
    solve_qp,
    voltage_mismatches,
)
from ecfse.measurements import Anchor, AnchorMissing, MeasurementSet, PmuInjectionMeas, rtu_shunt_params
from ecfse.netmodel import Branch, Bus, BusType, Gen, IndexOutOfRange, Network, build_ybus
from ecfse.synth import MeasurementPlan, builtin_plan, compute_truth, synthesize_measurements, true_state_from_case


def measured(name, plan, sigma=0.001, seed=1):
    net, adm, truth = setup(name)
    if isinstance(plan, str):
        plan = builtin_plan(plan, net)
    return net, adm, truth, synthesize_measurements(net, truth, plan, sigma, seed)


def rotate_set(ms, theta):
    r = np.exp(1j * theta)

    def rot(a, b):
        c = complex(a, b) * r
        return c.real, c.imag

    from dataclasses import replace

    pmu = []
    for m in ms.pmu:
        vr, vi = rot(m.z_vr, m.z_vi)
        ir, ii = rot(m.z_ir, m.z_ii)
        pmu.append(replace(m, z_vr=vr, z_vi=vi, z_ir=ir, z_ii=ii))
    flows = []
    for m in ms.flows:
        if m.kind == "pmu":
            ir, ii = rot(m.z_ir, m.z_ii)
            m = replace(m, z_ir=ir, z_ii=ii)
        flows.append(m)
    anchor = ms.anchor
    if anchor is not None:
        vr, vi = rot(anchor.z_vr, anchor.z_vi)
        anchor = replace(anchor, z_vr=vr, z_vi=vi)
    return replace(ms, pmu=tuple(pmu), flows=tuple(flows), anchor=anchor)


def rotate_state(x, theta):
    n = len(x) // 2
    v = (x[:n] + 1j * x[n:]) * np.exp(1j * theta)
    return np.concatenate([v.real, v.imag])


# -- assembly


def test_five_bus_structure():
    net, adm, truth, ms = measured("case5", "fig5", sigma=0.0)
    assert {m.bus for m in ms.pmu} == {0, 3} and {m.bus for m in ms.rtu} == {4}
    assert ms.zi_buses == {1}
    qp = assemble_qp(net, adm, ms)
    assert qp.H.shape == (10, 10)
    assert qp.C.shape == (2, 10)
    np.testing.assert_array_equal(qp.C.toarray(), adm.stacked()[[1, 6]].toarray())
    # bus 3 (index 2) is unmeasured: no residual row of its own
    assert all(c.ref != 2 for c in qp.meas_index)
    bus3 = {2, 7}
    for r in range(qp.A.shape[0]):
        cols = set(qp.A.indices[qp.A.indptr[r]:qp.A.indptr[r + 1]])
        assert not cols <= bus3
    assert len(qp.meas_index) == 10  # 2 PMUs x 4 channels + RTU x 2


def one_bus():
    return Network(100.0, (Bus(1, BusType.REF, 0, 0, 0, 0, 1, 0),), (), ())


def test_anchor_only():
    net = one_bus()
    adm = build_ybus(net)
    ms = MeasurementSet(anchor=Anchor(0, 1.0, 0.0))
    qp = assemble_qp(net, adm, ms)
    H = qp.H.toarray()
    assert np.count_nonzero(H) == 2 and np.count_nonzero(np.diag(H)) == 2
    assert qp.m == 0
    est = solve_qp(qp)
    assert est.status == OPTIMAL
    np.testing.assert_allclose(est.x, [1.0, 0.0], atol=1e-15)
    assert est.lam.size == 0
    assert recover_noise_terms(net, adm, ms, est.x) == {}


@pytest.mark.parametrize("name,plan", [("case5", "fig5"), ("case14", "rtu-all"),
                                       ("case14", "rtu-flows"), ("case118", "rtu-flows")])
def test_objective_zero_at_truth(name, plan):
    net, adm, truth, ms = measured(name, plan, sigma=0.0)
    qp = assemble_qp(net, adm, ms)
    assert qp.objective(truth.x_true) < 1e-20
    assert np.max(np.abs(qp.C @ truth.x_true)) < 1e-10


def test_assemble_refuses_unanchored():
    net, adm, truth = setup("case14")
    plan = builtin_plan("rtu-all", net)
    plan.anchor = None
    ms = synthesize_measurements(net, truth, plan, 0.001, 1)
    with pytest.raises(AnchorMissing):
        assemble_qp(net, adm, ms)
    assert estimate_ecf(net, adm, ms).status == ANCHOR_MISSING


def test_assemble_index_out_of_range():
    net, adm, _ = setup("case2")
    with pytest.raises(IndexOutOfRange):
        assemble_qp(net, adm, MeasurementSet(pmu=(PmuInjectionMeas(2, 1, 0, 0, 0),)))


def test_h_symmetric_psd():
    net, adm, truth, ms = measured("case14", "rtu-flows")
    H = assemble_qp(net, adm, ms).H.toarray()
    np.testing.assert_allclose(H, H.T, atol=1e-12)
    assert np.linalg.eigvalsh(H).min() > -1e-9


# -- solve


def test_full_pmu_exact_recovery():
    net, adm, truth, ms = measured("case14", "pmu-all", sigma=0.0)
    est = estimate_ecf(net, adm, ms)
    assert est.ok and est.factorizations == 1
    assert np.max(np.abs(est.x - truth.x_true)) < 1e-8


@pytest.mark.parametrize("name,plan", [("case2", "pmu-all"), ("case5", "fig5"), ("case14", "rtu-all"),
                                       ("case118", "rtu-flows")])
def test_noiseless_recovery(name, plan):
    net, adm, truth, ms = measured(name, plan, sigma=0.0)
    est = estimate_ecf(net, adm, ms)
    assert est.ok and np.max(np.abs(est.x - truth.x_true)) < 1e-8


def two_islands(zi_second: bool):
    buses = tuple(Bus(i, BusType.REF if i == 1 else BusType.PQ, 0, 0 if zi_second and i > 2 else 10, 0, 0, 1, 0)
                  for i in range(1, 5))
    branches = (Branch(1, 2, 0.01, 0.1), Branch(3, 4, 0.01, 0.1))
    net = Network(100.0, buses, branches, (Gen(1),))
    adm = build_ybus(net)
    truth = compute_truth(net, adm, true_state_from_case(net))
    plan = MeasurementPlan(devices={0: "pmu", 1: "pmu"})
    ms = synthesize_measurements(net, truth, plan, 0.0, 1)
    if zi_second:
        ms = MeasurementSet(pmu=ms.pmu, zi_buses=frozenset({2, 3}))
    return net, adm, ms


@pytest.mark.parametrize("zi_second", [False, True])
def test_unmeasured_island_is_singular(zi_second):
    net, adm, ms = two_islands(zi_second)
    est = estimate_ecf(net, adm, ms)
    assert est.status == SINGULAR
    assert np.all(np.isnan(est.x))


def test_noise_terms_zero_at_truth():
    net, adm, truth, ms = measured("case14", "rtu-flows", sigma=0.0)
    noise = recover_noise_terms(net, adm, ms, truth.x_true)
    assert max(abs(v) for v in noise.values()) < 1e-9


@pytest.mark.parametrize("name,plan", [("case5", "fig5"), ("case14", "rtu-flows"), ("case118", "rtu-all")])
def test_objective_from_noise_terms(name, plan):
    net, adm, truth, ms = measured(name, plan)
    est = estimate_ecf(net, adm, ms)
    weights = {}
    for m in ms.pmu:
        for p in "RI":
            weights[("pmu_i", m.bus, p)] = m.w_i
            weights[("pmu_v", m.bus, p)] = m.w_v
    for m in ms.rtu:
        for p in "RI":
            weights[("rtu", m.bus, p)] = m.w
    for m in ms.flows:
        for p in "RI":
            weights[("flow_" + m.kind, (m.branch, m.end), p)] = m.w
    if ms.anchor:
        for p in "RI":
            weights[("anchor", ms.anchor.bus, p)] = ms.anchor.weight
    total = 0.0
    for terms in (est.noise, voltage_mismatches(ms, est.x)):
        for ch, val in terms.items():
            total += weights[(ch.kind, ch.ref, ch.part)] * val * val
    assert total == pytest.approx(est.objective, abs=1e-10)


def test_kkt_residual_scalar():
    qp = QpProblem.from_matrices([[1.0]], [-2.0])
    at = lambda x: EstimateResult(x=np.array([x]), lam=np.empty(0), objective=0, kkt_residual=0, status=OPTIMAL)
    assert kkt_residual(qp, at(1.0)) == 0.0
    assert kkt_residual(qp, at(0.0)) == 2.0
    est = solve_qp(qp)
    assert est.x[0] == pytest.approx(1.0) and est.objective == pytest.approx(-1.0)


def test_kkt_residual_perturbed():
    net, adm, truth, ms = measured("case14", "rtu-flows")
    qp = assemble_qp(net, adm, ms)
    est = solve_qp(qp)
    base = kkt_residual(qp, est)
    assert base < 1e-8 and base == pytest.approx(est.kkt_residual)
    for j in (0, 5, 20):
        x = est.x.copy()
        x[j] += 1e-3
        pert = EstimateResult(x=x, lam=est.lam, objective=0, kkt_residual=0, status=OPTIMAL)
        assert kkt_residual(qp, pert) > 0 and kkt_residual(qp, pert) >= base


@pytest.mark.parametrize("name,plan", [("case5", "fig5"), ("case14", "rtu-flows"), ("case118", "rtu-all")])
def test_global_optimality(name, plan):
    net, adm, truth, ms = measured(name, plan)
    qp = assemble_qp(net, adm, ms)
    est = solve_qp(qp)
    N = la.null_space(qp.C.toarray()) if qp.m else np.eye(qp.n_state)
    rng = np.random.default_rng(0)
    best = qp.objective(est.x)
    for k in range(100):
        scale = 10.0 ** rng.uniform(-6, 0)
        xf = est.x + N @ (scale * rng.standard_normal(N.shape[1]))
        assert np.max(np.abs(qp.C @ xf), initial=0) < 1e-9
        assert qp.objective(xf) >= best - 1e-9


def dense_full_form(net, adm, ms):
    """Un-eliminated problem with explicit noise and unmeasured-injection variables.

    Variables are [x, noise, i_na]; every measured current channel gets a
    noise pair, every unmeasured non-ZI bus an injection pair. All KCL and
    flow equations are hard constraints, and the KKT system is solved densely.
    """
    n = adm.n
    Y = adm.ybus.toarray()
    w_scale = max([m.w_i for m in ms.pmu] + [m.w_v for m in ms.pmu] + [m.w for m in ms.rtu]
                  + [m.w for m in ms.flows] + ([ms.anchor.weight] if ms.anchor else []))
    blocks = []  # (complex coefficient row over V, complex constant, weight or None for i_na)
    for m in ms.pmu:
        blocks.append((Y[m.bus], complex(m.z_ir, m.z_ii), m.w_i))
    for m in ms.rtu:
        G, B = rtu_shunt_params(m.z_vm, m.z_p, m.z_q)
        row = Y[m.bus].copy()
        row[m.bus] += complex(G, -B)
        blocks.append((row, 0j, m.w))
    if ms.flows:
        raise NotImplementedError
    measured_bus = ms.measured_buses()
    free = [i for i in range(n) if i not in measured_bus and i not in ms.zi_buses]
    for i in free:
        blocks.append((Y[i], 0j, None))
    zi_rows = [Y[i] for i in sorted(ms.zi_buses)]

    n_noise = 2 * sum(1 for b in blocks if b[2] is not None)
    n_na = 2 * len(free)
    nv = 2 * n + n_noise + n_na
    Q = np.zeros((nv, nv))
    q = np.zeros(nv)
    eqs, rhs = [], []

    def real_rows(row):
        return np.concatenate([row.real, -row.imag]), np.concatenate([row.imag, row.real])

    k_noise = 2 * n
    k_na = 2 * n + n_noise
    for row, const, w in blocks:
        rr, ri = real_rows(row)
        for part, rvec, c in ((0, rr, const.real), (1, ri, const.imag)):
            e = np.zeros(nv)
            e[: 2 * n] = rvec
            if w is None:
                e[k_na] = 1.0
                k_na += 1
            else:
                e[k_noise] = 1.0
                Q[k_noise, k_noise] = w / w_scale
                k_noise += 1
            eqs.append(e)
            rhs.append(-c)
    for row in zi_rows:
        for rvec in real_rows(row):
            e = np.zeros(nv)
            e[: 2 * n] = rvec
            eqs.append(e)
            rhs.append(0.0)
    targets = [(m.bus, m.z_vr, m.z_vi, m.w_v) for m in ms.pmu]
    if ms.anchor:
        targets.append((ms.anchor.bus, ms.anchor.z_vr, ms.anchor.z_vi, ms.anchor.weight))
    for bus, vr, vi, w in targets:
        for col, val in ((bus, vr), (n + bus, vi)):
            Q[col, col] += w / w_scale
            q[col] -= 2 * w / w_scale * val
    E = np.array(eqs)
    K = np.block([[2 * Q, E.T], [E, np.zeros((len(eqs), len(eqs)))]])
    sol = np.linalg.solve(K, np.concatenate([-q, rhs]))
    return sol[: 2 * n]


@pytest.mark.parametrize("seed", range(5))
def test_full_vs_reduced_five_bus(seed):
    net, adm, truth, ms = measured("case5", "fig5", sigma=0.01, seed=seed)
    est = estimate_ecf(net, adm, ms)
    full = dense_full_form(net, adm, ms)
    assert np.max(np.abs(est.x - full)) < 1e-8


def test_full_vs_reduced_case14():
    net, adm, truth, ms = measured("case14", "rtu-all", sigma=0.01, seed=3)
    est = estimate_ecf(net, adm, ms)
    assert np.max(np.abs(est.x - dense_full_form(net, adm, ms))) < 1e-8


@given(st.floats(-np.pi, np.pi), st.integers(0, 1000))
@settings(max_examples=15, deadline=None)
def test_rotation_equivariance_pmu(theta, seed):
    net, adm, truth, ms = measured("case14", "pmu-all", sigma=0.001, seed=seed)
    x0 = estimate_ecf(net, adm, ms).x
    x1 = estimate_ecf(net, adm, rotate_set(ms, theta)).x
    assert np.max(np.abs(x1 - rotate_state(x0, theta))) < 1e-8


@pytest.mark.parametrize("name,plan", [("case5", "fig5"), ("case14", "rtu-flows")])
def test_rotation_equivariance_mixed(name, plan):
    net, adm, truth, ms = measured(name, plan)
    theta = np.radians(17)
    x0 = estimate_ecf(net, adm, ms).x
    x1 = estimate_ecf(net, adm, rotate_set(ms, theta)).x
    assert np.max(np.abs(x1 - rotate_state(x0, theta))) < 1e-8


def test_bit_identical_resolve():
    net, adm, truth, ms = measured("case118", "rtu-flows")
    qp = assemble_qp(net, adm, ms)
    a, b = solve_qp(qp), solve_qp(qp)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.lam, b.lam)


@pytest.mark.parametrize("name,plan", [("case2", "pmu-all"), ("case5", "fig5"), ("case14", "rtu-all"),
                                       ("case118", "rtu-flows"), ("case2000", "rtu-all")])
def test_kkt_certificate(name, plan):
    net, adm, truth, ms = measured(name, plan)
    qp = assemble_qp(net, adm, ms)
    est = solve_qp(qp)
    assert est.ok and est.factorizations == 1
    assert kkt_residual(qp, est) < 1e-8
    assert np.max(np.abs(qp.C @ est.x), initial=0) <= 1e-10
