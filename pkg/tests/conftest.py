import functools
import sys

import numpy as np
import pytest
from hypothesis import strategies as st

from ecfse import load_bundled_case
from ecfse.netmodel import Branch, Bus, BusType, Gen, Network, build_ybus
from ecfse.synth import compute_truth, true_state_from_case

TWO_BUS = """
function mpc = two
mpc.baseMVA = 100;
mpc.bus = [
 1 3 0 0  0 0 1 1.0 0 100 1 1.1 0.9;
 2 1 0 90 0 0 1 0.9 0 100 1 1.1 0.9;
];
mpc.gen = [
 1 0 90 9999 -9999 1 100 1 9999 0;
];
mpc.branch = [
 1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
"""


@functools.lru_cache(maxsize=None)
def setup(name):
    net = load_bundled_case(name)
    adm = build_ybus(net)
    truth = compute_truth(net, adm, true_state_from_case(net))
    return net, adm, truth


@pytest.fixture(params=["case2", "case5", "case14", "case118"])
def small_case(request):
    return setup(request.param)


@st.composite
def networks(draw, max_buses=7, shunts=True, charging=True, taps=True):
    """Small connected networks with random pi-model parameters."""
    n = draw(st.integers(2, max_buses))
    pos = st.floats(0.01, 0.5)
    edges = [(draw(st.integers(0, i - 1)), i) for i in range(1, n)]
    for _ in range(draw(st.integers(0, n))):
        a, b = draw(st.integers(0, n - 1)), draw(st.integers(0, n - 1))
        if a != b:
            edges.append((a, b))
    branches = []
    for a, b in edges:
        tap = draw(st.floats(0.9, 1.1)) if taps and draw(st.booleans()) else 0.0
        shift = draw(st.floats(-10, 10)) if taps and draw(st.booleans()) else 0.0
        branches.append(Branch(a + 1, b + 1, draw(st.floats(0.0, 0.1)), draw(pos),
                               draw(st.floats(0, 0.2)) if charging else 0.0, tap, shift))
    buses = []
    for i in range(n):
        gs = draw(st.floats(-5, 5)) if shunts else 0.0
        bs = draw(st.floats(-20, 20)) if shunts else 0.0
        buses.append(Bus(i + 1, BusType.REF if i == 0 else BusType.PQ,
                         draw(st.floats(-50, 50)), draw(st.floats(-50, 50)), gs, bs,
                         draw(st.floats(0.9, 1.1)), draw(st.floats(-30, 30)), 100.0))
    return Network(100.0, tuple(buses), tuple(branches), (Gen(1),))


def random_state(rng, n):
    return rng.normal(size=2 * n)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
