import numpy as np
import pytest

from dercoord.devices import BatteryParams, Device, PvParams
from dercoord.grid import ConstraintSpec
from dercoord.plant import FeederPhysical, linearize


def four_node_feeder():
    return FeederPhysical([0, 1, 2, 2], [0.8, 0.8, 0.6, 0.6], [0.6, 0.6, 0.4, 0.4], 1.0, 1000.0, 4.8)


def pv_devices(slots, avail=450.0, eta=500.0, c=2e-3, nodes=(1, 2, 3, 4), period=1):
    return [Device(f"pv{i}", i, PvParams(np.full(slots, avail), eta, c, c), period=period) for i in nodes]


def battery(name, node, x0=0.5, c_b=20.0, rates=(-4.0, 0.0, 4.0), slot_hours=0.25, period=1):
    params = BatteryParams(20.0, list(rates), 0.2, 0.8, 0.5, c_b, slot_hours)
    return Device(name, node, params, x0=x0, period=period)


@pytest.fixture
def feeder4():
    return four_node_feeder()


@pytest.fixture
def model4(feeder4):
    return linearize(feeder4)


@pytest.fixture
def spec4():
    return ConstraintSpec.uniform(4, 0.95, 1.02)


# Acceptance results, echoed in the terminal summary so they appear once per criterion.
ACCEPTANCE_LINES = []


def report_criterion(number, title, ok, detail):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
