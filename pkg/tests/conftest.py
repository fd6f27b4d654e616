import numpy as np
import pytest

from octmpc.config import load_bundled
from octmpc.controllers import make_controllers
from octmpc.design import design_offline
from octmpc.model import CostWeights, LinearSystem, box_constraints
from octmpc.polytope import PolytopeH


def make_scalar(A=1.0, B=1.0, Bw=1.0, w_max=1.0, x_max=5.0, u_max=1.0):
    F, G, b = box_constraints(x_max, u_max, 1, 1)
    return LinearSystem([[A]], [[B]], [[Bw]], F, G, b, PolytopeH.box([-w_max], [w_max]), name="scalar")


@pytest.fixture(scope="session")
def scalar_unit():
    """Integrator with unit disturbance bound; used for hand-checkable tightenings."""
    return make_scalar()


@pytest.fixture(scope="session")
def system1_cfg():
    return load_bundled("system1")


@pytest.fixture(scope="session")
def system1(system1_cfg):
    return system1_cfg.system


@pytest.fixture(scope="session")
def weights1(system1_cfg):
    return system1_cfg.weights


@pytest.fixture(scope="session")
def scalar_cfg():
    return load_bundled("scalar")


_DESIGNS = {}


def design_for(cfg, N, fallback="cap-by-tmpc"):
    key = (cfg.name, N, fallback)
    if key not in _DESIGNS:
        _DESIGNS[key] = design_offline(cfg.system, cfg.weights, N, fallback=fallback)
    return _DESIGNS[key]


@pytest.fixture(scope="session")
def design10(system1_cfg):
    return design_for(system1_cfg, 10)


@pytest.fixture(scope="session")
def controllers10(system1_cfg, design10):
    return make_controllers(design10, system1_cfg.system, system1_cfg.weights, ["tmpc", "oct", "nominal", "fpd"])


@pytest.fixture(scope="session")
def scalar_design(scalar_cfg):
    return design_for(scalar_cfg, scalar_cfg.N)


@pytest.fixture(scope="session")
def scalar_controllers(scalar_cfg, scalar_design):
    return make_controllers(scalar_design, scalar_cfg.system, scalar_cfg.weights, ["tmpc", "oct", "nominal", "fpd"])


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def identity_weights(system):
    return CostWeights.identity(system.nx, system.nu)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[num])
