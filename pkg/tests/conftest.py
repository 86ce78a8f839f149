import numpy as np
import pytest

from boussinesq_lab.basis import build_channel_basis, build_torus_basis
from boussinesq_lab.geometry import Geometry


@pytest.fixture(scope="session")
def torus():
    return Geometry.torus()


@pytest.fixture(scope="session")
def small_basis(torus):
    """Torus basis, |k| <= 5 on a 16 x 16 grid (m = 80)."""
    return build_torus_basis(torus, 5, (16, 16))


@pytest.fixture(scope="session")
def basis32(torus):
    return build_torus_basis(torus, 8, (32, 32))


@pytest.fixture(scope="session")
def channel_basis():
    return build_channel_basis(Geometry.channel(), kx_max=2, Ny=32, modes_per_k=4)


def gaussian(basis, sigma=0.6, amplitude=1.0):
    x1, x2 = basis.grid.mesh
    L = basis.geometry
    return amplitude * np.exp(-((x1 - L.Lx / 2) ** 2 + (x2 - L.Ly / 2) ** 2) / (2 * sigma**2))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
