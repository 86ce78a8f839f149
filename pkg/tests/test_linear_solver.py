import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from boussinesq_lab.basis import build_channel_basis
from boussinesq_lab.geometry import Geometry, make_grid
from boussinesq_lab.linear_solver import (
    AdvectionOperator,
    AntisymmetryError,
    assemble_advection,
    assemble_buoyancy,
    phi1,
    solve_linear_nse,
    step_linear,
)
from boussinesq_lab.oracles import torus_mode_closed_form


def random_velocity(basis, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(basis.m) * scale / (1 + basis.eigenvalues)
    return xi, basis.synthesize(xi)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_advection_antisymmetric_torus(small_basis, seed):
    _, v = random_velocity(small_basis, seed)
    beta = assemble_advection(v, small_basis)
    assert np.abs(beta + beta.T).max() <= 1e-10


def test_advection_matches_fine_quadrature(small_basis):
    """beta_ij = (v . grad w_j, w_i) against closed-form modes on a 48 x 48 grid."""
    xi, v = random_velocity(small_basis, 7)
    beta = assemble_advection(v, small_basis)
    geom = small_basis.geometry
    g = make_grid(geom, 48, 48)
    x1, x2 = g.mesh
    vals, jacs = zip(*(torus_mode_closed_form(d, geom, x1, x2) for d in small_basis.descriptors))
    W = np.array(vals)
    J = np.array(jacs)
    vf = np.einsum("j,jcxy->cxy", xi, W)
    adv = np.einsum("bxy,jabxy->jaxy", vf, J)  # (v . grad) w_j
    ref = np.einsum("iaxy,jaxy,xy->ij", W, adv, g.weights)
    assert np.abs(beta - ref).max() <= 1e-12


def test_advection_matvec_equals_dense(small_basis):
    _, v = random_velocity(small_basis, 3)
    op = AdvectionOperator(small_basis, v)
    xi = np.random.default_rng(1).standard_normal(small_basis.m)
    assert np.abs(op.matvec(xi) - op.dense() @ xi).max() <= 1e-12


def test_advection_channel_antisymmetry():
    b = build_channel_basis(Geometry.channel(), kx_max=2, Ny=32, modes_per_k=4)
    for seed in range(3):
        _, v = random_velocity(b, seed)
        beta = assemble_advection(v, b)
        assert np.abs(beta + beta.T).max() <= 1e-6


def test_strict_antisymmetry_breach_raises(small_basis):
    # a field that is not divergence free breaks the cancellation
    x1, x2 = small_basis.grid.mesh
    v = np.stack([np.sin(x1), np.zeros_like(x1)])
    with pytest.raises(AntisymmetryError):
        assemble_advection(v, small_basis, tol_skew=1e-10, strict=True)


def test_buoyancy_of_constant_vanishes(small_basis):
    theta = np.full(small_basis.grid.shape, 3.7)
    assert np.abs(assemble_buoyancy(theta, small_basis)).max() <= 1e-12


def test_buoyancy_cos_x1_closed_form(small_basis):
    x1, _ = small_basis.grid.mesh
    eta = assemble_buoyancy(np.cos(x1), small_basis)
    j = small_basis.descriptors.index(("torus", 1, 0, "cos"))
    expected = np.zeros(small_basis.m)
    # w = (0, cos x1) / (sqrt(2) pi), so (cos x1 e2, w) = 2 pi^2 / (sqrt(2) pi)
    expected[j] = np.sqrt(2) * np.pi
    assert np.abs(eta - expected).max() <= 1e-12


def test_phi1_small_argument():
    lam = np.array([1e-12, 1.0, 400.0])
    assert np.allclose(phi1(lam, 0.1), [0.1, 1 - np.exp(-0.1), (1 - np.exp(-40)) / 400], rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-4, 0.5), st.integers(0, 2**31))
def test_pure_decay_exact(small_basis, dt, seed):
    lam = small_basis.eigenvalues
    xi = np.random.default_rng(seed).standard_normal(small_basis.m)
    out = step_linear(xi, None, np.zeros_like(xi), dt, lam)
    assert np.abs(out - np.exp(-lam * dt) * xi).max() <= 1e-13


def test_constant_forcing_exact(small_basis):
    lam = small_basis.eigenvalues
    rng = np.random.default_rng(0)
    xi, eta = rng.standard_normal((2, small_basis.m))
    dt = 0.3
    out = step_linear(xi, None, eta, dt, lam)
    exact = np.exp(-lam * dt) * xi + (1 - np.exp(-lam * dt)) / lam * eta
    assert np.abs(out - exact).max() <= 1e-13


def test_frozen_coefficients_second_order(small_basis):
    """Against expm of the augmented system; error quarters under step-halving."""
    lam = small_basis.eigenvalues
    m = small_basis.m
    _, v = random_velocity(small_basis, 11, scale=3.0)
    beta = assemble_advection(v, small_basis)
    rng = np.random.default_rng(5)
    xi0, eta = rng.standard_normal((2, m))
    T = 0.5
    M = np.zeros((m + 1, m + 1))
    M[:m, :m] = -(np.diag(lam) + beta)
    M[:m, m] = eta
    exact = (scipy.linalg.expm(T * M) @ np.append(xi0, 1.0))[:m]
    errs = []
    for n in (10, 20, 40, 80):
        xi = xi0.copy()
        for _ in range(n):
            xi = step_linear(xi, beta, eta, T / n, lam)
        errs.append(np.abs(xi - exact).max())
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(rates > 1.9), (errs, rates)


def test_superposition(small_basis):
    b = small_basis
    times = np.linspace(0.0, 0.2, 11)
    _, v = random_velocity(b, 2)
    vtraj = np.broadcast_to(v, (len(times), *v.shape))
    rng = np.random.default_rng(4)
    xa, xb = rng.standard_normal((2, b.m))
    ta, tb = rng.standard_normal((2, len(times), *b.grid.shape))
    a, c = 0.7, -1.3
    A = solve_linear_nse(b, vtraj, ta, xa, times).xi
    B = solve_linear_nse(b, vtraj, tb, xb, times).xi
    AB = solve_linear_nse(b, vtraj, a * ta + c * tb, a * xa + c * xb, times).xi
    assert np.abs(AB - (a * A + c * B)).max() <= 1e-12


def test_energy_conserving_advection(small_basis):
    """With theta = 0 the kinetic energy obeys the Stokes dissipation only."""
    b = small_basis
    times = np.linspace(0.0, 0.1, 101)
    _, v = random_velocity(b, 9, scale=2.0)
    vtraj = np.broadcast_to(v, (len(times), *v.shape))
    xi0 = np.random.default_rng(8).standard_normal(b.m) / (1 + b.eigenvalues)
    traj = solve_linear_nse(b, vtraj, np.zeros((len(times), *b.grid.shape)), xi0, times)
    E = 0.5 * (traj.xi**2).sum(1)
    G = (b.eigenvalues * traj.xi**2).sum(1)
    r = np.diff(E) / np.diff(times) + 0.5 * (G[1:] + G[:-1])
    assert np.abs(r).max() <= 1e-3 * E[0]


def test_time_grid_mismatch(small_basis):
    times = np.linspace(0, 1, 5)
    with pytest.raises(ValueError):
        solve_linear_nse(small_basis, None, np.zeros((4, *small_basis.grid.shape)), np.zeros(small_basis.m), times)
