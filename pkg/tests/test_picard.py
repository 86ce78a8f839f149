import numpy as np
import pytest
import scipy.linalg

from boussinesq_lab.picard import (
    BoussinesqState,
    NonconvergenceError,
    PicardSettings,
    data_norm,
    difference_norms,
    picard_step,
    picard_step_alternating,
    solve_base_case,
    solve_boussinesq,
    solve_window,
)

from conftest import gaussian


def shear_state(basis, eps=0.3, a=0.2):
    """u = eps w with w = (0, cos x1)/(sqrt 2 pi), theta = a cos x1: closed under the dynamics."""
    j = basis.descriptors.index(("torus", 1, 0, "cos"))
    xi = np.zeros(basis.m)
    xi[j] = eps
    x1, _ = basis.grid.mesh
    return BoussinesqState(xi, a * np.cos(x1)), j


def shear_exact(eps, a, t):
    c = np.sqrt(2) * np.pi
    M = np.array([[-1.0, c], [-1.0 / c, 0.0]])
    return scipy.linalg.expm(t * M) @ np.array([eps, a])


def test_single_mode_matches_expm_second_order(small_basis):
    b = small_basis
    errs = []
    for dt in (0.02, 0.01):
        s0, j = shear_state(b)
        res = solve_boussinesq(b, s0, 1.0, PicardSettings(dt=dt, tol=1e-12), record_every=int(round(1 / dt)))
        x1, _ = b.grid.mesh
        xi, a = shear_exact(0.3, 0.2, 1.0)
        err_u = abs(res.final.xi[j] - xi)
        err_t = np.abs(res.final.theta - a * np.cos(x1)).max()
        others = np.abs(np.delete(res.final.xi, j)).max()
        assert others <= 1e-13
        errs.append(max(err_u, err_t))
    assert errs[0] <= 1e-4
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_zero_velocity_equals_base_case(small_basis):
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), gaussian(b))
    v0 = np.zeros((6, 2, *b.grid.shape))
    va, sa = picard_step(b, v0, s0, 0.05, 5)
    vb, sb = solve_base_case(b, s0, 0.05, 5)
    assert np.abs(va.xi - vb.xi).max() <= 1e-14
    assert np.abs(sa.theta - sb.theta).max() <= 1e-14


def test_rest_with_constant_density_stays_at_rest(small_basis):
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), np.full(b.grid.shape, 2.5))
    (vt, st), rep = solve_window(b, s0, PicardSettings(dt=0.05, T0_max=0.05))
    assert rep.converged
    assert np.abs(vt.xi).max() <= 1e-14
    assert np.abs(st.theta - 2.5).max() <= 1e-14


def test_converged_window_is_fixed_point(small_basis):
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), gaussian(b))
    settings = PicardSettings(dt=0.02, T0_max=0.4, tol=1e-12)
    (vt, st), rep = solve_window(b, s0, settings)
    again = picard_step(b, vt, s0, settings.dt, rep.steps)
    d = difference_norms(again, (vt, st), b)["composite"]
    assert d <= 1e-10 * data_norm(s0, b)


def test_report_ratios_contract(small_basis):
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), gaussian(b))
    _, rep = solve_window(b, s0, PicardSettings(dt=0.02, T0_max=0.4))
    assert rep.converged and rep.bisections == 0
    assert rep.iterations[0].ratio is None
    assert all(r < 0.5 for r in rep.ratios[1:])
    assert rep.iterations[-1].composite <= 1e-8 * rep.scale


def test_window_splitting(small_basis):
    b = small_basis
    tol = 1e-10
    s0 = BoussinesqState(np.zeros(b.m), gaussian(b))
    one = solve_boussinesq(b, s0, 0.4, PicardSettings(dt=0.02, T0_max=0.4, tol=tol))
    two = solve_boussinesq(b, s0, 0.4, PicardSettings(dt=0.02, T0_max=0.2, tol=tol))
    assert len(one.reports) == 1 and len(two.reports) == 2
    scale = data_norm(s0, b)
    assert np.abs(one.xi - two.xi).max() <= 5 * tol * scale
    assert np.abs(one.theta - two.theta).max() <= 5 * tol * scale


def test_unique_limit_from_perturbed_guess(small_basis):
    b = small_basis
    tol = 1e-10
    s0 = BoussinesqState(np.zeros(b.m), gaussian(b))
    settings = PicardSettings(dt=0.02, T0_max=0.3, tol=tol)
    (va, sa), _ = solve_window(b, s0, settings)
    rng = np.random.default_rng(0)
    guess_v, guess_s = picard_step(b, None, s0, settings.dt, 15)
    guess_v.xi = guess_v.xi + 0.05 * rng.standard_normal(guess_v.xi.shape) / (1 + b.eigenvalues)
    guess_v.xi[0] = s0.xi
    guess_v.u = b.synthesize(guess_v.xi)
    (vb, sb), rep = solve_window(b, s0, settings, initial_guess=(guess_v, guess_s))
    assert rep.converged
    scale = data_norm(s0, b)
    assert np.abs(va.xi - vb.xi).max() <= 10 * tol * scale
    assert np.abs(sa.theta - sb.theta).max() <= 10 * tol * scale


def test_alternating_coupling_agrees(small_basis):
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), gaussian(b))
    vb, sb = solve_base_case(b, s0, 0.01, 10)
    va, sa, inner = picard_step_alternating(b, vb, s0, 0.01, 10)
    vc, sc = picard_step(b, vb, s0, 0.01, 10)
    assert all(r < 0.5 for r in inner)
    assert np.abs(va.xi - vc.xi).max() <= 1e-6 * np.abs(va.xi).max()
    assert np.abs(sa.theta - sc.theta).max() <= 1e-6


def test_nonconvergence_carries_report(small_basis):
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), gaussian(b))
    settings = PicardSettings(dt=0.05, T0_max=0.5, tol=1e-30, n_max=2, max_bisections=1)
    with pytest.raises(NonconvergenceError) as info:
        solve_boussinesq(b, s0, 1.0, settings)
    exc = info.value
    assert exc.report is not None and not exc.report.converged
    assert exc.partial is not None and len(exc.partial.times) == 0


def test_bisection_on_contraction_failure(small_basis):
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), 20 * gaussian(b))
    settings = PicardSettings(dt=0.05, T0_max=3.2, threshold=0.3)
    (vt, st), rep = solve_window(b, s0, settings)
    assert rep.bisections >= 1
    assert rep.steps < 64
    assert len(rep.abandoned) == rep.bisections


def test_record_cadence_and_horizon(small_basis):
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), gaussian(b))
    seen = []
    res = solve_boussinesq(b, s0, 0.5, PicardSettings(dt=0.05, T0_max=0.2), record_every=2,
                           sink=lambda t, *_: seen.append(t))
    assert np.allclose(res.times, np.arange(0, 0.51, 0.1))
    assert np.allclose(seen, res.times)
    assert abs(res.final.time - 0.5) <= 1e-12
    with pytest.raises(ValueError):
        solve_boussinesq(b, s0, 0.33, PicardSettings(dt=0.05))


def test_state_shape_checked(small_basis):
    with pytest.raises(ValueError):
        BoussinesqState(np.zeros(3), np.zeros(small_basis.grid.shape)).check(small_basis)


def test_settings_validation():
    with pytest.raises(ValueError):
        PicardSettings(dt=0.0)
    with pytest.raises(ValueError):
        PicardSettings(coupling="both")
    assert PicardSettings(dt=0.01, T0_max=0.25).window_steps == 25


def test_zero_data_converges_immediately(small_basis):
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), np.zeros(b.grid.shape))
    (vt, st), rep = solve_window(b, s0, PicardSettings(dt=0.05, T0_max=0.25))
    assert rep.converged and len(rep.iterations) == 2
    assert rep.ratios == [0.0]
    assert not np.any(vt.xi) and not np.any(st.theta)


def test_base_case_stratified_density_is_steady(small_basis):
    """theta0 = theta0(x2): theta0 e2 is a gradient, so u stays 0 and theta stays theta0."""
    b = small_basis
    _, x2 = b.grid.mesh
    th0 = np.cos(x2) + 0.3 * np.sin(2 * x2)
    vt, st = solve_base_case(b, BoussinesqState(np.zeros(b.m), th0), 0.05, 20)
    assert np.abs(vt.xi).max() <= 1e-12
    assert np.abs(st.theta - th0).max() <= 1e-12


def test_one_step_from_rest_ignores_advecting_field(small_basis):
    """u0 = 0 with constant theta0: nothing to advect, so any v gives the base-case step."""
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), np.full(b.grid.shape, 0.7))
    rng = np.random.default_rng(2)
    v = b.synthesize(rng.standard_normal((2, b.m)) / (1 + b.eigenvalues))
    va, sa = picard_step(b, v, s0, 0.05, 1)
    vb, sb = solve_base_case(b, s0, 0.05, 1)
    assert np.abs(va.xi - vb.xi).max() <= 1e-12
    assert np.abs(sa.theta - sb.theta).max() <= 1e-12


def test_small_data_contracts_from_first_ratio(small_basis):
    from boussinesq_lab.scenarios import make_scenario

    b = small_basis
    s0 = make_scenario("calibration", b).state()
    _, rep = solve_window(b, s0, PicardSettings(dt=0.01, T0_max=0.1))
    assert rep.converged and all(r <= 0.5 for r in rep.ratios)


def test_iterate_bounds_do_not_grow(small_basis):
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), gaussian(b))
    _, rep = solve_window(b, s0, PicardSettings(dt=0.02, T0_max=0.4))
    first = rep.iterations[1].bounds
    for it in rep.iterations[1:]:
        for k, val in it.bounds.items():
            assert np.isfinite(val) and val <= first[k] * (1 + 1e-3) + 1e-12, (it.n, k)


def test_total_energy_nonincreasing(small_basis):
    b = small_basis
    s0 = BoussinesqState(np.zeros(b.m), gaussian(b))
    dt = 0.02
    res = solve_boussinesq(b, s0, 1.0, PicardSettings(dt=dt, T0_max=0.5))
    E = (res.xi**2).sum(1) + np.array([b.grid.l2(t) ** 2 for t in res.theta])
    assert np.all(np.diff(E) <= 1e-3 * E[0] * dt)
