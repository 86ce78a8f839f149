"""Picard linearization of the coupled system with windowed contraction.

Iterate ``n`` solves the system that is linear in ``(u^n, theta^n)`` once the
advecting velocity is frozen at the previous iterate ``u^{n-1}``::

    u^n_t + A u^n + P(u^{n-1} . grad u^n) = P(theta^n e2)
    theta^n_t + u^{n-1} . grad theta^n = -u^n_2

and ``n = 0`` is the advection-free base problem. Iterates are compared in the
composite norm ``|(U, theta)|^2 = |grad U|^2_{LinfL2} + |theta|^2_{LinfL2} +
|AU|^2_{L2L2}`` of successive differences; a window whose contraction ratio
stays above a threshold is bisected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .basis import StokesBasis
from .linear_solver import (
    AdvectionOperator,
    VelocityTrajectory,
    assemble_buoyancy,
    solve_linear_nse,
    step_linear,
)
from .transport import (
    ScalarTrajectory,
    advance_with_feet,
    make_interpolator,
    solve_transport,
    trace_feet,
    MonotoneLimiter,
)

log = logging.getLogger(__name__)

COUPLING_PASSES = 2


class NonconvergenceError(RuntimeError):
    """Picard iteration failed on the smallest admissible window."""

    def __init__(self, message, report=None, partial=None):
        super().__init__(message)
        self.report = report
        self.partial = partial


@dataclass
class BoussinesqState:
    xi: np.ndarray
    theta: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)

    def check(self, basis: StokesBasis):
        if self.xi.shape != (basis.m,):
            raise ValueError(f"xi has shape {self.xi.shape}, basis has {basis.m} modes")
        if self.theta.shape != basis.grid.shape:
            raise ValueError(f"theta has shape {self.theta.shape}, grid is {basis.grid.shape}")


@dataclass
class PicardSettings:
    """Outer-iteration controls; windows are measured in time steps."""

    dt: float = 1e-2
    tol: float = 1e-8
    n_max: int = 30
    T0_max: float = 1.0
    threshold: float = 0.9
    max_bisections: int = 6
    coupling: str = "cotimestep"  # or "alternating"
    inner_tol: float = 1e-10
    inner_max: int = 50
    interpolation: str | None = None
    limiter: bool = False

    def __post_init__(self):
        if not self.dt > 0 or not self.T0_max > 0:
            raise ValueError("dt and T0_max must be positive")
        if self.coupling not in ("cotimestep", "alternating"):
            raise ValueError(f"unknown coupling mode {self.coupling!r}")
        if not 0 < self.threshold < 1:
            raise ValueError("contraction threshold must lie in (0, 1)")
        if self.n_max < 1 or self.max_bisections < 0:
            raise ValueError("n_max >= 1 and max_bisections >= 0 required")

    @property
    def window_steps(self) -> int:
        return max(1, int(round(self.T0_max / self.dt)))


@dataclass
class IterationRecord:
    n: int
    grad_U: float
    theta: float
    AU: float
    composite: float
    ratio: float | None
    bounds: dict
    inner_ratios: list = field(default_factory=list)


@dataclass
class PicardReport:
    t_start: float
    T0: float
    steps: int
    iterations: list = field(default_factory=list)
    converged: bool = False
    bisections: int = 0
    abandoned: list = field(default_factory=list)  # reports of bisected attempts
    scale: float = 0.0

    @property
    def ratios(self) -> list:
        return [it.ratio for it in self.iterations if it.ratio is not None]

    @property
    def max_ratio(self) -> float:
        r = self.ratios
        return max(r) if r else 0.0

    def as_rows(self) -> list[dict]:
        rows = []
        for it in self.iterations:
            rows.append(
                {
                    "t_start": self.t_start,
                    "T0": self.T0,
                    "n": it.n,
                    "grad_U": it.grad_U,
                    "theta": it.theta,
                    "AU": it.AU,
                    "composite": it.composite,
                    "ratio": "" if it.ratio is None else it.ratio,
                }
            )
        return rows


# -- norms -----------------------------------------------------------------------


def data_norm(state: BoussinesqState, basis: StokesBasis) -> float:
    """``sqrt(|u0|_{D(A)}^2 + |theta0|_{H1}^2)``."""
    lam = basis.eigenvalues
    g = basis.grid
    u2 = float(np.sum((1 + lam + lam**2) * state.xi**2))
    t2 = g.l2(state.theta) ** 2 + g.l2(g.grad(state.theta)) ** 2
    return float(np.sqrt(u2 + t2))


def difference_norms(a: tuple, b: tuple | None, basis: StokesBasis) -> dict:
    """Composite norm of ``a - b`` over a window (``b = None`` means zero)."""
    va, sa = a
    lam = basis.eigenvalues
    dxi = va.xi if b is None else va.xi - b[0].xi
    dth = sa.theta if b is None else sa.theta - b[1].theta
    grad2 = (lam * dxi**2).sum(axis=1)
    A2 = (lam**2 * dxi**2).sum(axis=1)
    g = basis.grid
    th = np.sqrt(np.maximum(np.einsum("kxy,xy->k", dth**2, g.weights), 0.0))
    t = va.times
    AU = float(np.sqrt(np.sum(0.5 * (A2[1:] + A2[:-1]) * np.diff(t)))) if len(t) > 1 else 0.0
    gU = float(np.sqrt(grad2.max()))
    tmax = float(th.max())
    return {"grad_U": gU, "theta": tmax, "AU": AU, "composite": float(np.sqrt(gU**2 + tmax**2 + AU**2))}


def iterate_bounds(pair: tuple, basis: StokesBasis) -> dict:
    """Uniform-bound quantities of one iterate over its window."""
    v, s = pair
    lam = basis.eigenvalues
    g = basis.grid
    A2 = (lam**2 * v.xi**2).sum(axis=1)
    t = v.times
    return {
        "u_l2": float(np.sqrt((v.xi**2).sum(axis=1).max())),
        "grad_u_l2": float(np.sqrt((lam * v.xi**2).sum(axis=1).max())),
        "Au_l2l2": float(np.sqrt(np.sum(0.5 * (A2[1:] + A2[:-1]) * np.diff(t)))) if len(t) > 1 else 0.0,
        "theta_l3": float(max(g.lp(th, 3) for th in s.theta)),
    }


# -- one iterate -------------------------------------------------------------------


def _times(state0: BoussinesqState, dt: float, steps: int) -> np.ndarray:
    return state0.time + dt * np.arange(steps + 1)


def picard_step(basis: StokesBasis, v_traj, state0: BoussinesqState, dt: float, steps: int,
                interpolation: str | None = None, limiter: bool = False, interp=None):
    """Co-timestep the linear pair with advecting velocity ``v_traj``.

    ``v_traj`` is a :class:`VelocityTrajectory` (or ``(K, 2, n1, n2)`` array)
    on the window grid, or ``None`` for the base problem. Each step traces the
    characteristics once and runs :data:`COUPLING_PASSES` coupling passes
    between buoyancy and the ``-u2`` forcing.
    """
    state0.check(basis)
    g = basis.grid
    lam = basis.eigenvalues
    times = _times(state0, dt, steps)
    K = steps + 1
    if v_traj is None:
        vf = lambda k: None  # noqa: E731
    else:
        arr = v_traj.u if isinstance(v_traj, VelocityTrajectory) else np.asarray(v_traj)
        if arr is None:
            arr = basis.synthesize(v_traj.xi)
        if len(arr) != K:
            raise ValueError(f"advecting trajectory has {len(arr)} samples, window needs {K}")
        vf = lambda k: arr[k]  # noqa: E731
    interp = interp or make_interpolator(g, interpolation)
    sinterp = MonotoneLimiter(interp) if limiter else interp
    xi = np.empty((K, basis.m))
    xidot = np.empty_like(xi)
    theta = np.empty((K, *g.shape))
    u = np.empty((K, 2, *g.shape))
    xi[0] = state0.xi
    theta[0] = state0.theta
    u[0] = basis.synthesize(xi[0])
    eta = assemble_buoyancy(theta[0], basis)
    op_prev = AdvectionOperator(basis, vf(0)) if vf(0) is not None else None
    for k in range(steps):
        v0, v1 = vf(k), vf(k + 1)
        xidot[k] = eta - lam * xi[k] - (op_prev.matvec(xi[k]) if op_prev else 0.0)
        dep = trace_feet(g, interp, v0, v1, dt)
        op_mid = AdvectionOperator(basis, 0.5 * (v0 + v1)) if v0 is not None else None
        foot = advance_with_feet(theta[k], dep, u[k][1], None, dt, sinterp)
        u2_new = u[k][1]
        for _ in range(COUPLING_PASSES):
            th_new = foot - 0.5 * dt * u2_new
            eta_new = assemble_buoyancy(th_new, basis)
            xi_new = step_linear(xi[k], op_mid, 0.5 * (eta + eta_new), dt, lam)
            u_new = basis.synthesize(xi_new)
            u2_new = u_new[1]
        xi[k + 1], theta[k + 1], u[k + 1] = xi_new, th_new, u_new
        eta = eta_new
        op_prev = AdvectionOperator(basis, v1) if v1 is not None else None
    xidot[-1] = eta - lam * xi[-1] - (op_prev.matvec(xi[-1]) if op_prev else 0.0)
    vt = VelocityTrajectory(times, xi, xidot, u)
    st = ScalarTrajectory(times, theta)
    return vt, st


def solve_base_case(basis, state0, dt, steps, **kw):
    """Advection-free base problem (iterate ``n = 0``)."""
    return picard_step(basis, None, state0, dt, steps, **kw)


def picard_step_alternating(basis, v_traj, state0, dt, steps, inner_tol=1e-10, inner_max=50,
                            interpolation=None, limiter=False):
    """Same iterate via the two fixed-point maps, alternated to convergence.

    ``phi2`` maps a velocity to the density transported by ``v`` and forced by
    ``-u2``; ``phi1`` maps a density to the Galerkin velocity. Returns the
    iterate and the inner contraction ratios of ``theta`` in ``L^inf H^1``.
    """
    g = basis.grid
    times = _times(state0, dt, steps)
    interp = make_interpolator(g, interpolation)
    v_grid = None
    if v_traj is not None:
        v_grid = v_traj.u if isinstance(v_traj, VelocityTrajectory) and v_traj.u is not None else v_traj
        if isinstance(v_grid, VelocityTrajectory):
            v_grid = basis.synthesize(v_grid.xi)
    u_grid = None
    prev_theta = None
    prev_d = None
    ratios = []
    for _ in range(inner_max):
        u2 = None if u_grid is None else u_grid[:, 1]
        st = solve_transport(g, v_grid, u2, state0.theta, times, interp=interp, limiter=limiter)
        vt = solve_linear_nse(basis, v_grid, st.theta, state0.xi, times)
        vt.u = basis.synthesize(vt.xi)
        u_grid = vt.u
        if prev_theta is not None:
            diff = st.theta - prev_theta
            d = max(np.sqrt(g.l2(x) ** 2 + g.l2(g.grad(x)) ** 2) for x in diff)
            if prev_d is not None:
                ratios.append(d / prev_d if prev_d > 0 else 0.0)
            scale = max(np.sqrt(g.l2(x) ** 2 + g.l2(g.grad(x)) ** 2) for x in st.theta)
            if d <= inner_tol * max(scale, 1e-300):
                break
            prev_d = d
        prev_theta = st.theta
    return vt, st, ratios


def galerkin_rate(basis: StokesBasis, xi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """``xi'`` of the nonlinear Galerkin system, advected by the state's own velocity."""
    op = AdvectionOperator(basis, basis.synthesize(xi))
    return assemble_buoyancy(theta, basis) - basis.eigenvalues * xi - op.matvec(xi)


# -- windows ---------------------------------------------------------------------


def _iterate(basis, v_traj, state0, settings, steps, interp):
    if settings.coupling == "alternating":
        vt, st, inner = picard_step_alternating(
            basis, v_traj, state0, settings.dt, steps, settings.inner_tol, settings.inner_max,
            settings.interpolation, settings.limiter,
        )
        return (vt, st), inner
    vt, st = picard_step(basis, v_traj, state0, settings.dt, steps, settings.interpolation,
                         settings.limiter, interp)
    return (vt, st), []


def _attempt(basis, state0, settings, steps, initial_guess, interp, scale):
    report = PicardReport(state0.time, steps * settings.dt, steps, scale=scale)
    thr = settings.tol * scale
    if initial_guess is None:
        prev, inner = _iterate(basis, None, state0, settings, steps, interp)
        d0 = difference_norms(prev, None, basis)
    else:
        prev, inner = initial_guess, []
        d0 = difference_norms(prev, None, basis)
    report.iterations.append(IterationRecord(0, d0["grad_U"], d0["theta"], d0["AU"], d0["composite"],
                                             None, iterate_bounds(prev, basis), inner))
    d_prev = d0["composite"]
    high = 0
    for n in range(1, settings.n_max + 1):
        cur, inner = _iterate(basis, prev[0], state0, settings, steps, interp)
        d = difference_norms(cur, prev, basis)
        ratio = d["composite"] / d_prev if d_prev > 0 else 0.0
        report.iterations.append(IterationRecord(n, d["grad_U"], d["theta"], d["AU"], d["composite"],
                                                 ratio, iterate_bounds(cur, basis), inner))
        prev = cur
        if not np.isfinite(d["composite"]):
            return prev, report, False
        if d["composite"] <= thr:
            report.converged = True
            return prev, report, True
        high = high + 1 if ratio > settings.threshold else 0
        if high >= 2:
            log.info("window at t=%.4g, T0=%.4g: contraction ratio %.3f twice above %.2f",
                     state0.time, report.T0, ratio, settings.threshold)
            return prev, report, False
        d_prev = d["composite"]
    return prev, report, False


def solve_window(basis: StokesBasis, state0: BoussinesqState, settings: PicardSettings,
                 steps: int | None = None, initial_guess=None, interp=None):
    """Picard iteration on one window, bisecting it on contraction failure.

    Returns ``((VelocityTrajectory, ScalarTrajectory), PicardReport)``. The
    window may end up shorter than requested; ``report.steps`` says how long.
    ``initial_guess`` replaces the base case as iterate 0.
    """
    state0.check(basis)
    steps = settings.window_steps if steps is None else int(steps)
    interp = interp or make_interpolator(basis.grid, settings.interpolation)
    scale = data_norm(state0, basis)
    abandoned = []
    for b in range(settings.max_bisections + 1):
        guess = initial_guess if b == 0 else None
        pair, report, ok = _attempt(basis, state0, settings, steps, guess, interp, scale)
        report.bisections = b
        report.abandoned = abandoned
        if ok:
            return pair, report
        abandoned.append(report)
        if steps == 1:
            break
        steps = max(1, steps // 2)
    raise NonconvergenceError(
        f"Picard iteration did not converge at t={state0.time:.6g} after {len(abandoned)} attempts",
        report=abandoned[-1],
    )


@dataclass
class RunResult:
    """Sampled output of :func:`solve_boussinesq`."""

    times: np.ndarray
    xi: np.ndarray
    xidot: np.ndarray
    theta: np.ndarray
    reports: list
    final: BoussinesqState
    T0_steps: int


def solve_boussinesq(basis: StokesBasis, state0: BoussinesqState, T: float, settings: PicardSettings,
                     record_every: int = 1, sink=None, on_window=None, T0_steps: int | None = None):
    """Chain converged windows from ``state0.time`` to ``state0.time + T``.

    Every ``record_every``-th step (counted from ``t = 0``) is kept in the returned :class:`RunResult`
    and passed to ``sink(time, xi, xidot, theta)`` as it is produced.
    ``on_window(state, report, T0_steps)`` runs after each window (checkpoint
    hook). Each window starts with the length the previous one ended with.
    On nonconvergence the exception carries the partial result.
    """
    if not T > 0:
        raise ValueError("horizon must be positive")
    state0.check(basis)
    dt = settings.dt
    total = int(round(T / dt))
    if total < 1 or abs(total * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"horizon {T} is not a multiple of dt = {dt}")
    interp = make_interpolator(basis.grid, settings.interpolation)
    steps_w = settings.window_steps if T0_steps is None else int(T0_steps)
    state = state0
    done = 0
    # global step index, so the record cadence survives a restart
    offset = int(round(state0.time / dt))
    out_t, out_xi, out_xd, out_th = [], [], [], []
    reports = []

    def keep(t, x, xd, th, step_index):
        if step_index % record_every == 0:
            out_t.append(t)
            out_xi.append(x)
            out_xd.append(xd)
            out_th.append(th)
            if sink is not None:
                sink(t, x, xd, th)

    first = True
    while done < total:
        want = min(steps_w, total - done)
        try:
            (vt, st), rep = solve_window(basis, state, settings, want, interp=interp)
        except NonconvergenceError as exc:
            exc.partial = _result(out_t, out_xi, out_xd, out_th, reports, state, steps_w)
            raise
        reports.append(rep)
        if rep.steps < want:
            steps_w = rep.steps
        start = 0 if first else 1
        for k in range(start, rep.steps + 1):
            xd = vt.xidot[k]
            if k in (0, rep.steps):
                # boundary rates from the state alone, so a restart reproduces them exactly
                xd = galerkin_rate(basis, vt.xi[k], st.theta[k])
            keep(vt.times[k], vt.xi[k], xd, st.theta[k], offset + done + k)
        first = False
        done += rep.steps
        xi_end = vt.xi[-1]
        Au = np.sqrt(np.sum(basis.eigenvalues**2 * xi_end**2))
        if not np.isfinite(Au) or not np.all(np.isfinite(st.theta[-1])):
            exc = NonconvergenceError(f"end state at t={vt.times[-1]:.6g} is not admissible", rep)
            exc.partial = _result(out_t, out_xi, out_xd, out_th, reports, state, steps_w)
            raise exc
        state = BoussinesqState(xi_end.copy(), st.theta[-1].copy(), float(state0.time + done * dt))
        if on_window is not None:
            on_window(state, rep, steps_w)
    return _result(out_t, out_xi, out_xd, out_th, reports, state, steps_w)


def _result(t, xi, xd, th, reports, state, steps_w):
    m = len(state.xi)
    return RunResult(
        np.array(t),
        np.array(xi).reshape(-1, m),
        np.array(xd).reshape(-1, m),
        np.array(th).reshape((-1, *state.theta.shape)),
        reports,
        state,
        steps_w,
    )
