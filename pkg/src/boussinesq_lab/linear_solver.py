"""Galerkin solver for the linearized velocity equation.

Projecting ``u_t - lap u + v.grad u + grad P = theta e2`` onto the first ``m``
Stokes modes gives the ODE system ``xi' + (Lam + beta(t)) xi = eta(t)`` with
``beta_ij = (v.grad w_j, w_i)`` and ``eta_j = (theta e2, w_j)``.

Time stepping is an exponential midpoint rule: the diagonal Stokes part is
propagated exactly with ``exp(-Lam dt)``, advection and buoyancy are frozen at
the step midpoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .basis import StokesBasis
from .geometry import TORUS

log = logging.getLogger(__name__)


class AntisymmetryError(RuntimeError):
    pass


def dealias(field: np.ndarray, basis: StokesBasis) -> np.ndarray:
    """2/3-rule filter of a torus grid field (no-op on the channel)."""
    if basis.geometry.kind != TORUS:
        return field
    n1, n2 = basis.grid.shape
    F = sfft.rfft2(field)
    k1 = np.abs(sfft.fftfreq(n1) * n1)
    k2 = np.arange(n2 // 2 + 1)
    keep = (k1[:, None] < n1 / 3.0) & (k2[None, :] < n2 / 3.0)
    return sfft.irfft2(F * keep, s=(n1, n2))


class AdvectionOperator:
    """Matrix-free ``xi -> beta(v) xi = P_m P (v . grad u)``.

    Applying the operator costs a handful of FFTs, which is what the time
    stepper needs; :func:`assemble_advection` builds the dense matrix.
    """

    def __init__(self, basis: StokesBasis, v: np.ndarray):
        v = np.asarray(v, dtype=float)
        if v.shape != (2, *basis.grid.shape):
            raise ValueError(f"advecting field shape {v.shape} does not match grid")
        self.basis = basis
        self.v = dealias(v, basis)

    def advect(self, grad_u: np.ndarray) -> np.ndarray:
        """``(v . grad) u`` from a Jacobian ``J[..., a, b] = d u_a / d x_b``."""
        return np.einsum("b...xy,...abxy->...axy", self.v, grad_u)

    def matvec(self, xi: np.ndarray) -> np.ndarray:
        return self.basis.project(self.advect(self.basis.gradient(xi)))

    __call__ = matvec

    def dense(self, block: int = 64) -> np.ndarray:
        m = self.basis.m
        beta = np.empty((m, m))
        eye = np.eye(m)
        for a in range(0, m, block):
            b = min(a + block, m)
            beta[:, a:b] = self.matvec(eye[a:b]).T
        return beta


def assemble_advection(v: np.ndarray, basis: StokesBasis, tol_skew: float | None = None,
                       strict: bool = False) -> np.ndarray:
    """Dense ``beta_ij = (v . grad w_j, w_i)``.

    If ``tol_skew`` is given the antisymmetry defect ``max|beta + beta^T|`` is
    checked; a breach is logged, or raised when ``strict``.
    """
    beta = AdvectionOperator(basis, v).dense()
    if tol_skew is not None:
        skew = float(np.abs(beta + beta.T).max(initial=0.0))
        if skew > tol_skew:
            msg = f"advection matrix antisymmetry defect {skew:.3e} > {tol_skew:.1e} (under-resolved quadrature)"
            if strict:
                raise AntisymmetryError(msg)
            log.warning(msg)
    return beta


def assemble_buoyancy(theta: np.ndarray, basis: StokesBasis) -> np.ndarray:
    """``eta_j = (theta e2, w_j)``; ``theta`` may carry leading batch axes."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-2:] != basis.grid.shape:
        raise ValueError(f"scalar field shape {theta.shape[-2:]} does not match grid {basis.grid.shape}")
    field = np.stack([np.zeros_like(theta), theta], axis=-3)
    return basis.project(field)


def _apply(beta, xi):
    if beta is None:
        return 0.0
    if isinstance(beta, np.ndarray):
        return beta @ xi
    return beta.matvec(xi)


def phi1(lam: np.ndarray, tau: float) -> np.ndarray:
    """``(1 - exp(-lam tau)) / lam`` for lam > 0."""
    return -np.expm1(-lam * tau) / lam


def step_linear(xi: np.ndarray, beta_mid, eta_mid: np.ndarray, dt: float,
                eigenvalues: np.ndarray) -> np.ndarray:
    """One exponential-midpoint step of ``xi' + (Lam + beta) xi = eta``.

    ``beta_mid`` is a dense matrix, an :class:`AdvectionOperator`, or ``None``
    for no advection. With ``beta = 0`` the step is exact for constant ``eta``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    lam = eigenvalues
    half = np.exp(-0.5 * dt * lam)
    full = np.exp(-dt * lam)
    f0 = eta_mid - _apply(beta_mid, xi)
    xi_mid = half * xi + phi1(lam, 0.5 * dt) * f0
    f1 = eta_mid - _apply(beta_mid, xi_mid)
    return full * xi + phi1(lam, dt) * f1


@dataclass
class VelocityTrajectory:
    """Coefficient samples ``xi[k]`` at ``times[k]`` (optionally ``xi'``).

    ``u`` optionally caches the synthesized grid velocities.
    """

    times: np.ndarray
    xi: np.ndarray
    xidot: np.ndarray | None = None
    u: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if len(self.xi) != len(self.times):
            raise ValueError("one state per time sample required")

    def __len__(self):
        return len(self.times)

    @property
    def final(self) -> np.ndarray:
        return self.xi[-1]


def velocity_fields(v_traj, basis: StokesBasis):
    """Callable ``k -> grid velocity`` for a trajectory given as coefficients or grid fields."""
    if v_traj is None:
        return lambda k: None
    if isinstance(v_traj, VelocityTrajectory):
        if v_traj.u is not None:
            return lambda k: v_traj.u[k]
        return lambda k: basis.synthesize(v_traj.xi[k])
    arr = np.asarray(v_traj)
    if arr.ndim == 4:
        return lambda k: arr[k]
    raise ValueError("velocity trajectory must be a VelocityTrajectory or a (K, 2, n1, n2) array")


def check_time_grid(times: np.ndarray, other: np.ndarray, what: str):
    if len(other) != len(times):
        raise ValueError(f"{what} has {len(other)} samples, expected {len(times)}")


def solve_linear_nse(basis: StokesBasis, v_traj, theta_traj: np.ndarray, xi0: np.ndarray,
                     times: np.ndarray) -> VelocityTrajectory:
    """Galerkin solution of the linearized velocity equation on a time grid.

    ``v_traj`` is the advecting velocity sampled on ``times`` (coefficients or
    grid fields, ``None`` for no advection); ``theta_traj`` is the density on
    the same samples. ``xi'`` is recorded at every sample.
    """
    times = np.asarray(times, dtype=float)
    if isinstance(v_traj, VelocityTrajectory):
        check_time_grid(times, v_traj.times, "velocity trajectory")
        if not np.array_equal(v_traj.times, times):
            raise ValueError("velocity trajectory sampled on a different time grid")
    elif v_traj is not None:
        check_time_grid(times, v_traj, "velocity trajectory")
    check_time_grid(times, theta_traj, "density trajectory")
    vf = velocity_fields(v_traj, basis)
    lam = basis.eigenvalues
    eta = assemble_buoyancy(np.asarray(theta_traj), basis)
    K = len(times)
    xi = np.empty((K, basis.m))
    xidot = np.empty((K, basis.m))
    xi[0] = np.asarray(xi0, dtype=float)
    v_prev = vf(0)
    op_prev = AdvectionOperator(basis, v_prev) if v_prev is not None else None
    for k in range(K - 1):
        dt = times[k + 1] - times[k]
        v_next = vf(k + 1)
        op_mid = None
        if v_prev is not None:
            op_mid = AdvectionOperator(basis, 0.5 * (v_prev + v_next))
        xidot[k] = eta[k] - lam * xi[k] - _apply(op_prev, xi[k])
        xi[k + 1] = step_linear(xi[k], op_mid, 0.5 * (eta[k] + eta[k + 1]), dt, lam)
        v_prev = v_next
        op_prev = AdvectionOperator(basis, v_next) if v_next is not None else None
    xidot[-1] = eta[-1] - lam * xi[-1] - _apply(op_prev, xi[-1])
    return VelocityTrajectory(times, xi, xidot)
