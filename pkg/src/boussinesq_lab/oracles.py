"""Independent reference solutions used to validate the production solvers.

Nothing here shares code paths with the Galerkin or semi-Lagrangian solvers:

* :func:`torus_mode_closed_form` evaluates torus Stokes modes and their
  gradients from the trigonometric formulas, pointwise.
* :func:`fd_channel_eigenvalues` computes clamped-channel eigenvalues with
  second-order finite differences and Richardson extrapolation.
* :class:`PseudoSpectralOracle` integrates the full nonlinear shifted system on
  the torus in vorticity form with an integrating-factor RK4 and Eulerian
  spectral transport of the density (no Picard splitting).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .geometry import TORUS, Geometry


def torus_mode_closed_form(descriptor, geometry: Geometry, x1, x2):
    """Value ``(2, ...)`` and Jacobian ``(2, 2, ...)`` of a torus mode at points.

    ``descriptor`` is ``("torus", k1, k2, "cos" | "sin")``.
    """
    _, k1, k2, phase = descriptor
    kap = np.array([2 * np.pi * k1 / geometry.Lx, 2 * np.pi * k2 / geometry.Ly])
    nk = np.hypot(*kap)
    p = np.array([-kap[1], kap[0]]) / nk
    s = np.sqrt(2.0 / geometry.area)
    arg = kap[0] * x1 + kap[1] * x2
    if phase == "cos":
        f, df = np.cos(arg), -np.sin(arg)
    else:
        f, df = np.sin(arg), np.cos(arg)
    val = s * p[:, None, None] * f if np.ndim(f) == 2 else s * np.multiply.outer(p, f)
    jac = s * np.einsum("a,b,...->ab...", p, kap, df)
    return val, jac


def fd_channel_eigenvalues(kappa: float, count: int, levels=(100, 200, 400)) -> np.ndarray:
    """Lowest clamped-streamfunction eigenvalues for wavenumber ``kappa``.

    Solves ``(D^2 - kappa^2)^2 phi = lam (kappa^2 - D^2) phi`` on ``(0, 1)``
    with ``phi = phi' = 0`` at the walls using the standard five-point stencil
    (ghost-point clamped closure), at three mesh sizes, then removes the
    ``h^2`` and ``h^4`` error terms by two Richardson sweeps.
    """
    if len(levels) != 3:
        raise ValueError("three refinement levels are needed")
    est = []
    hs = []
    for n in levels:
        h = 1.0 / (n + 1)
        D2 = (np.diag(np.full(n, -2.0)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)) / h**2
        L = kappa**2 * np.eye(n) - D2
        A = L @ L
        # ghost point phi_{-1} = phi_1 enforces phi'(wall) = 0
        A[0, 0] += 2.0 / h**4
        A[-1, -1] += 2.0 / h**4
        w = scipy.linalg.eigh(A, L, eigvals_only=True, subset_by_index=[0, count - 1])
        est.append(w)
        hs.append(h)
    e0, e1, e2 = est
    r1 = (hs[0] / hs[1]) ** 2
    r2 = (hs[1] / hs[2]) ** 2
    a = (r1 * e1 - e0) / (r1 - 1)
    b = (r2 * e2 - e1) / (r2 - 1)
    # a, b carry h^4 errors proportional to (h0 h1)^2 and (h1 h2)^2
    q = (hs[0] / hs[2]) ** 2
    return (q * b - a) / (q - 1)


@dataclass
class OracleResult:
    times: np.ndarray
    u: np.ndarray  # (K, 2, N, N)
    theta: np.ndarray  # (K, N, N)


class PseudoSpectralOracle:
    """Direct nonlinear solver for the shifted Boussinesq system on a square torus.

    ``omega_t + u . grad omega = lap omega + d1 theta`` and
    ``theta_t + u . grad theta = -u2`` with ``u = (d2 psi, -d1 psi)``,
    ``-lap psi = omega``. Products are dealiased by the 2/3 rule, viscosity is
    integrated exactly, the rest with classical RK4 (Lawson form).
    """

    def __init__(self, N: int, L: float = 2 * np.pi):
        self.N = N
        self.L = L
        k = 2 * np.pi * np.fft.fftfreq(N, d=L / N)
        kr = 2 * np.pi * np.fft.rfftfreq(N, d=L / N)
        self.kx, self.ky = np.meshgrid(k, kr, indexing="ij")
        self.k2 = self.kx**2 + self.ky**2
        self.inv_k2 = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        ki = np.abs(np.fft.fftfreq(N) * N)
        kri = np.fft.rfftfreq(N) * N
        self.mask = (ki[:, None] < N / 3.0) & (kri[None, :] < N / 3.0)

    def _fwd(self, f):
        return np.fft.rfft2(f)

    def _inv(self, F):
        return np.fft.irfft2(F, s=(self.N, self.N))

    def velocity_hat(self, wh):
        ph = wh * self.inv_k2
        return 1j * self.ky * ph, -1j * self.kx * ph

    def velocity(self, wh):
        a, b = self.velocity_hat(wh)
        return np.stack([self._inv(a), self._inv(b)])

    def rhs(self, wh, th):
        wh = wh * self.mask
        th = th * self.mask
        uh, vh = self.velocity_hat(wh)
        u, v = self._inv(uh), self._inv(vh)
        wx, wy = self._inv(1j * self.kx * wh), self._inv(1j * self.ky * wh)
        tx, ty = self._inv(1j * self.kx * th), self._inv(1j * self.ky * th)
        nw = -self._fwd(u * wx + v * wy) * self.mask + 1j * self.kx * th
        nt = -self._fwd(u * tx + v * ty) * self.mask - vh
        return nw, nt

    def vorticity_hat(self, u):
        return 1j * self.kx * self._fwd(u[1]) - 1j * self.ky * self._fwd(u[0])

    def solve(self, u0, theta0, T: float, dt: float, sample_every: int = 1) -> OracleResult:
        nsteps = int(round(T / dt))
        if abs(nsteps * dt - T) > 1e-12 * max(T, 1.0):
            raise ValueError("T must be a multiple of dt")
        wh = self.vorticity_hat(np.asarray(u0, dtype=float))
        th = self._fwd(np.asarray(theta0, dtype=float))
        E = np.exp(-self.k2 * dt)
        Eh = np.exp(-self.k2 * dt / 2)
        times, us, ths = [0.0], [self.velocity(wh)], [self._inv(th)]
        for n in range(nsteps):
            a1, b1 = self.rhs(wh, th)
            a2, b2 = self.rhs(Eh * (wh + 0.5 * dt * a1), th + 0.5 * dt * b1)
            a3, b3 = self.rhs(Eh * wh + 0.5 * dt * a2, th + 0.5 * dt * b2)
            a4, b4 = self.rhs(E * wh + dt * Eh * a3, th + dt * b3)
            wh = E * wh + dt / 6 * (E * a1 + 2 * Eh * (a2 + a3) + a4)
            th = th + dt / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
            if (n + 1) % sample_every == 0:
                times.append((n + 1) * dt)
                us.append(self.velocity(wh))
                ths.append(self._inv(th))
        return OracleResult(np.array(times), np.array(us), np.array(ths))


def oracle_for(geometry: Geometry, N: int) -> PseudoSpectralOracle:
    if geometry.kind != TORUS or not np.isclose(geometry.Lx, geometry.Ly):
        raise ValueError("the pseudo-spectral oracle needs a square torus")
    return PseudoSpectralOracle(N, geometry.Lx)
