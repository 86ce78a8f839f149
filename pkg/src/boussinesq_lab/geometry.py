"""Computational geometries and grid operators.

Two domains are supported:

* ``torus``: doubly periodic box ``[0, Lx) x [0, Ly)`` on a uniform grid,
  differentiated with FFTs.
* ``channel``: periodic in ``x1`` (length ``Lx``), walls at ``x2 = 0`` and
  ``x2 = 1``. Uniform Fourier grid in ``x1`` and Chebyshev-Gauss-Lobatto
  points in ``x2`` with Clenshaw-Curtis quadrature.

Grid arrays are indexed ``[i1, i2]`` (``x1`` first). Vector fields carry a
leading component axis: shape ``(2, n1, n2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

TORUS = "torus"
CHANNEL = "channel"


@dataclass(frozen=True)
class Geometry:
    """Domain description.

    For the channel ``Ly`` is the wall-to-wall height and is fixed to 1.
    """

    kind: str = TORUS
    Lx: float = 2 * np.pi
    Ly: float = 2 * np.pi

    def __post_init__(self):
        if self.kind not in (TORUS, CHANNEL):
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError("side lengths must be strictly positive")
        if self.kind == CHANNEL and self.Ly != 1.0:
            raise ValueError("channel height is fixed to 1")

    @classmethod
    def torus(cls, Lx: float = 2 * np.pi, Ly: float = 2 * np.pi) -> "Geometry":
        return cls(TORUS, float(Lx), float(Ly))

    @classmethod
    def channel(cls, Lx: float = 2 * np.pi) -> "Geometry":
        return cls(CHANNEL, float(Lx), 1.0)

    @property
    def area(self) -> float:
        return self.Lx * self.Ly


def cheb_points(n: int) -> np.ndarray:
    """Chebyshev-Gauss-Lobatto points on [-1, 1], increasing, ``n + 1`` of them."""
    return -np.cos(np.pi * np.arange(n + 1) / n)


def cheb_diff_matrix(n: int) -> np.ndarray:
    """Collocation differentiation matrix on :func:`cheb_points`."""
    y = cheb_points(n)
    c = np.ones(n + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(n + 1)
    dy = y[:, None] - y[None, :]
    D = (c[:, None] / c[None, :]) / (dy + np.eye(n + 1))
    D -= np.diag(D.sum(axis=1))
    return D


def clenshaw_curtis_weights(n: int) -> np.ndarray:
    """Clenshaw-Curtis weights for :func:`cheb_points` (integrate over [-1, 1])."""
    theta = np.pi * np.arange(n + 1) / n
    w = np.zeros(n + 1)
    v = np.ones(n - 1)
    inner = theta[1:-1]
    if n % 2 == 0:
        w[0] = w[-1] = 1.0 / (n**2 - 1)
        for k in range(1, n // 2):
            v -= 2 * np.cos(2 * k * inner) / (4 * k**2 - 1)
        v -= np.cos(n * inner) / (n**2 - 1)
    else:
        w[0] = w[-1] = 1.0 / n**2
        for k in range(1, (n - 1) // 2 + 1):
            v -= 2 * np.cos(2 * k * inner) / (4 * k**2 - 1)
    w[1:-1] = 2 * v / n
    # symmetric, so the increasing ordering of cheb_points needs no flip
    return w


@dataclass(frozen=True, eq=False)
class Grid:
    """Collocation grid with quadrature and spectral differentiation."""

    geometry: Geometry
    n1: int
    n2: int  # torus: number of points; channel: polynomial degree (n2 + 1 points)

    @property
    def kind(self) -> str:
        return self.geometry.kind

    @property
    def shape(self) -> tuple[int, int]:
        if self.kind == TORUS:
            return (self.n1, self.n2)
        return (self.n1, self.n2 + 1)

    @cached_property
    def x1(self) -> np.ndarray:
        return np.arange(self.n1) * self.geometry.Lx / self.n1

    @cached_property
    def x2(self) -> np.ndarray:
        if self.kind == TORUS:
            return np.arange(self.n2) * self.geometry.Ly / self.n2
        return 0.5 * (cheb_points(self.n2) + 1.0)

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x1, self.x2, indexing="ij")

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weights, same shape as a scalar field."""
        dx1 = self.geometry.Lx / self.n1
        if self.kind == TORUS:
            w2 = np.full(self.n2, self.geometry.Ly / self.n2)
        else:
            w2 = 0.5 * clenshaw_curtis_weights(self.n2)
        return dx1 * np.broadcast_to(w2, self.shape).copy()

    @cached_property
    def k1(self) -> np.ndarray:
        """Angular wavenumbers along x1, full fft ordering."""
        return 2 * np.pi * sfft.fftfreq(self.n1, d=self.geometry.Lx / self.n1)

    @cached_property
    def k2(self) -> np.ndarray:
        if self.kind != TORUS:
            raise AttributeError("channel grid has no x2 wavenumbers")
        return 2 * np.pi * sfft.rfftfreq(self.n2, d=self.geometry.Ly / self.n2)

    @cached_property
    def cheb_D(self) -> np.ndarray:
        """d/dx2 collocation matrix (channel only)."""
        return 2.0 * cheb_diff_matrix(self.n2)

    @cached_property
    def _ik1(self) -> np.ndarray:
        k = self.k1.copy()
        if self.n1 % 2 == 0:
            k[self.n1 // 2] = 0.0  # Nyquist derivative is dropped
        return 1j * k

    @cached_property
    def _ik2(self) -> np.ndarray:
        k = self.k2.copy()
        if self.n2 % 2 == 0:
            k[-1] = 0.0
        return 1j * k

    # -- quadrature --------------------------------------------------------

    def integrate(self, f: np.ndarray) -> float:
        return float(np.sum(self.weights * f))

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        """Discrete L2 inner product; vector fields are summed over components."""
        prod = f * g
        if prod.ndim == 3:
            prod = prod.sum(axis=0)
        return float(np.sum(self.weights * prod))

    def l2(self, f: np.ndarray) -> float:
        return np.sqrt(max(self.inner(f, f), 0.0))

    def lp(self, f: np.ndarray, p: float) -> float:
        a = np.abs(f)
        if a.ndim == 3:
            a = np.sqrt((a**2).sum(axis=0))
        if np.isinf(p):
            return float(a.max(initial=0.0))
        return float(np.sum(self.weights * a**p)) ** (1.0 / p)

    # -- differentiation ---------------------------------------------------

    def d1(self, f: np.ndarray) -> np.ndarray:
        """d/dx1 of a scalar field (or stack of fields, last two axes spatial)."""
        fh = sfft.fft(f, axis=-2)
        fh *= self._ik1[:, None]
        return sfft.ifft(fh, axis=-2).real

    def d2(self, f: np.ndarray) -> np.ndarray:
        if self.kind == TORUS:
            fh = sfft.rfft(f, axis=-1)
            fh *= self._ik2
            return sfft.irfft(fh, n=self.n2, axis=-1)
        return f @ self.cheb_D.T

    def grad(self, f: np.ndarray) -> np.ndarray:
        return np.stack([self.d1(f), self.d2(f)])

    def div(self, u: np.ndarray) -> np.ndarray:
        return self.d1(u[0]) + self.d2(u[1])

    def jacobian(self, u: np.ndarray) -> np.ndarray:
        """``J[a, b] = d u_a / d x_b`` with shape (2, 2, n1, n2)."""
        return np.stack([self.grad(u[0]), self.grad(u[1])])


def make_grid(geometry: Geometry, n1: int, n2: int) -> Grid:
    if n1 < 4 or n2 < 4:
        raise ValueError("grid too small")
    return Grid(geometry, int(n1), int(n2))
