"""Stokes eigenbasis, Leray projection and synthesis.

The basis is the backbone of the Galerkin discretization: a velocity is stored
as its coefficient vector ``xi`` with ``u = sum_j xi_j w_j``, and the discrete
H, V and D(A) norms are ``sum xi^2``, ``sum lam xi^2`` and ``sum lam^2 xi^2``.

Torus modes are divergence-free Fourier modes ``s * p_k * cos(k.x)`` and
``s * p_k * sin(k.x)`` with ``p_k = k_perp / |k|``. Channel modes come from a
per-wavenumber streamfunction eigenproblem solved by Chebyshev collocation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
import scipy.linalg

from .geometry import (
    CHANNEL,
    TORUS,
    Geometry,
    Grid,
    cheb_diff_matrix,
    cheb_points,
    clenshaw_curtis_weights,
    make_grid,
)

log = logging.getLogger(__name__)


class BasisError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StokesBasis:
    """Ordered Stokes eigenpairs on a collocation grid.

    Treat instances as immutable; the arrays are shared between consumers.
    """

    geometry: Geometry
    grid: Grid
    eigenvalues: np.ndarray
    descriptors: tuple
    # torus: per-pair Fourier data, per-mode pair index and phase
    # channel: synthesis/projection tensors over x1-wavenumbers
    data: dict = field(repr=False)
    rejected: tuple = ()

    @property
    def m(self) -> int:
        return len(self.eigenvalues)

    def __len__(self):
        return self.m

    # -- transforms ---------------------------------------------------------

    def synthesize(self, xi: np.ndarray) -> np.ndarray:
        """Grid velocity ``sum xi_j w_j``; ``xi`` may carry leading batch axes."""
        return self._synth(xi, 0)

    def gradient(self, xi: np.ndarray) -> np.ndarray:
        """``J[..., a, b] = d u_a / d x_b`` on the grid."""
        return self._synth(xi, 1)

    def hessian(self, xi: np.ndarray) -> np.ndarray:
        """``H[..., a, b, c] = d^2 u_a / d x_b d x_c`` on the grid."""
        return self._synth(xi, 2)

    def laplacian(self, xi: np.ndarray) -> np.ndarray:
        return self.synthesize(-self.eigenvalues * np.asarray(xi))

    def stokes(self, xi: np.ndarray) -> np.ndarray:
        """Grid field of ``A u``."""
        return self.synthesize(self.eigenvalues * np.asarray(xi))

    def project(self, field: np.ndarray) -> np.ndarray:
        """Coefficients of ``P_m P field`` (Leray projection + truncation)."""
        field = np.asarray(field, dtype=float)
        if field.shape[-3:] != (2, *self.grid.shape):
            raise BasisError(
                f"field shape {field.shape[-3:]} does not match grid {(2, *self.grid.shape)}"
            )
        if self.geometry.kind == TORUS:
            return self._project_torus(field)
        return self._project_channel(field)

    def mode(self, j: int) -> np.ndarray:
        e = np.zeros(self.m)
        e[j] = 1.0
        return self.synthesize(e)

    def _check_xi(self, xi):
        xi = np.asarray(xi)
        if xi.shape[-1] != self.m:
            raise BasisError(f"coefficient length {xi.shape[-1]} != m = {self.m}")
        return xi

    def _synth(self, xi, order):
        xi = self._check_xi(xi)
        if self.geometry.kind == TORUS:
            return self._synth_torus(xi, order)
        return self._synth_channel(xi, order)

    # -- torus --------------------------------------------------------------

    def _torus_pair_coeffs(self, xi):
        d = self.data
        c = np.zeros(xi.shape[:-1] + (d["npairs"],), dtype=complex)
        cos, sin = d["cos_modes"], d["sin_modes"]
        c[..., d["pair"][cos]] += xi[..., cos]
        c[..., d["pair"][sin]] += -1j * xi[..., sin]
        return c * (0.5 * d["scale"])

    def _scatter_torus(self, vec_coeffs):
        """Place per-pair complex vectors (..., P) into an rfft2 array and invert."""
        d = self.data
        n1, n2 = self.grid.shape
        out_shape = vec_coeffs.shape[:-1]
        F = np.zeros(out_shape + (n1, n2 // 2 + 1), dtype=complex)
        F[..., d["ix"], d["iy"]] = vec_coeffs
        z = d["zero_row"]
        F[..., d["ix_neg"][z], 0] = np.conj(vec_coeffs[..., z])
        return sfft.irfft2(F * (n1 * n2), s=(n1, n2))

    def _synth_torus(self, xi, order):
        d = self.data
        c = self._torus_pair_coeffs(xi)
        pol, kap = d["pol"], d["kappa"]  # (2, P)
        # vec[..., a, P] Fourier coefficient of u_a
        vec = c[..., None, :] * pol
        for _ in range(order):
            vec = vec[..., None, :] * (1j * kap)
        return self._scatter_torus(vec)

    def _project_torus(self, field):
        d = self.data
        n1, n2 = self.grid.shape
        F = sfft.rfft2(field) / (n1 * n2)
        uh = F[..., d["ix"], d["iy"]]  # (..., 2, P)
        dot = np.einsum("...ap,ap->...p", uh, d["pol"])
        fac = d["scale"] * self.geometry.area
        xi = np.empty(field.shape[:-3] + (self.m,))
        cos, sin = d["cos_modes"], d["sin_modes"]
        xi[..., cos] = fac * dot[..., d["pair"][cos]].real
        xi[..., sin] = -fac * dot[..., d["pair"][sin]].imag
        return xi

    # -- channel ------------------------------------------------------------

    def _synth_channel(self, xi, order):
        d = self.data
        n1 = self.grid.n1
        ik = 1j * d["mode_kappa"]

        def build(nd1, nd2):
            coef = xi * ik**nd1 if nd1 else xi.astype(complex)
            G = np.einsum("...m,cmkz->...ckz", coef, d["S"][nd2])
            full = np.zeros(G.shape[:-2] + (n1 // 2 + 1, G.shape[-1]), dtype=complex)
            full[..., : G.shape[-2], :] = G
            return sfft.irfft(full * n1, n=n1, axis=-2)

        if order == 0:
            return build(0, 0)
        if order == 1:
            return np.stack([build(1, 0), build(0, 1)], axis=-3)
        h11, h12, h22 = build(2, 0), build(1, 1), build(0, 2)
        row1 = np.stack([h11, h12], axis=-3)
        row2 = np.stack([h12, h22], axis=-3)
        return np.stack([row1, row2], axis=-4)

    def _project_channel(self, field):
        d = self.data
        n1 = self.grid.n1
        nk = d["S"][0].shape[2]
        uh = sfft.rfft(field, axis=-2)[..., :nk, :] / n1
        w2 = self.grid.weights[0] / (self.geometry.Lx / n1)
        return self.geometry.Lx * np.einsum(
            "cmkz,...ckz->...m", d["Q"], np.conj(uh) * w2
        ).real


def synthesize(xi: np.ndarray, basis: StokesBasis) -> np.ndarray:
    return basis.synthesize(xi)


def leray_project(field: np.ndarray, basis: StokesBasis) -> np.ndarray:
    """Galerkin coefficients of ``P_m P field`` (synthesize them for the grid field)."""
    return basis.project(field)


# ---------------------------------------------------------------------------
# torus


def torus_lattice(max_wavenumber: int) -> list[tuple[int, int]]:
    """Representatives of +/- pairs of nonzero lattice vectors with |k| <= K."""
    K = int(max_wavenumber)
    out = []
    for k1 in range(-K, K + 1):
        for k2 in range(0, K + 1):
            if k1 * k1 + k2 * k2 > K * K or (k1, k2) == (0, 0):
                continue
            if k2 == 0 and k1 < 0:
                continue
            out.append((k1, k2))
    return out


def build_torus_basis(geometry: Geometry, max_wavenumber: int, grid: tuple[int, int]) -> StokesBasis:
    """Divergence-free Fourier basis on the torus.

    Every lattice vector ``k != 0`` with ``|k| <= max_wavenumber`` (one per
    +/- pair) contributes a cosine and a sine mode with eigenvalue ``|kappa|^2``,
    ``kappa = (2 pi k1 / Lx, 2 pi k2 / Ly)``.
    """
    if geometry.kind != TORUS:
        raise BasisError("build_torus_basis needs a torus geometry")
    K = int(max_wavenumber)
    if K < 1:
        raise BasisError("max_wavenumber must be >= 1")
    n1, n2 = grid
    if n1 < 3 * K or n2 < 3 * K:
        raise BasisError(
            f"grid {n1}x{n2} cannot hold wavenumber {K} with dealiasing margin; "
            f"need at least {3 * K} points per direction"
        )
    g = make_grid(geometry, n1, n2)
    pairs = torus_lattice(K)
    kvec = np.array(pairs, dtype=float)
    kappa = kvec * np.array([2 * np.pi / geometry.Lx, 2 * np.pi / geometry.Ly])
    lam_pair = (kappa**2).sum(axis=1)
    # (lam, k1, k2, phase) ordering
    rows = sorted(
        (lam_pair[p], pairs[p][0], pairs[p][1], phase, p)
        for p in range(len(pairs))
        for phase in (0, 1)
    )
    lam = np.array([r[0] for r in rows])
    pair = np.array([r[4] for r in rows])
    phase = np.array([r[3] for r in rows])
    norm = np.sqrt((kappa**2).sum(axis=1))
    pol = np.stack([-kappa[:, 1] / norm, kappa[:, 0] / norm])  # (2, P)
    k1i = np.array([p[0] for p in pairs])
    k2i = np.array([p[1] for p in pairs])
    data = {
        "npairs": len(pairs),
        "pair": pair,
        "cos_modes": np.flatnonzero(phase == 0),
        "sin_modes": np.flatnonzero(phase == 1),
        "pol": pol,
        "kappa": kappa.T.copy(),  # (2, P)
        "ix": k1i % n1,
        "iy": k2i,
        "zero_row": np.flatnonzero(k2i == 0),
        "ix_neg": (-k1i) % n1,
        "scale": np.sqrt(2.0 / geometry.area),
        "kint": np.stack([k1i, k2i]),
    }
    desc = tuple(
        ("torus", int(r[1]), int(r[2]), "cos" if r[3] == 0 else "sin") for r in rows
    )
    return StokesBasis(geometry, g, lam, desc, data)


# ---------------------------------------------------------------------------
# channel


@dataclass
class ChannelProfile:
    """One vertical eigenfunction: derivatives of the streamfunction profile."""

    kx: int
    kappa: float
    eigenvalue: float
    derivs: np.ndarray  # (5, npts): phi, phi', ..., phi'''' in x2 units
    residual: float


def _clamped_operators(n: int):
    """Matrices mapping interior values q to phi^(d) at all nodes, phi = (1 - y^2) q.

    Derivatives are with respect to y in [-1, 1].
    """
    y = cheb_points(n)
    D = cheb_diff_matrix(n)
    Dk = [np.eye(n + 1)]
    for _ in range(4):
        Dk.append(D @ Dk[-1])
    Dk = [M[:, 1:-1] for M in Dk]  # q vanishes at both ends
    s0 = (1 - y**2)[:, None]
    s1 = (-2 * y)[:, None]
    s2 = -2.0
    phi = [
        s0 * Dk[0],
        s0 * Dk[1] + s1 * Dk[0],
        s0 * Dk[2] + 2 * s1 * Dk[1] + s2 * Dk[0],
        s0 * Dk[3] + 3 * s1 * Dk[2] + 3 * s2 * Dk[1],
        s0 * Dk[4] + 4 * s1 * Dk[3] + 6 * s2 * Dk[2],
    ]
    return phi


def channel_profiles(kx: int, kappa: float, n: int, count: int, tol: float = 1e-6):
    """Lowest ``count`` clamped streamfunction eigenpairs for wavenumber ``kappa``.

    Solves ``(D^2 - kappa^2)^2 phi = lam (kappa^2 - D^2) phi`` on ``[0, 1]`` with
    ``phi = phi' = 0`` at both walls. Pairs failing the residual or resolution
    gates (collocation residual, Rayleigh-quotient consistency, Chebyshev
    tail of the profile) are returned separately as rejected.
    """
    w = 0.5 * clenshaw_curtis_weights(n)
    ops = _clamped_operators(n)
    # y -> x2 = (y + 1) / 2 scales the d-th derivative by 2^d
    Phi = [ops[d] * 2.0**d for d in range(5)]
    inner = slice(1, -1)
    k2 = kappa**2
    A = Phi[4][inner] - 2 * k2 * Phi[2][inner] + k2**2 * Phi[0][inner]
    B = k2 * Phi[0][inner] - Phi[2][inner]
    vals, vecs = scipy.linalg.eig(A, B)
    ok = np.isfinite(vals) & (np.abs(vals.imag) <= 1e-8 * np.abs(vals)) & (vals.real > 0)
    order = np.argsort(vals.real[ok])
    vals = vals.real[ok][order]
    vecs = vecs[:, ok][:, order].real
    kept, rejected = [], []
    for lam, q in zip(vals, vecs.T):
        if len(kept) >= count:
            break
        Aq = A @ q
        res = np.linalg.norm(Aq - lam * (B @ q)) / max(np.linalg.norm(Aq), 1e-300)
        # Chebyshev tail of q: spurious / unresolved modes have flat spectra
        qf = np.zeros(n + 1)
        qf[1:-1] = q
        cheb = np.polynomial.chebyshev.chebfit(cheb_points(n), qf, n)
        tail = np.abs(cheb[-4:]).max() / np.abs(cheb).max()
        derivs = np.array([P @ q for P in Phi])
        num = np.sum(w * (derivs[2] - k2 * derivs[0]) ** 2)
        den = np.sum(w * (derivs[1] ** 2 + k2 * derivs[0] ** 2))
        rayleigh = abs(num / den - lam) / lam
        res = max(res, rayleigh)
        prof = ChannelProfile(kx, kappa, float(lam), derivs, float(res))
        if res > tol or tail > 1e-9:
            rejected.append(prof)
        else:
            kept.append(prof)
    return kept, rejected


def build_channel_basis(
    geometry: Geometry, kx_max: int, Ny: int, modes_per_k: int, Nx: int | None = None
) -> StokesBasis:
    """Stokes basis of the periodic channel with no-slip walls.

    ``k = 0`` contributes shear modes ``(U_n(x2), 0)``, ``U_n ~ sin(n pi x2)``;
    each ``k > 0`` contributes cosine/sine modes from the lowest
    ``modes_per_k`` clamped streamfunction eigenpairs. ``Ny`` is the Chebyshev
    degree in ``x2`` (``Ny + 1`` points including both walls).
    """
    if geometry.kind != CHANNEL:
        raise BasisError("build_channel_basis needs a channel geometry")
    if Ny < 16:
        raise BasisError("Ny must be >= 16")
    if kx_max < 0 or modes_per_k < 1:
        raise BasisError("kx_max must be >= 0 and modes_per_k >= 1")
    if Nx is None:
        Nx = max(8, 3 * kx_max + 2)
    if Nx < 3 * kx_max:
        raise BasisError(f"Nx = {Nx} too small for kx_max = {kx_max}; need {3 * kx_max}")
    g = make_grid(geometry, Nx, Ny)
    x2 = g.x2
    Lx = geometry.Lx
    npts = Ny + 1
    nk = kx_max + 1

    residuals = []
    entries = []  # (lam, kx, n, phase, u1 derivs (3, npts), u2 derivs (3, npts), kappa)
    rejected = []
    c0 = np.sqrt(2.0 / Lx)
    for n in range(1, modes_per_k + 1):
        a = n * np.pi
        U = [c0 * np.sin(a * x2), c0 * a * np.cos(a * x2), -c0 * a**2 * np.sin(a * x2)]
        entries.append((a**2, 0, n, 0, np.array(U), np.zeros((3, npts)), 0.0))
    w2 = g.weights[0] / (Lx / Nx)
    for kx in range(1, kx_max + 1):
        kappa = 2 * np.pi * kx / Lx
        kept, rej = channel_profiles(kx, kappa, Ny, modes_per_k)
        rejected.extend(rej)
        if len(kept) < modes_per_k:
            log.warning("kx=%d: only %d of %d modes passed the gates", kx, len(kept), modes_per_k)
        for n, prof in enumerate(kept, start=1):
            d = prof.derivs
            nrm = np.sqrt(0.5 * Lx * np.sum(w2 * (d[1] ** 2 + kappa**2 * d[0] ** 2)))
            d = d / nrm
            if d[0][np.argmax(np.abs(d[0]))] < 0:
                d = -d
            # cos phase: u = (phi' cos, kappa phi sin); sin phase: (phi' sin, -kappa phi cos)
            entries.append((prof.eigenvalue, kx, n, 0, d[1:4], kappa * d[0:3], kappa))
            entries.append((prof.eigenvalue, kx, n, 1, d[1:4], kappa * d[0:3], kappa))
            residuals.append(prof.residual)
    entries.sort(key=lambda e: (e[0], e[1], e[2], e[3]))
    m = len(entries)
    # S[nd2][c, j, kx, z]: rfft coefficient / n1 of d^nd2/dx2^nd2 u_c per unit xi_j
    S = np.zeros((3, 2, m, nk, npts), dtype=complex)
    for j, (lam, kx, n, phase, p1, p2, kappa) in enumerate(entries):
        if kx == 0:
            S[:, 0, j, 0, :] = p1
        elif phase == 0:
            S[:, 0, j, kx, :] = 0.5 * p1
            S[:, 1, j, kx, :] = -0.5j * p2
        else:
            S[:, 0, j, kx, :] = -0.5j * p1
            S[:, 1, j, kx, :] = -0.5 * p2
    kx_of = np.array([e[1] for e in entries])
    Q = S[0] * np.where(kx_of > 0, 2.0, 1.0)[None, :, None, None]
    data = {
        "S": S,
        "Q": Q,
        "mode_kappa": np.array([e[6] for e in entries]),
        "kx": kx_of,
        "solve_residual": np.array(residuals),
    }
    lam = np.array([e[0] for e in entries])
    desc = tuple(
        ("channel", int(e[1]), int(e[2]), "cos" if e[3] == 0 else "sin") for e in entries
    )
    rej = tuple((p.kx, p.eigenvalue, p.residual) for p in rejected)
    return StokesBasis(geometry, g, lam, desc, data, rej)


def build_basis(geometry: Geometry, **params) -> StokesBasis:
    if geometry.kind == TORUS:
        return build_torus_basis(geometry, params["max_wavenumber"], params["grid"])
    return build_channel_basis(
        geometry, params["kx_max"], params["Ny"], params["modes_per_k"], params.get("Nx")
    )


# ---------------------------------------------------------------------------
# verification


def verification_report(basis: StokesBasis, block: int = 128) -> dict:
    """Orthonormality, divergence, eigen-residual and wall values of a basis.

    The eigen-residual is ``max_j |P_m(-lap w_j) - lam_j w_j| / lam_j``; on the
    torus the Laplacian of a mode needs no projection. For the channel the
    relative residual of the collocation eigensolve is folded in as well.
    """
    g = basis.grid
    m = basis.m
    sw = np.sqrt(g.weights)
    gram = np.zeros((m, m))
    div_max = eig_res = wall = 0.0
    torus = basis.geometry.kind == TORUS
    eye = np.eye(m)
    blocks = [(a, min(a + block, m)) for a in range(0, m, block)]
    flats = {}
    for a, b in blocks:
        E = eye[a:b]
        W = basis.synthesize(E)
        flats[a] = (W * sw).reshape(b - a, -1)
        # grid differentiation, independent of the analytic mode derivatives
        div = g.div(np.moveaxis(W, 1, 0))
        div_max = max(div_max, max(g.l2(d) for d in div))
        H = basis.hessian(E)
        mlap = -(H[:, :, 0, 0] + H[:, :, 1, 1])
        lam = basis.eigenvalues[a:b]
        if torus:
            r = mlap - lam[:, None, None, None] * W
            res = [g.l2(ri) / li for ri, li in zip(r, lam)]
        else:
            coeff = basis.project(mlap) - lam[:, None] * E
            res = np.sqrt((coeff**2).sum(axis=1)) / lam
            wall = max(wall, float(np.abs(W[:, :, :, [0, -1]]).max()))
        eig_res = max(eig_res, float(np.max(res)))
    for a, b in blocks:
        for c, d in blocks:
            gram[a:b, c:d] = flats[a] @ flats[c].T
    report = {
        "m": m,
        "orthonormality": float(np.abs(gram - eye).max()),
        "divergence": float(div_max),
        "eigen_residual": eig_res,
        "wall_max": wall,
    }
    if not torus:
        report["solve_residual"] = float(basis.data["solve_residual"].max(initial=0.0))
        report["eigen_residual"] = max(eig_res, report["solve_residual"])
        report["rejected"] = len(basis.rejected)
    return report
