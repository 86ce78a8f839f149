"""Initial-data presets, projected into the discretization.

Each preset returns the velocity coefficients (already Leray-projected and
truncated) and the grid density; :func:`data_report` gives the
``D(A) x H1`` size of the data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import StokesBasis, leray_project
from .geometry import TORUS
from .picard import BoussinesqState


@dataclass
class Scenario:
    name: str
    xi0: np.ndarray
    theta0: np.ndarray
    params: dict

    def state(self) -> BoussinesqState:
        return BoussinesqState(self.xi0.copy(), self.theta0.copy(), 0.0)


def _center(basis):
    g = basis.geometry
    return 0.5 * g.Lx, 0.5 * g.Ly


def _gaussian(basis, amplitude, sigma, center=None):
    if sigma is None:
        sigma = 0.8 if basis.geometry.kind == TORUS else 0.15
    x1, x2 = basis.grid.mesh
    c1, c2 = center if center is not None else _center(basis)
    return amplitude * np.exp(-((x1 - c1) ** 2 + (x2 - c2) ** 2) / (2 * sigma**2))


def _shear(basis, amplitude):
    x1, x2 = basis.grid.mesh
    g = basis.geometry
    if g.kind == TORUS:
        prof = np.sin(2 * np.pi * x2 / g.Ly)
    else:
        prof = np.sin(np.pi * x2) ** 2
    return np.stack([amplitude * prof, np.zeros_like(prof)])


def zero(basis, **_):
    return np.zeros(basis.m), np.zeros(basis.grid.shape)


def blob(basis, amplitude=1.0, sigma=None, center=None, **_):
    """Gaussian density bump, fluid at rest (default width 0.8 on the torus, 0.15 in the channel)."""
    return np.zeros(basis.m), _gaussian(basis, amplitude, sigma, center)


def calibration(basis, amplitude=0.1, sigma=None, **kw):
    """Small blob used to calibrate contraction and audit constants."""
    return blob(basis, amplitude, sigma, **kw)


def shear_blob(basis, amplitude=1.0, sigma=None, shear=0.5, **_):
    """Projected shear flow plus a density bump."""
    return leray_project(_shear(basis, shear), basis), _gaussian(basis, amplitude, sigma)


def stratified_perturbation(basis, delta=0.1, **_):
    """``theta0 = delta cos(x1) cos(x2)`` style perturbation of the stratification."""
    x1, x2 = basis.grid.mesh
    g = basis.geometry
    if g.kind == TORUS:
        th = delta * np.cos(2 * np.pi * x1 / g.Lx) * np.cos(2 * np.pi * x2 / g.Ly)
    else:
        th = delta * np.cos(2 * np.pi * x1 / g.Lx) * np.cos(np.pi * x2)
    return np.zeros(basis.m), th


def single_mode(basis, mode=0, epsilon=0.1, **_):
    """``u0 = epsilon w_mode``, ``theta0 = 0``."""
    xi = np.zeros(basis.m)
    xi[int(mode)] = epsilon
    return xi, np.zeros(basis.grid.shape)


def random_modes(basis, seed=0, amplitude=0.1, modes=20, **_):
    """Random low-mode velocity and density with a decaying spectrum."""
    rng = np.random.default_rng(seed)
    n = min(int(modes), basis.m)
    xi = np.zeros(basis.m)
    xi[:n] = amplitude * rng.standard_normal(n) / (1 + basis.eigenvalues[:n])
    coef = amplitude * rng.standard_normal(n) / (1 + basis.eigenvalues[:n])
    w = basis.synthesize(np.concatenate([coef, np.zeros(basis.m - n)]))
    # a smooth scalar built from mode components
    return xi, w[0] + w[1]


PRESETS = {
    "zero": zero,
    "blob": blob,
    "calibration": calibration,
    "shear-blob": shear_blob,
    "stratified-perturbation": stratified_perturbation,
    "single-mode": single_mode,
    "random-modes": random_modes,
}


def make_scenario(name: str, basis: StokesBasis, params: dict | None = None, seed: int = 0) -> Scenario:
    if name not in PRESETS:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(PRESETS)}")
    params = dict(params or {})
    if name == "random-modes":
        params.setdefault("seed", seed)
    xi0, th0 = PRESETS[name](basis, **params)
    return Scenario(name, np.asarray(xi0, dtype=float), np.asarray(th0, dtype=float), params)


def data_report(scenario: Scenario, basis: StokesBasis) -> dict:
    """Initial-data sizes ``|u0|_{D(A)}``, ``|theta0|_{H1}`` and the divergence of ``u0``."""
    lam = basis.eigenvalues
    g = basis.grid
    xi = scenario.xi0
    th = scenario.theta0
    u = basis.synthesize(xi)
    return {
        "u0_DA": float(np.sqrt(np.sum((1 + lam**2) * xi**2))),
        "theta0_H1": float(np.sqrt(g.l2(th) ** 2 + g.l2(g.grad(th)) ** 2)),
        "u0_div": float(g.l2(g.div(u))),
        "K0": float(np.sqrt(np.sum((1 + lam + lam**2) * xi**2) + g.l2(th) ** 2 + g.l2(g.grad(th)) ** 2)),
    }
