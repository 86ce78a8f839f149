"""Norms, inequality audits and long-time verdicts.

Everything downstream of :func:`record` works on plain column arrays, so a
stored diagnostics CSV can be re-audited without the solver.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.fft as sfft

from .basis import StokesBasis
from .linear_solver import AdvectionOperator, assemble_buoyancy

N_PROBE = 10
FLOOR = 1e-14

COLUMNS = [
    "time",
    "u_l2",
    "grad_u_l2",
    "Au_l2",
    "ut_l2",
    "theta_l2",
    "theta_l3",
    "theta_l4",
    "grad_theta_l2",
    "grad_rho_l2",
    "rho_h1",
    "residual",
    "buoyancy_tail",
    "w1inf",
    "d2u_l3",
    "energy_residual",
    "u_l4",
    "u_inf",
    "grad_u_l4",
    "theta_t_l2",
    "utt_dual_lb",
] + [f"eta_{j}" for j in range(1, N_PROBE + 1)]


@dataclass
class DiagnosticsRecord:
    """All monitored norms at one instant; see :data:`COLUMNS` for the order."""

    time: float
    u_l2: float
    grad_u_l2: float
    Au_l2: float
    ut_l2: float
    theta_l2: float
    theta_l3: float
    theta_l4: float
    grad_theta_l2: float
    grad_rho_l2: float
    rho_h1: float
    residual: float  # |A u - P_m P(theta e2)|, Galerkin part
    buoyancy_tail: float  # |P(theta e2) - P_m P(theta e2)|, nan when not computable
    w1inf: float  # max |grad u|
    d2u_l3: float  # proxy for |A_3 u|_{L3}
    energy_residual: float  # d/dt (|u|^2 + |theta|^2)/2 + |grad u|^2
    u_l4: float
    u_inf: float
    grad_u_l4: float
    theta_t_l2: float
    utt_dual_lb: float = 0.0
    eta: np.ndarray = field(default_factory=lambda: np.zeros(N_PROBE))

    def row(self) -> list[float]:
        d = asdict(self)
        eta = d.pop("eta")
        vals = [d[c] for c in COLUMNS if not c.startswith("eta_")]
        return vals + [float(x) for x in np.resize(np.asarray(eta, dtype=float), N_PROBE)]


def projected_buoyancy(theta, basis: StokesBasis) -> np.ndarray:
    """Coefficients of ``P_m P(theta e2)``."""
    return assemble_buoyancy(theta, basis)


def projected_density_buoyancy(theta, basis: StokesBasis) -> np.ndarray:
    """Coefficients of ``P_m P(rho e2)`` with ``rho = theta + x2``.

    ``x2 e2`` is the gradient of ``x2^2 / 2`` and is annihilated by the Leray
    projector, so this is the same computation as :func:`projected_buoyancy`.
    """
    return projected_buoyancy(theta, basis)


def leray_tail(theta, basis: StokesBasis) -> float:
    """``|P(theta e2) - P_m P(theta e2)|`` on the torus (exact Leray projector by FFT)."""
    if basis.geometry.kind != "torus":
        return float("nan")
    g = basis.grid
    n1, n2 = g.shape
    F = sfft.rfft2(theta)
    k1 = g.k1[:, None]
    k2 = g.k2[None, :]
    k2sq = k1**2 + k2**2
    with np.errstate(invalid="ignore", divide="ignore"):
        # P(0, f) in Fourier: f (-k1 k2, k1^2) / |k|^2
        c1 = np.where(k2sq > 0, -k1 * k2 / k2sq, 0.0) * F
        c2 = np.where(k2sq > 0, k1**2 / k2sq, 0.0) * F
    full = np.stack([sfft.irfft2(c1, s=(n1, n2)), sfft.irfft2(c2, s=(n1, n2))])
    eta = projected_buoyancy(theta, basis)
    tail2 = g.l2(full) ** 2 - float(np.sum(eta**2))
    return float(np.sqrt(max(tail2, 0.0)))


def _frob(a, lead):
    return np.sqrt((a**2).reshape((-1,) + a.shape[lead:]).sum(axis=0))


def nonlinear_rates(xi, theta, basis: StokesBasis):
    """``(xi', theta_t)`` of the nonlinear Galerkin / transport system."""
    lam = basis.eigenvalues
    u = basis.synthesize(xi)
    eta = projected_buoyancy(theta, basis)
    xidot = eta - lam * xi - AdvectionOperator(basis, u).matvec(xi)
    gt = basis.grid.grad(theta)
    theta_t = -(u[0] * gt[0] + u[1] * gt[1]) - u[1]
    return xidot, theta_t


def record(state, state_dot, basis: StokesBasis) -> DiagnosticsRecord:
    """Diagnostics of ``state`` (a :class:`~.picard.BoussinesqState`).

    ``state_dot`` is ``(xi', theta_t)``; either entry may be ``None`` and is
    then evaluated from the nonlinear equations. ``theta_t`` may also be left
    out by passing only ``xi'``.
    """
    g = basis.grid
    lam = basis.eigenvalues
    xi = np.asarray(state.xi, dtype=float)
    theta = np.asarray(state.theta, dtype=float)
    u = basis.synthesize(xi)
    J = basis.gradient(xi)
    H = basis.hessian(xi)
    xidot = theta_t = None
    if state_dot is not None:
        if isinstance(state_dot, tuple):
            xidot, theta_t = state_dot
        else:
            xidot = state_dot
    if xidot is None or theta_t is None:
        nx, nt = nonlinear_rates(xi, theta, basis)
        xidot = nx if xidot is None else xidot
        theta_t = nt if theta_t is None else theta_t
    eta = projected_buoyancy(theta, basis)
    gt = g.grad(theta)
    grad_rho = gt.copy()
    grad_rho[1] += 1.0
    jf = _frob(J, -2)
    hf = _frob(H, -2)
    theta_l2 = g.l2(theta)
    grad_rho_l2 = g.l2(grad_rho)
    if basis.geometry.kind == "torus":
        rho_h1 = math.sqrt(theta_l2**2 + grad_rho_l2**2)
    else:
        rho = theta + g.mesh[1]
        rho_h1 = math.sqrt(g.l2(rho) ** 2 + grad_rho_l2**2)
    energy_res = float(xi @ xidot) + g.inner(theta, theta_t) + float(np.sum(lam * xi**2))
    return DiagnosticsRecord(
        time=float(state.time),
        u_l2=float(np.sqrt(np.sum(xi**2))),
        grad_u_l2=float(np.sqrt(np.sum(lam * xi**2))),
        Au_l2=float(np.sqrt(np.sum(lam**2 * xi**2))),
        ut_l2=float(np.sqrt(np.sum(np.asarray(xidot) ** 2))),
        theta_l2=theta_l2,
        theta_l3=g.lp(theta, 3),
        theta_l4=g.lp(theta, 4),
        grad_theta_l2=g.l2(gt),
        grad_rho_l2=grad_rho_l2,
        rho_h1=rho_h1,
        residual=float(np.sqrt(np.sum((lam * xi - eta) ** 2))),
        buoyancy_tail=leray_tail(theta, basis),
        w1inf=float(jf.max(initial=0.0)),
        d2u_l3=g.lp(hf, 3),
        energy_residual=energy_res,
        u_l4=g.lp(u, 4),
        u_inf=g.lp(u, np.inf),
        grad_u_l4=g.lp(jf, 4),
        theta_t_l2=g.l2(theta_t),
        eta=eta[:N_PROBE].copy(),
    )


class Recorder:
    """Streams records, filling the ``u_tt`` dual-norm surrogate by differencing ``xi'``.

    The surrogate is ``max_{j<=J} |(u_tt, w_j)| / sqrt(lam_j)``, a lower bound
    for ``|u_tt|_{V'}``. Rows are released one record late (the first row
    uses a forward difference).
    """

    def __init__(self, basis: StokesBasis, emit=None, J: int = 32):
        self.basis = basis
        self.emit = emit
        self.J = min(J, basis.m)
        self.rows: list[DiagnosticsRecord] = []
        self._pending = None  # (record, xidot)

    def _dual(self, xd0, xd1, dt):
        if dt <= 0:
            return 0.0
        lam = self.basis.eigenvalues[: self.J]
        return float(np.max(np.abs(xd1[: self.J] - xd0[: self.J]) / dt / np.sqrt(lam)))

    def __call__(self, state, state_dot):
        rec = record(state, state_dot, self.basis)
        xd = np.asarray(state_dot[0] if isinstance(state_dot, tuple) else state_dot)
        if self._pending is not None:
            prev, pxd = self._pending
            val = self._dual(pxd, xd, rec.time - prev.time)
            rec.utt_dual_lb = val
            if not self.rows:
                prev.utt_dual_lb = val
            self._release(prev)
        self._pending = (rec, xd)
        return rec

    def _release(self, rec):
        self.rows.append(rec)
        if self.emit is not None:
            self.emit(rec)

    def close(self):
        if self._pending is not None:
            self._release(self._pending[0])
            self._pending = None
        return self.rows


def columns_from_records(records) -> dict:
    rows = np.array([r.row() for r in records], dtype=float).reshape(-1, len(COLUMNS))
    return {c: rows[:, i] for i, c in enumerate(COLUMNS)}


# -- energy ---------------------------------------------------------------------


def energy_balance_audit(times, u_l2, theta_l2, grad_u_l2) -> dict:
    """Residual of ``(1/2) d/dt (|u|^2 + |theta|^2) + |grad u|^2 = 0`` between samples.

    ``r_k = (E_{k+1} - E_k) / dt + (|grad u_k|^2 + |grad u_{k+1}|^2) / 2`` with
    ``E = (|u|^2 + |theta|^2) / 2``; ``normalized = r / E(0)``.
    """
    t = np.asarray(times, dtype=float)
    if len(t) < 2:
        return {"times": t[:0], "raw": np.zeros(0), "normalized": np.zeros(0), "max_normalized": 0.0}
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        raise ValueError("energy audit needs a uniform time grid")
    E = 0.5 * (np.asarray(u_l2) ** 2 + np.asarray(theta_l2) ** 2)
    G = np.asarray(grad_u_l2) ** 2
    r = np.diff(E) / dt + 0.5 * (G[1:] + G[:-1])
    E0 = E[0]
    norm = r / E0 if E0 > 0 else np.where(r == 0, 0.0, np.inf)
    return {
        "times": 0.5 * (t[1:] + t[:-1]),
        "raw": r,
        "normalized": norm,
        "max_normalized": float(np.abs(norm).max(initial=0.0)),
        "energy": E,
    }


# -- verdicts -------------------------------------------------------------------


@dataclass
class AsymptoticVerdict:
    quantity: str
    tail: tuple
    statistic: float
    threshold: float
    status: str  # "pass" | "fail" | "inconclusive"
    constants: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def as_dict(self) -> dict:
        return {
            "quantity": self.quantity,
            "tail": list(self.tail),
            "statistic": self.statistic,
            "threshold": self.threshold,
            "status": self.status,
            "constants": self.constants,
        }


@dataclass(frozen=True)
class AsymptoticThresholds:
    decay_frac: float = 0.05
    residual_frac: float = 0.10
    au_slope: float = 0.0
    eps_max: float = 0.05
    probe_frac: float = 0.05
    probe_null: float = 1e-10
    min_tail_samples: int = 8


def tail_slice(times, tail_fraction: float):
    t = np.asarray(times, dtype=float)
    if len(t) == 0:
        return slice(0, 0)
    t_cut = t[0] + (1 - tail_fraction) * (t[-1] - t[0])
    return slice(int(np.searchsorted(t, t_cut, side="left")), len(t))


def log_slope(t, y) -> float:
    """Least-squares slope of ``log(max(y, FLOOR))`` against ``t``."""
    ly = np.log(np.maximum(np.asarray(y, dtype=float), FLOOR))
    t = np.asarray(t, dtype=float)
    if len(t) < 2:
        return float("nan")
    return float(np.polyfit(t - t.mean(), ly, 1)[0])


def asymptotic_report(columns: dict, tail_fraction: float = 0.25,
                      thresholds: AsymptoticThresholds = AsymptoticThresholds()) -> list[AsymptoticVerdict]:
    """Long-time verdicts from a diagnostics time series.

    ``columns`` maps CSV column names to arrays. Ratios compare the maximum
    over the tail window with the maximum over the whole run.
    """
    t = np.asarray(columns["time"], dtype=float)
    sl = tail_slice(t, tail_fraction)
    tt = t[sl]
    window = (float(tt[0]), float(tt[-1])) if len(tt) else (float("nan"), float("nan"))
    short = len(tt) < thresholds.min_tail_samples
    out = []

    def frac_verdict(name, col, thr):
        y = np.abs(np.asarray(columns[col], dtype=float))
        peak = float(y.max(initial=0.0))
        tail = float(y[sl].max(initial=0.0))
        stat = tail / peak if peak > 0 else 0.0
        status = "inconclusive" if short else ("pass" if stat <= thr else "fail")
        return AsymptoticVerdict(name, window, stat, thr, status, {"max": peak, "tail_max": tail})

    out.append(frac_verdict("grad_u_decay", "grad_u_l2", thresholds.decay_frac))
    out.append(frac_verdict("stokes_residual_decay", "residual", thresholds.residual_frac))

    au = np.asarray(columns["Au_l2"], dtype=float)
    s = log_slope(tt, au[sl]) if not short else float("nan")
    finite = bool(np.all(np.isfinite(au)))
    status = "inconclusive" if short else ("pass" if finite and s <= thresholds.au_slope else "fail")
    out.append(AsymptoticVerdict("Au_bounded", window, s, thresholds.au_slope, status,
                                 {"sup": float(au.max(initial=0.0))}))

    gr = np.asarray(columns["grad_rho_l2"], dtype=float)
    s = log_slope(tt, gr[sl]) if not short else float("nan")
    status = "inconclusive" if short else ("pass" if s <= thresholds.eps_max else "fail")
    out.append(AsymptoticVerdict("grad_rho_subexponential", window, s, thresholds.eps_max, status,
                                 {"sup": float(gr.max(initial=0.0))}))

    probes = sorted((c for c in columns if c.startswith("eta_")), key=lambda c: int(c[4:]))
    peaks = {c: float(np.abs(np.asarray(columns[c], dtype=float)).max(initial=0.0)) for c in probes}
    # probes at roundoff level (symmetry zeros) carry no signal; their ratio is noise
    floor = thresholds.probe_null * max(peaks.values(), default=0.0)
    worst = 0.0
    per = {}
    for c in probes:
        y = np.abs(np.asarray(columns[c], dtype=float))
        peak = peaks[c]
        r = float(y[sl].max(initial=0.0)) / peak if peak > floor else 0.0
        per[c] = r
        worst = max(worst, r)
    status = "inconclusive" if short or not probes else ("pass" if worst <= thresholds.probe_frac else "fail")
    out.append(AsymptoticVerdict("weak_convergence_probe", window, worst, thresholds.probe_frac, status, per))
    return out


# -- decay lemma ----------------------------------------------------------------------


@dataclass
class LemmaVerdict:
    variant: str
    hypotheses: bool
    conclusion: bool
    details: dict

    @property
    def summary(self) -> str:
        if not self.hypotheses:
            return "hypothesis failure"
        return "conclusion holds" if self.conclusion else "counterexample"


def _uniform(t):
    t = np.asarray(t, dtype=float)
    if len(t) < 3:
        raise ValueError("need at least three samples")
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        raise ValueError("decay checks need a uniform time grid")
    return t, float(dt[0])


def integrable_trend(t, y, tail_fraction=0.25, max_tail_share=0.10) -> tuple[bool, dict]:
    """Heuristic ``y in L1``: the last ``tail_fraction`` of the run adds at most
    ``max_tail_share`` of the total integral."""
    y = np.asarray(y, dtype=float)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))])
    total = cum[-1]
    k = tail_slice(t, tail_fraction).start
    inc = total - cum[k]
    share = inc / total if total > 0 else 0.0
    return bool(share <= max_tail_share), {"integral": float(total), "tail_share": float(share)}


def decay_lemma_check(t, f, g=None, h=None, variant: str = "i", tail_fraction: float = 0.25,
                      conclusion_frac: float = 0.05) -> LemmaVerdict:
    """Check the hypotheses and the conclusion ``f -> 0`` of the decay lemma.

    * ``i``: ``f >= 0``, ``f in L1`` and ``f'`` bounded.
    * ``ii``: ``f, g >= 0``, ``g in L1``, ``f' + g <= C (f^2 + 1)`` and ``f <= C g``.
    * ``iii``: ``f' + g <= h (f + 1)``, ``f <= C g``, ``f(0) <= C``, ``h`` bounded, ``h -> 0``.

    Integrability is the :func:`integrable_trend` heuristic; the conclusion is
    that the tail maximum of ``f`` is at most ``conclusion_frac`` of its peak.
    Fitted constants are reported in ``details``.
    """
    t, dt = _uniform(t)
    f = np.asarray(f, dtype=float)
    fp = np.gradient(f, dt, edge_order=2)
    sl = tail_slice(t, tail_fraction)
    d: dict = {}
    peak = float(np.abs(f).max(initial=0.0))
    tail = float(np.abs(f[sl]).max(initial=0.0))
    conclusion = tail <= conclusion_frac * peak if peak > 0 else True
    d["tail_ratio"] = tail / peak if peak > 0 else 0.0
    if variant == "i":
        nonneg = bool(np.all(f >= 0))
        ok_int, info = integrable_trend(t, f, tail_fraction)
        d.update(info, fprime_sup=float(np.abs(fp).max()), nonnegative=nonneg)
        hyp = nonneg and ok_int and np.isfinite(d["fprime_sup"])
    elif variant == "ii":
        if g is None:
            raise ValueError("variant ii needs g")
        g = np.asarray(g, dtype=float)
        nonneg = bool(np.all(f >= 0) and np.all(g >= 0))
        ok_int, info = integrable_trend(t, g, tail_fraction)
        C1 = float(np.max((fp + g) / (f**2 + 1)))
        C1 = max(C1, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(f > 0, f / g, 0.0)
        C2 = float(np.max(q))
        d.update(info, nonnegative=nonneg, C_growth=C1, C_domination=C2)
        hyp = nonneg and ok_int and np.isfinite(C1) and np.isfinite(C2)
    elif variant == "iii":
        if g is None or h is None:
            raise ValueError("variant iii needs g and h")
        g = np.asarray(g, dtype=float)
        h = np.asarray(h, dtype=float)
        slack = 1e-3 * float(np.max(np.abs(fp) + np.abs(g)))
        viol = float(np.max(fp + g - h * (f + 1)))
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(f > 0, f / g, 0.0)
        C = max(float(np.max(q)), float(f[0]))
        hpeak = float(np.abs(h).max(initial=0.0))
        htail = float(np.abs(h[sl]).max(initial=0.0))
        h_to_0 = htail <= conclusion_frac * hpeak if hpeak > 0 else True
        d.update(violation=viol, slack=slack, C=C, h_sup=hpeak, h_tail_ratio=htail / hpeak if hpeak else 0.0)
        hyp = viol <= slack and np.isfinite(C) and np.isfinite(hpeak) and h_to_0
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return LemmaVerdict(variant, bool(hyp), bool(conclusion), d)


# -- inequality audit ----------------------------------------------------------------


def _ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den > 0, num / den, np.where(num > 0, np.inf, np.nan))
    return float(np.nanmax(r)) if np.any(np.isfinite(r) | np.isinf(r)) else float("nan")


def _cum(t, y):
    out = np.zeros_like(y, dtype=float)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))
    return out


def fit_exponent(lhs, base, S, rtol: float = 1e-10) -> float:
    """Smallest ``C >= 0`` with ``lhs <= base exp(C S)`` at every sample."""
    C = 0.0
    for a, b, s in zip(lhs, base, S):
        if a <= b * (1 + rtol) + 1e-300:
            continue
        if s <= 0 or b <= 0:
            return float("inf")
        C = max(C, math.log(a / b) / s)
    return C


def inequality_audit(columns: dict) -> dict:
    """Empirical constants (max of LHS / RHS over the run) for the audited inequalities.

    * ``sobolev_w23``: ``max|grad u| <= C (|grad u| + |D^2 u|_{L3})``
    * ``ladyzhenskaya``: ``|u|_{L4} <= C |u|^{1/2} |grad u|^{1/2}``
    * ``ladyzhenskaya_grad``: ``|grad u|_{L4} <= C |grad u|^{1/2} |Au|^{1/2}``
    * ``agmon``: ``|u|_inf <= C |u|^{1/2} |Au|^{1/2}``
    * ``l3w23``: ``|D^2 u|_{L3} <= C |Au|^{2/3} |grad u|^{1/3}`` (interpolation of L3 between L2 and L6)
    * ``gronwall``: exponent ``C`` with ``|grad u(t)|^2 <= (|grad u0|^2 + int |theta|^2) exp(C int |u|^2 |grad u|^2)``
    * ``theta_growth``: exponent ``C`` with ``|grad theta(t)| <= (|theta0|_{H1} + int |u|_{H1}) exp(C int |u|_{W1inf})``
    * ``theta_t``: ``|theta_t| <= C (|u| + |u|_inf |grad theta|)``
    """
    c = {k: np.asarray(v, dtype=float) for k, v in columns.items()}
    t = c["time"]
    u, gu, au = c["u_l2"], c["grad_u_l2"], c["Au_l2"]
    out = {
        "sobolev_w23": _ratio(c["w1inf"], gu + c["d2u_l3"]),
        "ladyzhenskaya": _ratio(c["u_l4"], np.sqrt(u * gu)),
        "ladyzhenskaya_grad": _ratio(c["grad_u_l4"], np.sqrt(gu * au)),
        "agmon": _ratio(c["u_inf"], np.sqrt(u * au)),
        "l3w23": _ratio(c["d2u_l3"], au ** (2 / 3) * gu ** (1 / 3)),
        "theta_t": _ratio(c["theta_t_l2"], u + c["u_inf"] * c["grad_theta_l2"]),
    }
    base = gu[0] ** 2 + _cum(t, c["theta_l2"] ** 2)
    out["gronwall"] = fit_exponent(gu**2, base, _cum(t, u**2 * gu**2))
    h1_0 = math.sqrt(c["theta_l2"][0] ** 2 + c["grad_theta_l2"][0] ** 2)
    base = h1_0 + _cum(t, np.sqrt(u**2 + gu**2))
    out["theta_growth"] = fit_exponent(c["grad_theta_l2"], base, _cum(t, c["u_inf"] + c["w1inf"]))
    return out
