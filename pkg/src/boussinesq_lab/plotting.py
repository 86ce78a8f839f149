"""Static figures of a run's diagnostics time series."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import read_csv  # noqa: E402

log = logging.getLogger(__name__)

PLOT_COLUMNS = [
    "u_l2",
    "grad_u_l2",
    "Au_l2",
    "ut_l2",
    "theta_l2",
    "theta_l3",
    "theta_l4",
    "grad_theta_l2",
    "grad_rho_l2",
    "residual",
    "w1inf",
    "d2u_l3",
    "energy_residual",
]


class PlotError(ValueError):
    pass


def log_rate(t, y) -> float:
    """Least-squares slope of ``log(y^2)`` against ``t`` (the decay rate of a squared norm)."""
    y = np.asarray(y, dtype=float)
    ok = y > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.asarray(t)[ok], 2 * np.log(y[ok]), 1)[0])


def plot_run(run_dir, out_dir=None, fmt: str = "png", columns=None) -> dict:
    """One line plot per diagnostics column; returns ``{column: (path, slope)}``.

    Positive series get a log axis annotated with the fitted rate of
    ``d/dt log(q^2)``. Missing columns are skipped with a warning; an empty
    table raises :class:`PlotError` before any file is written.
    """
    run_dir = Path(run_dir)
    csv_path = run_dir / "diagnostics.csv"
    if not csv_path.exists():
        raise PlotError(f"{csv_path} does not exist")
    cols = read_csv(csv_path)
    if "time" not in cols or len(cols["time"]) == 0:
        raise PlotError(f"{csv_path} has no records")
    out_dir = Path(out_dir) if out_dir else run_dir / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)
    t = cols["time"]
    made = {}
    for c in columns or PLOT_COLUMNS:
        if c not in cols:
            log.warning("column %s missing from %s; skipped", c, csv_path)
            continue
        y = cols[c]
        fig, ax = plt.subplots(figsize=(6, 3.6))
        slope = None
        if np.all(y > 0):
            ax.semilogy(t, y)
            slope = log_rate(t, y)
            ax.text(0.98, 0.95, f"d/dt log q^2 = {slope:.4g}", transform=ax.transAxes,
                    ha="right", va="top", fontsize=8)
        else:
            ax.plot(t, y)
        ax.set_xlabel("t")
        ax.set_ylabel(c)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{c}.{fmt}"
        fig.savefig(path)
        plt.close(fig)
        made[c] = (path, slope)
    return made
