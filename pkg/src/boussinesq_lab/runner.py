"""Batch drivers behind the command line: runs, contraction studies, sweeps, audits."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .basis import verification_report
from .config import SimConfig
from .diagnostics import (
    COLUMNS,
    Recorder,
    asymptotic_report,
    energy_balance_audit,
    inequality_audit,
)
from .io import CsvStream, load_checkpoint, read_csv, save_checkpoint, write_json, write_table
from .picard import BoussinesqState, NonconvergenceError, solve_boussinesq, solve_window
from .scenarios import data_report, make_scenario
from .transport import rotation_benchmark

log = logging.getLogger(__name__)

ENERGY_TOL = 1e-4


@dataclass
class RunSummary:
    run_dir: Path
    status: str
    config_hash: str
    verdicts: list = field(default_factory=list)
    audit: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def prepare(config: SimConfig):
    basis = config.build_basis()
    scen = make_scenario(config.scenario.name, basis, config.scenario.params, config.seed)
    return basis, scen


def audit_columns(cols: dict, tail_fraction: float = 0.25) -> dict:
    """Energy, inequality and asymptotic audits of a diagnostics table."""
    n = len(cols["time"])
    out: dict = {"samples": n}
    if n >= 2:
        e = energy_balance_audit(cols["time"], cols["u_l2"], cols["theta_l2"], cols["grad_u_l2"])
        out["energy"] = {"max_normalized": e["max_normalized"], "tolerance": ENERGY_TOL,
                         "pass": bool(e["max_normalized"] <= ENERGY_TOL)}
        out["inequalities"] = inequality_audit(cols)
    verdicts = asymptotic_report(cols, tail_fraction) if n else []
    out["verdicts"] = [v.as_dict() for v in verdicts]
    return out


def audit_breached(audit: dict) -> bool:
    if audit.get("energy") and not audit["energy"]["pass"]:
        return True
    return any(v["status"] == "fail" for v in audit.get("verdicts", []))


def run(config: SimConfig, run_dir, restart: str | Path | None = None) -> RunSummary:
    """Execute :func:`solve_boussinesq` and write the run directory.

    Contents: ``config.json``, ``diagnostics.csv``, ``picard.csv``,
    ``verdicts.json``, ``run.json`` and ``checkpoints/`` (when enabled). On
    nonconvergence everything produced so far is kept and ``status`` is
    ``"nonconvergence"``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    h = config.content_hash()
    (run_dir / "config.json").write_text(config.to_json() + "\n")
    basis, scen = prepare(config)
    state0 = scen.state()
    T0_steps = None
    if restart is not None:
        state0, meta = load_checkpoint(restart, h)
        T0_steps = meta["T0_steps"]
    horizon = config.T - state0.time
    ck_dir = run_dir / "checkpoints"
    if config.checkpoint_every:
        ck_dir.mkdir(exist_ok=True)
    windows = [0]

    def on_window(state, report, steps):
        windows[0] += 1
        if config.checkpoint_every and windows[0] % config.checkpoint_every == 0:
            idx = int(round(state.time / config.picard.dt))
            save_checkpoint(ck_dir / f"ckpt_{idx:09d}.npz", state, h, steps)

    status, error = "ok", None
    reports = []
    with CsvStream(run_dir / "diagnostics.csv", COLUMNS) as csv_out:
        rec = Recorder(basis, emit=csv_out.write_record)

        def sink(t, xi, xd, th):
            rec(BoussinesqState(xi, th, t), (xd, None))

        try:
            if horizon > 1e-12:
                res = solve_boussinesq(basis, state0, horizon, config.picard, config.record_every,
                                       sink=sink, on_window=on_window, T0_steps=T0_steps)
                reports = res.reports
        except NonconvergenceError as exc:
            status, error = "nonconvergence", str(exc)
            if exc.partial is not None:
                reports = exc.partial.reports
            if exc.report is not None:
                reports = list(reports) + [exc.report]
        rows = rec.close()
    prow = []
    for r in reports:
        prow.extend(r.as_rows())
    write_table(run_dir / "picard.csv", prow,
                ["t_start", "T0", "n", "grad_U", "theta", "AU", "composite", "ratio"])
    cols = read_csv(run_dir / "diagnostics.csv")
    audit = audit_columns(cols, config.tail_fraction) if rows else {"samples": 0, "verdicts": []}
    audit["initial_data"] = data_report(scen, basis)
    audit["picard"] = {
        "windows": len(reports),
        "max_ratio": max((r.max_ratio for r in reports), default=0.0),
        "final_T0": reports[-1].T0 if reports else None,
        "bisections": sum(r.bisections for r in reports),
    }
    write_json(run_dir / "verdicts.json", audit)
    write_json(run_dir / "run.json", {"status": status, "error": error, "config_hash": h,
                                      "version": __version__})
    return RunSummary(run_dir, status, h, audit.get("verdicts", []), audit, error)


def verify(run_dir, tail_fraction: float | None = None) -> dict:
    """Re-run the audit suite on a stored diagnostics CSV."""
    run_dir = Path(run_dir)
    cols = read_csv(run_dir / "diagnostics.csv")
    if tail_fraction is None:
        cfg_path = run_dir / "config.json"
        tail_fraction = SimConfig.load(cfg_path).tail_fraction if cfg_path.exists() else 0.25
    audit = audit_columns(cols, tail_fraction) if len(cols["time"]) else {"samples": 0, "verdicts": []}
    write_json(run_dir / "verify.json", audit)
    return audit


def basis_report(config: SimConfig) -> dict:
    basis = config.build_basis()
    rep = verification_report(basis)
    rep = {k: v for k, v in rep.items() if np.isscalar(v) or isinstance(v, (list, tuple))}
    rep["m"] = basis.m
    rep["lambda_min"] = float(basis.eigenvalues[0])
    rep["lambda_max"] = float(basis.eigenvalues[-1])
    return rep


def contraction_study(config: SimConfig, T0_values) -> list[dict]:
    """Picard ratios on the first window for each ``T0`` (no bisection)."""
    basis, scen = prepare(config)
    rows = []
    for T0 in T0_values:
        st = config.picard
        settings = type(st)(**{**st.__dict__, "T0_max": float(T0), "max_bisections": 0})
        try:
            _, rep = solve_window(basis, scen.state(), settings)
            ok = True
        except NonconvergenceError as exc:
            rep, ok = exc.report, False
        for r in rep.as_rows():
            rows.append({**r, "T0_requested": float(T0), "converged": ok})
    return rows


def max_ratio_table(rows: list[dict]) -> list[dict]:
    out = {}
    for r in rows:
        if r["ratio"] == "":
            continue
        key = r["T0_requested"]
        out[key] = max(out.get(key, 0.0), float(r["ratio"]))
    return [{"T0": k, "max_ratio": v} for k, v in out.items()]


def expand_grid(grid: dict) -> list[dict]:
    if not grid:
        return []
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(config: SimConfig, grid: dict, study: str = "picard", out_dir=None) -> dict:
    """Independent solves over a parameter grid, aggregated into one table.

    ``study`` is ``picard`` (first-window contraction), ``run`` (full runs with
    verdict summaries) or ``rotation`` (transport benchmark; grid keys ``N``,
    ``interpolation``, ``dt``). Failures are recorded and the sweep goes on.
    """
    points = expand_grid(grid)
    rows = []
    for i, pt in enumerate(points):
        row = dict(pt)
        try:
            if study == "rotation":
                row.update(rotation_benchmark(**{k: v for k, v in pt.items()}))
            elif study == "picard":
                cfg = config.replace(**pt)
                tab = contraction_study(cfg, [cfg.picard.T0_max])
                row["max_ratio"] = max((float(r["ratio"]) for r in tab if r["ratio"] != ""), default=0.0)
                row["iterations"] = sum(1 for r in tab)
                row["converged"] = all(r["converged"] for r in tab)
            elif study == "run":
                cfg = config.replace(**pt)
                sub = Path(out_dir or "sweep") / f"point_{i:03d}"
                s = run(cfg, sub)
                row["status"] = s.status
                row["verdicts_failed"] = sum(v["status"] == "fail" for v in s.verdicts)
            else:
                raise ValueError(f"unknown study {study!r}")
            row["error"] = ""
        except Exception as exc:  # a failed point must not stop the sweep
            log.warning("sweep point %s failed: %s", pt, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    report = {"study": study, "rows": rows}
    if study == "rotation":
        report["orders"] = observed_orders(rows)
    if study == "picard" and rows:
        ratios = [r.get("max_ratio") for r in rows if r.get("error") == ""]
        report["monotone_nonincreasing"] = bool(all(a >= b - 1e-15 for a, b in zip(ratios, ratios[1:])))
    return report


def observed_orders(rows: list[dict]) -> list[float]:
    """``log2`` error ratios between consecutive resolutions (rows sorted by ``N``)."""
    good = sorted((r for r in rows if r.get("error") == "" and "linf" in r), key=lambda r: r["N"])
    vals = [(r["N"], r["linf"]) for r in good]
    return [float(np.log(a[1] / b[1]) / np.log(b[0] / a[0])) for a, b in zip(vals, vals[1:])]
