"""Command line entry point: ``boussinesq-lab <subcommand> ...``.

Exit status: 0 on success, 1 on solver failure (or an audit breach under
``--strict``), 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import scipy.fft

from .config import ConfigError, SimConfig
from .io import OUT_ENV, default_out_root, write_json, write_table
from .plotting import PlotError, plot_run
from . import runner

log = logging.getLogger("boussinesq_lab")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> SimConfig:
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = _parse_value(v)
    if getattr(args, "T", None) is not None:
        overrides["T"] = args.T
    if args.threads is not None:
        overrides["threads"] = args.threads
    return cfg.replace(**overrides) if overrides else cfg


def out_dir(args, cfg: SimConfig, kind: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return default_out_root() / f"{kind}-{cfg.content_hash()[:12]}"


def cmd_basis(args):
    cfg = load_config(args)
    rep = runner.basis_report(cfg)
    print(json.dumps(rep, indent=2, sort_keys=True, default=float))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_json(Path(args.out) / "basis.json", rep)
    if args.strict:
        torus = cfg.geometry.kind == "torus"
        lim = 1e-12 if torus else 1e-6
        if rep["orthonormality"] > (1e-12 if torus else 1e-8) or rep["eigen_residual"] > lim:
            return 1
    return 0


def _print_verdicts(verdicts):
    for v in verdicts:
        print(f"{v['status']:>12}  {v['quantity']:<26} statistic={v['statistic']:.4g} threshold={v['threshold']:.4g}")


def cmd_run(args, kind="run"):
    cfg = load_config(args)
    d = out_dir(args, cfg, kind)
    s = runner.run(cfg, d, restart=args.restart)
    print(f"{s.status}: {d} (config {s.config_hash[:12]})")
    _print_verdicts(s.verdicts)
    if not s.ok:
        print(s.error, file=sys.stderr)
        return 1
    if args.strict and runner.audit_breached(s.audit):
        return 1
    return 0


def cmd_asymptotics(args):
    return cmd_run(args, "asymptotics")


def cmd_picard(args):
    cfg = load_config(args)
    d = out_dir(args, cfg, "picard")
    d.mkdir(parents=True, exist_ok=True)
    T0s = args.T0 or [cfg.picard.T0_max]
    rows = runner.contraction_study(cfg, T0s)
    write_table(d / "picard.csv", rows,
                ["T0_requested", "t_start", "T0", "n", "grad_U", "theta", "AU", "composite", "ratio",
                 "converged"])
    table = runner.max_ratio_table(rows)
    write_table(d / "contraction.csv", table, ["T0", "max_ratio"])
    for r in table:
        print(f"T0={r['T0']:<8g} max ratio {r['max_ratio']:.4g}")
    if args.strict and any(not r["converged"] for r in rows):
        return 1
    return 0


def cmd_sweep(args):
    cfg = load_config(args)
    grid = {}
    if args.grid:
        p = Path(args.grid)
        grid = json.loads(p.read_text()) if p.exists() else json.loads(args.grid)
    d = out_dir(args, cfg, "sweep")
    d.mkdir(parents=True, exist_ok=True)
    rep = runner.sweep(cfg, grid, args.study, out_dir=d)
    write_json(d / "sweep.json", rep)
    if rep["rows"]:
        cols = sorted({k for r in rep["rows"] for k in r})
        write_table(d / "sweep.csv", [{c: r.get(c, "") for c in cols} for r in rep["rows"]], cols)
    print(json.dumps({k: v for k, v in rep.items() if k != "rows"}, sort_keys=True))
    print(f"{len(rep['rows'])} points, {sum(1 for r in rep['rows'] if r['error'])} failed")
    if args.strict and any(r["error"] for r in rep["rows"]):
        return 1
    return 0


def cmd_verify(args):
    audit = runner.verify(args.run_dir)
    _print_verdicts(audit.get("verdicts", []))
    if "energy" in audit:
        print(f"energy residual (normalized) {audit['energy']['max_normalized']:.3e}")
    if args.strict and runner.audit_breached(audit):
        return 1
    return 0


def cmd_plot(args):
    try:
        made = plot_run(args.run_dir, args.out)
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for c, (path, slope) in made.items():
        print(f"{path}" + (f"  d/dt log q^2 = {slope:.6g}" if slope is not None else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are used otherwise)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
    common.add_argument("--threads", type=int, help="FFT worker threads (results do not depend on it)")
    common.add_argument("--strict", action="store_true", help="exit nonzero on any audit breach")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set picard.dt=0.005")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="boussinesq-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("basis", parents=[common], help="build and verify a Stokes basis").set_defaults(func=cmd_basis)
    for name, fn, hlp in (("run", cmd_run, "full solve with diagnostics"),
                          ("asymptotics", cmd_asymptotics, "long-horizon run with verdicts")):
        sp = sub.add_parser(name, parents=[common], help=hlp)
        sp.add_argument("--T", type=float, help="horizon override")
        sp.add_argument("--restart", help="checkpoint to restart from")
        sp.set_defaults(func=fn)
    sp = sub.add_parser("picard", parents=[common], help="contraction study on the first window")
    sp.add_argument("--T0", type=float, nargs="+", help="window lengths to test")
    sp.set_defaults(func=cmd_picard)
    sp = sub.add_parser("sweep", parents=[common], help="parameter sweep")
    sp.add_argument("--grid", help="JSON grid (file or inline), e.g. '{\"picard.T0_max\": [0.4, 0.2]}'")
    sp.add_argument("--study", choices=("picard", "run", "rotation"), default="picard")
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("verify", parents=[common], help="re-audit a stored run")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_verify)
    sp = sub.add_parser("plot", parents=[common], help="plot a stored run")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with scipy.fft.set_workers(args.threads or 1):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
