import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boussinesq_lab import cli, runner
from boussinesq_lab.config import ConfigError, SimConfig
from boussinesq_lab.io import (
    CheckpointError,
    CsvStream,
    load_checkpoint,
    read_csv,
    read_json,
    save_checkpoint,
)
from boussinesq_lab.picard import BoussinesqState
from boussinesq_lab.plotting import PlotError, log_rate, plot_run
from boussinesq_lab.scenarios import PRESETS, data_report, make_scenario


def small_config(**over):
    base = SimConfig().replace(**{
        "basis.N": 16, "basis.max_wavenumber": 5, "picard.dt": 0.05, "picard.T0_max": 0.25,
        "T": 1.0, "record_every": 1,
    })
    return base.replace(**over) if over else base


# -- config -------------------------------------------------------------------------


def test_config_json_round_trip():
    cfg = small_config(**{"scenario.name": "random-modes", "scenario.params": {"amplitude": 0.2}, "seed": 3})
    again = SimConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.content_hash() == cfg.content_hash()


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([0.01, 0.02, 0.05]), st.integers(1, 20), st.floats(0.05, 0.5))
def test_config_round_trip_property(dt, rec, tail):
    cfg = small_config(**{"picard.dt": dt, "record_every": rec, "tail_fraction": tail})
    assert SimConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_hash_ignores_output_location():
    a = small_config()
    b = a.replace(out_dir="/elsewhere", threads=4)
    c = a.replace(**{"picard.tol": 1e-9})
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != c.content_hash()


@pytest.mark.parametrize("over", [
    {"T": 0.33},
    {"basis.N": 8},
    {"geometry.kind": "sphere"},
    {"tail_fraction": 1.5},
    {"picard.coupling": "none"},
])
def test_invalid_configs(over):
    with pytest.raises(ConfigError):
        small_config(**over)


def test_unknown_key():
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        small_config(**{"picard.bogus": 1})


# -- scenarios ---------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_scenarios_admissible(small_basis, name):
    sc = make_scenario(name, small_basis)
    sc.state().check(small_basis)
    rep = data_report(sc, small_basis)
    assert rep["u0_div"] <= 1e-12
    assert np.isfinite(rep["K0"])


def test_random_scenario_seeded(small_basis):
    a = make_scenario("random-modes", small_basis, seed=1).xi0
    b = make_scenario("random-modes", small_basis, seed=1).xi0
    c = make_scenario("random-modes", small_basis, seed=2).xi0
    assert np.array_equal(a, b) and not np.array_equal(a, c)


# -- io --------------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, small_basis):
    rng = np.random.default_rng(0)
    s = BoussinesqState(rng.standard_normal(small_basis.m), rng.standard_normal(small_basis.grid.shape), 0.1 + 0.2)
    path = tmp_path / "c.npz"
    save_checkpoint(path, s, "abc", 7)
    back, meta = load_checkpoint(path, "abc")
    assert np.array_equal(back.xi, s.xi) and np.array_equal(back.theta, s.theta)
    assert back.time == s.time and meta["T0_steps"] == 7
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "other")


def test_csv_lossless(tmp_path):
    vals = [0.1, 1 / 3, np.pi * 1e-300, 2.0**60 + 1]
    with CsvStream(tmp_path / "x.csv", ["a", "b", "c", "d"]) as out:
        out.write(vals)
    back = read_csv(tmp_path / "x.csv")
    assert [back[k][0] for k in "abcd"] == [float(v) for v in vals]


# -- runs, determinism, restart -------------------------------------------------------


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    s = runner.run(small_config(checkpoint_every=1), d)
    assert s.ok
    return d


def test_run_layout(run_dir):
    for name in ("config.json", "diagnostics.csv", "picard.csv", "verdicts.json", "run.json"):
        assert (run_dir / name).exists()
    cols = read_csv(run_dir / "diagnostics.csv")
    assert np.allclose(cols["time"], np.arange(0, 1.01, 0.05))
    assert read_json(run_dir / "run.json")["status"] == "ok"
    assert len(list((run_dir / "checkpoints").glob("ckpt_*.npz"))) == 4


def test_repeat_run_byte_identical(run_dir, tmp_path):
    runner.run(small_config(checkpoint_every=1), tmp_path)
    for name in ("diagnostics.csv", "picard.csv", "verdicts.json"):
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()


def test_restart_matches_tail(run_dir, tmp_path):
    ck = run_dir / "checkpoints" / "ckpt_000000010.npz"
    s = runner.run(small_config(checkpoint_every=1), tmp_path, restart=ck)
    assert s.ok
    a = read_csv(run_dir / "diagnostics.csv")
    b = read_csv(tmp_path / "diagnostics.csv")
    assert b["time"][0] == pytest.approx(0.5)
    tail = a["time"] >= 0.5 - 1e-12
    for c in a:
        if c == "utt_dual_lb":
            continue  # one-sided difference at the first restarted row
        assert np.abs(a[c][tail] - b[c]).max() <= 1e-12, c


def test_restart_rejects_foreign_checkpoint(run_dir, tmp_path):
    ck = run_dir / "checkpoints" / "ckpt_000000010.npz"
    with pytest.raises(CheckpointError):
        runner.run(small_config(**{"picard.tol": 1e-9}, checkpoint_every=1), tmp_path, restart=ck)


def test_verify_reproduces_run_audit(run_dir):
    audit = runner.verify(run_dir)
    stored = read_json(run_dir / "verdicts.json")
    assert audit["energy"]["max_normalized"] == stored["energy"]["max_normalized"]
    assert (run_dir / "verify.json").exists()


def test_nonconvergent_run_keeps_partial_output(tmp_path):
    cfg = small_config(**{"picard.tol": 1e-30, "picard.n_max": 2, "picard.max_bisections": 0})
    s = runner.run(cfg, tmp_path)
    assert s.status == "nonconvergence" and not s.ok
    assert read_json(tmp_path / "run.json")["status"] == "nonconvergence"
    assert (tmp_path / "picard.csv").exists()


# -- plots -----------------------------------------------------------------------------


def test_plot_three_records(tmp_path):
    cfg = small_config(T=0.1)
    runner.run(cfg, tmp_path)
    assert len(read_csv(tmp_path / "diagnostics.csv")["time"]) == 3
    made = plot_run(tmp_path)
    assert "grad_u_l2" in made and made["grad_u_l2"][0].exists()


def test_plot_empty_csv_raises_without_files(tmp_path):
    (tmp_path / "diagnostics.csv").write_text("time,u_l2\n")
    with pytest.raises(PlotError):
        plot_run(tmp_path)
    assert not (tmp_path / "figures").exists()


def test_plot_stokes_decay_slope(tmp_path, small_basis):
    j = small_basis.descriptors.index(("torus", 0, 1, "cos"))
    cfg = small_config(**{"scenario.name": "single-mode", "scenario.params": {"mode": j, "epsilon": 0.5}})
    runner.run(cfg, tmp_path)
    made = plot_run(tmp_path, columns=["u_l2", "missing_column"])
    assert set(made) == {"u_l2"}
    lam1 = small_basis.eigenvalues[j]
    assert made["u_l2"][1] == pytest.approx(-2 * lam1, rel=1e-10)


def test_log_rate():
    t = np.linspace(0, 1, 5)
    assert log_rate(t, np.exp(-3 * t)) == pytest.approx(-6.0)


# -- sweeps and contraction -------------------------------------------------------------


def test_empty_sweep():
    rep = runner.sweep(small_config(), {}, "picard")
    assert rep["rows"] == []


def test_sweep_records_failures():
    rep = runner.sweep(small_config(), {"picard.T0_max": [0.2, -1.0]}, "picard")
    assert rep["rows"][0]["error"] == ""
    assert rep["rows"][1]["error"] != ""


def test_contraction_monotone_in_T0():
    cfg = small_config(**{"scenario.name": "calibration"})
    rep = runner.sweep(cfg, {"picard.T0_max": [0.4, 0.2, 0.1, 0.05]}, "picard")
    assert rep["monotone_nonincreasing"]
    assert all(r["converged"] for r in rep["rows"])


def test_rotation_sweep_orders():
    rep = runner.sweep(small_config(), {"N": [32, 64], "interpolation": ["spline3"]}, "rotation")
    assert len(rep["orders"]) == 1 and rep["orders"][0] > 3.0


# -- command line ---------------------------------------------------------------------


def write_cfg(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(cfg.to_json())
    return str(p)


def test_cli_run_verify_plot(tmp_path, capsys):
    cfg = write_cfg(tmp_path, small_config(T=0.5))
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out)]) == 0
    assert cli.main(["verify", str(out)]) == 0
    assert cli.main(["plot", str(out)]) == 0
    assert (out / "figures" / "u_l2.png").exists()


def test_cli_basis_strict(tmp_path, capsys):
    cfg = write_cfg(tmp_path, small_config())
    assert cli.main(["basis", "--config", cfg, "--strict"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["m"] == 80


def test_cli_strict_audit_breach(tmp_path):
    # dt = 0.05 leaves an energy residual far above the audit tolerance
    cfg = write_cfg(tmp_path, small_config(T=0.5))
    out = str(tmp_path / "o")
    assert cli.main(["run", "--config", cfg, "--out", out]) == 0
    assert cli.main(["run", "--config", cfg, "--out", out, "--strict"]) == 1


def test_cli_solver_failure_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, small_config(**{"picard.tol": 1e-30, "picard.n_max": 2, "picard.max_bisections": 0}))
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_cli_config_error_exit_code(tmp_path):
    assert cli.main(["run", "--set", "T=0.333", "--out", str(tmp_path)]) == 2


def test_cli_picard_and_sweep(tmp_path):
    cfg = write_cfg(tmp_path, small_config(**{"scenario.name": "calibration"}))
    assert cli.main(["picard", "--config", cfg, "--out", str(tmp_path / "p"), "--T0", "0.2", "0.1"]) == 0
    assert read_csv(tmp_path / "p" / "contraction.csv")["T0"].tolist() == [0.2, 0.1]
    grid = json.dumps({"picard.T0_max": [0.2, 0.1]})
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "s"), "--grid", grid]) == 0
    assert read_json(tmp_path / "s" / "sweep.json")["monotone_nonincreasing"]


def test_cli_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("BOUSSINESQ_LAB_OUT", str(tmp_path))
    cfg = small_config(T=0.1)
    assert cli.main(["run", "--config", write_cfg(tmp_path, cfg)]) == 0
    assert (tmp_path / f"run-{cfg.content_hash()[:12]}" / "diagnostics.csv").exists()


def test_cli_threads_do_not_change_results(tmp_path):
    cfg = write_cfg(tmp_path, small_config(T=0.2))
    cli.main(["run", "--config", cfg, "--out", str(tmp_path / "a"), "--threads", "1"])
    cli.main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--threads", "2"])
    assert (tmp_path / "a" / "diagnostics.csv").read_bytes() == (tmp_path / "b" / "diagnostics.csv").read_bytes()
