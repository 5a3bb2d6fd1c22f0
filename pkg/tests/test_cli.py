import csv
import json
import sqlite3

import pytest

from tracer_uq.cli import EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_IO, EXIT_OK, main
from tracer_uq.config import load_config

FAST = ["-p", "desk-model2", "-s", "hierarchy.base_cells=8", "-s", "hierarchy.max_level=3",
        "-s", "estimator.l_max=3", "-s", "estimator.n_init=10", "-s", "estimator.eps=0.1",
        "-s", "transport.dt_reference=450"]


def run(out, *args, fast=True):
    argv = (FAST if fast else []) + ["-o", str(out)] + list(args)
    return main(argv)


def read_summary(path):
    with open(path / "summary.json") as fh:
        return json.load(fh)


def test_show_config_round_trips(tmp_path, capsys):
    assert main(FAST + ["show-config"]) == EXIT_OK
    text = capsys.readouterr().out
    for section in ("[run]", "[model]", "[hierarchy]", "[estimator]", "[transport]"):
        assert section in text
    p = tmp_path / "resolved.ini"
    p.write_text(text)
    assert load_config(str(p)).fingerprint == load_config(preset="desk-model2", overrides=[
        a for a in FAST[3::2]]).fingerprint


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    assert run(tmp_path, "-s", "estimator.epsilon=0.1", "run", "mlmc") == EXIT_CONFIG
    assert "epsilon" in capsys.readouterr().err


def test_unknown_section_is_a_config_error(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[solverz]\nx = 1\n")
    assert main(["-c", str(p), "-o", str(tmp_path), "run", "mlmc"]) == EXIT_CONFIG
    assert "solverz" in capsys.readouterr().err


def test_unknown_preset(tmp_path):
    assert main(["-p", "nope", "-o", str(tmp_path), "run", "mlmc"]) == EXIT_CONFIG


def test_non_integral_operator_power_is_rejected(tmp_path, capsys):
    assert run(tmp_path, "-s", "diffusion.nu=1.5", "run", "mlmc") == EXIT_CONFIG
    assert "nu" in capsys.readouterr().err


def test_output_path_that_is_a_file_is_an_io_error(tmp_path):
    f = tmp_path / "occupied"
    f.write_text("x")
    assert run(f, "run", "mlmc") == EXIT_IO


def test_sample_field_with_no_samples(tmp_path):
    args = ["-p", "matern-2d", "-s", "sample_field.level=1", "-o", str(tmp_path), "sample-field", "--samples", "0"]
    assert main(args) == EXIT_OK
    rep = json.loads((tmp_path / "covariance_report.json").read_text())
    assert rep["samples"] == 0 and rep["passed"] is False
    assert all("empirical" not in r for r in rep["pairs"])


def test_sample_field_writes_report_and_snapshots(tmp_path):
    args = ["-p", "matern-2d", "-s", "sample_field.level=2",
            "-s", "sample_field.snapshots=2", "-o", str(tmp_path), "sample-field", "--samples", "200"]
    assert main(args) == EXIT_OK
    rep = json.loads((tmp_path / "covariance_report.json").read_text())
    assert rep["samples"] == 200 and len(rep["pairs"]) == 10
    for name in ("covariance_report.csv", "field_0.csv", "field_1.csv", "diffusion_0.csv"):
        assert (tmp_path / name).exists()


def test_run_mlmc_outputs(tmp_path):
    assert run(tmp_path, "run", "mlmc") == EXIT_OK
    with open(tmp_path / "levels.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["level", "N", "mean", "V", "C"]
    s = read_summary(tmp_path)
    assert s["schema"] == "tracer-uq-summary/1" and s["method"] == "mlmc"
    assert len(s["estimate"]) == 192 and len(s["qoi"]["times_min"]) == 48
    assert s["result"]["converged"] is True
    assert "wall_seconds" in s["timing"]
    with open(tmp_path / "qoi_mean_std.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:3] == ["time_min", "Qg_mean", "Qg_std"]


def test_parallel_run_is_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "-s", "run.cache=false", "run", "mlmc") == EXIT_OK
    assert run(b, "-s", "run.cache=false", "-j", "8", "run", "mlmc") == EXIT_OK
    assert (a / "levels.csv").read_bytes() == (b / "levels.csv").read_bytes()
    sa, sb = read_summary(a), read_summary(b)
    for s in (sa, sb):
        s.pop("timing")
        s["config"]["run"].pop("parallelism")
        s["config"]["run"].pop("output")
    assert json.dumps(sa, sort_keys=True) == json.dumps(sb, sort_keys=True)


def test_resume_reuses_cached_samples(tmp_path):
    assert run(tmp_path, "-s", "run.cache=true", "run", "mlmc") == EXIT_OK
    first = (tmp_path / "levels.csv").read_bytes()
    db = tmp_path / "samples.sqlite"
    with sqlite3.connect(db) as con:
        n_before = con.execute("select count(*) from samples").fetchone()[0]
    assert n_before > 0
    assert run(tmp_path, "-s", "run.cache=true", "run", "mlmc") == EXIT_OK
    with sqlite3.connect(db) as con:
        assert con.execute("select count(*) from samples").fetchone()[0] == n_before
    assert (tmp_path / "levels.csv").read_bytes() == first


def test_fingerprint_mismatch_is_refused(tmp_path, capsys):
    assert run(tmp_path, "-s", "run.cache=true", "run", "mlmc") == EXIT_OK
    assert run(tmp_path, "-s", "run.cache=true", "-s", "model.d_gad=1.3e-10", "run", "mlmc") == EXIT_CONFIG
    assert "fingerprint" in capsys.readouterr().err.lower()


def test_cap_breach_exits_with_convergence_code(tmp_path):
    code = run(tmp_path, "-s", "estimator.eps=0.01", "-s", "estimator.finest_cap=1", "run", "mlmc")
    assert code == EXIT_CONVERGENCE
    s = read_summary(tmp_path)
    assert s["result"]["converged"] is False and "error" in s


def test_run_mc_and_qmc(tmp_path):
    assert run(tmp_path / "mc", "-s", "estimator.mc_samples=6", "-s", "estimator.mc_level=1", "run", "mc") == EXIT_OK
    assert read_summary(tmp_path / "mc")["result"]["n"] == 6
    assert run(tmp_path / "qmc", "-s", "estimator.qmc_points=2", "-s", "estimator.qmc_randomizations=4",
               "-s", "estimator.qmc_level=1", "run", "qmc") == EXIT_OK
    s = read_summary(tmp_path / "qmc")
    assert s["method"] == "qmc" and s["result"]["n"] == 2


def test_convergence_writes_rates(tmp_path):
    assert run(tmp_path, "-s", "estimator.pilot=20,20,10", "convergence") == EXIT_OK
    rates = json.loads((tmp_path / "rates.json").read_text())
    for key in ("alpha", "beta", "gamma", "wall_gamma"):
        assert key in rates
    assert rates["pilot"] == [20, 20, 10]


def test_compare_single_tolerance(tmp_path):
    assert run(tmp_path, "-s", "estimator.pilot=20,20,10", "-s", "estimator.l_init=3",
               "compare", "--eps-list", "0.1", "--no-qmc") == EXIT_OK
    with open(tmp_path / "compare.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["eps", "cost_mc", "cost_qmc", "cost_mlmc"]
    assert len(rows) == 2 and rows[1][2] == ""


def test_compare_without_enough_levels_for_rates(tmp_path, capsys):
    assert run(tmp_path, "-s", "estimator.eps=0.5", "compare", "--eps-list", "0.5", "--no-qmc") == EXIT_CONVERGENCE
    assert "rate" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["run"], ["run", "sideways"], []])
def test_bad_arguments_exit_with_usage(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2
