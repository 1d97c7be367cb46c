"""Benchmark command line: option handling, outputs, determinism."""

import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ldgmin import bench_cli, mesh
from ldgmin.adapt import ConvergenceRecord


def run_cli(args):
    return bench_cli.main(list(args))


# -- problem construction -------------------------------------------------

def test_build_problem_benchmarks():
    odp = bench_cli.build_problem("odp", k=2)
    assert odp.r == 2.0 and odp.k == 2
    pl = bench_cli.build_problem("plaplace4")
    assert pl.density.W(np.array([[2.0, 0.0]]))[0] == pytest.approx(4.0)
    bing = bench_cli.build_problem("bingham", epsilon=1e-4)
    assert bing.epsilon == 1e-4
    assert len(bing.warmup) == 2  # 1e-2 and 1e-3 precede the target
    assert bing.eta_density is not bing.density


def test_build_problem_rejects_unknown_and_misuse():
    with pytest.raises(bench_cli.UsageError):
        bench_cli.build_problem("nope")
    with pytest.raises(bench_cli.UsageError):
        bench_cli.build_problem("odp", epsilon=1e-4)


def test_bingham_warmup_chain_filtering():
    tight = bench_cli.build_problem("bingham", epsilon=1e-3)
    assert len(tight.warmup) == 1
    loose = bench_cli.build_problem("bingham", epsilon=1e-2)
    assert len(loose.warmup) == 0


# -- outputs --------------------------------------------------------------

@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = run_cli(["--benchmark", "odp", "--k", "1", "--mode", "uniform",
                    "--levels", "3", "--out", str(out), "--plot",
                    "--dump-mesh"])
    assert code == 0
    return out


def test_history_columns(quick_run):
    with open(quick_run / "history.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(ConvergenceRecord.FIELDS)
    assert len(rows) == 4
    seconds = rows[0].index("seconds")
    assert all(row[seconds] == "0" for row in rows[1:])
    ndof = rows[0].index("ndof")
    assert [int(r[ndof]) for r in rows[1:]] == [18, 72, 288]


def test_manifest_contents(quick_run):
    man = json.loads((quick_run / "manifest.json").read_text())
    assert man["tool"] == "ldgmin"
    assert man["converged"] is True
    assert man["levels_completed"] == 3
    assert man["parameters"]["benchmark"] == "odp"
    assert man["parameters"]["mode"] == "uniform"
    assert "history.csv" in man["files"]
    assert man["files"] == sorted(man["files"])
    assert "timestamp" not in man
    final = man["final"]
    assert final["ndof"] == 288
    assert final["eta"] > 0


def test_svg_plot_written(quick_run):
    svg = (quick_run / "convergence.svg").read_text()
    assert svg.lstrip().startswith("<svg")
    assert "polyline" in svg


def test_mesh_dumps_round_trip(quick_run):
    dumps = sorted(quick_run.glob("mesh_level_*.txt"))
    assert len(dumps) == 3
    m = mesh.load_mesh(dumps[1])
    assert m.num_cells == 24
    # reloaded meshes refine the same way
    m2 = mesh.refine_uniform(m)
    assert m2.num_cells == 96


def test_timing_flag_records_seconds(tmp_path):
    out = tmp_path / "timed"
    code = run_cli(["--benchmark", "odp", "--k", "1", "--mode", "uniform",
                    "--levels", "2", "--out", str(out), "--timing"])
    assert code == 0
    with open(out / "history.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert any(float(r["seconds"]) > 0 for r in rows)


# -- exit codes and errors ------------------------------------------------

def test_missing_benchmark_is_usage_error(tmp_path, capsys):
    assert run_cli(["--out", str(tmp_path / "x")]) == 2
    assert "benchmark" in capsys.readouterr().err


def test_missing_out_is_usage_error(capsys):
    assert run_cli(["--benchmark", "odp"]) == 2
    assert "out" in capsys.readouterr().err


def test_epsilon_misuse_is_usage_error(tmp_path, capsys):
    code = run_cli(["--benchmark", "odp", "--epsilon", "1e-4",
                    "--out", str(tmp_path / "x")])
    assert code == 2


def test_lock_file_blocks_concurrent_runs(tmp_path, capsys):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".ldgmin.lock").touch()
    code = run_cli(["--benchmark", "odp", "--levels", "1",
                    "--out", str(out)])
    assert code == 2
    assert "lock" in capsys.readouterr().err


def test_failed_solve_writes_partial_outputs(tmp_path, monkeypatch):
    from ldgmin.adapt import AdaptiveRunError

    def explode(*args, **kwargs):
        raise AdaptiveRunError("solver stopped", records=[])

    monkeypatch.setattr("ldgmin.adapt.run_loop", explode)
    out = tmp_path / "failed"
    code = run_cli(["--benchmark", "odp", "--levels", "2",
                    "--out", str(out)])
    assert code == 1
    man = json.loads((out / "manifest.json").read_text())
    assert man["converged"] is False
    assert (out / "history.csv").exists()


# -- config files ---------------------------------------------------------

def test_config_file_with_flag_override(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text(
        "# benchmark setup\n"
        "benchmark = bingham\n"
        "epsilon = 1e-3\n"
        "mode = uniform\n"
        "levels = 2\n"
    )
    out = tmp_path / "cfgrun"
    code = run_cli(["--config", str(cfgfile), "--epsilon", "1e-2",
                    "--out", str(out)])
    assert code == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["parameters"]["epsilon"] == 1e-2
    assert man["parameters"]["benchmark"] == "bingham"


def test_config_unknown_key(tmp_path, capsys):
    cfgfile = tmp_path / "bad.cfg"
    cfgfile.write_text("benchmark = odp\nwibble = 3\n")
    code = run_cli(["--config", str(cfgfile), "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "wibble" in err and "bad.cfg" in err


def test_config_bad_value(tmp_path, capsys):
    cfgfile = tmp_path / "bad2.cfg"
    cfgfile.write_text("benchmark = odp\nlevels = soon\n")
    code = run_cli(["--config", str(cfgfile), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "levels" in capsys.readouterr().err


def test_config_missing_file(tmp_path, capsys):
    code = run_cli(["--config", str(tmp_path / "absent.cfg"),
                    "--out", str(tmp_path / "o")])
    assert code == 2


# -- determinism ----------------------------------------------------------

def test_repeat_runs_are_byte_identical(tmp_path):
    def once(d):
        cmd = [sys.executable, "-m", "ldgmin.bench_cli", "--benchmark",
               "plaplace4", "--k", "1", "--levels", "3", "--theta", "0.5",
               "--out", str(d), "--plot"]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        return ((d / "history.csv").read_bytes(),
                (d / "manifest.json").read_bytes(),
                (d / "convergence.svg").read_bytes())

    a = once(tmp_path / "a")
    b = once(tmp_path / "b")
    assert a[0] == b[0]
    assert a[1] == b[1]
    assert a[2] == b[2]
