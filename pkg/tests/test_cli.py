import json
import math
import subprocess
import sys

import numpy as np
import pytest

from qrelax import cli
from qrelax.output import fmt, read_csv, write_csv, write_gnuplot, write_manifest
from qrelax.streams import DEFAULT_SEED, SEED_ENV, resolve_seed, trajectory_rng


# --- output helpers ---------------------------------------------------------------

def test_fmt():
    assert fmt(True) == "true" and fmt(np.bool_(False)) == "false"
    assert fmt(3) == "3" and fmt(np.int64(-2)) == "-2"
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt("abc") == "abc"


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    data = np.concatenate([rng.standard_normal(50) * 10.0 ** rng.integers(-300, 300, 50),
                           [math.pi, 1 / 3, 5e-324, 1.7976931348623157e308, 0.0, -0.0]])
    write_csv(tmp_path / "a.csv", ["x", "flag"], ((v, v > 0) for v in data))
    header, arr = read_csv(tmp_path / "a.csv")
    assert header == ["x", "flag"]
    assert np.array_equal(arr[:, 0], data)
    assert np.array_equal(arr[:, 1], (data > 0).astype(float))


def test_manifest_contents(tmp_path):
    path = write_manifest(tmp_path / "m.json", "ensemble", 7, {"alpha": 2.5, "grid": np.arange(2)}, ["a.csv"])
    m = json.loads(path.read_text())
    assert m["seed"] == 7 and m["command"] == "ensemble"
    assert m["config"] == {"alpha": 2.5, "grid": [0, 1]}
    assert m["outputs"] == ["a.csv"]
    assert m["version"].startswith("0.1.0")


def test_gnuplot_script(tmp_path):
    p = write_gnuplot(tmp_path / "h.gp", "h.csv", 1, [(2, "H"), (3, "V")], "t", "E", logx=True)
    text = p.read_text()
    assert "set logscale x" in text
    assert "'h.csv' using 1:2 with lines title 'H'" in text
    assert "using 1:3" in text


# --- seeds ------------------------------------------------------------------------

def test_seed_precedence(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert resolve_seed() == DEFAULT_SEED
    monkeypatch.setenv(SEED_ENV, "42")
    assert resolve_seed() == 42
    assert resolve_seed(5) == 5
    monkeypatch.setenv(SEED_ENV, "oops")
    with pytest.raises(ValueError):
        resolve_seed()


def test_streams_are_distinct_and_stable():
    a = trajectory_rng(1, 0).standard_normal(4)
    assert np.array_equal(a, trajectory_rng(1, 0).standard_normal(4))
    assert not np.array_equal(a, trajectory_rng(1, 1).standard_normal(4))
    assert not np.array_equal(a, trajectory_rng(2, 0).standard_normal(4))


# --- configuration ------------------------------------------------------------------

def test_empty_config_gives_defaults(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    command, cfg = cli.parse_config(["spectrum"])
    assert command == "spectrum"
    assert (cfg.alpha, cfg.n, cfg.sigma, cfg.truncation, cfg.M) == (2.5, 1, 1.0, 50, 1000)
    assert cfg.seed == DEFAULT_SEED


def test_flag_overrides_file(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"alpha": 2.5, "M": 10}))
    _, cfg = cli.parse_config(["spectrum", "--config", str(f), "--alpha", "3.0"])
    assert cfg.alpha == 3.0 and cfg.M == 10


def test_env_seed_is_lowest_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "99")
    assert cli.parse_config(["spectrum"])[1].seed == 99
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 3}))
    assert cli.parse_config(["spectrum", "--config", str(f)])[1].seed == 3
    assert cli.parse_config(["spectrum", "--config", str(f), "--seed", "4"])[1].seed == 4


@pytest.mark.parametrize("argv", [
    ["spectrum", "--alpha", "0.5"],
    ["spectrum", "--sigma", "0"],
    ["spectrum", "--M", "0"],
])
def test_invalid_values_exit_2(argv, capsys):
    assert cli.main(argv) == 2
    assert "configuration error" in capsys.readouterr().err


def test_config_file_errors(tmp_path, capsys):
    bad_type = tmp_path / "t.json"
    bad_type.write_text(json.dumps({"alpha": "big"}))
    assert cli.main(["spectrum", "--config", str(bad_type)]) == 2
    assert "alpha" in capsys.readouterr().err
    unknown = tmp_path / "u.json"
    unknown.write_text(json.dumps({"colour": 1}))
    assert cli.main(["spectrum", "--config", str(unknown)]) == 2
    assert "colour" in capsys.readouterr().err
    assert cli.main(["spectrum", "--config", str(tmp_path / "missing.json")]) == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    # a level beyond the truncation is a configuration error; a horizon off the step grid is a run failure
    assert cli.main(["relax-time", "--levels", "60", "--M", "2"]) == 2
    assert cli.main(["adiabatic", "--t-end", "0.0105", "--dt", "0.001", "-o", str(tmp_path)]) == 1
    assert "failed" in capsys.readouterr().err


# --- subcommands ----------------------------------------------------------------------

def test_spectrum_example(capsys):
    assert cli.main(["spectrum", "--n", "1", "--alpha", "2.5", "--N", "16"]) == 0
    out = capsys.readouterr()
    lines = out.out.strip().splitlines()
    assert lines[0] == "m,E_m,amplitude,pi"
    assert len(lines) == 17
    assert float(lines[5].split(",")[3]) == 0.0
    assert float(lines[2].split(",")[3]) == pytest.approx(0.43, abs=0.005)
    assert "conservation_residual" in out.err


def test_relax_time_without_expansion(capsys):
    assert cli.main(["relax-time", "--alpha", "1.0", "--levels", "1", "--M", "5"]) == 0
    row = capsys.readouterr().out.strip().splitlines()[1].split(",")
    assert float(row[1]) == 0.0 and float(row[2]) == 0.0


def test_trajectory_writes_csv_and_manifest(tmp_path):
    assert cli.main(["trajectory", "-o", str(tmp_path), "--seed", "11", "--plots"]) == 0
    header, data = read_csv(tmp_path / "trajectory.csv")
    assert header[:6] == ["t", "B", "xi", "H", "V", "W"]
    assert data[0, 0] == 0.0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["seed"] == 11 and m["config"]["alpha"] == 2.5
    assert (tmp_path / "trajectory.gp").exists()


def test_ensemble_run_is_reproducible_from_manifest(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["ensemble", "--M", "20", "-o", str(a), "--seed", "8"]) == 0
    m = json.loads((a / "manifest.json").read_text())
    cfg = {k: v for k, v in m["config"].items() if v is not None and k != "output_dir"}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert cli.main(["ensemble", "--config", str(tmp_path / "c.json"), "-o", str(b)]) == 0
    for name in ("mean_H.csv", "mean_V.csv", "frequencies.csv"):
        assert (a / name).read_text() == (b / name).read_text()


def test_ensemble_outputs(tmp_path):
    assert cli.main(["ensemble", "--M", "10", "--density", "--x-points", "16", "--keep-paths", "--plots",
                     "-o", str(tmp_path)]) == 0
    names = json.loads((tmp_path / "manifest.json").read_text())["outputs"]
    for n in ("mean_H.csv", "mean_V.csv", "frequencies.csv", "density.csv", "H_paths.csv", "mean_H.gp"):
        assert n in names and (tmp_path / n).exists()
    _, freq = read_csv(tmp_path / "frequencies.csv")
    assert freq[:, 1].sum() == 10


def test_density_command(tmp_path):
    assert cli.main(["density", "--x-points", "32", "-o", str(tmp_path)]) == 0
    header, data = read_csv(tmp_path / "density.csv")
    assert header == ["t", "x", "value"]
    assert data.shape == (65 * 32, 3)
    assert np.all(data[:, 2] >= 0)


def test_adiabatic_command(tmp_path, capsys):
    assert cli.main(["adiabatic", "--N", "4", "--t-end", "0.01", "--dt", "0.001", "-o", str(tmp_path)]) == 0
    assert "threshold rate" in capsys.readouterr().out
    header, data = read_csv(tmp_path / "adiabatic.csv")
    assert header[:2] == ["t", "L"] and header[-1] == "holds"
    assert data.shape[0] == 11
    assert np.all(data[:, -1] == 1.0)
    assert cli.main(["adiabatic", "--N", "4", "--initial", "2", "--t-end", "0.01", "--dt", "0.001",
                     "-o", str(tmp_path)]) == 0
    _, data = read_csv(tmp_path / "adiabatic.csv")
    assert np.all(data[:, 3] == 1.0) and np.all(data[:, -1] == 0.0) and np.all(np.isnan(data[:, -3]))


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "qrelax.cli", "spectrum", "--N", "4"],
                         capture_output=True, text=True, timeout=60)
    assert res.returncode == 0
    assert res.stdout.splitlines()[0] == "m,E_m,amplitude,pi"


@pytest.mark.slow
def test_validate_quick_exits_zero(capsys):
    assert cli.main(["validate", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "10/10 checks passed" in out
