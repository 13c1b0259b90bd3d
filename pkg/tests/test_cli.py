import csv

import pytest

from cpde import cli
from cpde import oracle as orc
from cpde.config import ConfigError, parse_config

SMALL = {
    "simulate": ["--topology", "cycle:12", "--lambda", "2", "--v", "1", "--p", "0.5", "--horizon", "5",
                 "--replicas", "20"],
    "sweep": ["--topology", "cycle:8", "--lambdas", "1,3", "--vs", "1", "--ps", "0.5", "--horizon", "3",
              "--replicas", "10"],
    "lambda0": ["--topology", "cycle:8", "--v", "1", "--p", "1", "--lo", "0.5", "--hi", "6", "--horizon", "5",
                "--replicas", "40", "--tol", "0.5"],
    "crossover": ["--lambda", "2", "--p", "0.5", "--v_small", "0.05", "--sizes", "4,8", "--cap", "20",
                  "--replicas", "10"],
    "blocks": ["--mode", "interval", "--topology", "cycle:64", "--windows", "3", "--replicas", "4"],
    "couplings": ["--topology", "cycle:10", "--lambda", "2", "--v", "1", "--p", "0.5", "--horizon", "3",
                  "--replicas", "10"],
    "oracle-check": ["--replicas", "400"],
    "calibrate": ["--lambda", "1.2", "--horizon", "300", "--replicas", "30"],
}


def _outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.suffix == ".csv"}


@pytest.mark.parametrize("sub", sorted(SMALL))
def test_outputs_identical_across_parallelism(sub, tmp_path):
    outs = []
    for par in (1, 2):
        d = tmp_path / f"p{par}"
        assert cli.run([sub, *SMALL[sub], "--seed", "7", "--parallelism", str(par), "--out", str(d)]) == 0
        assert (d / "manifest.txt").exists()
        outs.append(_outputs(d))
    assert outs[0] and outs[0] == outs[1]


def test_manifest_echoes_resolved_config(tmp_path):
    cli.run(["simulate", *SMALL["simulate"], "--seed", "3", "--out", str(tmp_path)])
    text = (tmp_path / "manifest.txt").read_text()
    assert "exit_status = 0" in text and "[simulate]" in text and "eta0 = all" in text


@pytest.mark.parametrize("argv,field", [
    (["simulate", "--topology", "cycle:12", "--v", "1", "--p", "0.5", "--horizon", "5"], "lambda"),
    (["simulate", "--topology", "cycle:12", "--lambda", "1", "--v", "1", "--p", "1.5", "--horizon", "5"], "p"),
    (["simulate", "--topology", "cycle:12", "--lambda", "-1", "--v", "1", "--p", "0.5", "--horizon", "5"],
     "lambda"),
    (["simulate", "--topology", "ring:12", "--lambda", "1", "--v", "1", "--p", "0.5", "--horizon", "5"],
     "topology"),
    (["sweep", "--topology", "cycle:8", "--lambdas", "1", "--vs", "1", "--ps", "0.5", "--horizon", "1"], "seed"),
    (["blocks", "--mode", "diagonal"], "mode"),
])
def test_config_errors_exit_2_and_name_the_field(argv, field, tmp_path, capsys):
    assert cli.run([*argv, "--out", str(tmp_path)]) == 2
    assert field in capsys.readouterr().err


def test_config_file_and_unknown_keys(tmp_path):
    good = "[simulate]\ntopology = cycle:6\nlambda = 1\nv = 1\np = 0.5\nhorizon = 2\n"
    c = parse_config("simulate", good, {"replicas": "5"})
    assert c["lambda"] == 1.0 and c["replicas"] == 5
    with pytest.raises(ConfigError, match="colour"):
        parse_config("simulate", good + "colour = red\n")
    with pytest.raises(ConfigError, match="plot"):
        parse_config("simulate", good + "[plot]\nx = 1\n")
    f = tmp_path / "bad.ini"
    f.write_text(good.replace("p = 0.5", "p = half"))
    assert cli.run(["simulate", "--config", str(f), "--out", str(tmp_path / "o")]) == 2
    f.write_text(good)
    assert cli.run(["simulate", "--config", str(f), "--out", str(tmp_path / "o")]) == 0


def test_sweep_grid_row_count(tmp_path):
    argv = ["sweep", "--topology", "cycle:8", "--lambdas", "0.5,1,2", "--vs", "0.5,1,2", "--ps", "0.2,0.5,0.8",
            "--horizon", "2", "--replicas", "5", "--seed", "1", "--out", str(tmp_path)]
    assert cli.run(argv) == 0
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 28 and len(rows[0]) == 17


def test_thinned_upper_fault_exits_3(tmp_path):
    argv = ["couplings", *SMALL["couplings"], "--fault", "thin_upper", "--seed", "1", "--out", str(tmp_path)]
    assert cli.run(argv) == 3
    assert "exit_status = 3" in (tmp_path / "manifest.txt").read_text()


def test_oracle_mismatch_exits_4(tmp_path, monkeypatch):
    real = orc.load_fixture()
    monkeypatch.setattr(orc, "load_fixture", lambda *a: {k: (v + 0.01, t) for k, (v, t) in real.items()})
    assert cli.run(["oracle-check", "--replicas", "50", "--out", str(tmp_path)]) == 4


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "cpde", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
