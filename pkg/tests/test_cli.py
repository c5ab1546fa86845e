import json
import subprocess
import sys

import pytest

from markov_bsde import cli

FLIP = [[-1.0, 1.0], [1.0, -1.0]]
LINEAR = {"name": "linear", "params": {"a": -0.2, "mu": 0.1, "b": [0.05, -0.05], "sigma": [0.0, 0.0],
                                       "phi": 0.3}}


def write_config(tmp_path, name="cfg.json", **blocks):
    cfg = {"chain": {"rates": FLIP, "initial_distribution": [0.5, 0.5]},
           "grid": {"T": 1.0, "n_steps": 100},
           "mc": {"n_paths": 2000, "seed": 11},
           "output": {"directory": "out"}}
    cfg.update(blocks)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def duality_config(tmp_path, n_paths=20_000, **extra):
    return write_config(tmp_path, command="verify-duality", driver=LINEAR,
                        delays={"delta": {"form": "constant", "value": 0.25}},
                        terminal={"xi": {"form": "constant", "values": [1.0, 1.0]}},
                        mc={"n_paths": n_paths, "seed": 5}, **extra)


def manifest(tmp_path, sub="out"):
    lines = (tmp_path / sub / "manifest.txt").read_text().splitlines()
    return dict(line.split(": ", 1) for line in lines)


def test_missing_config(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli.run(missing) == 2
    assert str(missing) in capsys.readouterr().err


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert cli.run(p) == 2


def test_unknown_command(tmp_path):
    assert cli.run(write_config(tmp_path, command="fly")) == 2


def test_simulate_chain_byte_identical(tmp_path):
    p = write_config(tmp_path, command="simulate-chain")
    assert cli.run(p) == 0
    first = (tmp_path / "out" / "paths.csv").read_bytes()
    assert cli.run(p) == 0
    assert (tmp_path / "out" / "paths.csv").read_bytes() == first
    assert first.splitlines()[0] == b"path,time,state"
    m = manifest(tmp_path)
    assert m["exit_code"] == "0" and m["seed"] == "11" and m["outputs"] == "paths.csv"
    assert len(m["config_sha256"]) == 64


def test_env_var_overrides_output(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "elsewhere"))
    assert cli.run(write_config(tmp_path, command="simulate-chain")) == 0
    assert (tmp_path / "elsewhere" / "paths.csv").is_file()
    assert not (tmp_path / "out").exists()


def test_solve_bsde(tmp_path):
    p = write_config(tmp_path, command="solve-bsde", driver={"name": "zero"},
                     terminal={"xi": {"form": "constant", "values": [1.0, 0.0]}})
    assert cli.run(p) == 0
    lines = (tmp_path / "out" / "surface.csv").read_text().splitlines()
    assert lines[0] == "t,state,u,z_1,z_2"
    u00 = float(lines[1].split(",")[2])
    assert u00 == pytest.approx(0.5677, abs=1e-4)


def test_solve_abse_outputs(tmp_path):
    p = write_config(tmp_path, command="solve-abse", driver=LINEAR,
                     delays={"delta": {"form": "constant", "value": 0.25}},
                     terminal={"xi": {"form": "constant", "values": [1.0, 1.0]}})
    assert cli.run(p) == 0
    assert manifest(tmp_path)["outputs"] == "surface.csv, iterations.csv"


def test_affine_delay_and_nonlinear_driver(tmp_path):
    p = write_config(tmp_path, command="solve-abse",
                     driver={"name": "nonlinear", "params": {"k": 0.3, "kappa": 0.1, "mu": 0.5, "amp": 0.2}},
                     delays={"delta": {"form": "affine-capped", "intercept": 0.1, "slope": 0.1, "cap": 0.2}},
                     terminal={"xi": {"form": "affine", "level": [0.0, 1.0], "slope": 0.5}})
    assert cli.run(p) == 0


def test_unknown_driver_exit_2_with_manifest(tmp_path):
    p = write_config(tmp_path, command="solve-abse", driver={"name": "mystery"},
                     delays={"delta": {"form": "constant", "value": 0.25}},
                     terminal={"xi": {"form": "constant", "values": [1.0, 1.0]}})
    assert cli.run(p) == 2
    assert "mystery" in manifest(tmp_path)["message"]


def test_convergence_failure_exit_3(tmp_path):
    p = write_config(tmp_path, command="solve-abse", driver=LINEAR,
                     delays={"delta": {"form": "constant", "value": 0.25}},
                     terminal={"xi": {"form": "constant", "values": [1.0, 1.0]}},
                     iteration={"max_iter": 1})
    assert cli.run(p) == 3
    assert manifest(tmp_path)["exit_code"] == "3"


def test_verify_duality(tmp_path):
    assert cli.run(duality_config(tmp_path)) == 0
    lines = (tmp_path / "out" / "duality.csv").read_text().splitlines()
    assert lines[0] == "state,solver,estimate,std_error,gap,within_3se"
    for line in lines[1:]:
        _, solver, est, se, gap, ok = line.split(",")
        assert ok == "1" and abs(float(gap)) <= 3 * float(se)


def test_verify_duality_reproducible(tmp_path):
    p = duality_config(tmp_path, n_paths=2000)
    assert cli.run(p) == 0
    first = (tmp_path / "out" / "duality.csv").read_bytes()
    assert cli.run(p) == 0
    assert (tmp_path / "out" / "duality.csv").read_bytes() == first


def test_property_violation_exit_4(tmp_path, monkeypatch):
    real = cli.duality_estimate

    def biased(*args, **kwargs):
        est = real(*args, **kwargs)
        return est._replace(estimate=est.estimate + 1.0)

    monkeypatch.setattr(cli, "duality_estimate", biased)
    assert cli.run(duality_config(tmp_path, n_paths=500)) == 4
    m = manifest(tmp_path)
    assert m["exit_code"] == "4" and m["outputs"] == "duality.csv"


def test_check_comparison_non_monotone_rejected(tmp_path):
    bad = {"name": "linear", "params": {"a": -0.2, "mu": -1.0}}
    p = write_config(tmp_path, command="check-comparison",
                     delays={"delta": {"form": "constant", "value": 0.25}, "zeta": {"form": "constant", "value": 0}},
                     comparison={"driver_1": bad, "driver_2": bad,
                                 "xi_1": {"form": "constant", "values": [0.0, 0.0]},
                                 "xi_2": {"form": "constant", "values": [0.0, 0.0]}})
    assert cli.run(p) == 2
    assert "increasing" in manifest(tmp_path)["message"]


def test_check_comparison_ordered_pair(tmp_path):
    f1 = {"name": "nonlinear", "params": {"k": 0.3, "kappa": 0.1, "mu": 0.5, "amp": 0.2}}
    f2 = {"name": "shifted", "params": {"base": f1, "lift": 0.3, "freq": 2.0}}
    p = write_config(tmp_path, command="check-comparison",
                     delays={"delta": {"form": "constant", "value": 0.25}, "zeta": {"form": "constant", "value": 0}},
                     comparison={"driver_1": f1, "driver_2": f2,
                                 "xi_1": {"form": "constant", "values": [0.0, 0.5]},
                                 "xi_2": {"form": "constant", "values": [0.2, 0.5]}})
    assert cli.run(p) == 0


def test_check_estimate(tmp_path):
    p = write_config(tmp_path, command="check-estimate", driver=LINEAR,
                     delays={"delta": {"form": "constant", "value": 0.25}},
                     terminal={"xi": {"form": "constant", "values": [1.0, 1.0]}})
    assert cli.run(p) == 0
    row = (tmp_path / "out" / "estimate.csv").read_text().splitlines()[1].split(",")
    assert row[3] == "1"


def test_module_entry_point(tmp_path):
    p = write_config(tmp_path, command="simulate-chain", mc={"n_paths": 5, "seed": 0})
    res = subprocess.run([sys.executable, "-m", "markov_bsde", str(p)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "out" / "manifest.txt").is_file()
