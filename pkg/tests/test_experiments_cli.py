import json
import subprocess
import sys

import numpy as np
import numpy.testing as npt
import pytest

from rdlab import Mesh1D, cli, default_family
from rdlab import experiments as ex
from rdlab.dynamics import IntegratorConfig
from rdlab.manifolds import AttractorConfig, attractor_rate_experiment

EIGEN = """
[experiment]
name = "eigen-rate"
k = [0, 1]

[mesh]
n = 32

[sweep]
eps = [0.0625, 0.03125, 0.015625, 0.0078125, 0.0]
"""


def _write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _raw(**sections):
    raw = {"experiment": {"name": "eigen-rate"}}
    raw.update(sections)
    return raw


@pytest.mark.parametrize("raw, path", [
    ({}, "experiment.name"),
    ({"experiment": {"name": "nope"}}, "experiment.name"),
    (_raw(mesh={"n": "64"}), "mesh.n"),
    (_raw(mesh={"n": 1}), "mesh.n"),
    (_raw(mesh={"size": 3}), "mesh.size"),
    (_raw(bogus={}), "bogus"),
    (_raw(integrator={"dt": -1.0}), "integrator.dt"),
    (_raw(integrator={"scheme": "RK4"}), "integrator.scheme"),
    (_raw(integrator={"certify": 1}), "integrator.certify"),
    (_raw(sweep={"eps": [0.1, -0.2]}), "sweep.eps[1]"),
    (_raw(sweep={"k_min": 9, "k_max": 4}), "sweep.k_min"),
    (_raw(family={"kind": "cubic"}), "family.kind"),
    ({"experiment": {"name": "eigen-rate", "k": [0, -1]}}, "experiment.k[1]"),
    ({"experiment": {"name": "eigen-rate", "m": 3}}, "experiment.m"),
    ({"experiment": {"name": "resolvent-rate", "in_norm": "L3"}}, "experiment.in_norm"),
])
def test_schema_errors_name_the_key(raw, path):
    with pytest.raises(ex.ConfigError) as info:
        ex.validate_config(raw)
    assert str(info.value).startswith(path + ":")


def test_defaults_filled_and_sweep_sorted():
    cfg = ex.validate_config(_raw(sweep={"eps": [0.01, 0.05, 0.02], "include_zero": True}))
    assert cfg["mesh"]["n"] == 256 and cfg["integrator"]["scheme"] == "IMEX-CN"
    assert cfg["experiment"]["k"] == [0, 1, 2, 3, 4]
    assert ex.sweep_values(cfg) == [0.05, 0.02, 0.01, 0.0]
    cfg = ex.validate_config(_raw())
    npt.assert_allclose(ex.sweep_values(cfg), 2.0 ** -np.arange(4, 11))


def test_toml_syntax_error(tmp_path):
    with pytest.raises(ex.ConfigError) as info:
        ex.load_config(_write(tmp_path, "[experiment\nname = 1"))
    assert str(info.value).startswith("<file>:")


def test_eigen_smoke_run_and_zero_row(tmp_path):
    res, out = ex.run_experiment(_write(tmp_path, EIGEN), tmp_path / "out")
    lines = (out / "series.csv").read_text().splitlines()
    assert lines[0].startswith("series,eps,delta,value,ratio_logcorrected,excluded")
    rows = [ln.split(",") for ln in lines[1:] if ln.startswith("eigen_k0,")]
    assert len(rows) == 5
    zero = [r for r in rows if float(r[1]) == 0.0]
    assert len(zero) == 1 and float(zero[0][3]) == 0.0 and zero[0][5] == "1"
    fit = json.loads((out / "fit.json").read_text())
    for key in ("experiment", "eps", "delta", "value", "exponent", "r2", "ratio_min", "ratio_max", "verdict"):
        assert key in fit
    assert fit["experiment"] == "eigen-rate"
    assert any("eps = 0" in n or "excluded" in n for n in fit["notes"])
    meta = json.loads((out / "meta.json").read_text())
    assert meta["certifications"]["mesh"]["passed"] and meta["seed"] == 0
    assert meta["versions"]["kernel_backend"] in ("cython", "python")


def test_reports_byte_identical(tmp_path):
    cfg = _write(tmp_path, EIGEN)
    _, a = ex.run_experiment(cfg, tmp_path / "a")
    _, b = ex.run_experiment(cfg, tmp_path / "b")
    assert (a / "series.csv").read_bytes() == (b / "series.csv").read_bytes()
    assert b"\r" not in (a / "series.csv").read_bytes()
    fa, fb = json.loads((a / "fit.json").read_text()), json.loads((b / "fit.json").read_text())
    assert fa == fb


def test_output_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(ex.OUTPUT_ENV, str(tmp_path / "env"))
    _, out = ex.run_experiment(_write(tmp_path, EIGEN))
    assert out == tmp_path / "env" / "eigen-rate"
    assert (out / "series.csv").exists()


def test_mesh_certification_failure(tmp_path):
    text = EIGEN.replace("n = 32", "n = 4\ncertify_tol = 1e-12")
    with pytest.raises(ex.MeshCertificationError):
        ex.run_experiment(_write(tmp_path, text), tmp_path / "out")
    assert cli.main(["run", str(tmp_path / "cfg.toml"), "--out", str(tmp_path / "o")]) == cli.EXIT_CERTIFICATION


def test_attractor_runner_matches_standalone(tmp_path):
    text = """
[experiment]
name = "attractor-rate"
samples_per_connection = 200
resolution_factor = 0.0
oracle_points = 200

[mesh]
n = 32
certify = false

[integrator]
dt = 1e-3
certify = false

[sweep]
eps = [0.0625, 0.03125, 0.015625, 0.0078125]
"""
    res, _ = ex.run_experiment(_write(tmp_path, text), tmp_path / "out")
    acfg = AttractorConfig(samples_per_connection=200, integrator=IntegratorConfig(dt=1e-3))
    eps = [0.0625, 0.03125, 0.015625, 0.0078125]
    ref = attractor_rate_experiment(default_family(), Mesh1D.uniform(32), eps, acfg, resolution_factor=0.0)
    npt.assert_array_equal(res.primary.value, ref.series.value)
    assert res.fits["attractor"].exponent == ref.power.exponent


def test_equi_table_run(tmp_path):
    res, out = ex.run_experiment(_write(tmp_path, '[experiment]\nname = "equi-attraction-table"\n'), tmp_path / "o")
    assert not res.hard_failures
    assert (out / "tuples.csv").read_text().count("\n") == 11


def test_cli_list_experiments(capsys):
    assert cli.main(["list-experiments"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in out] == list(ex.EXPERIMENTS)
    assert len(out) == 12


def test_cli_validate(tmp_path, capsys):
    assert cli.main(["validate", str(_write(tmp_path, EIGEN))]) == 0
    assert "eigen-rate" in capsys.readouterr().out
    bad = _write(tmp_path, '[experiment]\nname = "eigen-rate"\n[mesh]\nn = "x"\n', "bad.toml")
    assert cli.main(["validate", str(bad)]) == cli.EXIT_CONFIG
    assert "mesh.n" in capsys.readouterr().err
    assert cli.main(["validate", str(tmp_path / "missing.toml")]) == cli.EXIT_CONFIG


def test_cli_run_exit_codes(tmp_path, capsys):
    assert cli.main(["run", str(_write(tmp_path, EIGEN)), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "cfg" / "fit.json").exists()
    assert "[PASS]" in capsys.readouterr().out
    # an unattainable dt tolerance is a hard failure
    text = """
[experiment]
name = "semigroup-rate"

[mesh]
n = 16
certify = false

[integrator]
dt = 1e-2
tolerance = 1e-30

[sweep]
eps = [0.0625, 0.03125, 0.015625, 0.0078125]
"""
    assert cli.main(["run", str(_write(tmp_path, text, "sg.toml")), "--out", str(tmp_path / "o")]) == 1
    assert "[FAIL] criterion dt" in capsys.readouterr().out


def test_shipped_configs_validate():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    names = set()
    for p in sorted(root.glob("*.toml")):
        names.add(ex.load_config(p)["experiment"]["name"])
    assert names == set(ex.EXPERIMENTS)


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "rdlab.cli", "list-experiments"], capture_output=True, text=True)
    assert out.returncode == 0 and "shadowing" in out.stdout
