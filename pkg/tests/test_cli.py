import json
import math
import subprocess
import sys

import numpy as np
import pytest

from idsasym.cli import ConfigError, config_hash, load_config, main
from idsasym.dos import DOSCurve

from conftest import config_path


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for var in ("IDSASYM_SEED", "IDSASYM_WORKERS", "IDSASYM_OUT"):
        monkeypatch.delenv(var, raising=False)


def run(command, config, out, *extra):
    return main([command, "--config", str(config), "--out", str(out), *extra])


def write_config(tmp_path, doc, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_check_reports_square_lattice_angle(tmp_path):
    assert run("check", config_path("square-lattice"), tmp_path) == 0
    doc = json.loads((tmp_path / "check.json").read_text())
    assert doc["verdict"] == "PASS" and doc["condition_A"]["verdict"] == "PASS"
    assert doc["quantities"]["s"] == pytest.approx(math.sqrt(2) / 2, abs=1e-12)
    assert doc["provenance"]["config_sha256"] and doc["provenance"]["version"]


def test_check_threshold_failure_sets_exit_code(tmp_path):
    cfg = write_config(tmp_path, {"potential": "fixture:square", "scale": {"rho_n": 100.0, "k_tilde": 2},
                                  "check": {"thresholds": {"s_min": 0.9}}})
    assert run("check", cfg, tmp_path / "o") == 1
    doc = json.loads((tmp_path / "o" / "check.json").read_text())
    assert doc["condition_C"]["s"]["verdict"] == "FAIL"


@pytest.mark.parametrize("d", [1, 2, 3])
def test_free_dos_is_weyl_law(tmp_path, d):
    assert run("dos", config_path(f"free-d{d}"), tmp_path) == 0
    cd = math.pi ** (d / 2) / math.gamma(d / 2 + 1) / (2 * math.pi) ** d
    for method in ("floquet", "gauge-volume"):
        curve = DOSCurve.from_csv(tmp_path / "dos.csv", method)
        assert np.allclose(curve.values, cd * curve.lambdas ** (d / 2), rtol=1e-4)
    assert (tmp_path / "dos.png").stat().st_size > 0
    meta = json.loads((tmp_path / "dos_meta.json").read_text())
    assert [c["method"] for c in meta["curves"]] == ["floquet", "gauge-volume"]


def test_dos_csv_carries_provenance(tmp_path):
    run("dos", config_path("free-d1"), tmp_path)
    head = (tmp_path / "dos.csv").read_text().splitlines()
    assert head[0].startswith("# tool: idsasym")
    assert any(l.startswith("# config_sha256: ") for l in head)
    assert "lambda,N,stderr,method" in head


def test_reruns_are_byte_identical(tmp_path):
    cfg = config_path("free-d2")
    run("dos", cfg, tmp_path / "a", "--no-cache")
    run("dos", cfg, tmp_path / "b", "--no-cache")
    for name in ("dos.csv", "dos_meta.json", "dos.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cache_is_reused_and_can_be_bypassed(tmp_path):
    cfg = config_path("free-d1")
    run("dos", cfg, tmp_path)
    entries = sorted((tmp_path / "cache").iterdir())
    assert len(entries) == 2
    stamp = {p: p.stat().st_mtime_ns for p in entries}
    first = (tmp_path / "dos.csv").read_bytes()
    run("dos", cfg, tmp_path)
    assert {p: p.stat().st_mtime_ns for p in entries} == stamp
    assert (tmp_path / "dos.csv").read_bytes() == first
    run("dos", cfg, tmp_path, "--no-cache")
    assert any(p.stat().st_mtime_ns != stamp[p] for p in entries)


def test_gauge_command_writes_report_and_figure(tmp_path):
    assert run("gauge", config_path("mathieu-gauge"), tmp_path) == 0
    doc = json.loads((tmp_path / "gauge.json").read_text())
    assert doc["summary"]["passed"] and doc["summary"]["discrepancy_decreasing"]
    assert (tmp_path / "gauge_norms.png").stat().st_size > 0


def test_geometry_command_certifies_regions(tmp_path):
    assert run("geometry", config_path("geometry-square"), tmp_path) == 0
    doc = json.loads((tmp_path / "geometry.json").read_text())
    assert doc["subspace_counts"] == {"0": 1, "1": 4, "2": 1}
    assert sum(doc["classification"]["by_dimension"].values()) == doc["classification"]["samples"]


def test_fit_from_csv_file(tmp_path):
    lams = np.geomspace(100, 4000, 20)
    vals = lams ** 0.5 / math.pi - lams ** -0.5 / (2 * math.pi)
    DOSCurve(lams, vals, np.full(20, 1e-9), "floquet").to_csv(tmp_path / "curve.csv")
    cfg = write_config(tmp_path, {"potential": "fixture:shifted-mathieu", "fit": {"curve": "curve.csv", "J": 1}})
    assert run("fit", cfg, tmp_path / "o") == 0
    doc = json.loads((tmp_path / "o" / "fit.json").read_text())
    coef = {c["term"]: c["value"] for c in doc["fit"]["coefficients"]}
    assert coef["lambda^-0.5"] == pytest.approx(doc["reference"]["e1"], rel=1e-8)
    assert (tmp_path / "o" / "fit.png").stat().st_size > 0


@pytest.mark.slow
def test_verify_passes_on_mathieu(tmp_path):
    assert run("verify", config_path("verify"), tmp_path) == 0
    doc = json.loads((tmp_path / "verify.json").read_text())
    assert all(s["passed"] for s in doc["suites"].values())
    assert (tmp_path / "residue.csv").read_text().count("\n") > 100
    assert (tmp_path / "residue_errors.png").stat().st_size > 0


# ------------------------------------------------------------------ errors


def test_invalid_config_gives_json_error(tmp_path, capsys):
    cfg = write_config(tmp_path, {"dos": {"method": "magic"}})
    assert run("dos", cfg, tmp_path) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "ConfigError" and "dos/method" in err["error"]["message"]


def test_missing_potential_file_is_reported(tmp_path, capsys):
    cfg = write_config(tmp_path, {"potential": "nowhere.json"})
    assert run("check", cfg, tmp_path) == 2
    assert "not found" in json.loads(capsys.readouterr().err)["error"]["message"]


def test_dimension_mismatch_is_reported(tmp_path, capsys):
    cfg = write_config(tmp_path, {"potential": "fixture:mathieu", "dim": 2})
    assert run("check", cfg, tmp_path) == 2
    assert "disagrees" in json.loads(capsys.readouterr().err)["error"]["message"]


def test_exact_method_refuses_nonzero_potential(tmp_path, capsys):
    cfg = write_config(tmp_path, {"potential": "fixture:mathieu", "dos": {"method": "exact", "lambdas": [10]}})
    assert run("dos", cfg, tmp_path) == 2
    assert json.loads(capsys.readouterr().err)["error"]["command"] == "dos"


def test_console_script_exit_code(tmp_path):
    cfg = write_config(tmp_path, {"seed": -1})
    proc = subprocess.run([sys.executable, "-m", "idsasym.cli", "check", "--config", str(cfg), "--out",
                           str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"]["type"] == "ConfigError"


# -------------------------------------------------------------- precedence


def test_flag_beats_env_beats_config(tmp_path):
    cfg = write_config(tmp_path, {"seed": 1, "workers": 2})
    env = {"IDSASYM_SEED": "5", "IDSASYM_WORKERS": "3"}
    c, _ = load_config(cfg, env={})
    assert (c["seed"], c["workers"]) == (1, 2)
    c, _ = load_config(cfg, env=env)
    assert (c["seed"], c["workers"]) == (5, 3)
    c, _ = load_config(cfg, seed=9, env=env)
    assert (c["seed"], c["workers"]) == (9, 3)


def test_env_out_is_used(tmp_path, monkeypatch):
    monkeypatch.setenv("IDSASYM_OUT", str(tmp_path / "from-env"))
    assert main(["check", "--config", str(config_path("square-lattice"))]) == 0
    assert (tmp_path / "from-env" / "check.json").is_file()


def test_bad_env_value_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="IDSASYM_SEED"):
        load_config(None, env={"IDSASYM_SEED": "abc"})


def test_defaulted_fields_are_listed():
    _, defaulted = load_config(config_path("free-d1"), env={})
    assert "seed" in defaulted and "dos.samples" in defaulted and "potential" not in defaulted


def test_hash_ignores_output_location_and_workers(tmp_path):
    a, _ = load_config(config_path("free-d1"), out="x", workers=1, env={})
    b, _ = load_config(config_path("free-d1"), out="y", workers=4, env={})
    c, _ = load_config(config_path("free-d1"), seed=7, env={})
    assert config_hash(a) == config_hash(b) != config_hash(c)
