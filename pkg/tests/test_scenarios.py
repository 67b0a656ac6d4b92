import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

import kornforge.local as local_mod
from kornforge import config as cfgmod
from kornforge.cli import main
from kornforge.scenarios import (
    CSV_COLUMNS, DEFAULTS, InvariantFailure, ScenarioSpec, SpecError, generate, run,
)
from kornforge.sweep import SweepError, fit_loglog, point_spec, sweep, write_csv

SMALL = {"id": "small", "grid": {"n": 32}, "family": {"kind": "two_body", "L": 0.25},
         "C_shrink": 1.0}
HEADER = "scenario_id,jump_len,elastic_l2,area_E,perim_E,resid_u_q,resid_grad_p,const_u,const_grad,flags"


def test_spec_defaults_and_merge():
    s = ScenarioSpec({"grid": {"n": 64}})
    assert s["grid"]["n"] == 64 and s["grid"]["mu"] == DEFAULTS["grid"]["mu"]
    assert s["p"] == 1.5 and s["mode"] == "local"
    t = s.with_overrides(p=1.25)
    assert t["p"] == 1.25 and s["p"] == 1.5


@pytest.mark.parametrize("bad", [
    {"family": {"kind": "spiral"}},
    {"mode": "everything"},
    {"p": 2.0},
    {"q": 0.5},
    {"family": {"kind": "shear_plus_cracks", "family": {"kind": "shear_plus_cracks"}}},
])
def test_spec_errors(bad):
    with pytest.raises(SpecError):
        ScenarioSpec(bad)


def test_inclusion_outside_grid_is_rejected():
    with pytest.raises(SpecError, match="fit"):
        generate(ScenarioSpec({"grid": {"n": 32}, "family": {"kind": "two_body", "L": 3.0}}))


def test_generation_is_deterministic():
    spec = ScenarioSpec({"grid": {"n": 64}, "seed": 7, "family": {"kind": "random_rectangles", "count": 4}})
    f1, r1 = generate(spec)
    f2, r2 = generate(spec)
    assert np.array_equal(f1.corners, f2.corners) and r1 == r2
    f3, _ = generate(spec.with_overrides(seed=8))
    assert not np.array_equal(f1.corners, f3.corners)


def test_two_body_record():
    f, rec = generate(ScenarioSpec(SMALL))
    assert rec["crack_length"] == pytest.approx(1.0)
    assert rec["jump_length"] == pytest.approx(1.0)
    assert len(rec["inclusions"]) == 1


def test_run_local_report_shape():
    out = run(ScenarioSpec(SMALL))
    assert out["ok"] and out["mode"] == "local"
    assert tuple(out["summary"]) == CSV_COLUMNS
    assert "heal_ok=True" in out["summary"]["flags"]
    json.dumps(out)


def test_run_boundary_and_recovery_small():
    b = run(ScenarioSpec({"mode": "boundary", "grid": {"cells_per_mu": 16},
                          "family": {"kind": "none"}, "field": {"gamma": 0.1}}))
    assert b["ok"] and b["report"]["flags"]["john_certified"]
    r = run(ScenarioSpec({"mode": "recovery", "grid": {"n": 128, "mu": 1.25},
                          "family": {"kind": "two_body", "L": 0.25}, "epsilon_frac": 0.1}))
    assert r["ok"] and r["summary"]["area_E"] <= 0.1 * 4.0


def test_invariant_failure_carries_report(monkeypatch):
    real = local_mod.local_estimate

    def broken(*a, **k):
        rep = real(*a, **k)
        rep.flags["heal_ok"] = False
        return rep

    monkeypatch.setattr(local_mod, "local_estimate", broken)
    with pytest.raises(InvariantFailure) as exc:
        run(ScenarioSpec(SMALL))
    assert exc.value.failed == ["heal_ok"] and "[local_korn]" in str(exc.value)
    assert exc.value.report["ok"] is False
    assert run(ScenarioSpec(SMALL), check=False)["ok"] is False


def test_csv_header_is_stable(tmp_path):
    row = run(ScenarioSpec(SMALL))["summary"]
    write_csv(tmp_path / "r.csv", [row])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == HEADER and len(lines) == 2


def test_fit_loglog():
    x = np.geomspace(0.01, 1, 9)
    fit = fit_loglog(x, 3 * x**1.5)
    assert fit.slope == pytest.approx(1.5, abs=1e-12) and fit.half_width == pytest.approx(0, abs=1e-9)
    assert fit.within(1.5, 1e-9)
    with pytest.raises(SweepError):
        fit_loglog(x[:5], x[:5])
    with pytest.raises(SweepError):
        fit_loglog(np.linspace(1, 2, 9), np.linspace(1, 2, 9))


def test_point_spec_semantics():
    base = ScenarioSpec(SMALL)
    assert point_spec(base, "crack_length", 0.5, 3)["family"]["L"] == 0.5
    assert point_spec(base, "crack_length", 0.5, 3)["id"] == "small-crack_length-003"
    assert point_spec(base, "grid_h", 1 / 64, 0)["grid"]["n"] == 128
    assert point_spec(base, "theta", 0.5, 0)["theta"] == 0.5
    with pytest.raises(SweepError):
        point_spec(base, "colour", 1, 0)


def test_sweep_rows_keep_input_order(tmp_path):
    vals = list(np.geomspace(0.0625, 0.625, 8))
    base = ScenarioSpec(SMALL)
    serial = sweep(base, "crack_length", vals, jobs=1, out_dir=tmp_path / "a")
    para = sweep(base, "crack_length", vals, jobs=2, out_dir=tmp_path / "b")
    assert [r["scenario_id"] for r in para.rows] == [f"small-crack_length-{k:03d}" for k in range(8)]
    assert serial.rows == para.rows
    assert (tmp_path / "a" / "results.csv").read_text() == (tmp_path / "b" / "results.csv").read_text()
    assert (tmp_path / "a" / "loglog.svg").read_text().startswith("<svg")


def test_sweep_failure_writes_partial_csv(tmp_path):
    vals = [0.125, 0.25, 0.375, 5.0, 0.5, 0.625, 0.75, 0.875]
    with pytest.raises(SweepError, match="point 3"):
        sweep(ScenarioSpec(SMALL), "crack_length", vals, out_dir=tmp_path)
    with open(tmp_path / "results.partial.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and not (tmp_path / "results.csv").exists()
    with pytest.raises(SweepError):
        sweep(ScenarioSpec(SMALL), "crack_length", vals[:4])


def test_config_precedence(tmp_path, monkeypatch):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"p": 1.25, "theta": 0.5}))
    monkeypatch.delenv(cfgmod.SEED_ENV, raising=False)
    assert cfgmod.resolve()["p"] == 1.5
    s = cfgmod.resolve(str(path))
    assert s["p"] == 1.25 and s["theta"] == 0.5 and s["seed"] == 0
    assert cfgmod.resolve(str(path), p=1.75)["p"] == 1.75
    monkeypatch.setenv(cfgmod.SEED_ENV, "42")
    assert cfgmod.resolve(str(path))["seed"] == 42
    assert cfgmod.resolve(str(path), seed=3)["seed"] == 3
    path.write_text(json.dumps({"seed": 9}))
    assert cfgmod.resolve(str(path))["seed"] == 9


def _spec_file(tmp_path, d=SMALL):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(d))
    return str(p)


def test_cli_run_deterministic_is_byte_identical(tmp_path):
    r = CliRunner()
    spec = _spec_file(tmp_path)
    a = r.invoke(main, ["run", "--spec", spec, "--deterministic", "--out", str(tmp_path / "a")])
    b = r.invoke(main, ["run", "--spec", spec, "--deterministic", "--out", str(tmp_path / "b")])
    assert a.exit_code == 0 and b.exit_code == 0, a.output
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    c = r.invoke(main, ["run", "--spec", spec, "--out", str(tmp_path / "c")])
    assert "timestamp" in json.loads((tmp_path / "c" / "report.json").read_text())


def test_cli_generate_verify_and_config(tmp_path):
    r = CliRunner()
    spec = _spec_file(tmp_path)
    g = r.invoke(main, ["generate", "--spec", spec, "--out", str(tmp_path / "g")])
    assert g.exit_code == 0
    data = np.load(tmp_path / "g" / "field.npz")
    assert data["corners"].shape == (32, 32, 4, 2)
    v = r.invoke(main, ["verify", "--spec", spec])
    assert v.exit_code == 0, v.output
    assert [ln.split()[0] for ln in v.output.strip().splitlines()] == ["PASS"] * 3
    c = r.invoke(main, ["config", "show", "--p", "1.25"])
    assert json.loads(c.output)["p"] == 1.25
    assert json.loads(r.invoke(main, ["config", "show"]).output) == json.loads(json.dumps(DEFAULTS))


def test_cli_error_paths(tmp_path, monkeypatch):
    r = CliRunner()
    bad = _spec_file(tmp_path, {"family": {"kind": "spiral"}})
    res = r.invoke(main, ["run", "--spec", bad])
    assert res.exit_code != 0 and "[scenario_lab]" in res.output
    real = local_mod.local_estimate

    def broken(*a, **k):
        rep = real(*a, **k)
        rep.flags["off_E_exact"] = False
        return rep

    monkeypatch.setattr(local_mod, "local_estimate", broken)
    res = r.invoke(main, ["run", "--spec", _spec_file(tmp_path), "--out", str(tmp_path / "x")])
    assert res.exit_code == 2
    assert json.loads((tmp_path / "x" / "report.json").read_text())["ok"] is False


def test_cli_sweep_range_syntax(tmp_path):
    r = CliRunner()
    res = r.invoke(main, ["sweep", "--spec", _spec_file(tmp_path), "--param", "crack_length",
                          "--values", "0.0625:0.625:8", "--out", str(tmp_path / "s")])
    assert res.exit_code == 0, res.output
    lines = (tmp_path / "s" / "results.csv").read_text().splitlines()
    assert lines[0] == HEADER and len(lines) == 9
