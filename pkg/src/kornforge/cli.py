"""Command line entry point: ``kornforge generate|run|sweep|verify|config``."""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import config as cfgmod
from .scenarios import InvariantFailure, MODES, ScenarioSpec, SpecError, _jsonable, generate, run
from .sweep import PARAMETERS, SweepError, sweep

EXIT_INVARIANT = 2
EXIT_ERROR = 1


def _common(f):
    f = click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="scenario JSON file")(f)
    f = click.option("--mode", type=click.Choice(MODES), default=None)(f)
    f = click.option("--p", type=float, default=None, help="gradient exponent in [1, 2)")(f)
    f = click.option("--q", type=float, default=None, help="displacement exponent")(f)
    f = click.option("--theta", type=float, default=None)(f)
    f = click.option("--seed", type=int, default=None, help="master seed (falls back to KORNFORGE_SEED)")(f)
    f = click.option("--out", "out_dir", type=click.Path(file_okay=False), default="kornforge-out")(f)
    return f


def _resolve(spec_path, mode, p, q, theta, seed) -> ScenarioSpec:
    try:
        return cfgmod.resolve(spec_path, mode=mode, p=p, q=q, theta=theta, seed=seed)
    except (SpecError, ValueError) as exc:
        raise click.ClickException(f"[scenario_lab] {exc}") from exc


def _dump(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


@click.group()
def main():
    """Korn inequality laboratory for cracked displacement fields."""


@main.command("generate")
@_common
def generate_cmd(spec_path, mode, p, q, theta, seed, out_dir):
    """Build the scenario field and write it as field.npz plus a JSON record."""
    spec = _resolve(spec_path, mode, p, q, theta, seed)
    f, rec = generate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vc, hc = f.crack_edges
    np.savez_compressed(out / "field.npz", corners=f.corners, crack_vertical=vc, crack_horizontal=hc)
    _dump({"spec": spec.to_dict(), "record": rec}, out / "field.json")
    click.echo(str(out / "field.json"))


@main.command("run")
@_common
@click.option("--deterministic", is_flag=True, help="omit timestamps so reports are byte-identical")
def run_cmd(spec_path, mode, p, q, theta, seed, out_dir, deterministic):
    """Run one pipeline and write report.json; exit 2 on a hard invariant failure."""
    spec = _resolve(spec_path, mode, p, q, theta, seed)
    t0 = time.time()
    code = 0
    try:
        report = run(spec)
    except InvariantFailure as exc:
        report = exc.report
        code = EXIT_INVARIANT
        click.echo(str(exc), err=True)
    except Exception as exc:  # noqa: BLE001 - module errors become a tagged message
        click.echo(f"[{type(exc).__module__.split('.')[-1]}] {type(exc).__name__}: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    report["spec"] = spec.to_dict()
    if not deterministic:
        report["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        report["runtime_s"] = time.time() - t0
    path = Path(out_dir) / "report.json"
    _dump(report, path)
    click.echo(str(path))
    sys.exit(code)


@main.command("sweep")
@_common
@click.option("--param", "parameter", type=click.Choice(PARAMETERS), required=True)
@click.option("--values", type=str, required=True,
              help="comma separated values, or start:stop:count for a geometric range")
@click.option("--jobs", type=int, default=1, show_default=True)
def sweep_cmd(spec_path, mode, p, q, theta, seed, out_dir, parameter, values, jobs):
    """Sweep one parameter, write results.csv, loglog.svg and sweep.json."""
    spec = _resolve(spec_path, mode, p, q, theta, seed)
    if ":" in values:
        a, b, n = values.split(":")
        vals = list(np.geomspace(float(a), float(b), int(n)))
    else:
        vals = [float(v) for v in values.split(",")]
    try:
        res = sweep(spec, parameter, vals, None, jobs, out_dir)
    except SweepError as exc:
        click.echo(f"[scenario_lab] {exc}", err=True)
        sys.exit(EXIT_INVARIANT if isinstance(exc.__cause__, InvariantFailure) else EXIT_ERROR)
    _dump(res.to_dict(), Path(out_dir) / "sweep.json")
    for name, fit in res.fits.items():
        click.echo(f"{name}: slope {fit.slope:.4f} +- {fit.half_width:.4f} over {fit.n} points")
    click.echo(str(Path(out_dir) / "results.csv"))


@main.command("verify")
@_common
def verify_cmd(spec_path, mode, p, q, theta, seed, out_dir):
    """Run the hard invariants of a scenario and print one line per check."""
    spec = _resolve(spec_path, mode, p, q, theta, seed)
    checks: list[tuple[str, bool, str]] = []
    f1, _ = generate(spec)
    f2, _ = generate(spec)
    checks.append(("determinism", bool(np.array_equal(f1.corners, f2.corners)), "field replay"))
    try:
        rep = run(spec)
        checks.append(("invariants", True, spec["mode"]))
    except InvariantFailure as exc:
        rep = exc.report
        checks.append(("invariants", False, ", ".join(exc.failed)))
    if rep["mode"] == "local":
        from .local import LocalConfig, local_estimate

        cfg = LocalConfig(theta=float(spec["theta"]), C_shrink=float(spec["C_shrink"]))
        base = local_estimate(f1, float(spec["p"]), float(spec["q"]), cfg)
        worst = 0.0
        for lam in (0.5, 2.0):
            r = local_estimate(f1.scaled(lam), float(spec["p"]), float(spec["q"]), cfg)
            for a, b in ((base.const_u, r.const_u), (base.const_grad, r.const_grad)):
                if np.isfinite(a) and np.isfinite(b):
                    worst = max(worst, abs(a - b) / max(abs(a), 1e-300) if a else abs(b))
        checks.append(("scale_invariance", worst <= 1e-8, f"max relative change {worst:.3e}"))
    bad = 0
    for name, ok, note in checks:
        click.echo(f"{'PASS' if ok else 'FAIL'} {name}: {note}")
        bad += not ok
    sys.exit(EXIT_INVARIANT if bad else 0)


@main.group("config")
def config_group():
    """Inspect the layered configuration."""


@config_group.command("show")
@_common
def config_show(spec_path, mode, p, q, theta, seed, out_dir):
    """Print the effective configuration (defaults when nothing is given)."""
    if any(v is not None for v in (spec_path, mode, p, q, theta, seed)):
        click.echo(cfgmod.show(_resolve(spec_path, mode, p, q, theta, seed)))
    else:
        click.echo(cfgmod.show())


if __name__ == "__main__":
    main()
