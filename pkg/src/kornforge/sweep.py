"""Parameter sweeps: run a scenario family, write CSV, fit log-log slopes, draw an SVG."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import stats

from .scenarios import CSV_COLUMNS, ScenarioSpec, run

PARAMETERS = ("crack_length", "grid_h", "theta", "p")


class SweepError(RuntimeError):
    pass


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    half_width: float            # 95% confidence half-width of the slope
    n: int
    span_decades: float

    def within(self, target: float, tol: float) -> bool:
        return abs(self.slope - target) <= tol

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "half_width": self.half_width,
                "n": self.n, "span_decades": self.span_decades}


def fit_loglog(x, y, min_points: int = 8, min_decades: float = 1.0) -> SlopeFit:
    """Least-squares slope of log y against log x over the positive finite pairs."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ok = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    x, y = x[ok], y[ok]
    if len(x) < min_points:
        raise SweepError(f"slope fit needs {min_points} points, got {len(x)}")
    span = float(np.log10(x.max() / x.min()))
    if span < min_decades - 1e-9:
        raise SweepError(f"slope fit needs {min_decades} decade(s) of x, got {span:.2f}")
    lx, ly = np.log(x), np.log(y)
    r = stats.linregress(lx, ly)
    hw = float(stats.t.ppf(0.975, len(x) - 2) * r.stderr) if len(x) > 2 else math.inf
    return SlopeFit(float(r.slope), float(r.intercept), hw, int(len(x)), span)


@dataclass
class SweepResult:
    parameter: str
    values: list
    rows: list[dict]
    extras: list[dict] = dc_field(default_factory=list)
    fits: dict = dc_field(default_factory=dict)
    stability: dict = dc_field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([float(r[name]) for r in self.rows])

    def to_dict(self) -> dict:
        return {"parameter": self.parameter, "values": list(self.values), "rows": self.rows,
                "extras": self.extras, "fits": {k: v.to_dict() for k, v in self.fits.items()},
                "stability": self.stability}


def point_spec(base: ScenarioSpec, parameter: str, value, index: int) -> ScenarioSpec:
    d = base.to_dict()
    d["id"] = f"{d['id']}-{parameter}-{index:03d}"
    if parameter == "crack_length":
        fam = d["family"]
        target = fam["family"] if fam["kind"] == "shear_plus_cracks" else fam
        target["L"] = float(value)
    elif parameter == "grid_h":
        # value is the cell size; the grid keeps its half width
        n = int(round(2 * float(d["grid"]["mu"]) / float(value)))
        d["grid"]["n"] = n
        d["grid"]["cells_per_mu"] = int(round(float(d["grid"].get("mu", 1.0)) / float(value)))
    elif parameter == "theta":
        d["theta"] = float(value)
    elif parameter == "p":
        d["p"] = float(value)
    else:
        raise SweepError(f"unknown sweep parameter {parameter!r}")
    return ScenarioSpec(d)


def _run_point(args):
    spec_dict, mode = args
    out = run(ScenarioSpec(spec_dict), mode, check=True)
    heal = out.get("report", {}).get("diagnostics", {}).get("heal", {})
    extra = {"eta_blend": heal.get("eta_blend"), "max_product": heal.get("max_product"),
             "product_bound": heal.get("product_bound"),
             "fallback": bool(out.get("report", {}).get("flags", {}).get("fallback", False))}
    return out["summary"], extra


def write_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(CSV_COLUMNS))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CSV_COLUMNS})


def sweep(base: ScenarioSpec, parameter: str, values, mode: str | None = None, jobs: int = 1,
          out_dir=None, min_points: int = 8) -> SweepResult:
    """Run every sweep point; rows come back in index order whatever the completion order.

    A failing point aborts the sweep after flushing the rows that precede it.
    """
    if parameter not in PARAMETERS:
        raise SweepError(f"unknown sweep parameter {parameter!r}")
    values = list(values)
    if len(values) < min_points:
        raise SweepError(f"a sweep needs at least {min_points} values, got {len(values)}")
    specs = [point_spec(base, parameter, v, k).to_dict() for k, v in enumerate(values)]
    tasks = [(s, mode) for s in specs]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows, extras = [], []
    error = None
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_point, t) for t in tasks]
            for fut in futures:
                try:
                    r, e = fut.result()
                except Exception as exc:  # noqa: BLE001 - reported with the partial CSV
                    error = exc
                    break
                rows.append(r)
                extras.append(e)
    else:
        for t in tasks:
            try:
                r, e = _run_point(t)
            except Exception as exc:  # noqa: BLE001
                error = exc
                break
            rows.append(r)
            extras.append(e)
    if error is not None:
        if out is not None:
            write_csv(out / "results.partial.csv", rows)
        raise SweepError(f"sweep point {len(rows)} failed: {error}") from error
    res = SweepResult(parameter, values, rows, extras)
    H = res.column("jump_len")
    for name, col in (("area_E", "area_E"), ("perim_E", "perim_E")):
        try:
            res.fits[name] = fit_loglog(H, res.column(col), min_points)
        except SweepError as exc:
            res.stability[f"fit_{name}"] = str(exc)
    for name in ("const_u", "const_grad"):
        c = res.column(name)
        c = c[np.isfinite(c) & (c > 0)]
        res.stability[name] = float(c.max() / c.min() - 1.0) if len(c) else None
    if out is not None:
        write_csv(out / "results.csv", rows)
        write_svg(out / "loglog.svg", res)
    return res


def write_svg(path, res: SweepResult, width: int = 480, height: int = 360):
    """Log-log plot of |E| and perimeter(E) against the jump length, written by hand."""
    H = res.column("jump_len")
    series = [("area_E", res.column("area_E"), "#1f77b4"), ("perim_E", res.column("perim_E"), "#d62728")]
    pts = [(x, y) for _, ys, _ in series for x, y in zip(H, ys) if x > 0 and y > 0 and np.isfinite(y)]
    m = 50
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if pts:
        lx = np.log10([p[0] for p in pts])
        ly = np.log10([p[1] for p in pts])
        x0, x1 = lx.min(), max(lx.max(), lx.min() + 1e-9)
        y0, y1 = ly.min(), max(ly.max(), ly.min() + 1e-9)

        def sx(v):
            return m + (np.log10(v) - x0) / (x1 - x0) * (width - 2 * m)

        def sy(v):
            return height - m - (np.log10(v) - y0) / (y1 - y0) * (height - 2 * m)

        lines.append(f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>')
        lines.append(f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>')
        lines.append(f'<text x="{width / 2:.0f}" y="{height - 12}" font-size="12" text-anchor="middle">'
                     f'log10 jump length</text>')
        for k, (name, ys, color) in enumerate(series):
            for x, y in zip(H, ys):
                if x > 0 and y > 0 and np.isfinite(y):
                    lines.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
            fit = res.fits.get(name)
            label = name if fit is None else f"{name} slope {fit.slope:.3f} +- {fit.half_width:.3f}"
            lines.append(f'<text x="{m + 10}" y="{m + 14 * (k + 1)}" font-size="12" fill="{color}">{label}</text>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")
