"""Scenario specs and deterministic field generation."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import CrackSet, DisplacementField, Grid, Segment, build_field
from .rigid import RigidMotion


class SpecError(ValueError):
    pass


FAMILIES = ("none", "single_rectangle", "random_rectangles", "two_body", "shear_plus_cracks")
MODES = ("local", "boundary", "global", "recovery")

DEFAULTS: dict = {
    "id": "scenario",
    "seed": 0,
    "mode": "local",
    "grid": {"n": 256, "mu": 1.0, "center": [0.0, 0.0], "cells_per_mu": 32},
    "domain": {"kind": "square"},
    "family": {"kind": "none"},
    "field": {"omega": 0.0, "b": [0.0, 0.0], "gamma": 0.0},
    "p": 1.5,
    "q": 2.0,
    "theta": 0.25,
    "c_hat": 1.0 / 32.0,
    "c_bar": 1.0 / 32.0,
    "C_shrink": 40.0,
    "epsilon_frac": 0.01,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ScenarioSpec:
    data: dict = dc_field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.data = _merge(DEFAULTS, self.data)
        self.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(d)

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        with open(path) as fh:
            return cls(json.load(fh))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)

    def with_overrides(self, **kw) -> "ScenarioSpec":
        return ScenarioSpec(_merge(self.data, kw))

    def __getitem__(self, k):
        return self.data[k]

    def validate(self):
        d = self.data
        fam = d["family"].get("kind")
        if fam not in FAMILIES:
            raise SpecError(f"unknown crack family {fam!r}")
        if fam == "shear_plus_cracks":
            inner = d["family"].get("family", {"kind": "none"}).get("kind")
            if inner not in FAMILIES or inner == "shear_plus_cracks":
                raise SpecError(f"shear_plus_cracks needs a plain inner family, got {inner!r}")
        if d["mode"] not in MODES:
            raise SpecError(f"unknown mode {d['mode']!r}")
        if not (1.0 <= float(d["p"]) < 2.0):
            raise SpecError("p must lie in [1, 2)")
        if float(d["q"]) < 1.0:
            raise SpecError("q must be >= 1")


def _motion(d: dict | None) -> RigidMotion:
    d = d or {}
    return RigidMotion(d.get("omega", 0.0), tuple(d.get("b", (0.0, 0.0))))


def _snap(x, grid: Grid, axis: int) -> float:
    lo = grid.lower[axis]
    return float(lo + grid.h * np.round((x - lo) / grid.h))


@dataclass(frozen=True)
class Box:
    """Axis-parallel lattice rectangle carrying its own rigid offset."""

    x0: float
    x1: float
    y0: float
    y1: float
    motion: RigidMotion

    def segments(self) -> list[Segment]:
        return [Segment("x", self.y0, self.x0, self.x1), Segment("x", self.y1, self.x0, self.x1),
                Segment("y", self.x0, self.y0, self.y1), Segment("y", self.x1, self.y0, self.y1)]

    def contains(self, c: np.ndarray) -> np.ndarray:
        return (c[..., 0] > self.x0) & (c[..., 0] < self.x1) & (c[..., 1] > self.y0) & (c[..., 1] < self.y1)


def _box(grid: Grid, center, wx, wy, motion) -> Box:
    x0 = _snap(center[0] - wx / 2, grid, 0)
    y0 = _snap(center[1] - wy / 2, grid, 1)
    nx = max(int(round(wx / grid.h)), 1)
    ny = max(int(round(wy / grid.h)), 1)
    return Box(x0, x0 + nx * grid.h, y0, y0 + ny * grid.h, motion)


def family_boxes(fam: dict, grid: Grid, rng: np.random.Generator, placement) -> list[Box]:
    """Inclusions of a crack family. ``placement`` is (lo, hi) corners of the admissible box."""
    kind = fam.get("kind", "none")
    lo, hi = np.asarray(placement[0], float), np.asarray(placement[1], float)
    mid = 0.5 * (lo + hi)
    if kind == "none":
        return []
    if kind == "two_body":
        L = float(fam.get("L", 8 * grid.h))
        c = fam.get("center", mid)
        inner = _motion(fam.get("inner", {"omega": -0.1, "b": [0.05, 0.02]}))
        outer = _motion(fam.get("outer", {"omega": 0.3, "b": [0.1, -0.2]}))
        return [_box(grid, c, L, L, inner - outer)]
    if kind == "single_rectangle":
        L = float(fam.get("L", 8 * grid.h))
        aspect = float(fam.get("aspect", 1.0))
        c = fam.get("center", mid)
        opening = _motion(fam.get("opening", {"omega": 0.0, "b": [0.01, 0.0]}))
        return [_box(grid, c, L, aspect * L, opening)]
    if kind == "random_rectangles":
        count = int(fam.get("count", 3))
        smin, smax = fam.get("size_range", [2 * grid.h, 8 * grid.h])
        amp = float(fam.get("amplitude", 0.02))
        out = []
        for _ in range(count):
            wx, wy = rng.uniform(smin, smax, 2)
            c = rng.uniform(lo + max(wx, wy), hi - max(wx, wy))
            m = RigidMotion(amp * rng.uniform(-1, 1), tuple(amp * rng.uniform(-1, 1, 2)))
            out.append(_box(grid, c, wx, wy, m))
        return out
    raise SpecError(f"family {kind!r} cannot be placed directly")


def _check_boxes(boxes: list[Box], grid: Grid):
    g_lo, g_hi = grid.lower, grid.lower + 2 * grid.mu
    for b in boxes:
        if b.x1 - b.x0 < grid.h or b.y1 - b.y0 < grid.h:
            raise SpecError("inclusion thinner than one cell")
        if b.x0 <= g_lo[0] or b.x1 >= g_hi[0] or b.y0 <= g_lo[1] or b.y1 >= g_hi[1]:
            raise SpecError("inclusion does not fit inside the grid")


def field_from_boxes(grid: Grid, base: dict, boxes: list[Box]) -> DisplacementField:
    """Base motion plus shear, with each box offset by its own rigid motion (later boxes win)."""
    a0 = _motion(base)
    gamma = float(base.get("gamma", 0.0))
    offsets = [RigidMotion()] + [b.motion for b in boxes]

    def label(c):
        lab = np.zeros(c.shape[:-1], int)
        for k, b in enumerate(boxes):
            lab = np.where(b.contains(c), k + 1, lab)
        return lab

    def sample(points, centers):
        base_vals = a0(points)
        base_vals = base_vals + np.stack([gamma * points[..., 1], np.zeros(points.shape[:-1])], -1)
        lab = np.broadcast_to(label(centers), points.shape[:-1])
        out = base_vals.copy()
        for k in range(1, len(offsets)):
            out = np.where((lab == k)[..., None], base_vals + offsets[k](points), out)
        return out

    segs = [s for b in boxes for s in b.segments()]
    return build_field(grid, CrackSet(tuple(segs)), sample)


def generate_on(spec: ScenarioSpec, grid: Grid, placement=None) -> tuple[DisplacementField, dict]:
    """Field of the scenario on a given grid, with its crack record."""
    d = spec.data
    rng = np.random.default_rng(int(d["seed"]))
    if placement is None:
        half = 0.5 * grid.mu
        c = np.asarray(grid.center)
        placement = (c - half, c + half)
    fam = d["family"]
    base = dict(d["field"])
    if fam["kind"] == "two_body":
        outer = fam.get("outer", {"omega": 0.3, "b": [0.1, -0.2]})
        base.update(omega=outer.get("omega", 0.0), b=outer.get("b", [0.0, 0.0]))
    if fam["kind"] == "shear_plus_cracks":
        base["gamma"] = float(fam.get("gamma", base.get("gamma", 0.0) or 0.1))
        fam = fam.get("family", {"kind": "none"})
        if fam["kind"] == "two_body":
            outer = fam.get("outer", {"omega": 0.3, "b": [0.1, -0.2]})
            base.update(omega=outer.get("omega", 0.0), b=outer.get("b", [0.0, 0.0]))
    boxes = family_boxes(fam, grid, rng, placement)
    _check_boxes(boxes, grid)
    f = field_from_boxes(grid, base, boxes)
    record = {
        "jump_length": f.jump_length(),
        "crack_length": f.crack.total_length,
        "inclusions": [[b.x0, b.x1, b.y0, b.y1] for b in boxes],
    }
    return f, record


def generate(spec: ScenarioSpec) -> tuple[DisplacementField, dict]:
    """Field for local mode on the scenario grid."""
    g = spec["grid"]
    grid = Grid(tuple(g["center"]), float(g["mu"]), int(g["n"]))
    return generate_on(spec, grid)


# -- domains and runs -------------------------------------------------------------------


class InvariantFailure(RuntimeError):
    """A hard invariant of a pipeline run did not hold."""

    def __init__(self, module: str, failed: list[str], report: dict):
        super().__init__(f"[{module}] hard invariant failure: {', '.join(failed)}")
        self.module = module
        self.failed = failed
        self.report = report


POLYGONS = {
    "square": [(-1, -1), (1, -1), (1, 1), (-1, 1)],
    "l_shape": [(-1, -1), (1, -1), (1, 0), (0, 0), (0, 1), (-1, 1)],
    "rotated_square": [(0, -1.2), (1.2, 0), (0, 1.2), (-1.2, 0)],
}


def graph_domain(spec: ScenarioSpec):
    from .boundary import LipschitzGraphDomain

    d = spec["domain"]
    mu = float(d.get("mu", spec["grid"]["mu"]))
    kind = d.get("kind", "flat")
    if kind in ("flat", "square"):
        return LipschitzGraphDomain.flat(mu)
    if kind == "sawtooth":
        return LipschitzGraphDomain.sawtooth(mu, float(d.get("slope", 0.5)), int(d.get("teeth", 4)))
    if kind == "random_graph":
        return LipschitzGraphDomain.random(mu, float(d.get("slope", 0.5)), int(spec["seed"]), int(d.get("depth", 8)))
    raise SpecError(f"domain kind {kind!r} is not a graph domain")


def polygon(spec: ScenarioSpec) -> np.ndarray:
    d = spec["domain"]
    if "vertices" in d:
        v = d["vertices"]
    elif d.get("kind", "square") in POLYGONS:
        v = POLYGONS[d.get("kind", "square")]
    else:
        raise SpecError(f"domain kind {d.get('kind')!r} is not a polygon")
    return float(d.get("scale", 1.0)) * np.asarray(v, float)


def domain_grid(spec: ScenarioSpec) -> Grid:
    g = spec["grid"]
    return Grid(tuple(g["center"]), float(g["mu"]), int(g["n"]))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else str(v)
    return x


def _local_config(d: dict):
    from .local import LocalConfig

    return LocalConfig(theta=float(d["theta"]), C_shrink=float(d["C_shrink"]))


def run(spec: ScenarioSpec, mode: str | None = None, check: bool = True) -> dict:
    """Run the pipeline of one mode and return a JSON-ready report.

    Raises InvariantFailure (after building the report) when ``check`` is set and
    a hard invariant of the run fails.
    """
    from .assembly import GlobalConfig, build_atlas, global_estimate, polygon_contains, sbv_recovery
    from .boundary import BoundaryConfig, boundary_estimate
    from .field import RegionMask
    from .local import local_estimate

    d = spec.data
    mode = mode or d["mode"]
    if mode not in MODES:
        raise SpecError(f"unknown mode {mode!r}")
    p, q = float(d["p"]), float(d["q"])
    out: dict = {"id": d["id"], "mode": mode, "seed": int(d["seed"]), "p": p, "q": q}
    failed: list[str] = []
    if mode == "local":
        f, rec = generate(spec)
        rep = local_estimate(f, p, q, _local_config(d))
        fl = rep.flags
        for key in ("heal_ok", "off_E_exact", "product_ok"):
            if fl.get(key) is False:
                failed.append(key)
        module = "local_korn"
    elif mode == "boundary":
        dom = graph_domain(spec)
        grid = dom.chart_grid(int(d["grid"].get("cells_per_mu", 32)))
        mu = dom.mu
        f, rec = generate_on(spec, grid, placement=((-0.5 * mu, -0.5 * mu), (0.5 * mu, 0.5 * mu)))
        cfg = BoundaryConfig(c_hat=float(d["c_hat"]), seed=int(d["seed"]), local=_local_config(d))
        rep = boundary_estimate(f, dom, p, q, cfg)
        out["domain"] = dom.to_dict()
        if rep.flags.get("partition_ok") is False:
            failed.append("partition_ok")
        if rep.flags.get("john_certified") is False:
            failed.append("john_certified")
        module = "boundary_korn"
    elif mode == "global":
        grid = domain_grid(spec)
        verts = polygon(spec)
        mu_chart = float(d["domain"].get("mu_chart", 0.25))
        atlas = build_atlas(verts, grid, mu_chart)
        lo, hi = verts.min(0), verts.max(0)
        f, rec = generate_on(spec, grid, placement=(lo, hi))
        gc = d.get("global", {})
        cfg = GlobalConfig(c_glob=gc.get("c_glob"))
        rep = global_estimate(f, atlas, p, q, cfg)
        out["atlas"] = atlas.summary()
        for key in ("triangle_ok", "chart_invariance_ok"):
            if rep.flags.get(key) is False:
                failed.append(key)
        module = "global_assembly"
    else:
        grid = domain_grid(spec)
        verts = polygon(spec)
        omega = RegionMask(grid, polygon_contains(verts, grid.centers))
        lo, hi = verts.min(0), verts.max(0)
        f, rec = generate_on(spec, grid, placement=(lo, hi))
        eps = float(d["epsilon_frac"]) * omega.area
        res = sbv_recovery(f, omega, eps, float(d["c_bar"]), p, q, _local_config(d))
        out.update(record=_jsonable(rec), report=_jsonable(res.to_dict()),
                   summary=summary_row(d["id"], f.jump_length(), 0.0, res.area, res.perimeter,
                                       0.0, 0.0, 0.0, 0.0, {"area_ok": res.area <= eps}))
        if not res.area <= eps:
            failed.append("area_le_epsilon")
        out["ok"] = not failed
        if failed and check:
            raise InvariantFailure("global_assembly", failed, out)
        return out
    out["record"] = _jsonable(rec)
    out["report"] = _jsonable(rep.to_dict())
    out["summary"] = summary_row(d["id"], rep.jump_length, rep.elastic, rep.area_E, rep.perim_E,
                                 rep.residual_u_q, rep.residual_grad_p, rep.const_u, rep.const_grad,
                                 rep.flags)
    out["ok"] = not failed
    if failed and check:
        raise InvariantFailure(module, failed, out)
    return out


CSV_COLUMNS = ("scenario_id", "jump_len", "elastic_l2", "area_E", "perim_E", "resid_u_q",
               "resid_grad_p", "const_u", "const_grad", "flags")


def summary_row(sid, jump, elastic, area, perim, ru, rg, cu, cg, flags) -> dict:
    fl = ";".join(f"{k}={_jsonable(v)}" for k, v in sorted(flags.items())
                  if isinstance(v, (bool, np.bool_)) and k not in ("track",))
    return dict(zip(CSV_COLUMNS, (sid, float(jump), float(elastic), float(area), float(perim),
                                  float(ru), float(rg), _jsonable(cu), _jsonable(cg), fl)))
