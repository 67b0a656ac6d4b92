"""Whole-domain estimate on a polygon: chart atlas, per-chart estimates, gluing,
and the covering that trades the exceptional set's area for its perimeter."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .boundary import (
    BoundaryConfig,
    LipschitzGraphDomain,
    ResolutionError,
    boundary_estimate,
    whitney_cover,
)
from .field import CrackSet, DisplacementField, GeometryError, Grid, RegionMask, harmonize, lp_norm, strain
from .local import KornReport, LocalConfig, ParameterError, internal_exponent, local_estimate, normalized_constant, residuals
from .multiscale import BoundaryMeasure, box_cells, box_mask
from .rigid import RigidMotion


class AtlasError(GeometryError):
    pass


# -- polygons and isometries ------------------------------------------------------


def polygon_contains(vertices, pts) -> np.ndarray:
    """Even-odd ray casting, vectorized over points."""
    v = np.asarray(vertices, float)
    p = np.asarray(pts, float)
    x, y = p[..., 0], p[..., 1]
    inside = np.zeros(p.shape[:-1], bool)
    for k in range(len(v)):
        (x1, y1), (x2, y2) = v[k], v[(k + 1) % len(v)]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xc)
    return inside


def signed_area(vertices) -> float:
    v = np.asarray(vertices, float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float((x * np.roll(y, -1) - np.roll(x, -1) * y).sum())


@dataclass(frozen=True)
class Isometry:
    """x = R y + t from chart coordinates y to domain coordinates x."""

    R: np.ndarray
    t: np.ndarray

    def __call__(self, y) -> np.ndarray:
        return np.asarray(y, float) @ self.R.T + self.t

    def inverse(self, x) -> np.ndarray:
        return (np.asarray(x, float) - self.t) @ self.R

    def motion_to_domain(self, a: RigidMotion) -> RigidMotion:
        """Chart motion a (acting on chart displacements) as a motion in domain coordinates."""
        A = self.R @ a.A @ self.R.T
        b = self.R @ a.bvec - A @ self.t
        return RigidMotion(A[1, 0], tuple(b))

    def lattice_compatible(self, h: float) -> bool:
        R = self.R
        perm = np.allclose(np.abs(R), np.round(np.abs(R)), atol=1e-12)
        shift = np.allclose(self.t / h, np.round(self.t / h), atol=1e-9)
        return bool(perm and shift)


def _frame(up: np.ndarray) -> np.ndarray:
    """Rotation whose second column is the unit vector ``up``."""
    up = up / np.linalg.norm(up)
    return np.column_stack([np.array([up[1], -up[0]]), up])


# -- atlas --------------------------------------------------------------------------------


@dataclass
class Chart:
    kind: str                                  # 'vertex', 'edge' or 'interior'
    iso: Isometry
    domain: LipschitzGraphDomain | None = None
    center: np.ndarray | None = None           # interior squares: center and U' half width
    half: float = 0.0

    def inner_contains(self, x: np.ndarray) -> np.ndarray:
        """Membership in U' for domain points."""
        if self.kind == "interior":
            return np.all(np.abs(x - self.center) < self.half, axis=-1)
        y = self.iso.inverse(x)
        mu = self.domain.mu
        return (np.abs(y[..., 0]) < mu) & (y[..., 1] >= -mu) & (y[..., 1] < self.domain(y[..., 0]))

    def outer_contains(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "interior":
            return np.all(np.abs(x - self.center) < 2 * self.half, axis=-1)
        y = self.iso.inverse(x)
        mu = self.domain.mu
        return (np.abs(y[..., 0]) < 2 * mu) & (y[..., 1] >= -2 * mu) & (y[..., 1] <= self.domain(y[..., 0]))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "R": self.iso.R.tolist(), "t": self.iso.t.tolist()}
        if self.kind == "interior":
            d.update(center=self.center.tolist(), half=self.half)
        else:
            d.update(mu=self.domain.mu, cbar=self.domain.cbar)
        return d


@dataclass
class DomainAtlas:
    vertices: np.ndarray
    grid: Grid
    charts: list[Chart]
    omega: RegionMask
    eta_overlap: float
    inner_masks: list[np.ndarray]
    pairs: list[tuple[int, int]]
    checks: dict = dc_field(default_factory=dict)

    @property
    def n_boundary(self) -> int:
        return sum(c.kind != "interior" for c in self.charts)

    def summary(self) -> dict:
        return {"n_charts": len(self.charts), "n_boundary": self.n_boundary,
                "eta_overlap": self.eta_overlap, "checks": self.checks}


def _vertex_chart(v, prev, nxt, mu: float) -> Chart:
    e_in = (v - prev) / np.linalg.norm(v - prev)
    e_out = (nxt - v) / np.linalg.norm(nxt - v)
    # interior angle for a counterclockwise polygon
    turn = np.arctan2(e_in[0] * e_out[1] - e_in[1] * e_out[0], e_in @ e_out)
    alpha = np.pi - turn
    if alpha < np.deg2rad(5.0) or alpha > np.deg2rad(355.0):
        raise AtlasError(f"corner at {v.tolist()} has angle {np.rad2deg(alpha):.1f} deg (cusp)")
    inward = e_out - e_in
    if np.linalg.norm(inward) < 1e-12:
        inward = np.array([-e_out[1], e_out[0]])
    inward /= np.linalg.norm(inward)
    if alpha > np.pi:
        inward = -inward
    cot = 1.0 / np.tan(alpha / 2.0)
    apex = mu + 2.0 * mu * max(cot, 0.0)
    dom = LipschitzGraphDomain.from_function(lambda y1: apex - cot * np.abs(y1), mu, 1025, abs(cot) + 1e-12)
    R = _frame(-inward)
    return Chart("vertex", Isometry(R, v - R @ np.array([0.0, apex])), dom)


def _edge_chart(p, tangent, mu: float) -> Chart:
    outward = np.array([tangent[1], -tangent[0]])
    R = _frame(outward)
    return Chart("edge", Isometry(R, p - R @ np.array([0.0, mu])), LipschitzGraphDomain.flat(mu))


def _greedy_tiles(grid: Grid, omega: np.ndarray, rest: np.ndarray, r: float):
    """Tiles of half r on a lattice of step 1.5 r with doubles inside the domain."""
    step = 1.5 * r
    lo = grid.lower
    rest = rest.copy()
    cands = []
    for a_ in range(int(np.ceil(2 * grid.mu / step)) + 1):
        for b_ in range(int(np.ceil(2 * grid.mu / step)) + 1):
            ctr = lo + 2 * r + step * np.array([a_, b_])
            if np.any(ctr + 2 * r > lo + 2 * grid.mu + 1e-12):
                continue
            si, sj = box_cells(grid, ctr, 2 * r)
            if not omega[si, sj].all():
                continue
            mi, mj = box_cells(grid, ctr, r)
            if rest[mi, mj].any():
                cands.append((ctr, mi, mj))
    out = []
    while cands:
        gains = [int(rest[mi, mj].sum()) for _, mi, mj in cands]
        k = int(np.argmax(gains))
        if gains[k] == 0:
            break
        ctr, mi, mj = cands.pop(k)
        rest[mi, mj] = False
        out.append((ctr, mi, mj))
    return out


def build_atlas(vertices, grid: Grid, mu_chart: float, interior_half: float | None = None) -> DomainAtlas:
    """Vertex and edge charts along the boundary, then interior squares for the rest."""
    v = np.asarray(vertices, float)
    if len(v) < 3:
        raise AtlasError("polygon needs at least three vertices")
    if signed_area(v) < 0:
        v = v[::-1]
    mu = float(mu_chart)
    charts: list[Chart] = []
    nv = len(v)
    for k in range(nv):
        charts.append(_vertex_chart(v[k], v[k - 1], v[(k + 1) % nv], mu))
    for k in range(nv):
        a, b = v[k], v[(k + 1) % nv]
        ell = float(np.linalg.norm(b - a))
        tau = (b - a) / ell
        lo, hi = 2.0 * mu, ell - 2.0 * mu
        if hi < lo:
            if ell < 2.0 * mu:
                raise AtlasError(f"edge {k} is shorter than the chart size; lower mu_chart")
            continue
        m = max(int(np.ceil((hi - lo) / (1.5 * mu))), 0) + 1
        for t in np.linspace(lo, hi, m):
            # keep chart origins on the lattice so axis-parallel edges resample exactly
            t = grid.h * np.round(t / grid.h)
            charts.append(_edge_chart(a + t * tau, tau, mu))
    c = grid.centers
    omega = polygon_contains(v, c)
    # containment of every chart's U in the domain (cells strictly inside U)
    for idx, ch in enumerate(charts):
        y = ch.iso.inverse(c)
        inside_u = (np.abs(y[..., 0]) < 2 * mu - grid.h) & (y[..., 1] > -2 * mu + grid.h) \
            & (y[..., 1] < ch.domain(y[..., 0]) - grid.h)
        if (inside_u & ~omega).any():
            raise AtlasError(f"chart {idx} ({ch.kind}) leaves the domain; lower mu_chart")
    covered = np.zeros_like(omega)
    for ch in charts:
        covered |= ch.inner_contains(c)
    # interior squares: overlapping lattice tiles whose double lies in the domain,
    # picked greedily, largest half width first, until every cell is covered
    r0 = interior_half or mu
    rest = omega & ~covered
    r = r0
    while rest.any() and r >= 2 * grid.h * (1 - 1e-12):
        for ctr, mi, mj in _greedy_tiles(grid, omega, rest, r):
            rest[mi, mj] = False
            charts.append(Chart("interior", Isometry(np.eye(2), np.zeros(2)), None, ctr, r))
        r /= 2.0
    if rest.any():
        bad = np.argwhere(rest)[0]
        raise AtlasError(f"cell at {c[tuple(bad)].tolist()} is not covered by any admissible square")
    masks = [ch.inner_contains(c) & omega for ch in charts]
    union = np.zeros_like(omega)
    for m in masks:
        union |= m
    if (omega & ~union).any():
        raise AtlasError("charts do not cover the domain")
    h2 = grid.h**2
    pairs, areas = [], []
    for i in range(len(charts)):
        for j in range(i + 1, len(charts)):
            a = h2 * float((masks[i] & masks[j]).sum())
            if a > 0:
                pairs.append((i, j))
                areas.append(a)
    # connectivity of the overlap graph
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    nc = len(charts)
    if pairs:
        pi, pj = np.array(pairs).T
        ncomp, _ = connected_components(coo_matrix((np.ones(len(pi)), (pi, pj)), shape=(nc, nc)), directed=False)
    else:
        ncomp = nc
    if ncomp != 1:
        raise AtlasError(f"chart overlap graph has {ncomp} components")
    eta = float(min(areas)) if areas else 0.0
    if eta <= 0:
        raise AtlasError("no overlapping charts")
    checks = {"covered": True, "contained": True, "components": int(ncomp),
              "iso_roundtrip": max(float(np.abs(ch.iso.inverse(ch.iso(c[::7, ::7])) - c[::7, ::7]).max())
                                   for ch in charts)}
    return DomainAtlas(v, grid, charts, RegionMask(grid, omega), eta, masks, pairs, checks)


# -- resampling a field into a chart -------------------------------------------------


def _step_blocked(vc, hc, i, j, di, dj):
    """Crack edge between cell (i, j) and its 4-neighbour (i+di, j+dj)."""
    n = hc.shape[0]
    out = np.zeros(np.shape(i), bool)
    mv = di != 0
    iv = np.clip(np.minimum(i, i + di), 0, n - 2)
    out[mv] = vc[iv[mv], np.clip(j[mv], 0, n - 1)]
    mh = dj != 0
    jh = np.clip(np.minimum(j, j + dj), 0, n - 2)
    out[mh] = hc[np.clip(i[mh], 0, n - 1), jh[mh]]
    return out


def _hosts_separated(vc, hc, ai, aj, bi, bj) -> np.ndarray:
    di, dj = bi - ai, bj - aj
    zero = np.zeros_like(di)
    axis = (np.abs(di) + np.abs(dj)) == 1
    diag = (np.abs(di) == 1) & (np.abs(dj) == 1)
    out = np.zeros(di.shape, bool)
    s1 = _step_blocked(vc, hc, ai, aj, di, zero)
    s2 = _step_blocked(vc, hc, ai, aj, zero, dj)
    out[axis] = (s1 | s2)[axis]
    if diag.any():
        # both two-step paths between diagonal hosts must be blocked
        p1 = s1 | _step_blocked(vc, hc, ai + di, aj, zero, dj)
        p2 = s2 | _step_blocked(vc, hc, ai, aj + dj, di, zero)
        out[diag] = (p1 & p2)[diag]
    far = (np.abs(di) > 1) | (np.abs(dj) > 1)
    out[far] = True
    return out


@dataclass
class ChartField:
    field: DisplacementField
    host_i: np.ndarray
    host_j: np.ndarray
    valid: np.ndarray


def resample_to_chart(field: DisplacementField, chart: Chart, cells_per_mu: int) -> ChartField:
    """Field seen in chart coordinates, u_c(y) = R^T u(R y + t), on a chart grid of equal cell size.

    Each chart cell takes the global cell holding its center as host and evaluates the
    host's bilinear interpolant at its corners; chart edges whose hosts are separated by
    a crack become crack edges, and the remaining corner slots are made continuous.
    """
    g = field.grid
    cg = chart.domain.chart_grid(cells_per_mu)
    R = chart.iso.R
    hi, hj = g.cell_index(chart.iso(cg.centers))
    valid = hi >= 0
    hi0 = np.clip(hi, 0, g.n - 1)
    hj0 = np.clip(hj, 0, g.n - 1)
    x = chart.iso(cg.corners)
    base = g.lower + g.h * np.stack([hi0, hj0], -1)
    xi = (x - base[:, :, None, :]) / g.h
    s, t = xi[..., 0:1], xi[..., 1:2]
    c = field.corners[hi0, hj0]
    val = (c[:, :, 0:1] * (1 - s) * (1 - t) + c[:, :, 1:2] * s * (1 - t)
           + c[:, :, 2:3] * (1 - s) * t + c[:, :, 3:4] * s * t)
    val = val.reshape(cg.n, cg.n, 4, 2) @ R
    vc, hc = field.crack_edges
    cvc = _hosts_separated(vc, hc, hi0[:-1, :], hj0[:-1, :], hi0[1:, :], hj0[1:, :])
    chc = _hosts_separated(vc, hc, hi0[:, :-1], hj0[:, :-1], hi0[:, 1:], hj0[:, 1:])
    val = harmonize(cg, (cvc, chc), val)
    f = DisplacementField(cg, CrackSet.from_edges(cg, cvc, chc), val, (cvc, chc))
    return ChartField(f, hi, hj, valid)


def chart_mask_to_domain(mask: RegionMask, chart: Chart, grid: Grid) -> np.ndarray:
    """Global cells whose center falls in a chart cell of the mask and in the chart's U'."""
    y = chart.iso.inverse(grid.centers)
    ci, cj = mask.grid.cell_index(y)
    ok = ci >= 0
    out = np.zeros((grid.n, grid.n), bool)
    out[ok] = mask.cells[ci[ok], cj[ok]]
    return out & chart.inner_contains(grid.centers)


# -- whole-domain estimate ------------------------------------------------------------


@dataclass
class GlobalConfig:
    c_glob: float | None = None           # small-jump gate; None picks sqrt(eta/2) for the atlas
    enforce_area_gate: bool = True        # off only for diagnostics: keeps E even when |E| > eta/2
    boundary: BoundaryConfig = dc_field(default_factory=lambda: BoundaryConfig(john_random=20, john_max_samples=200))
    # interior tiles are small next to the domain, so the strict local gate would give up
    # every tile touching a crack; a milder shrink keeps E local
    local: LocalConfig = dc_field(default_factory=lambda: LocalConfig(C_shrink=4.0, enforce_gate=False))

    def to_dict(self) -> dict:
        return {"c_glob": self.c_glob, "enforce_area_gate": self.enforce_area_gate, "boundary": self.boundary.to_dict(), "local": self.local.to_dict()}


def default_jump_gate(atlas: DomainAtlas) -> float:
    return float(np.sqrt(atlas.eta_overlap / 2.0))


@dataclass
class GlobalKornReport:
    rigid: RigidMotion
    exceptional: RegionMask
    residual_u_q: float
    residual_grad_p: float
    elastic: float
    jump_length: float
    const_u: float
    const_grad: float
    p: float
    q: float
    charts: list = dc_field(default_factory=list)
    gluing: dict = dc_field(default_factory=dict)
    flags: dict = dc_field(default_factory=dict)
    diagnostics: dict = dc_field(default_factory=dict)
    chart_motions: list = dc_field(default_factory=list)

    @property
    def area_E(self) -> float:
        return self.exceptional.area

    @property
    def perim_E(self) -> float:
        return self.exceptional.perimeter()

    def to_dict(self) -> dict:
        return {
            "rigid": self.rigid.to_dict(), "area_E": self.area_E, "perim_E": self.perim_E,
            "residual_u_q": self.residual_u_q, "residual_grad_p": self.residual_grad_p,
            "elastic": self.elastic, "jump_length": self.jump_length,
            "const_u": self.const_u, "const_grad": self.const_grad, "p": self.p, "q": self.q,
            "charts": self.charts, "gluing": self.gluing, "flags": self.flags,
            "diagnostics": self.diagnostics,
        }


def _lq(vals: np.ndarray, h: float, q: float) -> float:
    if vals.size == 0:
        return 0.0
    return float((h * h * (np.linalg.norm(vals, axis=-1) ** q).sum()) ** (1.0 / q))


def _interior_chart(field: DisplacementField, ch: Chart, p, q, cfg: LocalConfig):
    g = field.grid
    r = ch.half
    m = int(round(4 * r / g.h))
    si, sj = box_cells(g, ch.center, 2 * r)
    sub = field.restrict(si.start, sj.start, m)
    rep = local_estimate(sub, p, q, cfg)
    E = np.zeros((g.n, g.n), bool)
    E[si, sj] = rep.exceptional.cells
    if rep.shrunk_mu < r:
        # the estimate only reaches the shrunk square; the rest of U' is given up
        ring = box_mask(g, ch.center, r) & ~box_mask(g, ch.center, rep.shrunk_mu)
        E |= ring
    return rep, E


def global_estimate(field: DisplacementField, atlas: DomainAtlas, p: float = 1.5, q: float = 2.0,
                    config: GlobalConfig | None = None) -> GlobalKornReport:
    cfg = config or GlobalConfig()
    if not (1.0 <= p < 2.0):
        raise ParameterError(f"p must lie in [1, 2), got {p}")
    if q < 1.0:
        raise ParameterError(f"q must be >= 1, got {q}")
    g = field.grid
    if g != atlas.grid:
        raise AtlasError("field and atlas live on different grids")
    omega = atlas.omega
    h = g.h
    elastic = lp_norm(strain(field), omega, 2)
    jv, jh = field.jump_edges()
    oc = omega.cells
    H = h * float((jv & oc[:-1, :] & oc[1:, :]).sum() + (jh & oc[:, :-1] & oc[:, 1:]).sum())
    c_glob = cfg.c_glob if cfg.c_glob is not None else default_jump_gate(atlas)
    eta = atlas.eta_overlap
    flags = {"fallback": False, "reason": "", "c_glob": c_glob, "gate_area": eta / 2.0,
             "triangle_ok": True}
    tol = 1e-10 * max(field.scale, 1e-300)

    def fallback(reason: str, charts=None, motions=None) -> GlobalKornReport:
        flags.update(fallback=True, reason=reason)
        return GlobalKornReport(RigidMotion(), omega, 0.0, 0.0, elastic, H, 0.0, 0.0, p, q,
                                charts or [], {}, flags, {}, motions or [])

    if H > c_glob:
        return fallback(f"jump length {H:.4g} exceeds the global gate {c_glob:.4g}")

    mu = atlas.charts[0].domain.mu
    cpm = int(round(mu / h))
    E = np.zeros((g.n, g.n), bool)
    motions: list[RigidMotion] = []
    sub: list[dict] = []
    for idx, ch in enumerate(atlas.charts):
        if ch.kind == "interior":
            rep, Ei = _interior_chart(field, ch, p, q, cfg.local)
        else:
            cf = resample_to_chart(field, ch, cpm)
            rep = boundary_estimate(cf.field, ch.domain, p, q, cfg.boundary)
            Ei = chart_mask_to_domain(rep.exceptional, ch, g)
        a = rep.rigid if ch.kind == "interior" else ch.iso.motion_to_domain(rep.rigid)
        Ei &= atlas.inner_masks[idx]
        E |= Ei
        motions.append(a)
        sub.append({"index": idx, "kind": ch.kind, "rigid": a.to_dict(), "area_E": h * h * float(Ei.sum()),
                    "const_u": rep.const_u, "const_grad": rep.const_grad,
                    "jump_length": rep.jump_length, "fallback": bool(rep.flags.get("fallback", False))})
    Emask = RegionMask(g, E & oc)
    flags["area_gate_ok"] = Emask.area <= eta / 2.0
    if Emask.area > eta / 2.0 and cfg.enforce_area_gate:
        # shrink the gate below the present jump length: this field falls outside it
        flags["c_glob"] = min(c_glob, H * (1 - 1e-12))
        return fallback(f"|E| = {Emask.area:.4g} exceeds eta/2 = {eta / 2:.4g}", sub, motions)

    # gluing on overlaps
    vals = field.cell_values()
    c = g.centers
    worst_dist, lemma_max, used = 0.0, 0.0, 0
    for i, j in atlas.pairs:
        ov = atlas.inner_masks[i] & atlas.inner_masks[j]
        good = ov & ~E
        if h * h * good.sum() < eta / 2.0:
            continue
        used += 1
        d = motions[i] - motions[j]
        dist = _lq(d(c[good]), h, q)
        ri = _lq(vals[good] - motions[i](c[good]), h, q)
        rj = _lq(vals[good] - motions[j](c[good]), h, q)
        if dist > (ri + rj) * (1 + 1e-9) + tol * h:
            flags["triangle_ok"] = False
        full = _lq(d(c[ov]), h, q)
        worst_dist = max(worst_dist, full)
        if dist > 0:
            lemma_max = max(lemma_max, full / dist)
    gluing = {"pairs_used": used, "pairs_total": len(atlas.pairs), "max_rigid_distance": worst_dist,
              "max_rigid_distance_over_elastic": worst_dist / elastic if elastic > tol else 0.0,
              "lemma_ratio_max": lemma_max, "m": len(atlas.charts), "eta_overlap": eta}

    a = motions[0]
    good = omega - Emask
    r_u, r_g, excluded = residuals(field, a, good, p, q)
    e_tol = tol
    c_u = normalized_constant(r_u, 1.0, elastic, tol * good.area ** (1 / q), e_tol)
    c_g = normalized_constant(r_g, 1.0, elastic, tol / h * good.area ** (1 / p), e_tol)

    # changing the reference chart moves the residual by at most the rigid distance
    ru_all = []
    gc = good.cells
    for k, ak in enumerate(motions):
        rk = _lq(vals[gc] - ak(c[gc]), h, q)
        dk = _lq((ak - a)(c[gc]), h, q)
        ru_all.append((rk, dk))
    invariance_ok = all(abs(rk - r_u) <= dk * (1 + 1e-9) + tol * h for rk, dk in ru_all)
    flags["chart_invariance_ok"] = bool(invariance_ok)
    diag = {"chart_residual_spread": (max(r for r, _ in ru_all) - min(r for r, _ in ru_all)) if ru_all else 0.0,
            "excluded_area": excluded}
    return GlobalKornReport(a, Emask, r_u, r_g, elastic, H, c_u, c_g, p, q, sub, gluing, flags, diag, motions)


# -- covering with small area ----------------------------------------------------------


@dataclass
class RecoveryResult:
    exceptional: RegionMask
    epsilon: float
    tile_half: float
    area_F: float
    levels: list
    flags: dict = dc_field(default_factory=dict)

    @property
    def area(self) -> float:
        return self.exceptional.area

    @property
    def perimeter(self) -> float:
        return self.exceptional.perimeter()

    def to_dict(self) -> dict:
        return {"area_E": self.area, "perim_E": self.perimeter, "epsilon": self.epsilon,
                "tile_half": self.tile_half, "area_F": self.area_F, "levels": self.levels,
                "flags": self.flags}


def _cum(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    out[1:, 1:] = a.cumsum(0).cumsum(1)
    return out


def _recovery_level(field: DisplacementField, omega: np.ndarray, w: int, c_bar: float,
                    measure: BoundaryMeasure, p, q, cfg: LocalConfig):
    g = field.grid
    n, h = g.n, g.h
    s = 0.5 * w * h
    nt = n // w
    a_idx = np.arange(nt)
    A, B = np.meshgrid(a_idx, a_idx, indexing="ij")
    tile_omega = omega.reshape(nt, w, nt, w).any(axis=(1, 3))
    centers = g.lower + h * w * (np.stack([A, B], -1) + 0.5)
    # Q' (half 1.5 s) inside the domain: no outside cell meets the open box
    lo = np.floor((centers - 1.5 * s - g.lower) / h + 1e-9).astype(int)
    hi = np.ceil((centers + 1.5 * s - g.lower) / h - 1e-9).astype(int)
    inside_grid = (lo >= 0).all(-1) & (hi <= n).all(-1)
    lo = np.clip(lo, 0, n)
    hi = np.clip(hi, 0, n)
    cs = _cum((~omega).astype(float))
    outside = cs[hi[..., 0], hi[..., 1]] - cs[lo[..., 0], hi[..., 1]] - cs[hi[..., 0], lo[..., 1]] + cs[lo[..., 0], lo[..., 1]]
    leaves = (outside > 0) | ~inside_grid
    jump = measure.in_boxes(centers.reshape(-1, 2), 1.5 * s).reshape(nt, nt)
    bad = tile_omega & (leaves | (jump >= c_bar * s))
    good_jump = tile_omega & ~bad & (jump > 0)
    F = np.repeat(np.repeat(bad, w, 0), w, 1) & omega
    E = F.copy()
    n_local = n_coarse = n_fallback = 0
    for a_, b_ in np.argwhere(good_jump):
        tile = np.zeros((n, n), bool)
        tile[a_ * w:(a_ + 1) * w, b_ * w:(b_ + 1) * w] = True
        if w % 4 == 0:
            m = 3 * w // 2
            i0, j0 = a_ * w - w // 4, b_ * w - w // 4
            rep = local_estimate(field.restrict(i0, j0, m), p, q, cfg)
            if rep.flags.get("fallback"):
                n_fallback += 1
                E |= tile
                continue
            Et = np.zeros((n, n), bool)
            Et[i0:i0 + m, j0:j0 + m] = rep.exceptional.cells
            if rep.shrunk_mu < s:
                Et |= ~box_mask(g, centers[a_, b_], rep.shrunk_mu)
            E |= Et & tile
            n_local += 1
        else:
            # below four cells per tile no local estimate fits; the tile is given up
            n_coarse += 1
            E |= tile
    E &= omega
    info = {"tile_half": s, "n_tiles": int(tile_omega.sum()), "n_bad": int(bad.sum()),
            "n_local": n_local, "n_coarse": n_coarse, "n_fallback": n_fallback,
            "area_F": h * h * float(F.sum()), "area_E": h * h * float(E.sum())}
    return E, F, info


def sbv_recovery(field: DisplacementField, omega: RegionMask, epsilon_area: float, c_bar: float = 1.0 / 32.0,
                 p: float = 1.5, q: float = 2.0, config: LocalConfig | None = None,
                 coarsest: int | None = None) -> RecoveryResult:
    """Exceptional set of area at most epsilon_area, refining the tiling until it fits."""
    if epsilon_area <= 0:
        raise ParameterError("epsilon_area must be positive")
    g = field.grid
    h = g.h
    if epsilon_area < h * h:
        raise ResolutionError(f"epsilon {epsilon_area:.3g} is below one cell area {h * h:.3g}")
    cfg = config or LocalConfig()
    jv, jh = field.jump_edges()
    measure = BoundaryMeasure.from_edges(g, jv, jh)
    w = coarsest or 1
    if coarsest is None:
        while g.n % (2 * w) == 0 and 2 * w <= g.n // 8:
            w *= 2
    levels = []
    while w >= 1:
        if g.n % w:
            w //= 2
            continue
        E, F, info = _recovery_level(field, omega.cells, w, c_bar, measure, p, q, cfg)
        levels.append(info)
        if info["area_E"] <= epsilon_area:
            res = RecoveryResult(RegionMask(g, E), epsilon_area, info["tile_half"], info["area_F"], levels,
                                 {"area_ok": True})
            assert res.area <= epsilon_area
            return res
        w //= 2
    raise ResolutionError(f"no tiling down to one cell reaches |E| <= {epsilon_area:.4g} "
                          f"(best {min(l['area_E'] for l in levels):.4g})")
