"""Korn estimate up to a flat-ish boundary piece: the region under a Lipschitz graph.

Coordinates are chart coordinates. The graph domain is
``U = (-2mu, 2mu) x [-2mu, psi]`` with ``min psi = mu``, and the estimate is
stated on ``U' = (-mu, mu) x [-mu, psi)``. Sets are rasterized by cell centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial import cKDTree

from .field import DisplacementField, GeometryError, Grid, RegionMask, gradient, lp_norm, strain
from .local import (
    KornReport,
    LocalConfig,
    ParameterError,
    internal_exponent,
    local_estimate,
    normalized_constant,
    residuals,
)
from .multiscale import BoundaryMeasure, _ramp, box_cells
from .rigid import DomainError, RigidMotion, fit_rigid, rigid_distance


class ResolutionError(GeometryError):
    pass


class JohnViolation(RuntimeError):
    def __init__(self, certificate: "JohnCertificate"):
        super().__init__(f"{len(certificate.violations)} sampled points have no admissible chain curve")
        self.certificate = certificate


# -- the graph domain ---------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzGraphDomain:
    """Region below the graph of psi sampled at uniform nodes of [-2mu, 2mu]."""

    psi: np.ndarray
    mu: float
    cbar: float | None = None

    def __post_init__(self):
        psi = np.asarray(self.psi, float).copy()
        if psi.ndim != 1 or len(psi) < 2:
            raise DomainError("psi needs at least two samples")
        if abs(psi.min() - self.mu) > 1e-12 * max(self.mu, 1.0):
            raise DomainError(f"min psi = {psi.min():.6g} but mu = {self.mu:.6g}")
        slope = float(np.abs(np.diff(psi)).max() / self.dx_of(len(psi), self.mu))
        if self.cbar is not None and slope > self.cbar * (1 + 1e-9):
            raise DomainError(f"sampled slope {slope:.4g} exceeds cbar = {self.cbar}")
        psi.setflags(write=False)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "cbar", float(slope if self.cbar is None else self.cbar))

    @staticmethod
    def dx_of(m: int, mu: float) -> float:
        return 4.0 * mu / (m - 1)

    @classmethod
    def from_function(cls, fn, mu: float, samples: int = 1025, cbar=None) -> "LipschitzGraphDomain":
        x = np.linspace(-2 * mu, 2 * mu, samples)
        return cls(np.asarray(fn(x), float), mu, cbar)

    @classmethod
    def flat(cls, mu: float) -> "LipschitzGraphDomain":
        return cls(np.full(2, mu), mu, 0.0)

    @classmethod
    def sawtooth(cls, mu: float, slope: float, teeth: int = 4, samples: int = 1025):
        period = 4.0 * mu / teeth
        return cls.from_function(
            lambda x: mu + slope * np.abs(((x + 2 * mu) % period) - period / 2), mu, samples, slope)

    @classmethod
    def random(cls, mu: float, slope: float, seed: int, depth: int = 8):
        """Midpoint displacement with every step's slope clamped to the bound."""
        rng = np.random.default_rng(seed)
        m = 2**depth + 1
        y = np.zeros(m)
        step = m - 1
        dx = 4.0 * mu / (m - 1)
        amp = slope * 2.0 * mu
        while step > 1:
            half = step // 2
            for a in range(0, m - 1, step):
                mid = 0.5 * (y[a] + y[a + step]) + amp * rng.uniform(-0.5, 0.5)
                lo = max(y[a], y[a + step]) - slope * half * dx
                hi = min(y[a], y[a + step]) + slope * half * dx
                y[a + half] = np.clip(mid, lo, hi)
            step = half
            amp *= 0.5
        return cls(y - y.min() + mu, mu, slope)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(-2 * self.mu, 2 * self.mu, len(self.psi))

    def __call__(self, x1) -> np.ndarray:
        return np.interp(x1, self.xs, self.psi)

    @property
    def top(self) -> float:
        return float(self.psi.max())

    def chart_grid(self, cells_per_mu: int = 32) -> Grid:
        """Smallest power-of-two grid square holding U, with h = mu / cells_per_mu."""
        mu = self.mu
        G = 2.0 * mu
        while 2.0 * G < self.top + 2.0 * mu:
            G *= 2.0
        n = int(round(2.0 * G / mu * cells_per_mu))
        return Grid((0.0, -2.0 * mu + G), G, n)

    def U(self, grid: Grid) -> RegionMask:
        c = grid.centers
        x1, x2 = c[..., 0], c[..., 1]
        return RegionMask(grid, (np.abs(x1) < 2 * self.mu) & (x2 >= -2 * self.mu) & (x2 <= self(x1)))

    def U_inner(self, grid: Grid) -> RegionMask:
        c = grid.centers
        x1, x2 = c[..., 0], c[..., 1]
        return RegionMask(grid, (np.abs(x1) < self.mu) & (x2 >= -self.mu) & (x2 < self(x1)))

    def to_dict(self) -> dict:
        return {"mu": self.mu, "cbar": self.cbar, "psi": self.psi.tolist()}


# -- Whitney cover ------------------------------------------------------------------------


@dataclass
class WhitneyCover:
    grid: Grid
    centers: np.ndarray      # (k, 2)
    half: np.ndarray         # (k,)
    terminal: np.ndarray     # (k,) single-cell squares left at the boundary
    dist: np.ndarray         # (k,) distance of the closed square to the boundary of U
    U: RegionMask
    checks: dict = dc_field(default_factory=dict)

    def __len__(self):
        return len(self.half)

    @property
    def diameters(self) -> np.ndarray:
        return 2.0 * np.sqrt(2.0) * self.half

    def halo_pairs(self, factor: float = 1.5) -> np.ndarray:
        """Index pairs whose enlarged squares (open, scaled by factor) overlap."""
        if len(self) < 2:
            return np.zeros((0, 2), int)
        tree = cKDTree(self.centers)
        r = 2.0 * factor * float(self.half.max())
        pairs = tree.query_pairs(r, p=np.inf, output_type="ndarray")
        d = np.abs(self.centers[pairs[:, 0]] - self.centers[pairs[:, 1]]).max(1)
        keep = d < factor * (self.half[pairs[:, 0]] + self.half[pairs[:, 1]]) - 1e-12 * self.grid.h
        return pairs[keep]

    def neighbors(self) -> list[list[int]]:
        out = [[] for _ in range(len(self))]
        for a, b in self.halo_pairs():
            out[a].append(int(b))
            out[b].append(int(a))
        return out

    def cell_slices(self, k: int, factor: float = 1.0):
        return box_cells(self.grid, self.centers[k], factor * self.half[k])


def _block_min(a: np.ndarray, b: int) -> np.ndarray:
    m0, m1 = a.shape[0] // b, a.shape[1] // b
    return a[: m0 * b, : m1 * b].reshape(m0, b, m1, b).min(axis=(1, 3))


def whitney_cover(domain: LipschitzGraphDomain, grid: Grid, max_terminal_fraction: float = 0.25) -> WhitneyCover:
    """Greedy dyadic Whitney cover of U, coarse to fine.

    Squares live on the dyadic lattice anchored at (-2mu, -2mu) with half
    widths mu/2, mu/4, ... down to half a cell. A square is taken when all its
    cells lie in U, none is taken yet, and its distance to the boundary of U
    is at least its diameter. Cells left over at the end become single-cell
    terminal squares; they are the only ones allowed to break the lower
    distance bound.
    """
    mu, h = domain.mu, grid.h
    U = domain.U(grid)
    # distance from each cell to the boundary of U, cell-center based
    padded = np.pad(U.cells, 1, constant_values=False)
    edt = distance_transform_edt(padded, sampling=h)[1:-1, 1:-1]
    dist_cell = np.where(U.cells, edt - h, -np.inf)
    i_lo = grid.lattice_index(-2 * mu, 0)
    j_lo = grid.lattice_index(-2 * mu, 1)
    width = int(round(4 * mu / h))
    height = grid.n - j_lo
    if i_lo < 0 or j_lo < 0 or i_lo + width > grid.n:
        raise ResolutionError("chart grid does not contain U")
    taken = np.zeros((grid.n, grid.n), bool)
    centers, halves, dists, term = [], [], [], []
    s = mu / 2.0
    while s >= 0.5 * h * (1 - 1e-12):
        b = int(round(2 * s / h))
        sub_d = dist_cell[i_lo : i_lo + width, j_lo : grid.n]
        sub_t = taken[i_lo : i_lo + width, j_lo : grid.n]
        dmin = _block_min(sub_d, b)
        free = _block_min(~sub_t, b)
        ok = free & (dmin >= 2.0 * np.sqrt(2.0) * s - 1e-9 * h)
        for a1, a2 in zip(*np.nonzero(ok)):
            i0, j0 = i_lo + a1 * b, j_lo + a2 * b
            taken[i0 : i0 + b, j0 : j0 + b] = True
            centers.append((grid.xs[i0] + s, grid.ys[j0] + s))
            halves.append(s)
            dists.append(dmin[a1, a2])
            term.append(False)
        s /= 2.0
    left = U.cells & ~taken
    li, lj = np.nonzero(left)
    for i, j in zip(li, lj):
        centers.append(tuple(grid.centers[i, j]))
        halves.append(h / 2)
        dists.append(max(dist_cell[i, j], 0.0))
        term.append(True)
    cover = WhitneyCover(grid, np.array(centers, float).reshape(-1, 2), np.array(halves, float),
                         np.array(term, bool), np.array(dists, float), U)
    term_area = h * h * float(len(li))
    if (~cover.terminal).sum() == 0 or term_area > max_terminal_fraction * U.area:
        raise ResolutionError(
            f"grid too coarse for the graph: terminal cells cover {term_area:.3g} of |U| = {U.area:.3g}")
    cover.checks = check_whitney(cover)
    return cover


def check_whitney(cover: WhitneyCover) -> dict:
    """Measured constants of the Whitney properties."""
    nt = ~cover.terminal
    d = cover.diameters
    lower_ok = bool(np.all(cover.dist[nt] >= d[nt] * (1 - 1e-9) - 1e-9 * cover.grid.h))
    upper = float((cover.dist[nt] / d[nt]).max()) if nt.any() else 0.0
    # multiplicity of the halo squares at cell centers of U
    g = cover.grid
    cnt = np.zeros((g.n, g.n), int)
    c = g.centers
    for k in range(len(cover)):
        si, sj = cover.cell_slices(k, 1.5)
        cc = c[si, sj]
        cnt[si, sj] += np.all(np.abs(cc - cover.centers[k]) < 1.5 * cover.half[k], axis=-1)
    N = int(cnt[cover.U.cells].max()) if cover.U.count else 0
    pairs = cover.halo_pairs()
    ratio = float((np.maximum(cover.half[pairs[:, 0]], cover.half[pairs[:, 1]])
                   / np.minimum(cover.half[pairs[:, 0]], cover.half[pairs[:, 1]])).max()) if len(pairs) else 1.0
    covered = np.zeros((g.n, g.n), bool)
    for k in range(len(cover)):
        si, sj = cover.cell_slices(k)
        covered[si, sj] = True
    return {
        "lower_ok": lower_ok,
        "upper_const": upper,
        "multiplicity": N,
        "neighbor_ratio": ratio,
        "tiles_U": bool(np.array_equal(covered & cover.U.cells, cover.U.cells)),
        "n_squares": len(cover),
        "n_terminal": int(cover.terminal.sum()),
    }


# -- bad squares and shadow strips -------------------------------------------------


@dataclass
class ShadowResult:
    bad: np.ndarray              # indices into the cover
    jump_in_halo: np.ndarray     # H1(J cap Q') per square
    P: RegionMask
    V: RegionMask
    fallback: bool
    perimeter_ratio: float       # perimeter(P) / H1(J in U)
    jump_length: float
    reason: str = ""


def jump_edges_in(field: DisplacementField, mask: RegionMask) -> tuple[np.ndarray, np.ndarray]:
    """Jump edges with both neighbouring cells in the mask."""
    jv, jh = field.jump_edges()
    m = mask.cells
    return jv & m[:-1, :] & m[1:, :], jh & m[:, :-1] & m[:, 1:]


def boundary_bad_squares(field: DisplacementField, domain: LipschitzGraphDomain, cover: WhitneyCover,
                         c_hat: float = 1.0 / 32.0) -> ShadowResult:
    g = field.grid
    mu = domain.mu
    U = cover.U
    jv, jh = jump_edges_in(field, U)
    H = g.h * float(jv.sum() + jh.sum())
    meas = BoundaryMeasure.from_edges(g, jv, jh)
    halo = np.zeros(len(cover))
    for s in np.unique(cover.half):
        idx = np.nonzero(cover.half == s)[0]
        halo[idx] = meas.in_boxes(cover.centers[idx], 1.5 * s)
    bad = np.nonzero((halo > 0) & (halo >= c_hat * cover.diameters * (1 - 1e-12)))[0]
    c = g.centers
    P = np.zeros((g.n, g.n), bool)
    guard = False
    for k in bad:
        p, r = cover.centers[k], 1.5 * cover.half[k]
        P |= (np.abs(c[..., 0] - p[0]) < r) & (c[..., 1] > p[1] - r)
        # a strip crossing the horizontal axis inside U' would cut V apart
        if abs(p[0]) < mu + r and p[1] - r < 0:
            guard = True
    P &= U.cells
    Pm = RegionMask(g, P)
    Ui = domain.U_inner(g)
    ratio = Pm.perimeter() / H if H > 0 else 0.0
    if guard:
        return ShadowResult(bad, halo, U, RegionMask.empty(g), True, ratio, H,
                            "a shadow strip reaches the horizontal axis inside U'")
    return ShadowResult(bad, halo, Pm, Ui - Pm, False, ratio, H)


# -- John curves ---------------------------------------------------------------------


@dataclass
class JohnCertificate:
    constant: float
    samples: np.ndarray          # (k, 2) sampled start points
    constants: np.ndarray        # (k,) per-sample sup t / dist
    violations: list = dc_field(default_factory=list)
    entered_P: int = 0
    mode: str = "chain"

    @property
    def certified(self) -> bool:
        return not self.violations and np.isfinite(self.constant)

    def summary(self) -> dict:
        worst = int(np.argmax(self.constants)) if len(self.constants) else -1
        return {
            "constant": float(self.constant),
            "n_samples": int(len(self.samples)),
            "worst_point": self.samples[worst].tolist() if worst >= 0 else None,
            "violations": len(self.violations),
            "entered_P": int(self.entered_P),
            "certified": self.certified,
            "mode": self.mode,
        }


class _BoundaryDistance:
    """Distance from points to the boundary of a cell-union region in the grid."""

    def __init__(self, V: RegionMask, k: int = 8):
        g = V.grid
        self.grid, self.V = g, V.cells
        out = g.centers[~V.cells]
        self.tree = cKDTree(out) if len(out) else None
        self.out = out
        self.k = min(k, len(out))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        g = self.grid
        lo, hi = g.lower, g.lower + 2 * g.mu
        frame = np.minimum(z - lo, hi - z).min(axis=-1)
        d = np.maximum(frame, 0.0)
        if self.tree is not None:
            _, idx = self.tree.query(z, k=self.k)
            idx = np.atleast_2d(idx.T).T if self.k == 1 else idx
            gap = np.maximum(np.abs(z[:, None, :] - self.out[idx]) - g.h / 2, 0.0)
            d = np.minimum(d, np.sqrt((gap**2).sum(-1)).min(-1))
        return np.where(self.interior(z), d, 0.0)

    def interior(self, z: np.ndarray) -> np.ndarray:
        """Points off every closed cell outside V (probe the four diagonal neighbours)."""
        g = self.grid
        e = 1e-9 * g.h
        ok = np.ones(len(z), bool)
        for dx in (-e, e):
            for dy in (-e, e):
                i, j = g.cell_index(z + np.array([dx, dy]))
                ok &= (i >= 0) & self.V[np.maximum(i, 0), np.maximum(j, 0)]
        return ok


def _chain_polyline(x: np.ndarray, cover: WhitneyCover, dist, mu: float, h: float) -> list[np.ndarray]:
    """Vertical chain to the horizontal axis, then horizontal chain to 0.

    Whitney squares of U do not see the side and bottom walls of U', so each
    midpoint is first pulled inside U' by the square's half width. Waypoints
    are taken greedily: a candidate is used only when the straight piece from
    the last waypoint stays in V. A midpoint that fails (it sits in a shadow
    strip or behind one) is replaced by a point beside the chain segment,
    stepped away from the square, and then by the segment point itself.
    """
    c, s = cover.centers, cover.half

    def reachable(a, b):
        k = max(int(np.ceil(np.linalg.norm(b - a) / (0.25 * h))), 1)
        z = a + np.linspace(0.0, 1.0, k + 1)[:, None] * (b - a)
        return bool(dist.interior(z).all())

    pts = [x]

    def visit(k, seg_point, axis):
        q = np.array([np.clip(c[k, 0], -mu + s[k], mu - s[k]), max(c[k, 1], -mu + s[k])])
        off = 1 - axis
        sign = np.sign(seg_point[off] - c[k, off]) or 1.0
        cands = [q]
        for m in (1.0, 2.0):
            r = seg_point.copy()
            r[off] += sign * m * s[k]
            cands.append(r)
        cands.append(seg_point)
        for r in cands:
            if reachable(pts[-1], r):
                pts.append(r)
                return

    lo, hi = min(x[1], 0.0), max(x[1], 0.0)
    hit = (np.abs(c[:, 0] - x[0]) <= s) & (c[:, 1] + s >= lo) & (c[:, 1] - s <= hi)
    for k in np.nonzero(hit)[0][np.argsort(np.abs(c[hit, 1] - x[1]), kind="stable")]:
        visit(k, np.array([x[0], np.clip(c[k, 1], lo, hi)]), 1)
    lo, hi = min(x[0], 0.0), max(x[0], 0.0)
    hit = (np.abs(c[:, 1]) <= s) & (c[:, 0] + s >= lo) & (c[:, 0] - s <= hi)
    for k in np.nonzero(hit)[0][np.argsort(np.abs(c[hit, 0] - x[0]), kind="stable")]:
        visit(k, np.array([np.clip(c[k, 0], lo, hi), 0.0]), 0)
    corner = np.array([x[0], 0.0])
    if not reachable(pts[-1], np.zeros(2)) and reachable(pts[-1], corner):
        pts.append(corner)
    pts.append(np.zeros(2))
    return pts


def _sample_polyline(pts: list[np.ndarray], h: float) -> tuple[np.ndarray, np.ndarray]:
    """Points along the polyline at arclengths dense near the start, geometric later."""
    P = np.array(pts)
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-14])
    P = P[keep]
    seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    L = cum[-1]
    if L == 0:
        return P[:1], np.zeros(1)
    dense = np.arange(0.0, min(8 * h, L), h / 4)
    geo = 8 * h * 1.05 ** np.arange(1, 200)
    t = np.unique(np.concatenate([dense, geo[geo < L], cum, [L]]))
    k = np.clip(np.searchsorted(cum, t, side="right") - 1, 0, len(seg) - 1)
    frac = np.where(seg[k] > 0, (t - cum[k]) / np.where(seg[k] > 0, seg[k], 1), 0.0)
    z = P[k] + frac[:, None] * (P[k + 1] - P[k])
    return z, t


def john_verify(V: RegionMask, cover: WhitneyCover | None = None, P: RegionMask | None = None,
                random_count: int = 200, band: float = 2.0, seed: int = 0,
                mode: str = "chain", max_samples: int | None = None,
                mu: float | None = None) -> JohnCertificate:
    """Measure sup_t t / dist(gamma(t), boundary of V) along curves from sampled x to 0.

    ``mode='chain'`` routes through Whitney square midpoints (vertical chain to
    the horizontal axis, then horizontal chain); ``mode='straight'`` uses the
    segment from x to 0. Samples: every cell of V within ``band`` cells of its
    boundary plus ``random_count`` random cells. ``mu`` is the half width
    of U' (read off V when omitted).
    """
    g = V.grid
    h = g.h
    i0, j0 = g.cell_index(np.zeros((1, 2)))
    if i0[0] < 0 or not V.cells[i0[0], j0[0]]:
        raise DomainError("V must contain the center 0")
    dist = _BoundaryDistance(V)
    padded = np.pad(V.cells, 1, constant_values=False)
    edt = distance_transform_edt(padded)[1:-1, 1:-1]
    near = V.cells & (edt <= band + 0.5)
    rng = np.random.default_rng(seed)
    vi = np.flatnonzero(V.cells)
    extra = rng.choice(vi, size=min(random_count, vi.size), replace=False)
    idx = np.union1d(np.flatnonzero(near), extra)
    if max_samples is not None and idx.size > max_samples:
        idx = np.sort(rng.choice(idx, size=max_samples, replace=False))
    xs = g.centers.reshape(-1, 2)[idx]
    Pc = P.cells if P is not None else np.zeros((g.n, g.n), bool)
    if mu is None:
        mu = float(np.abs(g.centers[V.cells][:, 0]).max() + h / 2)

    curves, owners, ts = [], [], []
    for k, x in enumerate(xs):
        if mode == "straight":
            z, t = _sample_polyline([x, np.zeros(2)], h)
        else:
            z, t = _sample_polyline(_chain_polyline(x, cover, dist, mu, h), h)
        curves.append(z); ts.append(t); owners.append(np.full(len(t), k))
    Z = np.concatenate(curves)
    T = np.concatenate(ts)
    O = np.concatenate(owners)
    D = dist(Z)
    ci, cj = g.cell_index(Z)
    inP = (ci >= 0) & Pc[np.maximum(ci, 0), np.maximum(cj, 0)]
    ratio = np.where(T == 0, 0.0, T / np.where(D > 0, D, 1.0))
    ratio[(D <= 0) & (T > 0)] = np.inf
    per = np.zeros(len(xs))
    np.maximum.at(per, O, ratio)
    bad_pts = np.unique(O[(D <= 0)])
    entered = np.unique(O[inP])
    violations = [{"x": xs[k].tolist(), "reason": "curve leaves V"} for k in bad_pts]
    return JohnCertificate(float(per.max()) if len(per) else 0.0, xs, per, violations,
                           int(entered.size), mode)


# -- Whitney partition of unity and the blended field -----------------------------


@dataclass
class BlendTerms:
    """Blend of good-square motions at points, with the pieces of its gradient."""

    value: np.ndarray          # (m, 2)
    grad: np.ndarray           # (m, 2, 2) analytic gradient of the blend
    phi_sum: np.ndarray        # (m,) sum of good weights
    grad_phi_sum: np.ndarray   # (m, 2) sum of good weight gradients
    a_grad_phi: np.ndarray     # (m, 2, 2) sum of a_Q(x) (x) grad phi_Q
    phi_A: np.ndarray          # (m, 2, 2) sum of phi_Q A_Q
    max_grad_phi_d: float      # max |grad phi_Q| * d(Q)


def blend(cover: WhitneyCover, good: np.ndarray, motions: dict, points: np.ndarray,
          width_factor: float = 0.125) -> BlendTerms:
    """phi_Q = chi_Q / sum of chi over all squares, then sum_good phi_Q a_Q.

    chi_Q is a tensor smoothstep equal to 1 on Q and 0 outside (1 + w) Q, so
    its support stays inside Q''. Bad squares take part in the normalization,
    which makes the good weights sum to 1 wherever no bad bump reaches.
    """
    x = np.asarray(points, float).reshape(-1, 2)
    m = len(x)
    tree = cKDTree(x)
    goodset = np.zeros(len(cover), bool)
    goodset[good] = True
    S = np.zeros(m)
    gS = np.zeros((m, 2))
    num = np.zeros((m, 2))
    dnum = np.zeros((m, 2, 2))
    chi_g = np.zeros(m)
    gchi_g = np.zeros((m, 2))
    achi = np.zeros((m, 2, 2))
    chiA = np.zeros((m, 2, 2))
    entries = []
    for k in range(len(cover)):
        s = cover.half[k]
        w = width_factor * s
        idx = np.asarray(tree.query_ball_point(cover.centers[k], s + w, p=np.inf), int)
        if idx.size == 0:
            continue
        d = x[idx] - cover.centers[k]
        ad = np.abs(d)
        g1, dg1 = _ramp((ad[:, 0] - s) / w)
        g2, dg2 = _ramp((ad[:, 1] - s) / w)
        val = g1 * g2
        grad = np.stack([dg1 * np.sign(d[:, 0]) * g2, g1 * dg2 * np.sign(d[:, 1])], -1) / w
        S[idx] += val
        gS[idx] += grad
        if goodset[k]:
            a = motions[k]
            av = a(x[idx])
            num[idx] += val[:, None] * av
            dnum[idx] += av[:, :, None] * grad[:, None, :] + val[:, None, None] * a.A
            chi_g[idx] += val
            gchi_g[idx] += grad
            entries.append((k, idx, val, grad, av))
    if (S <= 0).any():
        raise DomainError("blend points outside every square support")
    value = num / S[:, None]
    grad_u = dnum / S[:, None, None] - num[:, :, None] * gS[:, None, :] / (S**2)[:, None, None]
    phi_sum = chi_g / S
    gphi_sum = gchi_g / S[:, None] - chi_g[:, None] * gS / (S**2)[:, None]
    max_gd = 0.0
    for k, idx, val, grad, av in entries:
        a = motions[k]
        gphi = grad / S[idx, None] - val[:, None] * gS[idx] / (S[idx] ** 2)[:, None]
        phi = val / S[idx]
        achi[idx] += av[:, :, None] * gphi[:, None, :]
        chiA[idx] += phi[:, None, None] * a.A
        max_gd = max(max_gd, float(np.linalg.norm(gphi, axis=1).max()) * cover.diameters[k])
    return BlendTerms(value, grad_u, phi_sum, gphi_sum, achi, chiA, max_gd)


def derivative_identity_error(terms: BlendTerms, f: np.ndarray | None = None) -> float:
    """Relative gap between the analytic gradient and sum (a_Q - f) (x) grad phi_Q + phi_Q A_Q."""
    rhs = terms.a_grad_phi + terms.phi_A
    if f is not None:
        rhs = rhs - np.asarray(f)[:, :, None] * terms.grad_phi_sum[:, None, :]
    scale = max(float(np.abs(terms.grad).max()), 1e-300)
    return float(np.abs(rhs - terms.grad).max() / scale)


def finite_difference_gradient(cover, good, motions, points, delta, width_factor=0.125) -> np.ndarray:
    x = np.asarray(points, float).reshape(-1, 2)
    out = np.zeros((len(x), 2, 2))
    for b in range(2):
        e = np.zeros(2)
        e[b] = delta
        up = blend(cover, good, motions, x + e, width_factor).value
        dn = blend(cover, good, motions, x - e, width_factor).value
        out[:, :, b] = (up - dn) / (2 * delta)
    return out


# -- the boundary estimate -----------------------------------------------------------


@dataclass
class BoundaryConfig:
    c_hat: float = 1.0 / 32.0
    pou_width: float = 0.125
    john_random: int = 200
    john_max_samples: int | None = None
    verify_john: bool = True
    seed: int = 0
    local: LocalConfig = dc_field(default_factory=LocalConfig)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["local"] = self.local.to_dict()
        return d


def _rigid_norm(diff: RigidMotion, pts: np.ndarray) -> np.ndarray:
    """|diff(x)| without the generic evaluation overhead (hot loop)."""
    w, (b0, b1) = diff.omega, diff.b
    return np.hypot(b0 - w * pts[..., 1], b1 + w * pts[..., 0])


def _box_lp(diff: RigidMotion, grid: Grid, center, half, p, exclude=None) -> float:
    si, sj = box_cells(grid, center, half)
    pts = grid.centers[si, sj]
    v = _rigid_norm(diff, pts if exclude is None else pts[~exclude[si, sj]])
    return float((grid.h**2 * (v**p).sum()) ** (1.0 / p))


def _square_motion(field: DisplacementField, values: np.ndarray, cover: WhitneyCover, k: int,
                   halo_jump: float, p: float, q: float, cfg: LocalConfig, E: np.ndarray):
    """Rigid motion of a good square; its exceptional cells are or-ed into E."""
    g = field.grid
    s = cover.half[k]
    si, sj = cover.cell_slices(k, 1.5)
    cells = cover.U.cells[si, sj]
    pts = g.centers[si, sj][cells]
    if halo_jump == 0:
        return fit_rigid(pts, values[si, sj][cells]), "clean"
    m = int(round(3 * s / g.h))
    i0, j0 = si.start, sj.start
    if abs(3 * s / g.h - m) > 1e-9 or si.stop - si.start != m or sj.stop - sj.start != m:
        # square too small for a sub-grid: give up its halo
        E[si, sj] |= cells
        return fit_rigid(pts, values[si, sj][cells]), "halo"
    rep = local_estimate(field.restrict(i0, j0, m), p, q, cfg)
    E[i0 : i0 + m, j0 : j0 + m] |= rep.exceptional.cells
    return rep.rigid, "fallback" if rep.flags["fallback"] else "local"


def boundary_estimate(field: DisplacementField, domain: LipschitzGraphDomain, p: float = 1.5,
                      q: float = 2.0, config: BoundaryConfig | None = None,
                      cover: WhitneyCover | None = None) -> KornReport:
    cfg = config or BoundaryConfig()
    if not (1.0 <= p < 2.0):
        raise ParameterError(f"p must lie in [1, 2), got {p}")
    if q < 1.0:
        raise ParameterError(f"q must be >= 1, got {q}")
    g = field.grid
    mu = domain.mu
    cover = cover or whitney_cover(domain, g)
    U = cover.U
    Ui = domain.U_inner(g)
    elastic = lp_norm(strain(field), U, 2)
    p_int = internal_exponent(p, q)
    tol = 1e-10 * max(field.scale, 1e-300)
    shadow = boundary_bad_squares(field, domain, cover, cfg.c_hat)
    flags = {"fallback": shadow.fallback, "reason": shadow.reason, "john_certified": None,
             "ball_ok": True, "partition_ok": True}
    diag: dict = {"whitney": cover.checks, "n_bad": int(len(shadow.bad)),
                  "shadow_perimeter_ratio": shadow.perimeter_ratio}
    H = shadow.jump_length
    if shadow.fallback:
        return KornReport(RigidMotion(), U, mu, 0.0, 0.0, elastic, H, 0.0, 0.0, p, q, p_int,
                          flags, 0.0, diag)
    V = shadow.V
    if cfg.verify_john:
        cert = john_verify(V, cover, shadow.P, cfg.john_random, seed=cfg.seed,
                           max_samples=cfg.john_max_samples, mu=mu)
        diag["john"] = cert.summary()
        flags["john_certified"] = bool(cert.certified)
        if not cert.certified:
            raise JohnViolation(cert)

    # per-square motions on good squares
    bad = np.zeros(len(cover), bool)
    bad[shadow.bad] = True
    good = np.nonzero(~bad)[0]
    motions: dict = {}
    E = np.zeros((g.n, g.n), bool)
    kinds: dict = {}
    values = field.cell_values()
    for k in good:
        a, kind = _square_motion(field, values, cover, k, shadow.jump_in_halo[k], p, q, cfg.local, E)
        motions[k] = a
        kinds[kind] = kinds.get(kind, 0) + 1
    diag["square_kinds"] = kinds

    # neighbour comparability on the shared fit region
    pairs = cover.halo_pairs()
    pairs = pairs[~bad[pairs[:, 0]] & ~bad[pairs[:, 1]]]
    agg = 0.0
    ball_min, lemma_max, ball_fail = np.inf, 0.0, 0
    c = g.centers
    diam = cover.diameters
    # overlap boxes of the fit squares for all pairs at once
    ca_all, cb_all = cover.centers[pairs[:, 0]], cover.centers[pairs[:, 1]]
    ha_all = 1.25 * cover.half[pairs[:, 0]][:, None]
    hb_all = 1.25 * cover.half[pairs[:, 1]][:, None]
    lo_all = np.maximum(ca_all - ha_all, cb_all - hb_all)
    hi_all = np.minimum(ca_all + ha_all, cb_all + hb_all)
    r_all = 0.5 * (hi_all - lo_all).min(axis=1)
    mid_all = 0.5 * (lo_all + hi_all)
    for n_pair, (a_i, b_i) in enumerate(pairs):
        ca = cover.centers[a_i]
        r = float(r_all[n_pair])
        dQ = min(diam[a_i], diam[b_i])
        ball_min = min(ball_min, r / dQ)
        mid = mid_all[n_pair]
        si, sj = box_cells(g, mid, r)
        cc = c[si, sj]
        inB = ((cc - mid) ** 2).sum(-1) < r * r
        if not inB.any():
            # ball below cell size: the cell holding its center stands in
            inB = np.all(np.abs(cc - mid) <= g.h / 2, axis=-1)
        nB = int(inB.sum())
        nE = int((E[si, sj] & inB).sum())
        if nB == 0 or nE > nB / 2:
            ball_fail += 1
            continue
        diff = motions[a_i] - motions[b_i]
        full = _box_lp(diff, g, ca, 1.5 * cover.half[a_i], p)
        agg += full**p / diam[a_i] ** p
        vals = _rigid_norm(diff, cc[inB & ~E[si, sj]])
        part = float((g.h**2 * (vals**p).sum()) ** (1.0 / p))
        if part > 0:
            lemma_max = max(lemma_max, full / part)
    flags["ball_ok"] = ball_fail == 0
    diag["neighbors"] = {
        "pairs": int(len(pairs)), "ball_radius_over_d": float(ball_min) if len(pairs) else None,
        "ball_fail": ball_fail, "lemma_ratio_max": lemma_max,
        "aggregate": agg / (mu ** (2 - p) * elastic**p) if elastic > tol * mu else 0.0,
    }

    # blended field on V and the global motion
    pts = c[V.cells]
    terms = blend(cover, good, motions, pts, cfg.pou_width)
    part_err = float(np.abs(terms.phi_sum - 1.0).max()) if len(pts) else 0.0
    flags["partition_ok"] = part_err <= 1e-12
    diag["partition_error"] = part_err
    diag["grad_phi_times_d"] = terms.max_grad_phi_d
    blend_grad = terms.grad
    sym = 0.5 * (blend_grad + np.swapaxes(blend_grad, 1, 2))
    diag["blend_strain_p"] = float((g.h**2 * (np.sqrt((sym**2).sum((1, 2))) ** p_int).sum()) ** (1 / p_int))
    a = fit_rigid(pts, terms.value) if len(pts) else RigidMotion()
    Emask = RegionMask(g, E & U.cells)
    F = Emask | shadow.P
    good_region = Ui - F
    r_u, r_g, excluded = residuals(field, a, good_region, p, q)
    e_tol = tol * mu
    c_u = normalized_constant(r_u, mu ** (2.0 / q), elastic, tol * good_region.area ** (1 / q), e_tol)
    c_g = normalized_constant(r_g, mu ** (2.0 / p - 1.0), elastic, tol / g.h * good_region.area ** (1 / p), e_tol)
    diag["area_P"] = shadow.P.area
    diag["area_E_squares"] = Emask.area
    return KornReport(a, F, mu, r_u, r_g, elastic, H, c_u, c_g, p, q, p_int, flags, excluded, diag)
