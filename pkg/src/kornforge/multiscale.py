"""Bad-square classification across dyadic scales and coarse-to-fine healing.

Squares at scale s have half width s and centers ``c - mu + s*(2a+1)`` for
integer a, so every level tiles the grid square exactly and finer levels
nest inside coarser ones. The enlarged squares use factors 5/4 (fit and
blending support) and 3/2 (exceptional set).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import DisplacementField, Grid, RegionMask, lp_norm, strain
from .modification import RectangleSet
from .rigid import RigidMotion, fit_rigid

FIT_FACTOR = 1.25
HALO_FACTOR = 1.5


def box_cells(grid: Grid, center, half) -> tuple[slice, slice]:
    """Cells whose interior meets the open box ``center +- half`` (clipped)."""
    # scalar math: this sits in the inner loop of every per-square pass
    n, h, mu = grid.n, grid.h, grid.mu
    out = []
    for c0, g0 in zip((float(center[0]), float(center[1])), grid.center):
        lo = (c0 - half - (g0 - mu)) / h
        hi = (c0 + half - (g0 - mu)) / h
        out.append(slice(min(max(math.floor(lo + 1e-9), 0), n), min(max(math.ceil(hi - 1e-9), 0), n)))
    return out[0], out[1]


def box_mask(grid: Grid, center, half) -> np.ndarray:
    m = np.zeros((grid.n, grid.n), bool)
    si, sj = box_cells(grid, center, half)
    m[si, sj] = True
    return m


@dataclass(frozen=True)
class SquareHierarchy:
    grid: Grid
    theta: float = 0.25
    min_ratio: int = 1  # finest half width in cells

    def __post_init__(self):
        k = -np.log2(self.theta)
        if self.theta >= 1 or abs(k - round(k)) > 1e-12:
            raise ValueError(f"theta must be 2^-k with k >= 1, got {self.theta}")

    @property
    def levels(self) -> list[tuple[int, float]]:
        """(i, s_i) for i >= 1 down to the finest resolvable scale."""
        out = []
        g = self.grid
        i = 1
        while True:
            s = g.mu * self.theta**i
            if s < self.min_ratio * g.h * (1 - 1e-12):
                break
            out.append((i, s))
            i += 1
        return out

    def count(self, s: float) -> int:
        return int(round(self.grid.mu / s))

    def centers(self, s: float) -> np.ndarray:
        m = self.count(s)
        off = self.grid.lower[:, None] + s * (2 * np.arange(m) + 1)
        X, Y = np.meshgrid(off[0], off[1], indexing="ij")
        return np.stack([X, Y], axis=-1)


# -- rectangle-boundary measure in open boxes -----------------------------------


class BoundaryMeasure:
    """H1 of a set of lattice edges inside open boxes, via quarter-edge sums.

    Box edges used by the hierarchies sit on multiples of h/4, so each quarter
    edge is either fully inside an open box or misses it. Edge weights are
    multiplicities (a rectangle side shared by two rectangles counts twice).
    """

    SUB = 4

    def __init__(self, rects: RectangleSet | None = None, *, grid: Grid | None = None,
                 horiz_nodes: np.ndarray | None = None, vert_nodes: np.ndarray | None = None):
        g = rects.grid if rects is not None else grid
        n, k = g.n, self.SUB
        self.grid = g
        if horiz_nodes is None:
            horiz_nodes = np.zeros((n, n + 1))  # [cell column, node row]
            vert_nodes = np.zeros((n + 1, n))   # [node column, cell row]
            for r in rects.rects:
                horiz_nodes[r.i0:r.i1, r.j0] += 1
                horiz_nodes[r.i0:r.i1, r.j1] += 1
                vert_nodes[r.i0, r.j0:r.j1] += 1
                vert_nodes[r.i1, r.j0:r.j1] += 1
        self.ch = _cumsum2(np.repeat(np.asarray(horiz_nodes, float), k, axis=0))
        self.cv = _cumsum2(np.repeat(np.asarray(vert_nodes, float), k, axis=1))

    @classmethod
    def from_edges(cls, grid: Grid, vert: np.ndarray, horiz: np.ndarray) -> "BoundaryMeasure":
        """Interior edge masks (n-1, n) and (n, n-1) as used by the field."""
        n = grid.n
        hn = np.zeros((n, n + 1))
        vn = np.zeros((n + 1, n))
        hn[:, 1:n] = horiz
        vn[1:n, :] = vert
        return cls(grid=grid, horiz_nodes=hn, vert_nodes=vn)

    def in_boxes(self, centers: np.ndarray, half: float) -> np.ndarray:
        g, k = self.grid, self.SUB
        q = g.h / k
        lo = (centers - half - g.lower) / q
        hi = (centers + half - g.lower) / q
        X0 = np.round(lo[..., 0]).astype(int); X1 = np.round(hi[..., 0]).astype(int)
        Y0 = np.round(lo[..., 1]).astype(int); Y1 = np.round(hi[..., 1]).astype(int)
        if (np.abs(lo - np.round(lo)).max() > 1e-6) or (np.abs(hi - np.round(hi)).max() > 1e-6):
            raise ValueError("box edges must lie on the quarter-cell lattice")
        # horizontal quarter edges: row index kk at y = kk*k quarters, strictly inside
        rlo = np.floor(Y0 / k).astype(int) + 1
        rhi = np.ceil(Y1 / k).astype(int) - 1
        hsum = _box_sum(self.ch, X0, X1 - 1, rlo, rhi)
        clo = np.floor(X0 / k).astype(int) + 1
        chi = np.ceil(X1 / k).astype(int) - 1
        vsum = _box_sum(self.cv, clo, chi, Y0, Y1 - 1)
        return q * (hsum + vsum)


def _cumsum2(a: np.ndarray) -> np.ndarray:
    c = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    c[1:, 1:] = a.cumsum(0).cumsum(1)
    return c


def _box_sum(c: np.ndarray, r0, r1, c0, c1) -> np.ndarray:
    """Sum of a[r0..r1, c0..c1] (inclusive, clipped) from its cumulative table."""
    R, C = c.shape[0] - 1, c.shape[1] - 1
    r0 = np.clip(r0, 0, R); r1 = np.clip(r1 + 1, 0, R)
    c0 = np.clip(c0, 0, C); c1 = np.clip(c1 + 1, 0, C)
    r1 = np.maximum(r1, r0); c1 = np.maximum(c1, c0)
    return c[r1, c1] - c[r0, c1] - c[r1, c0] + c[r0, c0]


# -- classification ------------------------------------------------------------------


@dataclass
class Level:
    i: int
    s: float
    A: np.ndarray          # (k, 2) square indices in the family A_i
    B: np.ndarray          # (k, 2) square indices in the family B_i
    centers: np.ndarray    # centers of B squares, (k, 2)
    B_cells: np.ndarray    # cell mask of B_i
    Bp_cells: np.ndarray   # cell mask of B'_i
    A_cells: np.ndarray    # cell mask of A_i


@dataclass
class BadSquareLedger:
    hierarchy: SquareHierarchy
    rects: RectangleSet
    shrunk_mu: float       # half width of the domain the modification lives on
    target_mu: float       # half width of the inner square
    levels: list[Level]
    feasible: bool = True
    reason: str = ""

    @property
    def grid(self) -> Grid:
        return self.hierarchy.grid

    @property
    def terminal_index(self) -> int | None:
        idx = [lv.i for lv in self.levels if len(lv.B)]
        return max(idx) if idx else None

    def exceptional(self) -> RegionMask:
        n = self.grid.n
        m = np.zeros((n, n), bool)
        for lv in self.levels:
            m |= lv.Bp_cells
        return RegionMask(self.grid, m)

    def B_union(self) -> np.ndarray:
        n = self.grid.n
        m = np.zeros((n, n), bool)
        for lv in self.levels:
            m |= lv.B_cells
        return m

    def level(self, i: int) -> Level:
        for lv in self.levels:
            if lv.i == i:
                return lv
        raise KeyError(i)

    def summary(self) -> dict:
        return {
            "feasible": self.feasible,
            "reason": self.reason,
            "terminal_index": self.terminal_index,
            "levels": [
                {"i": lv.i, "s": lv.s, "n_A": int(len(lv.A)), "n_B": int(len(lv.B))}
                for lv in self.levels
            ],
        }


def gate_holds(rects: RectangleSet, theta: float, shrunk_mu: float, target_mu: float) -> bool:
    if target_mu <= 0 or target_mu > shrunk_mu:
        return False
    return rects.total_diameter <= theta / 24.0 * (shrunk_mu - target_mu) * (1 + 1e-12)


def classify(
    rects: RectangleSet,
    hierarchy: SquareHierarchy,
    shrunk_mu: float,
    target_mu: float,
    enforce_gate: bool = True,
) -> BadSquareLedger:
    g = hierarchy.grid
    theta = hierarchy.theta
    ledger = BadSquareLedger(hierarchy, rects, shrunk_mu, target_mu, [])
    if target_mu <= 0:
        ledger.feasible, ledger.reason = False, "inner square is empty"
        return ledger
    if enforce_gate and not gate_holds(rects, theta, shrunk_mu, target_mu):
        ledger.feasible, ledger.reason = False, "rectangle diameters exceed the feasibility gate"
        return ledger
    if not rects.rects:
        return ledger
    meas = BoundaryMeasure(rects)
    n = g.n
    c = np.array(g.center)
    A_acc = np.zeros((n, n), bool)
    for i, s in hierarchy.levels:
        ctr = hierarchy.centers(s)
        m = len(ctr)
        k = int(round(2 * s / g.h))
        h1 = meas.in_boxes(ctr, FIT_FACTOR * s)
        off = np.abs(ctr - c).max(axis=-1)
        inside = off + FIT_FACTOR * s <= shrunk_mu * (1 + 1e-12)
        inA = inside & (h1 >= theta * s / 8.0 * (1 - 1e-12))
        d = np.abs(ctr - c)
        meets = (d[..., 0] - s < target_mu) & (d[..., 1] - s < target_mu)
        prior = A_acc.reshape(m, k, m, k).any(axis=(1, 3))
        inB = inA & meets & ~prior
        A_cells = np.repeat(np.repeat(inA, k, 0), k, 1)
        B_cells = np.repeat(np.repeat(inB, k, 0), k, 1)
        Bp = np.zeros((n, n), bool)
        for p in ctr[inB]:
            si, sj = box_cells(g, p, HALO_FACTOR * s)
            Bp[si, sj] = True
        ledger.levels.append(Level(i, s, np.argwhere(inA), np.argwhere(inB), ctr[inB],
                                   B_cells, Bp, A_cells))
        A_acc |= A_cells
    return ledger


def classify_bruteforce(rects: RectangleSet, hierarchy: SquareHierarchy,
                        shrunk_mu: float, target_mu: float) -> dict:
    """Square-by-square evaluation of the set definitions (slow; for testing)."""
    g = hierarchy.grid
    theta = hierarchy.theta
    c = np.array(g.center)
    out = {}
    A_prev: list[tuple[np.ndarray, float]] = []
    for i, s in hierarchy.levels:
        ctr = hierarchy.centers(s)
        A, B = set(), set()
        for a in range(len(ctr)):
            for b in range(len(ctr)):
                p = ctr[a, b]
                r2 = FIT_FACTOR * s
                if np.abs(p - c).max() + r2 > shrunk_mu * (1 + 1e-12):
                    continue
                total = 0.0
                for r in rects.rects:
                    (x0, x1), (y0, y1) = r.bounds(g)
                    for y in (y0, y1):
                        if p[1] - r2 < y < p[1] + r2:
                            total += max(0.0, min(x1, p[0] + r2) - max(x0, p[0] - r2))
                    for x in (x0, x1):
                        if p[0] - r2 < x < p[0] + r2:
                            total += max(0.0, min(y1, p[1] + r2) - max(y0, p[1] - r2))
                if total < theta * s / 8 * (1 - 1e-12):
                    continue
                A.add((a, b))
                d = np.abs(p - c)
                if not (d[0] - s < target_mu and d[1] - s < target_mu):
                    continue
                hit = any(
                    np.all(np.abs(p - q) < s + t) for q, t in A_prev
                )
                if not hit:
                    B.add((a, b))
        for a, b in A:
            A_prev.append((ctr[a, b], s))
        out[i] = (A, B)
    return out


# -- structure properties ----------------------------------------------------------------


@dataclass
class StructureReport:
    small_sum: bool          # (i)
    empty_beyond: bool       # (ii)
    coverage: bool           # (iii)
    perimeter_const: float   # (iv) measured C
    area_const: float        # (v) measured C
    details: dict = dc_field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.small_sum and self.empty_beyond and self.coverage and np.isfinite(
            self.perimeter_const) and np.isfinite(self.area_const)


def _rect_boxes(rects: RectangleSet) -> np.ndarray:
    g = rects.grid
    return np.array([[g.xs[r.i0], g.xs[r.i1], g.ys[r.j0], g.ys[r.j1]] for r in rects.rects])


def structure_check(ledger: BadSquareLedger) -> StructureReport:
    rects = ledger.rects
    g = ledger.grid
    theta = ledger.hierarchy.theta
    if not rects.rects or not ledger.feasible:
        return StructureReport(True, True, True, 0.0, 0.0)
    boxes = _rect_boxes(rects)
    diam = rects.diameters
    total = diam.sum()
    worst_i = 0.0
    ok_i = True
    for lv in ledger.levels:
        r2 = FIT_FACTOR * lv.s
        for p in lv.centers:
            hit = (
                (boxes[:, 0] < p[0] + r2) & (boxes[:, 1] > p[0] - r2)
                & (boxes[:, 2] < p[1] + r2) & (boxes[:, 3] > p[1] - r2)
            )
            ssum = diam[hit].sum()
            worst_i = max(worst_i, ssum / lv.s)
            if ssum > lv.s * (1 + 1e-12):
                ok_i = False
    # (ii): no bad squares once s_i <= theta * min diameter
    dmin = diam.min()
    ok_ii = all(len(lv.B) == 0 for lv in ledger.levels if lv.s <= theta * dmin * (1 + 1e-12))
    # (iii): rectangle boundary inside the inner square lies in the closed B squares
    ok_iii, misses = _coverage(ledger)
    Bp = ledger.exceptional()
    perim_c = Bp.perimeter() * theta / total
    area_c = max(
        (RegionMask(g, lv.Bp_cells).area * theta / (lv.s * total) for lv in ledger.levels),
        default=0.0,
    )
    return StructureReport(ok_i, ok_ii, ok_iii, float(perim_c), float(area_c),
                           {"max_sum_over_s": float(worst_i), "uncovered_pieces": misses})


def _coverage(ledger: BadSquareLedger) -> tuple[bool, int]:
    """Check every half-edge of the rectangle boundaries meeting the inner square."""
    g = ledger.grid
    c = np.array(g.center)
    mub = ledger.target_mu
    pts, axis = [], []
    for r in ledger.rects.rects:
        (x0, x1), (y0, y1) = r.bounds(g)
        nx = 2 * (r.i1 - r.i0)
        ny = 2 * (r.j1 - r.j0)
        tx = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
        ty = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
        for y in (y0, y1):
            pts.append(np.stack([tx, np.full(nx, y)], 1))
            axis.append(np.zeros(nx, int))
        for x in (x0, x1):
            pts.append(np.stack([np.full(ny, x), ty], 1))
            axis.append(np.ones(ny, int))
    pts = np.concatenate(pts)
    axis = np.concatenate(axis)
    # a half edge of length h/2 meets the open inner square iff its fixed
    # coordinate is inside and its midpoint is within mu_bar + h/4 along it
    d = np.abs(pts - c)
    along = np.where(axis == 0, d[:, 0], d[:, 1])
    across = np.where(axis == 0, d[:, 1], d[:, 0])
    near = (across < mub) & (along < mub + g.h / 4)
    pts = pts[near]
    covered = np.zeros(len(pts), bool)
    for lv in ledger.levels:
        for p in lv.centers:
            covered |= np.all(np.abs(pts - p) <= lv.s * (1 + 1e-12), axis=1)
    misses = int((~covered).sum())
    return misses == 0, misses


# -- rigid fits on enlarged squares ---------------------------------------------------------


def fit_square_motions(field: DisplacementField, ledger: BadSquareLedger) -> dict:
    """a_Q by L2 projection over the cells meeting each enlarged square."""
    g = field.grid
    vals = field.cell_values()
    motions = {}
    for lv in ledger.levels:
        for idx, p in zip(map(tuple, lv.B), lv.centers):
            si, sj = box_cells(g, p, FIT_FACTOR * lv.s)
            motions[(lv.i, idx)] = fit_rigid(g.centers[si, sj], vals[si, sj])
    return motions


def square_sums(field: DisplacementField, ledger: BadSquareLedger, motions: dict) -> dict:
    """Per level, sum over B squares of ||u - a_Q||^2 on the enlarged square."""
    g = field.grid
    vals = field.cell_values()
    out = {}
    for lv in ledger.levels:
        tot = 0.0
        for idx, p in zip(map(tuple, lv.B), lv.centers):
            si, sj = box_cells(g, p, FIT_FACTOR * lv.s)
            a = motions[(lv.i, idx)]
            diff = vals[si, sj] - a(g.centers[si, sj])
            tot += float((diff**2).sum()) * g.h**2
        out[lv.i] = tot
    return out


# -- partition of unity ---------------------------------------------------------------------


def _ramp(t):
    """1 for t <= 0, 0 for t >= 1, cubic smoothstep in between; with derivative."""
    t = np.clip(t, 0.0, 1.0)
    return 1.0 - t * t * (3.0 - 2.0 * t), -6.0 * t * (1.0 - t)


@dataclass
class PartitionOfUnity:
    """Tensor-product smoothstep weights for one family of same-scale squares."""

    centers: np.ndarray
    s: float
    width_factor: float = 0.125

    @property
    def width(self) -> float:
        return self.width_factor * self.s

    @property
    def support_half(self) -> float:
        return self.s + self.width

    def chi(self, x: np.ndarray, k: int):
        """Raw bump of square k and its gradient at points x (..., 2)."""
        p = self.centers[k]
        d = x - p
        ad = np.abs(d)
        g1, dg1 = _ramp((ad[..., 0] - self.s) / self.width)
        g2, dg2 = _ramp((ad[..., 1] - self.s) / self.width)
        val = g1 * g2
        grad = np.stack([dg1 * np.sign(d[..., 0]) * g2, g1 * dg2 * np.sign(d[..., 1])], -1) / self.width
        return val, grad

    def nearness(self, x: np.ndarray, k: int):
        """Ramp of the sup-norm distance from x to square k, with its gradient."""
        d = x - self.centers[k]
        ad = np.abs(d)
        axis = np.argmax(ad, axis=-1)
        far = np.take_along_axis(ad, axis[..., None], -1)[..., 0]
        g, dg = _ramp((far - self.s) / self.width)
        sgn = np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
        grad = np.zeros(x.shape)
        np.put_along_axis(grad, axis[..., None], (dg * sgn / self.width)[..., None], -1)
        return g, grad

    def evaluate(self, x: np.ndarray, with_grad: bool = False):
        """Weights at points x: (phi0, phis) with phis of shape (K, ...)."""
        x = np.asarray(x, float)
        K = len(self.centers)
        chis = np.zeros((K,) + x.shape[:-1])
        grads = np.zeros((K,) + x.shape)
        near = np.zeros(x.shape[:-1])
        gnear = np.zeros(x.shape)
        for k in range(K):
            chis[k], grads[k] = self.chi(x, k)
            g, gg = self.nearness(x, k)
            up = g > near
            near = np.where(up, g, near)
            gnear = np.where(up[..., None], gg, gnear)
        # background weight: ramp off the union B of the squares in sup-norm distance
        psi0 = 1.0 - near
        S = psi0 + chis.sum(0)
        phis = chis / S
        phi0 = psi0 / S
        if not with_grad:
            return phi0, phis
        gpsi0 = -gnear
        gS = gpsi0 + grads.sum(0)
        gphis = grads / S[..., None] - chis[..., None] * gS / (S**2)[..., None]
        gphi0 = gpsi0 / S[..., None] - psi0[..., None] * gS / (S**2)[..., None]
        return phi0, phis, gphi0, gphis

    def multiplicity(self, x: np.ndarray) -> np.ndarray:
        """How many enlarged fit squares contain each point."""
        x = np.asarray(x, float)
        cnt = np.zeros(x.shape[:-1], int)
        for p in self.centers:
            cnt += np.all(np.abs(x - p) < FIT_FACTOR * self.s, axis=-1)
        return cnt


def build_pou(centers, s: float, width_factor: float = 0.125) -> PartitionOfUnity:
    centers = np.asarray(centers, float).reshape(-1, 2)
    if not (0 < width_factor < FIT_FACTOR - 1):
        raise ValueError("ramp width must stay inside the enlarged square")
    return PartitionOfUnity(centers, s, width_factor)


@dataclass
class PouCheck:
    sum_error: float
    grad_const: float
    max_multiplicity: int


def check_pou(pou: PartitionOfUnity, points: np.ndarray) -> PouCheck:
    phi0, phis, g0, gs = pou.evaluate(points, with_grad=True)
    err = float(np.abs(phi0 + phis.sum(0) - 1.0).max()) if phi0.size else 0.0
    gmax = max(float(np.linalg.norm(g0, axis=-1).max(initial=0.0)),
               float(np.linalg.norm(gs, axis=-1).max(initial=0.0)))
    return PouCheck(err, gmax * pou.s, int(pou.multiplicity(points).max(initial=0)))


# -- healing ------------------------------------------------------------------------------


def heal_step(
    corners: np.ndarray, grid: Grid, level: Level, motions: dict, width_factor: float = 0.125
) -> tuple[np.ndarray, dict]:
    """One blend over the squares of one level; returns new corner values.

    Corners outside every bump support keep their values bit for bit.
    """
    n = grid.n
    s = level.s
    pou = build_pou(level.centers, s, width_factor)
    sum_chi = np.zeros((n, n, 4))
    near = np.zeros((n, n, 4))
    numer = np.zeros((n, n, 4, 2))
    mult = np.zeros((n, n, 4), np.int16)
    grad_max = 0.0
    for k, (idx, p) in enumerate(zip(map(tuple, level.B), level.centers)):
        si, sj = box_cells(grid, p, pou.support_half)
        x = grid.corners[si, sj]
        chi, grad = pou.chi(x, k)
        sum_chi[si, sj] += chi
        near[si, sj] = np.maximum(near[si, sj], pou.nearness(x, k)[0])
        numer[si, sj] += chi[..., None] * motions[(level.i, idx)](x)
        si2, sj2 = box_cells(grid, p, FIT_FACTOR * s)
        mult[si2, sj2] += 1
    touched = sum_chi > 0
    bg = 1.0 - near
    S = bg + sum_chi
    out = np.array(corners)
    old = corners[touched]
    out[touched] = old * (bg[touched] / S[touched])[:, None] + numer[touched] / S[touched][:, None]
    return out, {"max_multiplicity_cells": int(mult.max(initial=0))}


@dataclass
class HealOutcome:
    healed: DisplacementField
    exceptional: RegionMask
    ledger: BadSquareLedger
    motions: dict
    eta_blend: float
    budget: float
    diagnostics: list = dc_field(default_factory=list)
    product_ok: bool = True
    max_product: float = 1.0

    def summary(self) -> dict:
        return {
            "eta_blend": self.eta_blend,
            "budget": self.budget,
            "max_product": self.max_product,
            "product_bound": float(np.exp(1.0 / (1.0 - self.eta_blend))),
            "product_ok": self.product_ok,
            "steps": self.diagnostics,
        }


def heal(
    modified: DisplacementField,
    ledger: BadSquareLedger,
    p: float,
    budget: float,
    width_factor: float = 0.125,
    track: bool = True,
) -> HealOutcome:
    """Blend fitted rigid motions into the field, finest bad level first."""
    if not ledger.feasible:
        raise ValueError(f"cannot heal an infeasible classification: {ledger.reason}")
    theta = ledger.hierarchy.theta
    eta = theta ** (0.5 - p / 4.0)
    g = modified.grid
    motions = fit_square_motions(modified, ledger)
    E = ledger.exceptional()
    I = ledger.terminal_index
    if I is None:
        return HealOutcome(modified, E, ledger, motions, eta, budget)
    levels = {lv.i: lv for lv in ledger.levels}
    inner = RegionMask.square(g, g.center, ledger.target_mu)
    bound = float(np.exp(1.0 / (1.0 - eta)))
    corners = np.array(modified.corners)
    current = modified
    diags = []
    max_prod = 1.0
    ok = True
    mu = g.mu
    for j in range(I):
        lv = levels.get(I - j)
        if track:
            sums = square_sums(current, ledger, motions)
            rows = {}
            for i in range(1, I - j + 1):
                prod_i = float(np.prod([1 + eta ** (I - i - k) for k in range(j + 1)]))
                max_prod = max(max_prod, prod_i)
                ok &= prod_i <= bound
                s_i = mu * theta**i
                denom = s_i**2 * budget**2 * prod_i
                rows[i] = {"sum": sums.get(i, 0.0), "product": prod_i,
                           "ratio": sums.get(i, 0.0) / denom if denom > 0 else 0.0}
            prod_e = float(np.prod([1 + eta ** (I - k) for k in range(j + 1)]))
            max_prod = max(max_prod, prod_e)
            ok &= prod_e <= bound
            ep = lp_norm(strain(current), inner, p) ** p
            denom = mu ** (2 - p) * budget**p * prod_e
            diags.append({"step": j, "level": I - j, "squares": rows, "strain_pp": ep,
                          "strain_product": prod_e, "strain_ratio": ep / denom if denom > 0 else 0.0})
        if lv is not None and len(lv.B):
            corners, info = heal_step(corners, g, lv, motions, width_factor)
            if track:
                diags[-1]["multiplicity"] = info["max_multiplicity_cells"]
            current = modified.with_corners(corners)
    healed = modified.with_corners(corners)
    return HealOutcome(healed, E, ledger, motions, eta, budget, diags, bool(ok), max_prod)
